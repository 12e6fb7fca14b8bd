#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace modelprobe {

/// SHA-256 content hash.
class Digest {
 public:
  Digest() = default;
  explicit Digest(const std::array<std::uint8_t, 32>& bytes) : bytes_(bytes) {}

  static Digest of(std::span<const std::uint8_t> data);
  static Digest of(std::string_view data);
  static Digest from_hex(std::string_view hex);

  std::string hex() const;
  const std::array<std::uint8_t, 32>& bytes() const { return bytes_; }

  friend bool operator==(const Digest&, const Digest&) = default;
  friend auto operator<=>(const Digest&, const Digest&) = default;

 private:
  std::array<std::uint8_t, 32> bytes_{};
};

/// Incremental SHA-256.
class Hasher {
 public:
  Hasher();
  ~Hasher();
  Hasher(const Hasher&) = delete;
  Hasher& operator=(const Hasher&) = delete;

  Hasher& update(std::span<const std::uint8_t> data);
  Hasher& update(std::string_view data);
  template <typename T>
  Hasher& update_pod(const T& value) {
    return update(std::span(reinterpret_cast<const std::uint8_t*>(&value), sizeof(T)));
  }
  Digest finish();

 private:
  void* ctx_;
};

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> data);
void write_file(const std::filesystem::path& path, std::string_view text);

}  // namespace modelprobe
