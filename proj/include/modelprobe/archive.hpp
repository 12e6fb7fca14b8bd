#pragma once

// Model discovery inside app archives (APKs are ZIP containers).

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "modelprobe/digest.hpp"

namespace modelprobe {

struct ZipEntry {
  std::string name;
  std::uint16_t method = 0;  // 0 stored, 8 deflate
  std::uint16_t flags = 0;
  std::uint32_t crc32 = 0;
  std::uint64_t compressed_size = 0;
  std::uint64_t size = 0;
  std::uint64_t local_header_offset = 0;

  bool is_directory() const { return !name.empty() && name.back() == '/'; }
};

/// Read-only view of a ZIP file's central directory.
class ZipArchive {
 public:
  /// Throws NotAnArchive when no valid end-of-central-directory record is found.
  static ZipArchive open(const std::filesystem::path& path);
  static ZipArchive from_bytes(std::vector<std::uint8_t> bytes, std::filesystem::path path = {});

  const std::vector<ZipEntry>& entries() const { return entries_; }
  const std::filesystem::path& path() const { return path_; }

  /// Decompressed contents, CRC-checked. Throws Truncated on damaged data and
  /// InvalidArgument for unsupported compression or encryption.
  std::vector<std::uint8_t> read(const ZipEntry& entry) const;

 private:
  std::filesystem::path path_;
  std::vector<std::uint8_t> bytes_;
  std::vector<ZipEntry> entries_;
};

enum class Detection { ByExtension, ByMagic };
enum class Operability { Executable, ParsedNotExecutable, Invalid };
std::string_view to_string(Detection d);
std::string_view to_string(Operability o);

struct ModelCandidate {
  std::filesystem::path archive_path;
  std::string entry_name;
  Detection detection = Detection::ByExtension;
  std::uint64_t size_bytes = 0;
};

struct ExtractedModel {
  ModelCandidate candidate;
  Digest bytes_digest;
  std::filesystem::path output_path;  // empty when the entry could not be read
  Operability operability = Operability::Invalid;
  std::string detail;  // why a model is not Executable
};

bool has_model_extension(std::string_view entry_name);

/// Entries named *.tflite / *.lite, or whose bytes 4..8 hold the TFLite
/// identifier, in archive order.
std::vector<ModelCandidate> scan_archive(const std::filesystem::path& path);

inline constexpr std::uint64_t kOperabilitySeed = 0;

/// Parse, then one forward pass on uniform random input (uint8/int8 inputs
/// draw integers over the type's range, everything else draws from [0, 1]).
Operability assess_operability(std::span<const std::uint8_t> bytes, std::uint64_t seed = kOperabilitySeed,
                               std::string* detail = nullptr);

/// Writes each distinct model once as `<out_dir>/<digest>.tflite`. Every
/// candidate gets a record, including duplicates and unreadable entries.
std::vector<ExtractedModel> extract_models(const std::vector<ModelCandidate>& candidates,
                                           const std::filesystem::path& out_dir,
                                           std::uint64_t seed = kOperabilitySeed,
                                           std::vector<std::string>* log = nullptr);

/// {"operability_seed": s, "models": [{archive, entry, detection, digest, operability, size_bytes}]}
std::string extraction_manifest_json(const std::vector<ExtractedModel>& models, std::uint64_t seed = kOperabilitySeed);

}  // namespace modelprobe
