#pragma once

// Read-only FlatBuffers access with bounds checking on every dereference.
// Only the subset of the wire format that TFLite files use is covered:
// tables, scalars, strings, vectors of scalars/tables, and union payloads.

#include <cstdint>
#include <cstring>
#include <optional>
#include <span>
#include <string_view>
#include <type_traits>

#include "modelprobe/error.hpp"

namespace modelprobe::fb {

class Buffer {
 public:
  explicit Buffer(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  std::size_t size() const { return bytes_.size(); }
  std::span<const std::uint8_t> bytes() const { return bytes_; }

  template <typename T>
  T read(std::size_t pos) const {
    static_assert(std::is_trivially_copyable_v<T>);
    check(pos, sizeof(T));
    T value;
    std::memcpy(&value, bytes_.data() + pos, sizeof(T));
    return value;  // host is little-endian, as is the wire format
  }

  void check(std::size_t pos, std::size_t len) const {
    if (pos > bytes_.size() || len > bytes_.size() - pos) {
      throw Error(ErrorCode::Truncated, "flatbuffer access out of range");
    }
  }

 private:
  std::span<const std::uint8_t> bytes_;
};

class Table;

/// A vector field: `length` elements starting at `data`.
class Vector {
 public:
  Vector() = default;
  Vector(const Buffer* buf, std::size_t data, std::uint32_t length) : buf_(buf), data_(data), length_(length) {}

  std::uint32_t size() const { return length_; }
  bool empty() const { return length_ == 0; }
  std::size_t data_offset() const { return data_; }

  template <typename T>
  T scalar(std::uint32_t i) const {
    return buf_->read<T>(data_ + std::size_t{i} * sizeof(T));
  }
  Table table(std::uint32_t i) const;
  std::string_view string(std::uint32_t i) const;

  std::span<const std::uint8_t> raw(std::size_t elem_size) const {
    if (length_ == 0) return {};
    buf_->check(data_, std::size_t{length_} * elem_size);
    return buf_->bytes().subspan(data_, std::size_t{length_} * elem_size);
  }

 private:
  const Buffer* buf_ = nullptr;
  std::size_t data_ = 0;
  std::uint32_t length_ = 0;
};

class Table {
 public:
  Table(const Buffer* buf, std::size_t pos) : buf_(buf), pos_(pos) {
    auto soffset = buf_->read<std::int32_t>(pos_);
    auto vt = static_cast<std::int64_t>(pos_) - soffset;
    if (vt < 0) throw Error(ErrorCode::Truncated, "vtable offset out of range");
    vtable_ = static_cast<std::size_t>(vt);
    vtable_size_ = buf_->read<std::uint16_t>(vtable_);
    if (vtable_size_ < 4) throw Error(ErrorCode::Truncated, "malformed vtable");
    buf_->check(vtable_, vtable_size_);
  }

  static Table root(const Buffer& buf) { return Table(&buf, buf.read<std::uint32_t>(0)); }

  bool has(int field) const { return field_offset(field) != 0; }

  template <typename T>
  T scalar(int field, T fallback = T{}) const {
    auto off = field_offset(field);
    return off == 0 ? fallback : buf_->read<T>(pos_ + off);
  }

  std::optional<Table> table(int field) const {
    auto off = field_offset(field);
    if (off == 0) return std::nullopt;
    return Table(buf_, deref(pos_ + off));
  }

  std::optional<std::string_view> string(int field) const {
    auto off = field_offset(field);
    if (off == 0) return std::nullopt;
    return read_string(*buf_, deref(pos_ + off));
  }

  Vector vector(int field) const {
    auto off = field_offset(field);
    if (off == 0) return {};
    auto at = deref(pos_ + off);
    auto len = buf_->read<std::uint32_t>(at);
    return Vector(buf_, at + 4, len);
  }

  static std::string_view read_string(const Buffer& buf, std::size_t at) {
    auto len = buf.read<std::uint32_t>(at);
    buf.check(at + 4, len);
    return {reinterpret_cast<const char*>(buf.bytes().data() + at + 4), len};
  }

 private:
  std::uint16_t field_offset(int field) const {
    auto slot = 4 + 2 * static_cast<std::size_t>(field);
    if (slot + 2 > vtable_size_) return 0;
    return buf_->read<std::uint16_t>(vtable_ + slot);
  }

  std::size_t deref(std::size_t at) const { return at + buf_->read<std::uint32_t>(at); }

  const Buffer* buf_;
  std::size_t pos_;
  std::size_t vtable_ = 0;
  std::uint16_t vtable_size_ = 0;
};

inline Table Vector::table(std::uint32_t i) const {
  auto at = data_ + std::size_t{i} * 4;
  return Table(buf_, at + buf_->read<std::uint32_t>(at));
}

inline std::string_view Vector::string(std::uint32_t i) const {
  auto at = data_ + std::size_t{i} * 4;
  return Table::read_string(*buf_, at + buf_->read<std::uint32_t>(at));
}

}  // namespace modelprobe::fb
