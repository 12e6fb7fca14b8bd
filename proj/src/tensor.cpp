#include "modelprobe/tensor.hpp"

#include <cstring>
#include <sstream>
#include <string>

#include "modelprobe/digest.hpp"
#include "modelprobe/error.hpp"

namespace modelprobe {
namespace {

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint32_t get_u32(std::span<const std::uint8_t> b, std::size_t at) {
  return std::uint32_t{b[at]} | std::uint32_t{b[at + 1]} << 8 | std::uint32_t{b[at + 2]} << 16 |
         std::uint32_t{b[at + 3]} << 24;
}

}  // namespace

std::vector<std::uint8_t> encode_tensor(const TensorF& t) {
  std::vector<std::uint8_t> out(kTensorMagic, kTensorMagic + 4);
  put_u32(out, kTensorFloat32);
  put_u32(out, static_cast<std::uint32_t>(t.shape.size()));
  put_u32(out, 0);
  for (int d : t.shape) put_u32(out, static_cast<std::uint32_t>(d));
  for (Eigen::Index i = 0; i < t.size(); ++i) {
    std::uint32_t bits;
    float v = t.data[i];
    std::memcpy(&bits, &v, 4);
    put_u32(out, bits);
  }
  return out;
}

TensorF decode_tensor(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 16) throw Error(ErrorCode::Truncated, "tensor header truncated");
  if (std::memcmp(bytes.data(), kTensorMagic, 4) != 0) throw Error(ErrorCode::BadMagic, "not a tensor file");
  if (get_u32(bytes, 4) != kTensorFloat32) throw Error(ErrorCode::UnsupportedVersion, "unsupported tensor dtype");
  auto rank = get_u32(bytes, 8);
  if (bytes.size() < 16 + 4 * std::size_t{rank}) throw Error(ErrorCode::Truncated, "tensor dims truncated");
  std::vector<int> shape(rank);
  for (std::uint32_t i = 0; i < rank; ++i) {
    shape[i] = static_cast<std::int32_t>(get_u32(bytes, 16 + 4 * i));
    if (shape[i] < 0) throw Error(ErrorCode::ShapeMismatch, "negative tensor dimension");
  }
  auto count = shape_product(shape);
  auto payload = 16 + 4 * std::size_t{rank};
  if (bytes.size() != payload + 4 * static_cast<std::size_t>(count)) {
    throw Error(ErrorCode::Truncated, "tensor payload size does not match shape");
  }
  TensorF t(shape);
  for (std::int64_t i = 0; i < count; ++i) {
    auto bits = get_u32(bytes, payload + 4 * static_cast<std::size_t>(i));
    std::memcpy(&t.data[i], &bits, 4);
  }
  return t;
}

TensorF read_tensor_file(const std::filesystem::path& path) { return decode_tensor(read_file(path)); }

void write_tensor_file(const std::filesystem::path& path, const TensorF& t) { write_file(path, encode_tensor(t)); }

TensorF parse_tensor_csv(std::string_view text) {
  std::vector<std::vector<float>> rows;
  std::istringstream in{std::string(text)};
  std::string line;
  while (std::getline(in, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::vector<float> row;
    std::istringstream cells(line);
    std::string cell;
    while (std::getline(cells, cell, ',')) {
      try {
        std::size_t used = 0;
        row.push_back(std::stof(cell, &used));
      } catch (const std::exception&) {
        throw Error(ErrorCode::InvalidArgument, "bad CSV number: " + cell);
      }
    }
    if (!rows.empty() && row.size() != rows.front().size()) {
      throw Error(ErrorCode::ShapeMismatch, "ragged CSV rows");
    }
    rows.push_back(std::move(row));
  }
  if (rows.empty()) return TensorF({0});
  std::vector<int> shape = rows.size() == 1 ? std::vector<int>{static_cast<int>(rows[0].size())}
                                            : std::vector<int>{static_cast<int>(rows.size()),
                                                               static_cast<int>(rows[0].size())};
  TensorF t(shape);
  Eigen::Index k = 0;
  for (const auto& r : rows) {
    for (float v : r) t.data[k++] = v;
  }
  return t;
}

TensorF read_tensor_any(const std::filesystem::path& path) {
  auto bytes = read_file(path);
  if (bytes.size() >= 4 && std::memcmp(bytes.data(), kTensorMagic, 4) == 0) return decode_tensor(bytes);
  return parse_tensor_csv(std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()));
}

}  // namespace modelprobe
