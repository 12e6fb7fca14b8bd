#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <filesystem>
#include <numeric>
#include <span>
#include <vector>

namespace modelprobe {

template <typename Scalar>
using Vec = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

inline std::int64_t shape_product(std::span<const int> shape) {
  return std::accumulate(shape.begin(), shape.end(), std::int64_t{1},
                         [](std::int64_t a, int b) { return a * b; });
}

/// Dense row-major tensor; `data.size() == shape_product(shape)`.
template <typename Scalar>
struct Tensor {
  std::vector<int> shape;
  Vec<Scalar> data;

  Tensor() = default;
  explicit Tensor(std::vector<int> s) : shape(std::move(s)), data(Vec<Scalar>::Zero(shape_product(shape))) {}
  Tensor(std::vector<int> s, Vec<Scalar> d) : shape(std::move(s)), data(std::move(d)) {}

  Eigen::Index size() const { return data.size(); }

  template <typename Other>
  Tensor<Other> cast() const {
    return {shape, data.template cast<Other>()};
  }

  friend bool operator==(const Tensor& a, const Tensor& b) { return a.shape == b.shape && a.data == b.data; }
};

using TensorF = Tensor<float>;

inline constexpr char kTensorMagic[4] = {'M', 'P', 'T', 'N'};
inline constexpr std::uint32_t kTensorFloat32 = 0;

/// Binary tensor container: 16-byte header ("MPTN", dtype code, rank,
/// reserved 0; little-endian uint32 each), rank little-endian int32 dims,
/// then the little-endian float32 payload.
std::vector<std::uint8_t> encode_tensor(const TensorF& t);
TensorF decode_tensor(std::span<const std::uint8_t> bytes);

TensorF read_tensor_file(const std::filesystem::path& path);
void write_tensor_file(const std::filesystem::path& path, const TensorF& t);

/// Comma-separated values, one row per line; a single line yields a rank-1
/// tensor, several lines a rank-2 tensor.
TensorF parse_tensor_csv(std::string_view text);
TensorF read_tensor_any(const std::filesystem::path& path);

}  // namespace modelprobe
