#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "modelprobe/digest.hpp"

namespace modelprobe {

/// Element types that take part in layer comparison; everything else is Other.
enum class DType { UInt8, Int8, Int32, Float32, Other };

std::string_view to_string(DType dtype);
DType dtype_from_string(std::string_view name);

/// TFLite BuiltinOperator codes used by this project.
namespace op {
inline constexpr int kAdd = 0;
inline constexpr int kAveragePool2D = 1;
inline constexpr int kConcatenation = 2;
inline constexpr int kConv2D = 3;
inline constexpr int kDepthwiseConv2D = 4;
inline constexpr int kDequantize = 6;
inline constexpr int kFullyConnected = 9;
inline constexpr int kLogistic = 14;
inline constexpr int kMaxPool2D = 17;
inline constexpr int kMul = 18;
inline constexpr int kRelu = 19;
inline constexpr int kReluN1To1 = 20;
inline constexpr int kRelu6 = 21;
inline constexpr int kReshape = 22;
inline constexpr int kSoftmax = 25;
inline constexpr int kTanh = 28;
inline constexpr int kCustom = 32;
inline constexpr int kPad = 34;
inline constexpr int kMean = 40;
inline constexpr int kSqueeze = 43;
inline constexpr int kQuantize = 114;
}  // namespace op

std::string opcode_name(int opcode);

enum class Padding { Same, Valid };
enum class Activation { None, Relu, ReluN1To1, Relu6, Tanh, Other };

struct Conv2DOptions {
  Padding padding = Padding::Same;
  int stride_w = 1, stride_h = 1;
  int dilation_w = 1, dilation_h = 1;
  Activation activation = Activation::None;
};
struct DepthwiseConv2DOptions {
  Padding padding = Padding::Same;
  int stride_w = 1, stride_h = 1;
  int depth_multiplier = 1;
  int dilation_w = 1, dilation_h = 1;
  Activation activation = Activation::None;
};
struct Pool2DOptions {
  Padding padding = Padding::Same;
  int stride_w = 1, stride_h = 1;
  int filter_w = 1, filter_h = 1;
  Activation activation = Activation::None;
};
struct FullyConnectedOptions {
  Activation activation = Activation::None;
  bool keep_num_dims = false;
};
struct SoftmaxOptions {
  float beta = 1.0f;
};
struct AddOptions {
  Activation activation = Activation::None;
};
struct ReshapeOptions {
  std::vector<std::int32_t> new_shape;
};
struct ReducerOptions {
  bool keep_dims = false;
};

using OpOptions = std::variant<std::monostate, Conv2DOptions, DepthwiseConv2DOptions, Pool2DOptions,
                               FullyConnectedOptions, SoftmaxOptions, AddOptions, ReshapeOptions,
                               ReducerOptions>;

struct Quantization {
  std::vector<float> scale;
  std::vector<std::int64_t> zero_point;
  int quantized_dimension = 0;

  friend bool operator==(const Quantization&, const Quantization&) = default;
};

struct TensorInfo {
  std::string name;
  std::vector<std::int32_t> shape;
  std::vector<std::int32_t> shape_signature;
  DType dtype = DType::Other;
  int tflite_type = 0;
  std::optional<Quantization> quantization;
  std::vector<std::uint8_t> data;  // empty unless the tensor is a constant

  bool is_constant() const { return !data.empty(); }
  std::int64_t element_count() const;
};

struct Operator {
  int opcode = 0;
  std::string custom_code;
  int version = 1;
  std::vector<std::int32_t> inputs;
  std::vector<std::int32_t> outputs;
  OpOptions options;
};

/// One layer's comparison atom: (identifier, shape, dtype). The opcode rides
/// along for relaxed matching only.
struct LayerUnit {
  std::string identifier;
  std::vector<std::int32_t> shape;
  DType dtype = DType::Other;
  int opcode = 0;

  friend bool operator==(const LayerUnit&, const LayerUnit&) = default;
};

/// A constant operand of a layer, raw bytes as stored in the file.
struct ConstTensor {
  std::int32_t tensor_index = -1;
  std::vector<std::int32_t> shape;
  DType dtype = DType::Other;
  int tflite_type = 0;
  std::optional<Quantization> quantization;
  std::vector<std::uint8_t> raw;

  std::int64_t count() const;
  /// Stored values widened to double (no dequantization).
  std::vector<double> values() const;
};

/// Constant weights owned by one layer; `tensors.front()` is the kernel.
struct ParamVector {
  std::size_t layer_index = 0;
  std::vector<ConstTensor> tensors;

  bool empty() const { return tensors.empty(); }
  std::int64_t weight_count() const { return tensors.empty() ? 0 : tensors.front().count(); }
  const ConstTensor& weights() const { return tensors.front(); }

  /// Hash over dtype, shape, quantization and canonicalized values; equal
  /// digests <=> exactly equal parameters.
  Digest digest() const;
};

struct ModelMeta {
  std::string source_path;
  std::string name;
  Digest digest;
  std::uint32_t version = 0;
  std::string description;
  std::size_t subgraph_count = 0;
  std::vector<std::string> subgraph_names;
};

/// Parsed TFLite model restricted to the primary subgraph. Immutable once built.
struct ModelGraph {
  std::vector<TensorInfo> tensors;
  std::vector<Operator> ops;
  std::vector<std::int32_t> inputs;
  std::vector<std::int32_t> outputs;
  std::vector<LayerUnit> layers;
  std::vector<ParamVector> params;
  ModelMeta meta;
};

inline constexpr char kTfliteIdentifier[] = "TFL3";

/// Decodes TFLite FlatBuffer bytes. Throws BadMagic, Truncated,
/// UnsupportedVersion or MalformedModel.
ModelGraph parse_model(std::span<const std::uint8_t> bytes, const std::string& source_path = {});
ModelGraph load_model(const std::filesystem::path& path);

/// True when bytes 4..8 hold the TFLite file identifier.
bool has_tflite_identifier(std::span<const std::uint8_t> bytes);

std::vector<LayerUnit> to_layer_sequence(const ModelGraph& model);
std::vector<ParamVector> extract_params(const ModelGraph& model);

/// JSON array of {identifier, shape, dtype}.
std::string layer_sequence_json(const std::vector<LayerUnit>& layers);

}  // namespace modelprobe
