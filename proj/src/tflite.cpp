#include "modelprobe/tflite.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <map>
#include <numeric>

#include "json.hpp"
#include "modelprobe/error.hpp"
#include "modelprobe/flatbuffers.hpp"

namespace modelprobe {
namespace {

// Field ids in the v3 schema. Union fields take two slots (type, value).
namespace model_field {
constexpr int kVersion = 0, kOperatorCodes = 1, kSubgraphs = 2, kDescription = 3, kBuffers = 4;
}
namespace opcode_field {
constexpr int kDeprecatedBuiltinCode = 0, kCustomCode = 1, kVersion = 2, kBuiltinCode = 3;
}
namespace subgraph_field {
constexpr int kTensors = 0, kInputs = 1, kOutputs = 2, kOperators = 3, kName = 4;
}
namespace tensor_field {
constexpr int kShape = 0, kType = 1, kBuffer = 2, kName = 3, kQuantization = 4, kShapeSignature = 7;
}
namespace quant_field {
constexpr int kScale = 2, kZeroPoint = 3, kQuantizedDimension = 6;
}
namespace operator_field {
constexpr int kOpcodeIndex = 0, kInputs = 1, kOutputs = 2, kOptionsType = 3, kOptions = 4;
}
namespace buffer_field {
constexpr int kData = 0, kOffset = 1, kSize = 2;
}

// BuiltinOptions union discriminants.
constexpr std::uint8_t kConv2DOptions = 1, kDepthwiseConv2DOptions = 2, kPool2DOptions = 5,
                       kFullyConnectedOptions = 8, kSoftmaxOptions = 9, kAddOptions = 11,
                       kReshapeOptions = 17, kReducerOptions = 27;

// TensorType enum values.
constexpr int kFloat32 = 0, kFloat16 = 1, kInt32 = 2, kUInt8 = 3, kInt64 = 4, kBool = 6, kInt16 = 7,
              kInt8 = 9, kFloat64 = 10;

int element_size(int tflite_type) {
  switch (tflite_type) {
    case kFloat32: case kInt32: return 4;
    case kFloat16: case kInt16: return 2;
    case kInt64: case kFloat64: return 8;
    case kUInt8: case kInt8: case kBool: return 1;
    default: return 0;
  }
}

DType map_dtype(int tflite_type) {
  switch (tflite_type) {
    case kFloat32: return DType::Float32;
    case kInt32: return DType::Int32;
    case kUInt8: return DType::UInt8;
    case kInt8: return DType::Int8;
    default: return DType::Other;
  }
}

Padding map_padding(std::int8_t v) { return v == 1 ? Padding::Valid : Padding::Same; }

Activation map_activation(std::int8_t v) {
  switch (v) {
    case 0: return Activation::None;
    case 1: return Activation::Relu;
    case 2: return Activation::ReluN1To1;
    case 3: return Activation::Relu6;
    case 4: return Activation::Tanh;
    default: return Activation::Other;
  }
}

std::vector<std::int32_t> int_vector(const fb::Vector& v) {
  std::vector<std::int32_t> out(v.size());
  for (std::uint32_t i = 0; i < v.size(); ++i) out[i] = v.scalar<std::int32_t>(i);
  return out;
}

OpOptions decode_options(std::uint8_t type, const std::optional<fb::Table>& t) {
  if (!t) return std::monostate{};
  switch (type) {
    case kConv2DOptions: {
      Conv2DOptions o;
      o.padding = map_padding(t->scalar<std::int8_t>(0));
      o.stride_w = t->scalar<std::int32_t>(1);
      o.stride_h = t->scalar<std::int32_t>(2);
      o.activation = map_activation(t->scalar<std::int8_t>(3));
      o.dilation_w = t->scalar<std::int32_t>(4, 1);
      o.dilation_h = t->scalar<std::int32_t>(5, 1);
      return o;
    }
    case kDepthwiseConv2DOptions: {
      DepthwiseConv2DOptions o;
      o.padding = map_padding(t->scalar<std::int8_t>(0));
      o.stride_w = t->scalar<std::int32_t>(1);
      o.stride_h = t->scalar<std::int32_t>(2);
      o.depth_multiplier = t->scalar<std::int32_t>(3);
      o.activation = map_activation(t->scalar<std::int8_t>(4));
      o.dilation_w = t->scalar<std::int32_t>(5, 1);
      o.dilation_h = t->scalar<std::int32_t>(6, 1);
      return o;
    }
    case kPool2DOptions: {
      Pool2DOptions o;
      o.padding = map_padding(t->scalar<std::int8_t>(0));
      o.stride_w = t->scalar<std::int32_t>(1);
      o.stride_h = t->scalar<std::int32_t>(2);
      o.filter_w = t->scalar<std::int32_t>(3);
      o.filter_h = t->scalar<std::int32_t>(4);
      o.activation = map_activation(t->scalar<std::int8_t>(5));
      return o;
    }
    case kFullyConnectedOptions: {
      FullyConnectedOptions o;
      o.activation = map_activation(t->scalar<std::int8_t>(0));
      o.keep_num_dims = t->scalar<std::uint8_t>(2) != 0;
      return o;
    }
    case kSoftmaxOptions: return SoftmaxOptions{t->scalar<float>(0, 0.0f)};
    case kAddOptions: return AddOptions{map_activation(t->scalar<std::int8_t>(0))};
    case kReshapeOptions: return ReshapeOptions{int_vector(t->vector(0))};
    case kReducerOptions: return ReducerOptions{t->scalar<std::uint8_t>(0) != 0};
    default: return std::monostate{};
  }
}

std::optional<Quantization> decode_quantization(const std::optional<fb::Table>& t) {
  if (!t) return std::nullopt;
  Quantization q;
  auto scale = t->vector(quant_field::kScale);
  auto zp = t->vector(quant_field::kZeroPoint);
  for (std::uint32_t i = 0; i < scale.size(); ++i) q.scale.push_back(scale.scalar<float>(i));
  for (std::uint32_t i = 0; i < zp.size(); ++i) q.zero_point.push_back(zp.scalar<std::int64_t>(i));
  q.quantized_dimension = t->scalar<std::int32_t>(quant_field::kQuantizedDimension);
  if (q.scale.empty()) return std::nullopt;  // min/max-only records carry no usable params
  if (q.zero_point.empty()) q.zero_point.assign(q.scale.size(), 0);
  return q;
}

std::vector<std::uint8_t> buffer_bytes(const fb::Buffer& buf, const fb::Table& buffer) {
  auto offset = buffer.scalar<std::uint64_t>(buffer_field::kOffset);
  if (offset > 1) {
    auto size = buffer.scalar<std::uint64_t>(buffer_field::kSize);
    buf.check(offset, size);
    auto span = buf.bytes().subspan(offset, size);
    return {span.begin(), span.end()};
  }
  auto data = buffer.vector(buffer_field::kData);
  auto span = data.raw(1);
  return {span.begin(), span.end()};
}

// Operand positions that hold shapes or axes rather than learned weights.
bool is_index_operand(int opcode, std::size_t position) {
  switch (opcode) {
    case op::kReshape: case op::kMean: case op::kPad: case op::kSqueeze:
      return position >= 1;
    default:
      return false;
  }
}

void build_params(ModelGraph& g) {
  g.params.reserve(g.ops.size());
  for (std::size_t i = 0; i < g.ops.size(); ++i) {
    ParamVector pv;
    pv.layer_index = i;
    const auto& oper = g.ops[i];
    for (std::size_t pos = 0; pos < oper.inputs.size(); ++pos) {
      auto idx = oper.inputs[pos];
      if (idx < 0 || is_index_operand(oper.opcode, pos)) continue;
      const auto& t = g.tensors[static_cast<std::size_t>(idx)];
      if (!t.is_constant()) continue;
      pv.tensors.push_back({idx, t.shape, t.dtype, t.tflite_type, t.quantization, t.data});
    }
    g.params.push_back(std::move(pv));
  }
}

void validate_topology(const ModelGraph& g) {
  std::vector<bool> ready(g.tensors.size(), false);
  for (std::size_t i = 0; i < g.tensors.size(); ++i) ready[i] = g.tensors[i].is_constant();
  for (auto in : g.inputs) {
    if (in < 0 || static_cast<std::size_t>(in) >= g.tensors.size()) {
      throw Error(ErrorCode::MalformedModel, "subgraph input index out of range");
    }
    ready[static_cast<std::size_t>(in)] = true;
  }
  for (std::size_t k = 0; k < g.ops.size(); ++k) {
    const auto& o = g.ops[k];
    for (auto in : o.inputs) {
      if (in == -1) continue;
      if (in < 0 || static_cast<std::size_t>(in) >= g.tensors.size()) {
        throw Error(ErrorCode::MalformedModel, "operator " + std::to_string(k) + " input index out of range");
      }
      if (!ready[static_cast<std::size_t>(in)]) {
        throw Error(ErrorCode::MalformedModel,
                    "operator " + std::to_string(k) + " reads tensor " + std::to_string(in) + " before it is produced");
      }
    }
    if (o.outputs.empty()) throw Error(ErrorCode::MalformedModel, "operator without outputs");
    for (auto out : o.outputs) {
      if (out < 0 || static_cast<std::size_t>(out) >= g.tensors.size()) {
        throw Error(ErrorCode::MalformedModel, "operator output index out of range");
      }
      ready[static_cast<std::size_t>(out)] = true;
    }
  }
}

}  // namespace

std::string_view to_string(DType dtype) {
  switch (dtype) {
    case DType::UInt8: return "uint8";
    case DType::Int8: return "int8";
    case DType::Int32: return "int32";
    case DType::Float32: return "float32";
    case DType::Other: return "other";
  }
  return "other";
}

DType dtype_from_string(std::string_view name) {
  if (name == "uint8") return DType::UInt8;
  if (name == "int8") return DType::Int8;
  if (name == "int32") return DType::Int32;
  if (name == "float32") return DType::Float32;
  return DType::Other;
}

std::string opcode_name(int opcode) {
  static const std::map<int, std::string> kNames = {
      {op::kAdd, "ADD"}, {op::kAveragePool2D, "AVERAGE_POOL_2D"}, {op::kConcatenation, "CONCATENATION"},
      {op::kConv2D, "CONV_2D"}, {op::kDepthwiseConv2D, "DEPTHWISE_CONV_2D"}, {op::kDequantize, "DEQUANTIZE"},
      {op::kFullyConnected, "FULLY_CONNECTED"}, {op::kLogistic, "LOGISTIC"}, {op::kMaxPool2D, "MAX_POOL_2D"},
      {op::kMul, "MUL"}, {op::kRelu, "RELU"}, {op::kReluN1To1, "RELU_N1_TO_1"}, {op::kRelu6, "RELU6"},
      {op::kReshape, "RESHAPE"}, {op::kSoftmax, "SOFTMAX"}, {op::kTanh, "TANH"}, {op::kCustom, "CUSTOM"},
      {op::kPad, "PAD"}, {op::kMean, "MEAN"}, {op::kSqueeze, "SQUEEZE"}, {op::kQuantize, "QUANTIZE"},
  };
  auto it = kNames.find(opcode);
  return it != kNames.end() ? it->second : "BUILTIN_" + std::to_string(opcode);
}

std::int64_t TensorInfo::element_count() const {
  return std::accumulate(shape.begin(), shape.end(), std::int64_t{1},
                         [](std::int64_t a, std::int32_t b) { return a * std::max<std::int32_t>(b, 0); });
}

std::int64_t ConstTensor::count() const {
  auto es = element_size(tflite_type);
  return es == 0 ? 0 : static_cast<std::int64_t>(raw.size()) / es;
}

std::vector<double> ConstTensor::values() const {
  std::vector<double> out(static_cast<std::size_t>(count()));
  auto read = [&]<typename T>(T) {
    for (std::size_t i = 0; i < out.size(); ++i) {
      T v;
      std::memcpy(&v, raw.data() + i * sizeof(T), sizeof(T));
      out[i] = static_cast<double>(v);
    }
  };
  switch (tflite_type) {
    case kFloat32: read(float{}); break;
    case kFloat64: read(double{}); break;
    case kInt32: read(std::int32_t{}); break;
    case kInt64: read(std::int64_t{}); break;
    case kInt16: read(std::int16_t{}); break;
    case kUInt8: case kBool: read(std::uint8_t{}); break;
    case kInt8: read(std::int8_t{}); break;
    default: break;
  }
  return out;
}

Digest ParamVector::digest() const {
  Hasher h;
  auto n = static_cast<std::uint64_t>(tensors.size());
  h.update_pod(n);
  for (const auto& t : tensors) {
    auto type = static_cast<std::int32_t>(t.tflite_type);
    h.update_pod(type);
    // element count, not shape: equality is defined over the flat values
    auto count = static_cast<std::int64_t>(t.count());
    h.update_pod(count);
    auto has_q = static_cast<std::uint8_t>(t.quantization.has_value());
    h.update_pod(has_q);
    if (t.quantization) {
      auto channels = static_cast<std::uint64_t>(t.quantization->scale.size());
      h.update_pod(channels);
      for (auto s : t.quantization->scale) h.update_pod(s);
      for (auto z : t.quantization->zero_point) h.update_pod(z);
      h.update_pod(t.quantization->quantized_dimension);
    }
    if (t.tflite_type == kFloat32) {
      // value equality, not bit equality: -0.0 and 0.0 hash alike
      for (std::size_t i = 0; i + 4 <= t.raw.size(); i += 4) {
        float v;
        std::memcpy(&v, t.raw.data() + i, 4);
        if (v == 0.0f) v = 0.0f;
        h.update_pod(v);
      }
    } else {
      h.update(t.raw);
    }
  }
  return h.finish();
}

bool has_tflite_identifier(std::span<const std::uint8_t> bytes) {
  return bytes.size() >= 8 && std::memcmp(bytes.data() + 4, kTfliteIdentifier, 4) == 0;
}

ModelGraph parse_model(std::span<const std::uint8_t> bytes, const std::string& source_path) {
  if (bytes.empty()) throw Error(ErrorCode::Truncated, "empty model");
  if (bytes.size() < 8) throw Error(ErrorCode::Truncated, "model shorter than header");
  if (!has_tflite_identifier(bytes)) throw Error(ErrorCode::BadMagic, "missing TFL3 file identifier");

  fb::Buffer buf(bytes);
  auto model = fb::Table::root(buf);
  ModelGraph g;
  g.meta.source_path = source_path;
  g.meta.name = std::filesystem::path(source_path).stem().string();
  g.meta.digest = Digest::of(bytes);
  g.meta.version = model.scalar<std::uint32_t>(model_field::kVersion);
  if (g.meta.version != 3) {
    throw Error(ErrorCode::UnsupportedVersion, "schema version " + std::to_string(g.meta.version));
  }
  try {
    g.meta.description = std::string(model.string(model_field::kDescription).value_or(""));
  } catch (const Error&) {
    // optional metadata; structural content below is what matters
  }

  struct Code {
    int builtin;
    std::string custom;
    int version;
  };
  std::vector<Code> codes;
  auto opcodes = model.vector(model_field::kOperatorCodes);
  for (std::uint32_t i = 0; i < opcodes.size(); ++i) {
    auto c = opcodes.table(i);
    int deprecated = c.scalar<std::int8_t>(opcode_field::kDeprecatedBuiltinCode);
    int builtin = c.scalar<std::int32_t>(opcode_field::kBuiltinCode);
    codes.push_back({std::max(deprecated, builtin),
                     std::string(c.string(opcode_field::kCustomCode).value_or("")),
                     c.scalar<std::int32_t>(opcode_field::kVersion, 1)});
  }

  auto buffers = model.vector(model_field::kBuffers);
  auto subgraphs = model.vector(model_field::kSubgraphs);
  if (subgraphs.empty()) throw Error(ErrorCode::MalformedModel, "model has no subgraphs");
  g.meta.subgraph_count = subgraphs.size();
  for (std::uint32_t i = 0; i < subgraphs.size(); ++i) {
    try {
      g.meta.subgraph_names.emplace_back(subgraphs.table(i).string(subgraph_field::kName).value_or(""));
    } catch (const Error&) {
      g.meta.subgraph_names.emplace_back();
    }
  }

  auto sg = subgraphs.table(0);
  auto tensors = sg.vector(subgraph_field::kTensors);
  g.tensors.reserve(tensors.size());
  for (std::uint32_t i = 0; i < tensors.size(); ++i) {
    auto t = tensors.table(i);
    TensorInfo info;
    info.name = std::string(t.string(tensor_field::kName).value_or(""));
    info.shape = int_vector(t.vector(tensor_field::kShape));
    info.shape_signature = int_vector(t.vector(tensor_field::kShapeSignature));
    info.tflite_type = t.scalar<std::int8_t>(tensor_field::kType);
    info.dtype = map_dtype(info.tflite_type);
    info.quantization = decode_quantization(t.table(tensor_field::kQuantization));
    for (auto d : info.shape) {
      if (d < -1) throw Error(ErrorCode::MalformedModel, "negative dimension in tensor " + info.name);
    }
    auto buffer_index = t.scalar<std::uint32_t>(tensor_field::kBuffer);
    if (buffer_index != 0) {
      if (buffer_index >= buffers.size()) throw Error(ErrorCode::Truncated, "tensor references missing buffer");
      info.data = buffer_bytes(buf, buffers.table(buffer_index));
      auto es = element_size(info.tflite_type);
      if (!info.data.empty() && es != 0 &&
          static_cast<std::int64_t>(info.data.size()) != info.element_count() * es) {
        throw Error(ErrorCode::Truncated, "buffer size does not match shape of tensor " + info.name);
      }
    }
    g.tensors.push_back(std::move(info));
  }
  g.inputs = int_vector(sg.vector(subgraph_field::kInputs));
  g.outputs = int_vector(sg.vector(subgraph_field::kOutputs));

  auto operators = sg.vector(subgraph_field::kOperators);
  g.ops.reserve(operators.size());
  for (std::uint32_t i = 0; i < operators.size(); ++i) {
    auto o = operators.table(i);
    auto code_index = o.scalar<std::uint32_t>(operator_field::kOpcodeIndex);
    if (code_index >= codes.size()) throw Error(ErrorCode::MalformedModel, "opcode index out of range");
    Operator oper;
    oper.opcode = codes[code_index].builtin;
    oper.custom_code = codes[code_index].custom;
    oper.version = codes[code_index].version;
    oper.inputs = int_vector(o.vector(operator_field::kInputs));
    oper.outputs = int_vector(o.vector(operator_field::kOutputs));
    oper.options = decode_options(o.scalar<std::uint8_t>(operator_field::kOptionsType),
                                  o.table(operator_field::kOptions));
    g.ops.push_back(std::move(oper));
  }
  validate_topology(g);

  g.layers.reserve(g.ops.size());
  for (const auto& oper : g.ops) {
    const auto& out = g.tensors[static_cast<std::size_t>(oper.outputs.front())];
    g.layers.push_back({out.name, out.shape, out.dtype, oper.opcode});
  }
  build_params(g);
  return g;
}

ModelGraph load_model(const std::filesystem::path& path) {
  auto bytes = read_file(path);
  return parse_model(bytes, path.string());
}

std::vector<LayerUnit> to_layer_sequence(const ModelGraph& model) { return model.layers; }

std::vector<ParamVector> extract_params(const ModelGraph& model) { return model.params; }

std::string layer_sequence_json(const std::vector<LayerUnit>& layers) {
  auto arr = nlohmann::json::array();
  for (const auto& l : layers) {
    arr.push_back({{"identifier", l.identifier}, {"shape", l.shape}, {"dtype", to_string(l.dtype)}});
  }
  return arr.dump(1);
}

}  // namespace modelprobe
