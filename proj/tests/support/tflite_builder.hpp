#pragma once

// Test-side TFLite model construction: an op-level model description, its
// FlatBuffers serialization, a float64 reference interpreter written
// independently of the library engine, and post-training uint8 quantization.

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

namespace fixture {

namespace tt {
inline constexpr int kFloat32 = 0, kInt32 = 2, kUInt8 = 3, kInt64 = 4, kInt8 = 9, kFloat16 = 1;
}

namespace opc {
inline constexpr int kAdd = 0, kAveragePool2D = 1, kConv2D = 3, kDepthwiseConv2D = 4, kDequantize = 6,
                     kFullyConnected = 9, kLogistic = 14, kMaxPool2D = 17, kRelu = 19, kReluN1To1 = 20,
                     kRelu6 = 21, kReshape = 22, kSoftmax = 25, kTanh = 28, kPad = 34, kMean = 40,
                     kSqueeze = 43, kQuantize = 114, kGather = 36;
}

enum Act { kNone = 0, kRelu = 1, kReluN1To1 = 2, kRelu6 = 3, kTanh = 4 };
enum Pad { kSame = 0, kValid = 1 };

struct QParams {
  std::vector<float> scale;
  std::vector<std::int64_t> zero_point;
  int dim = 0;
};

struct TensorDef {
  std::string name;
  std::vector<int> shape;
  int type = tt::kFloat32;
  std::vector<std::uint8_t> data;  // non-empty for constants
  std::optional<QParams> q;
  std::vector<double> values;  // real values of constants (reference interpreter)
};

struct OpDef {
  int opcode = 0;
  std::vector<int> inputs, outputs;
  int padding = kSame;
  int stride_h = 1, stride_w = 1;
  int filter_h = 1, filter_w = 1;
  int depth_multiplier = 1;
  int activation = kNone;
  float beta = 1.0f;
  bool keep_dims = false;
  std::vector<int> new_shape;
};

struct ModelDef {
  std::vector<TensorDef> tensors;
  std::vector<OpDef> ops;
  std::vector<int> inputs, outputs;
  std::string description = "fixture";
  std::uint32_t version = 3;
  int extra_subgraphs = 0;
};

std::vector<std::uint8_t> serialize(const ModelDef& m);

/// Builds float models layer by layer, computing output shapes itself.
class NetBuilder {
 public:
  explicit NetBuilder(std::string prefix = "") : prefix_(std::move(prefix)) {}

  int input(std::vector<int> shape, const std::string& name = "input");
  int constant(const std::string& name, std::vector<int> shape, const std::vector<float>& values);
  int constant_i32(const std::string& name, std::vector<int> shape, const std::vector<std::int32_t>& values);

  int conv2d(int x, const std::string& name, int filter, int bias, int stride, int padding, int act);
  int depthwise(int x, const std::string& name, int filter, int bias, int stride, int padding, int act);
  int fully_connected(int x, const std::string& name, int weights, int bias, int act);
  int pool(int opcode, int x, const std::string& name, int filter, int stride, int padding, int act = kNone);
  int add(int a, int b, const std::string& name, int act = kNone);
  int reshape(int x, const std::string& name, std::vector<int> shape);
  int mean(int x, const std::string& name, std::vector<int> axes, bool keep_dims);
  int pad(int x, const std::string& name, std::vector<std::array<int, 2>> paddings);
  int unary(int opcode, int x, const std::string& name);
  int softmax(int x, const std::string& name, float beta = 1.0f);
  /// Appends an arbitrary op whose output shape is given.
  int raw(OpDef op, const std::string& name, std::vector<int> out_shape, int type = tt::kFloat32);

  void output(int t) { model_.outputs = {t}; }
  const std::vector<int>& shape(int t) const { return model_.tensors[static_cast<std::size_t>(t)].shape; }
  ModelDef& model() { return model_; }
  ModelDef finish() { return model_; }

 private:
  int add_tensor(TensorDef t);
  int push(OpDef op, const std::string& name, std::vector<int> out_shape);
  std::string prefix_;
  ModelDef model_;
};

/// Weight helpers drawing from a seeded engine.
std::vector<float> normal(std::mt19937_64& rng, std::size_t n, double stddev, double mean = 0.0);
std::vector<float> uniform(std::mt19937_64& rng, std::size_t n, double lo, double hi);

/// Float64 reference interpreter; returns every tensor's values. When
/// `pattern` is given it receives the active piece of every piecewise-linear
/// element (ReLU-family region, max-pool winner), so callers can tell whether
/// two inputs lie in the same linear region.
std::vector<std::vector<double>> reference_trace(const ModelDef& m, const std::vector<double>& input,
                                                 std::vector<int>* pattern = nullptr);
std::vector<double> reference_forward(const ModelDef& m, const std::vector<double>& input);

/// Post-training asymmetric uint8 quantization calibrated on `calibration`
/// inputs. Input is fixed to scale 1/255, softmax outputs to 1/256.
ModelDef quantize_uint8(const ModelDef& float_model, const std::vector<std::vector<double>>& calibration,
                        const std::string& suffix = "");

std::vector<std::uint8_t> float_bytes(const std::vector<float>& v);

}  // namespace fixture
