#pragma once

// Forward execution and reverse-mode input gradients for the supported TFLite
// operator subset. Templated on the compute scalar: float for everyday use,
// double for gradient verification.

#include <Eigen/Core>

#include <cstdint>
#include <optional>
#include <vector>

#include "modelprobe/tensor.hpp"
#include "modelprobe/tflite.hpp"

namespace modelprobe {

/// real = scale · (q − zero_point), elementwise.
template <typename Scalar, typename Derived>
Vec<Scalar> dequantize(const Eigen::MatrixBase<Derived>& q, double scale, std::int64_t zero_point) {
  return ((q.template cast<double>().array() - static_cast<double>(zero_point)) * scale).template cast<Scalar>();
}

/// Dequantizes a stored constant (per-tensor or per-axis); float constants
/// are returned as-is.
template <typename Scalar>
Vec<Scalar> dequantize(const ConstTensor& t);

enum class Precision {
  Float,      // dequantized weights, float activations
  Quantized,  // additionally rounds every quantized activation to its integer grid
};

template <typename Scalar>
struct LabeledExample {
  Tensor<Scalar> x;  // values in [0, 1]
  int y_true = 0;
};

template <typename Scalar>
struct LossGrad {
  Scalar loss;
  Tensor<Scalar> grad;  // dJ/dx, same shape as x
};

template <typename Scalar>
class Network {
 public:
  using Vector = Vec<Scalar>;

  /// Throws UnsupportedOp for operators outside the executable subset and
  /// ShapeMismatch when declared shapes disagree with computed ones.
  static Network from_graph(const ModelGraph& graph);

  const std::vector<int>& input_shape() const { return tensors_[input_].shape; }
  int class_count() const { return static_cast<int>(tensors_[logits_].shape.back()); }
  /// True when any activation tensor carries integer quantization.
  bool quantized() const { return quantized_; }
  /// Real-valued range for the model input (uint8 input maps 0..255 through its scale).
  std::pair<double, double> input_range() const;

  /// Logits of shape [1, class_count]. A trailing SOFTMAX is peeled off so
  /// callers always receive pre-softmax scores.
  Tensor<Scalar> forward(const Tensor<Scalar>& x, Precision precision = Precision::Float) const;
  int predict(const Tensor<Scalar>& x, Precision precision = Precision::Float) const;

  /// Vector-Jacobian product: d(adjoint · logits)/dx.
  Tensor<Scalar> input_gradient(const Tensor<Scalar>& x, const Vector& logit_adjoint) const;

  /// Cross-entropy of softmax(logits) against y_true and its input gradient.
  LossGrad<Scalar> loss_and_input_grad(const LabeledExample<Scalar>& example) const;

  /// All tensor values from one forward pass (indexed like the graph's tensors).
  std::vector<Vector> trace(const Tensor<Scalar>& x, Precision precision = Precision::Float) const;

 private:
  struct Slot {
    std::vector<int> shape;
    Vector constant;  // non-empty for constants
    bool is_constant = false;
    std::optional<Quantization> quant;  // integer activations only
    int qmin = 0, qmax = 0;
  };
  struct Step {
    int opcode = 0;
    std::vector<int> inputs;
    int output = 0;
    OpOptions options;
    std::vector<std::vector<Eigen::Index>> maps;  // broadcast / reduction / padding index maps
    Scalar divisor = Scalar(1);
  };

  void check_input(const Tensor<Scalar>& x) const;
  void run_step(const Step& s, std::vector<Vector>& v) const;
  void backward_step(const Step& s, const std::vector<Vector>& v, std::vector<Vector>& adj) const;
  void fake_quantize(int tensor, Vector& value) const;

  std::vector<Slot> tensors_;
  std::vector<Step> steps_;
  int input_ = 0;
  int logits_ = 0;
  Scalar logit_scale_ = Scalar(1);
  bool quantized_ = false;
};

extern template class Network<float>;
extern template class Network<double>;
extern template Vec<float> dequantize<float>(const ConstTensor&);
extern template Vec<double> dequantize<double>(const ConstTensor&);

using EngineModel = Network<float>;

template <typename Scalar>
Vec<Scalar> softmax(const Vec<Scalar>& logits) {
  Vec<Scalar> e = (logits.array() - logits.maxCoeff()).exp();
  return e / e.sum();
}

}  // namespace modelprobe
