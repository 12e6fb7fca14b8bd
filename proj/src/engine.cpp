#include "modelprobe/engine.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "modelprobe/error.hpp"

namespace modelprobe {
namespace {

template <typename Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct Geometry {
  int out = 0;
  int pad = 0;
};

// TFLite SAME/VALID arithmetic.
Geometry window_geometry(int in, int filter, int stride, int dilation, Padding padding) {
  int effective = (filter - 1) * dilation + 1;
  Geometry g;
  g.out = padding == Padding::Same ? (in + stride - 1) / stride : (in - effective + stride) / stride;
  int total = std::max((g.out - 1) * stride + effective - in, 0);
  g.pad = total / 2;
  return g;
}

Activation activation_of(const OpOptions& o) {
  return std::visit(
      [](const auto& opt) -> Activation {
        if constexpr (requires { opt.activation; }) {
          return opt.activation;
        } else {
          return Activation::None;
        }
      },
      o);
}

template <typename Scalar>
void apply_activation(Activation a, Vec<Scalar>& v) {
  switch (a) {
    case Activation::None: break;
    case Activation::Relu: v = v.cwiseMax(Scalar(0)); break;
    case Activation::Relu6: v = v.cwiseMax(Scalar(0)).cwiseMin(Scalar(6)); break;
    case Activation::ReluN1To1: v = v.cwiseMax(Scalar(-1)).cwiseMin(Scalar(1)); break;
    case Activation::Tanh: v = v.array().tanh(); break;
    case Activation::Other: break;
  }
}

// Multiplies the output adjoint by the activation derivative, written in
// terms of the activation's output.
template <typename Scalar>
Vec<Scalar> activation_backward(Activation a, const Vec<Scalar>& y, const Vec<Scalar>& dy) {
  switch (a) {
    case Activation::Relu: return (y.array() > Scalar(0)).select(dy, Scalar(0));
    case Activation::Relu6: return (y.array() > Scalar(0) && y.array() < Scalar(6)).select(dy, Scalar(0));
    case Activation::ReluN1To1: return (y.array() > Scalar(-1) && y.array() < Scalar(1)).select(dy, Scalar(0));
    case Activation::Tanh: return (dy.array() * (Scalar(1) - y.array().square())).matrix();
    default: return dy;
  }
}

std::vector<int> static_shape(const std::vector<std::int32_t>& shape, const std::string& name) {
  std::vector<int> out(shape.begin(), shape.end());
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (out[i] == -1 && i == 0) out[i] = 1;
    if (out[i] < 0) throw Error(ErrorCode::ShapeMismatch, "dynamic dimension in tensor " + name);
  }
  return out;
}

std::vector<Eigen::Index> strides_of(const std::vector<int>& shape) {
  std::vector<Eigen::Index> s(shape.size(), 1);
  for (int i = static_cast<int>(shape.size()) - 2; i >= 0; --i) s[i] = s[i + 1] * shape[i + 1];
  return s;
}

// For each output element, the flat index into an operand broadcast to `out`.
std::vector<Eigen::Index> broadcast_map(const std::vector<int>& operand, const std::vector<int>& out) {
  auto rank = out.size();
  std::vector<int> padded(rank, 1);
  std::copy(operand.begin(), operand.end(), padded.begin() + static_cast<long>(rank - operand.size()));
  auto in_strides = strides_of(padded);
  auto out_strides = strides_of(out);
  std::vector<Eigen::Index> map(static_cast<std::size_t>(shape_product(out)));
  for (std::size_t flat = 0; flat < map.size(); ++flat) {
    Eigen::Index rem = static_cast<Eigen::Index>(flat), idx = 0;
    for (std::size_t d = 0; d < rank; ++d) {
      auto coord = rem / out_strides[d];
      rem %= out_strides[d];
      if (padded[d] != 1) idx += coord * in_strides[d];
    }
    map[flat] = idx;
  }
  return map;
}

std::pair<int, int> qrange(DType dtype) {
  return dtype == DType::UInt8 ? std::pair{0, 255} : std::pair{-128, 127};
}

}  // namespace

template <typename Scalar>
Vec<Scalar> dequantize(const ConstTensor& t) {
  auto values = t.values();
  Vec<Scalar> out(static_cast<Eigen::Index>(values.size()));
  if (!t.quantization || t.dtype == DType::Float32) {
    for (std::size_t i = 0; i < values.size(); ++i) out[static_cast<Eigen::Index>(i)] = static_cast<Scalar>(values[i]);
    return out;
  }
  const auto& q = *t.quantization;
  if (q.scale.size() == 1) {
    Eigen::Map<const Eigen::VectorXd> raw(values.data(), static_cast<Eigen::Index>(values.size()));
    return dequantize<Scalar>(raw, q.scale[0], q.zero_point[0]);
  }
  // per-axis
  std::vector<int> shape(t.shape.begin(), t.shape.end());
  auto dim = static_cast<std::size_t>(q.quantized_dimension);
  if (dim >= shape.size() || static_cast<std::size_t>(shape[dim]) != q.scale.size()) {
    throw Error(ErrorCode::ShapeMismatch, "per-axis quantization does not match tensor shape");
  }
  auto stride = strides_of(shape)[dim];
  for (std::size_t i = 0; i < values.size(); ++i) {
    auto ch = (static_cast<Eigen::Index>(i) / stride) % shape[dim];
    out[static_cast<Eigen::Index>(i)] =
        static_cast<Scalar>(q.scale[static_cast<std::size_t>(ch)] *
                            (values[i] - static_cast<double>(q.zero_point[static_cast<std::size_t>(ch)])));
  }
  return out;
}

template <typename Scalar>
Network<Scalar> Network<Scalar>::from_graph(const ModelGraph& graph) {
  Network net;
  if (graph.inputs.size() != 1 || graph.outputs.empty()) {
    throw Error(ErrorCode::ShapeMismatch, "engine expects exactly one model input");
  }
  net.tensors_.resize(graph.tensors.size());
  for (std::size_t i = 0; i < graph.tensors.size(); ++i) {
    const auto& src = graph.tensors[i];
    auto& slot = net.tensors_[i];
    slot.shape = static_shape(src.shape, src.name);
    if (src.is_constant()) {
      ConstTensor c{static_cast<std::int32_t>(i), src.shape, src.dtype, src.tflite_type, src.quantization, src.data};
      // int64 / int16 / float64 constants widen exactly; anything else (float16, strings) is not executable
      const bool widenable = src.tflite_type == 4 || src.tflite_type == 7 || src.tflite_type == 10;
      if (src.dtype == DType::Other && !widenable) {
        throw Error(ErrorCode::UnsupportedOp, "constant tensor " + src.name + " has unsupported type");
      }
      slot.constant = dequantize<Scalar>(c);
      slot.is_constant = true;
    } else if (src.quantization && (src.dtype == DType::UInt8 || src.dtype == DType::Int8)) {
      slot.quant = src.quantization;
      std::tie(slot.qmin, slot.qmax) = qrange(src.dtype);
      net.quantized_ = true;
    }
  }
  net.input_ = graph.inputs[0];

  // Locate the logits: walk back from the output through (de)quantize ops to a softmax.
  std::vector<int> producer(graph.tensors.size(), -1);
  for (std::size_t k = 0; k < graph.ops.size(); ++k) {
    for (auto out : graph.ops[k].outputs) producer[static_cast<std::size_t>(out)] = static_cast<int>(k);
  }
  int logits = graph.outputs[0];
  for (int t = logits; t >= 0 && producer[static_cast<std::size_t>(t)] >= 0;) {
    const auto& p = graph.ops[static_cast<std::size_t>(producer[static_cast<std::size_t>(t)])];
    if (p.opcode == op::kSoftmax) {
      logits = p.inputs[0];
      if (auto* o = std::get_if<SoftmaxOptions>(&p.options)) net.logit_scale_ = static_cast<Scalar>(o->beta);
      break;
    }
    if (p.opcode != op::kDequantize && p.opcode != op::kQuantize) break;
    t = p.inputs[0];
  }
  net.logits_ = logits;

  for (const auto& oper : graph.ops) {
    if (producer[static_cast<std::size_t>(net.logits_)] >= 0 &&
        net.steps_.size() > static_cast<std::size_t>(producer[static_cast<std::size_t>(net.logits_)])) {
      break;
    }
    Step s;
    s.opcode = oper.opcode;
    s.inputs.assign(oper.inputs.begin(), oper.inputs.end());
    s.output = oper.outputs.front();
    s.options = oper.options;
    if (activation_of(s.options) == Activation::Other) {
      throw Error(ErrorCode::UnsupportedOp, "unsupported fused activation in " + opcode_name(s.opcode));
    }
    auto shape_of = [&](int idx) -> const std::vector<int>& { return net.tensors_[static_cast<std::size_t>(idx)].shape; };
    const auto& out_shape = shape_of(s.output);
    auto mismatch = [&](const std::string& what) {
      return Error(ErrorCode::ShapeMismatch, opcode_name(s.opcode) + ": " + what);
    };
    switch (s.opcode) {
      case op::kConv2D: case op::kDepthwiseConv2D: {
        const auto& in = shape_of(s.inputs[0]);
        const auto& f = shape_of(s.inputs[1]);
        if (in.size() != 4 || f.size() != 4 || out_shape.size() != 4) throw mismatch("expects rank-4 tensors");
        if (!net.tensors_[static_cast<std::size_t>(s.inputs[1])].is_constant) throw mismatch("filter must be constant");
        int sh, sw, dh, dw;
        Padding pad;
        if (s.opcode == op::kConv2D) {
          const auto& o = std::get<Conv2DOptions>(s.options);
          sh = o.stride_h, sw = o.stride_w, dh = o.dilation_h, dw = o.dilation_w, pad = o.padding;
          if (f[3] != in[3] || out_shape[3] != f[0]) throw mismatch("channel count");
        } else {
          const auto& o = std::get<DepthwiseConv2DOptions>(s.options);
          sh = o.stride_h, sw = o.stride_w, dh = o.dilation_h, dw = o.dilation_w, pad = o.padding;
          if (out_shape[3] != f[3] || f[3] % in[3] != 0) throw mismatch("channel count");
        }
        auto gh = window_geometry(in[1], f[1], sh, dh, pad);
        auto gw = window_geometry(in[2], f[2], sw, dw, pad);
        if (gh.out != out_shape[1] || gw.out != out_shape[2]) throw mismatch("spatial output size");
        break;
      }
      case op::kAveragePool2D: case op::kMaxPool2D: {
        const auto& in = shape_of(s.inputs[0]);
        const auto& o = std::get<Pool2DOptions>(s.options);
        if (in.size() != 4) throw mismatch("expects rank-4 input");
        auto gh = window_geometry(in[1], o.filter_h, o.stride_h, 1, o.padding);
        auto gw = window_geometry(in[2], o.filter_w, o.stride_w, 1, o.padding);
        if (gh.out != out_shape[1] || gw.out != out_shape[2] || out_shape[3] != in[3]) throw mismatch("output size");
        break;
      }
      case op::kFullyConnected: {
        const auto& f = shape_of(s.inputs[1]);
        if (f.size() != 2 || shape_product(shape_of(s.inputs[0])) != f[1] || shape_product(out_shape) != f[0]) {
          throw mismatch("weights do not match input/output sizes");
        }
        break;
      }
      case op::kAdd: {
        if (s.inputs.size() != 2) throw mismatch("expects two inputs");
        for (int k = 0; k < 2; ++k) {
          const auto& a = shape_of(s.inputs[static_cast<std::size_t>(k)]);
          if (a.size() > out_shape.size()) throw mismatch("operand rank exceeds output rank");
          for (std::size_t d = 0; d < a.size(); ++d) {
            auto od = out_shape[out_shape.size() - a.size() + d];
            if (a[d] != od && a[d] != 1) throw mismatch("operands are not broadcast-compatible");
          }
        }
        break;
      }
      case op::kMean: {
        const auto& in = shape_of(s.inputs[0]);
        const auto& axes = net.tensors_[static_cast<std::size_t>(s.inputs[1])];
        if (!axes.is_constant) throw mismatch("axes must be constant");
        std::vector<bool> reduced(in.size(), false);
        for (Eigen::Index k = 0; k < axes.constant.size(); ++k) {
          auto ax = static_cast<int>(axes.constant[k]);
          if (ax < 0) ax += static_cast<int>(in.size());
          if (ax < 0 || ax >= static_cast<int>(in.size())) throw mismatch("axis out of range");
          reduced[static_cast<std::size_t>(ax)] = true;
        }
        std::vector<int> reduced_shape;
        for (std::size_t d = 0; d < in.size(); ++d) reduced_shape.push_back(reduced[d] ? 1 : in[d]);
        if (shape_product(reduced_shape) != shape_product(out_shape)) throw mismatch("output size");
        s.maps.push_back(broadcast_map(reduced_shape, in));  // input element -> output element
        s.divisor = static_cast<Scalar>(shape_product(in) / std::max<std::int64_t>(1, shape_product(out_shape)));
        break;
      }
      case op::kPad: {
        const auto& in = shape_of(s.inputs[0]);
        const auto& pads = net.tensors_[static_cast<std::size_t>(s.inputs[1])];
        if (!pads.is_constant || pads.constant.size() != static_cast<Eigen::Index>(2 * in.size())) {
          throw mismatch("paddings must be a constant [rank, 2] tensor");
        }
        auto in_strides = strides_of(in);
        auto out_strides = strides_of(out_shape);
        std::vector<Eigen::Index> map(static_cast<std::size_t>(shape_product(in)));
        for (std::size_t flat = 0; flat < map.size(); ++flat) {
          Eigen::Index rem = static_cast<Eigen::Index>(flat), idx = 0;
          for (std::size_t d = 0; d < in.size(); ++d) {
            auto coord = rem / in_strides[d];
            rem %= in_strides[d];
            idx += (coord + static_cast<Eigen::Index>(pads.constant[static_cast<Eigen::Index>(2 * d)])) *
                   out_strides[d];
          }
          map[flat] = idx;
        }
        s.maps.push_back(std::move(map));
        break;
      }
      case op::kReshape: case op::kSqueeze: case op::kQuantize: case op::kDequantize:
      case op::kRelu: case op::kRelu6: case op::kReluN1To1: case op::kTanh: case op::kLogistic:
      case op::kSoftmax:
        if (shape_product(shape_of(s.inputs[0])) != shape_product(out_shape)) throw mismatch("element count");
        break;
      default:
        throw Error(ErrorCode::UnsupportedOp, "operator " + opcode_name(s.opcode) + " is not executable");
    }
    if (s.opcode == op::kAdd) {
      s.maps.push_back(broadcast_map(shape_of(s.inputs[0]), out_shape));
      s.maps.push_back(broadcast_map(shape_of(s.inputs[1]), out_shape));
    }
    net.steps_.push_back(std::move(s));
  }
  if (net.tensors_[static_cast<std::size_t>(net.logits_)].shape.empty()) {
    throw Error(ErrorCode::ShapeMismatch, "logits tensor has no shape");
  }
  return net;
}

template <typename Scalar>
std::pair<double, double> Network<Scalar>::input_range() const {
  const auto& slot = tensors_[static_cast<std::size_t>(input_)];
  if (!slot.quant) return {0.0, 1.0};
  auto s = slot.quant->scale[0];
  auto z = static_cast<double>(slot.quant->zero_point[0]);
  return {s * (slot.qmin - z), s * (slot.qmax - z)};
}

template <typename Scalar>
void Network<Scalar>::check_input(const Tensor<Scalar>& x) const {
  if (shape_product(x.shape) != shape_product(input_shape()) || x.size() != shape_product(input_shape())) {
    throw Error(ErrorCode::ShapeMismatch, "input has " + std::to_string(x.size()) + " elements, model expects " +
                                              std::to_string(shape_product(input_shape())));
  }
}

template <typename Scalar>
void Network<Scalar>::fake_quantize(int tensor, Vector& value) const {
  const auto& slot = tensors_[static_cast<std::size_t>(tensor)];
  if (!slot.quant) return;
  const double s = slot.quant->scale[0];
  const double z = static_cast<double>(slot.quant->zero_point[0]);
  for (Eigen::Index i = 0; i < value.size(); ++i) {
    double q = std::clamp(std::nearbyint(static_cast<double>(value[i]) / s + z), double(slot.qmin), double(slot.qmax));
    value[i] = static_cast<Scalar>((q - z) * s);
  }
}

template <typename Scalar>
void Network<Scalar>::run_step(const Step& s, std::vector<Vector>& v) const {
  auto shape_of = [&](int idx) -> const std::vector<int>& { return tensors_[static_cast<std::size_t>(idx)].shape; };
  const auto& out_shape = shape_of(s.output);
  const Vector& x = v[static_cast<std::size_t>(s.inputs[0])];
  Vector y;
  switch (s.opcode) {
    case op::kConv2D: {
      const auto& o = std::get<Conv2DOptions>(s.options);
      const auto& in = shape_of(s.inputs[0]);
      const auto& f = shape_of(s.inputs[1]);
      const int H = in[1], W = in[2], C = in[3], O = f[0], KH = f[1], KW = f[2];
      auto gh = window_geometry(H, KH, o.stride_h, o.dilation_h, o.padding);
      auto gw = window_geometry(W, KW, o.stride_w, o.dilation_w, o.padding);
      RowMatrix<Scalar> patches = RowMatrix<Scalar>::Zero(gh.out * gw.out, KH * KW * C);
      for (int oy = 0; oy < gh.out; ++oy) {
        for (int ox = 0; ox < gw.out; ++ox) {
          for (int ky = 0; ky < KH; ++ky) {
            int iy = oy * o.stride_h - gh.pad + ky * o.dilation_h;
            if (iy < 0 || iy >= H) continue;
            for (int kx = 0; kx < KW; ++kx) {
              int ix = ox * o.stride_w - gw.pad + kx * o.dilation_w;
              if (ix < 0 || ix >= W) continue;
              patches.row(oy * gw.out + ox).segment((ky * KW + kx) * C, C) = x.segment((iy * W + ix) * C, C);
            }
          }
        }
      }
      Eigen::Map<const RowMatrix<Scalar>> weights(v[static_cast<std::size_t>(s.inputs[1])].data(), O, KH * KW * C);
      RowMatrix<Scalar> out = patches * weights.transpose();
      if (s.inputs.size() > 2 && s.inputs[2] >= 0) out.rowwise() += v[static_cast<std::size_t>(s.inputs[2])].transpose();
      y = Eigen::Map<const Vector>(out.data(), out.size());
      break;
    }
    case op::kDepthwiseConv2D: {
      const auto& o = std::get<DepthwiseConv2DOptions>(s.options);
      const auto& in = shape_of(s.inputs[0]);
      const auto& f = shape_of(s.inputs[1]);
      const int H = in[1], W = in[2], C = in[3], KH = f[1], KW = f[2], O = f[3], mult = O / C;
      auto gh = window_geometry(H, KH, o.stride_h, o.dilation_h, o.padding);
      auto gw = window_geometry(W, KW, o.stride_w, o.dilation_w, o.padding);
      const Vector& filt = v[static_cast<std::size_t>(s.inputs[1])];
      y = Vector::Zero(gh.out * gw.out * O);
      for (int oy = 0; oy < gh.out; ++oy) {
        for (int ox = 0; ox < gw.out; ++ox) {
          auto row = y.segment((oy * gw.out + ox) * O, O);
          for (int ky = 0; ky < KH; ++ky) {
            int iy = oy * o.stride_h - gh.pad + ky * o.dilation_h;
            if (iy < 0 || iy >= H) continue;
            for (int kx = 0; kx < KW; ++kx) {
              int ix = ox * o.stride_w - gw.pad + kx * o.dilation_w;
              if (ix < 0 || ix >= W) continue;
              for (int oc = 0; oc < O; ++oc) {
                row[oc] += x[(iy * W + ix) * C + oc / mult] * filt[(ky * KW + kx) * O + oc];
              }
            }
          }
        }
      }
      if (s.inputs.size() > 2 && s.inputs[2] >= 0) {
        const Vector& bias = v[static_cast<std::size_t>(s.inputs[2])];
        Eigen::Map<RowMatrix<Scalar>>(y.data(), gh.out * gw.out, O).rowwise() += bias.transpose();
      }
      break;
    }
    case op::kFullyConnected: {
      const auto& f = shape_of(s.inputs[1]);
      Eigen::Map<const RowMatrix<Scalar>> weights(v[static_cast<std::size_t>(s.inputs[1])].data(), f[0], f[1]);
      y = weights * x;
      if (s.inputs.size() > 2 && s.inputs[2] >= 0) y += v[static_cast<std::size_t>(s.inputs[2])];
      break;
    }
    case op::kAveragePool2D: case op::kMaxPool2D: {
      const auto& o = std::get<Pool2DOptions>(s.options);
      const auto& in = shape_of(s.inputs[0]);
      const int H = in[1], W = in[2], C = in[3];
      auto gh = window_geometry(H, o.filter_h, o.stride_h, 1, o.padding);
      auto gw = window_geometry(W, o.filter_w, o.stride_w, 1, o.padding);
      const bool is_max = s.opcode == op::kMaxPool2D;
      y = Vector::Constant(gh.out * gw.out * C, is_max ? -std::numeric_limits<Scalar>::infinity() : Scalar(0));
      for (int oy = 0; oy < gh.out; ++oy) {
        for (int ox = 0; ox < gw.out; ++ox) {
          auto row = y.segment((oy * gw.out + ox) * C, C);
          int count = 0;
          for (int ky = 0; ky < o.filter_h; ++ky) {
            int iy = oy * o.stride_h - gh.pad + ky;
            if (iy < 0 || iy >= H) continue;
            for (int kx = 0; kx < o.filter_w; ++kx) {
              int ix = ox * o.stride_w - gw.pad + kx;
              if (ix < 0 || ix >= W) continue;
              ++count;
              auto src = x.segment((iy * W + ix) * C, C);
              if (is_max) {
                row = row.cwiseMax(src);
              } else {
                row += src;
              }
            }
          }
          if (!is_max && count > 0) row /= static_cast<Scalar>(count);
        }
      }
      break;
    }
    case op::kAdd: {
      const Vector& b = v[static_cast<std::size_t>(s.inputs[1])];
      y.resize(static_cast<Eigen::Index>(s.maps[0].size()));
      for (std::size_t i = 0; i < s.maps[0].size(); ++i) {
        y[static_cast<Eigen::Index>(i)] = x[s.maps[0][i]] + b[s.maps[1][i]];
      }
      break;
    }
    case op::kMean: {
      y = Vector::Zero(shape_product(out_shape));
      for (std::size_t i = 0; i < s.maps[0].size(); ++i) y[s.maps[0][i]] += x[static_cast<Eigen::Index>(i)];
      y /= s.divisor;
      break;
    }
    case op::kPad: {
      y = Vector::Zero(shape_product(out_shape));
      for (std::size_t i = 0; i < s.maps[0].size(); ++i) y[s.maps[0][i]] = x[static_cast<Eigen::Index>(i)];
      break;
    }
    case op::kRelu: y = x.cwiseMax(Scalar(0)); break;
    case op::kRelu6: y = x.cwiseMax(Scalar(0)).cwiseMin(Scalar(6)); break;
    case op::kReluN1To1: y = x.cwiseMax(Scalar(-1)).cwiseMin(Scalar(1)); break;
    case op::kTanh: y = x.array().tanh(); break;
    case op::kLogistic: y = (Scalar(1) + (-x.array()).exp()).inverse(); break;
    case op::kSoftmax: {
      Scalar beta = Scalar(std::get_if<SoftmaxOptions>(&s.options) ? std::get<SoftmaxOptions>(s.options).beta : 1.0f);
      const int n = out_shape.back();
      y.resize(x.size());
      for (Eigen::Index r = 0; r < x.size() / n; ++r) y.segment(r * n, n) = softmax<Scalar>(beta * x.segment(r * n, n));
      break;
    }
    default:  // reshape, squeeze, quantize, dequantize: values pass through
      y = x;
      break;
  }
  apply_activation(activation_of(s.options), y);
  v[static_cast<std::size_t>(s.output)] = std::move(y);
}

template <typename Scalar>
void Network<Scalar>::backward_step(const Step& s, const std::vector<Vector>& v, std::vector<Vector>& adj) const {
  auto& dy_slot = adj[static_cast<std::size_t>(s.output)];
  if (dy_slot.size() == 0) return;
  auto shape_of = [&](int idx) -> const std::vector<int>& { return tensors_[static_cast<std::size_t>(idx)].shape; };
  const Vector& yv = v[static_cast<std::size_t>(s.output)];
  Vector dy = activation_backward(activation_of(s.options), yv, dy_slot);
  const Vector& x = v[static_cast<std::size_t>(s.inputs[0])];
  auto accumulate = [&](int idx, const Vector& g) {
    if (tensors_[static_cast<std::size_t>(idx)].is_constant) return;
    auto& a = adj[static_cast<std::size_t>(idx)];
    if (a.size() == 0) {
      a = g;
    } else {
      a += g;
    }
  };
  switch (s.opcode) {
    case op::kConv2D: {
      const auto& o = std::get<Conv2DOptions>(s.options);
      const auto& in = shape_of(s.inputs[0]);
      const auto& f = shape_of(s.inputs[1]);
      const int H = in[1], W = in[2], C = in[3], O = f[0], KH = f[1], KW = f[2];
      auto gh = window_geometry(H, KH, o.stride_h, o.dilation_h, o.padding);
      auto gw = window_geometry(W, KW, o.stride_w, o.dilation_w, o.padding);
      Eigen::Map<const RowMatrix<Scalar>> weights(v[static_cast<std::size_t>(s.inputs[1])].data(), O, KH * KW * C);
      Eigen::Map<const RowMatrix<Scalar>> dout(dy.data(), gh.out * gw.out, O);
      RowMatrix<Scalar> dpatches = dout * weights;
      Vector dx = Vector::Zero(x.size());
      for (int oy = 0; oy < gh.out; ++oy) {
        for (int ox = 0; ox < gw.out; ++ox) {
          for (int ky = 0; ky < KH; ++ky) {
            int iy = oy * o.stride_h - gh.pad + ky * o.dilation_h;
            if (iy < 0 || iy >= H) continue;
            for (int kx = 0; kx < KW; ++kx) {
              int ix = ox * o.stride_w - gw.pad + kx * o.dilation_w;
              if (ix < 0 || ix >= W) continue;
              dx.segment((iy * W + ix) * C, C) += dpatches.row(oy * gw.out + ox).segment((ky * KW + kx) * C, C).transpose();
            }
          }
        }
      }
      accumulate(s.inputs[0], dx);
      break;
    }
    case op::kDepthwiseConv2D: {
      const auto& o = std::get<DepthwiseConv2DOptions>(s.options);
      const auto& in = shape_of(s.inputs[0]);
      const auto& f = shape_of(s.inputs[1]);
      const int H = in[1], W = in[2], C = in[3], KH = f[1], KW = f[2], O = f[3], mult = O / C;
      auto gh = window_geometry(H, KH, o.stride_h, o.dilation_h, o.padding);
      auto gw = window_geometry(W, KW, o.stride_w, o.dilation_w, o.padding);
      const Vector& filt = v[static_cast<std::size_t>(s.inputs[1])];
      Vector dx = Vector::Zero(x.size());
      for (int oy = 0; oy < gh.out; ++oy) {
        for (int ox = 0; ox < gw.out; ++ox) {
          auto drow = dy.segment((oy * gw.out + ox) * O, O);
          for (int ky = 0; ky < KH; ++ky) {
            int iy = oy * o.stride_h - gh.pad + ky * o.dilation_h;
            if (iy < 0 || iy >= H) continue;
            for (int kx = 0; kx < KW; ++kx) {
              int ix = ox * o.stride_w - gw.pad + kx * o.dilation_w;
              if (ix < 0 || ix >= W) continue;
              for (int oc = 0; oc < O; ++oc) {
                dx[(iy * W + ix) * C + oc / mult] += drow[oc] * filt[(ky * KW + kx) * O + oc];
              }
            }
          }
        }
      }
      accumulate(s.inputs[0], dx);
      break;
    }
    case op::kFullyConnected: {
      const auto& f = shape_of(s.inputs[1]);
      Eigen::Map<const RowMatrix<Scalar>> weights(v[static_cast<std::size_t>(s.inputs[1])].data(), f[0], f[1]);
      accumulate(s.inputs[0], weights.transpose() * dy);
      break;
    }
    case op::kAveragePool2D: case op::kMaxPool2D: {
      const auto& o = std::get<Pool2DOptions>(s.options);
      const auto& in = shape_of(s.inputs[0]);
      const int H = in[1], W = in[2], C = in[3];
      auto gh = window_geometry(H, o.filter_h, o.stride_h, 1, o.padding);
      auto gw = window_geometry(W, o.filter_w, o.stride_w, 1, o.padding);
      Vector dx = Vector::Zero(x.size());
      for (int oy = 0; oy < gh.out; ++oy) {
        for (int ox = 0; ox < gw.out; ++ox) {
          int count = 0;
          for (int ky = 0; ky < o.filter_h; ++ky) {
            int iy = oy * o.stride_h - gh.pad + ky;
            if (iy >= 0 && iy < H) {
              for (int kx = 0; kx < o.filter_w; ++kx) {
                int ix = ox * o.stride_w - gw.pad + kx;
                if (ix >= 0 && ix < W) ++count;
              }
            }
          }
          for (int c = 0; c < C; ++c) {
            auto g = dy[(oy * gw.out + ox) * C + c];
            if (s.opcode == op::kAveragePool2D) {
              g /= static_cast<Scalar>(std::max(count, 1));
            }
            bool routed = false;
            for (int ky = 0; ky < o.filter_h && !routed; ++ky) {
              int iy = oy * o.stride_h - gh.pad + ky;
              if (iy < 0 || iy >= H) continue;
              for (int kx = 0; kx < o.filter_w && !routed; ++kx) {
                int ix = ox * o.stride_w - gw.pad + kx;
                if (ix < 0 || ix >= W) continue;
                auto at = (iy * W + ix) * C + c;
                if (s.opcode == op::kAveragePool2D) {
                  dx[at] += g;
                } else if (x[at] == yv[(oy * gw.out + ox) * C + c]) {
                  dx[at] += g;  // first maximal element takes the gradient
                  routed = true;
                }
              }
            }
          }
        }
      }
      accumulate(s.inputs[0], dx);
      break;
    }
    case op::kAdd: {
      for (int k = 0; k < 2; ++k) {
        auto idx = s.inputs[static_cast<std::size_t>(k)];
        if (tensors_[static_cast<std::size_t>(idx)].is_constant) continue;
        Vector g = Vector::Zero(v[static_cast<std::size_t>(idx)].size());
        const auto& map = s.maps[static_cast<std::size_t>(k)];
        for (std::size_t i = 0; i < map.size(); ++i) g[map[i]] += dy[static_cast<Eigen::Index>(i)];
        accumulate(idx, g);
      }
      break;
    }
    case op::kMean: {
      Vector dx(x.size());
      for (std::size_t i = 0; i < s.maps[0].size(); ++i) dx[static_cast<Eigen::Index>(i)] = dy[s.maps[0][i]] / s.divisor;
      accumulate(s.inputs[0], dx);
      break;
    }
    case op::kPad: {
      Vector dx(x.size());
      for (std::size_t i = 0; i < s.maps[0].size(); ++i) dx[static_cast<Eigen::Index>(i)] = dy[s.maps[0][i]];
      accumulate(s.inputs[0], dx);
      break;
    }
    case op::kRelu: case op::kRelu6: case op::kReluN1To1: case op::kTanh: {
      Activation a = s.opcode == op::kRelu ? Activation::Relu
                     : s.opcode == op::kRelu6 ? Activation::Relu6
                     : s.opcode == op::kReluN1To1 ? Activation::ReluN1To1 : Activation::Tanh;
      accumulate(s.inputs[0], activation_backward(a, yv, dy));
      break;
    }
    case op::kLogistic:
      accumulate(s.inputs[0], (dy.array() * yv.array() * (Scalar(1) - yv.array())).matrix());
      break;
    case op::kSoftmax: {
      Scalar beta = Scalar(std::get_if<SoftmaxOptions>(&s.options) ? std::get<SoftmaxOptions>(s.options).beta : 1.0f);
      const int n = shape_of(s.output).back();
      Vector dx(x.size());
      for (Eigen::Index r = 0; r < x.size() / n; ++r) {
        auto yr = yv.segment(r * n, n);
        auto dr = dy.segment(r * n, n);
        dx.segment(r * n, n) = beta * (yr.array() * (dr.array() - dr.dot(yr))).matrix();
      }
      accumulate(s.inputs[0], dx);
      break;
    }
    default:
      accumulate(s.inputs[0], dy);
      break;
  }
}

template <typename Scalar>
std::vector<typename Network<Scalar>::Vector> Network<Scalar>::trace(const Tensor<Scalar>& x,
                                                                      Precision precision) const {
  check_input(x);
  std::vector<Vector> v(tensors_.size());
  for (std::size_t i = 0; i < tensors_.size(); ++i) {
    if (tensors_[i].is_constant) v[i] = tensors_[i].constant;
  }
  v[static_cast<std::size_t>(input_)] = x.data;
  const bool quant = precision == Precision::Quantized;
  if (quant) fake_quantize(input_, v[static_cast<std::size_t>(input_)]);
  for (const auto& s : steps_) {
    run_step(s, v);
    if (quant) fake_quantize(s.output, v[static_cast<std::size_t>(s.output)]);
  }
  return v;
}

template <typename Scalar>
Tensor<Scalar> Network<Scalar>::forward(const Tensor<Scalar>& x, Precision precision) const {
  auto v = trace(x, precision);
  Vector logits = logit_scale_ * v[static_cast<std::size_t>(logits_)];
  return Tensor<Scalar>({1, static_cast<int>(logits.size())}, std::move(logits));
}

template <typename Scalar>
int Network<Scalar>::predict(const Tensor<Scalar>& x, Precision precision) const {
  Eigen::Index best = 0;
  forward(x, precision).data.maxCoeff(&best);
  return static_cast<int>(best);
}

template <typename Scalar>
Tensor<Scalar> Network<Scalar>::input_gradient(const Tensor<Scalar>& x, const Vector& logit_adjoint) const {
  auto v = trace(x, Precision::Float);
  if (logit_adjoint.size() != v[static_cast<std::size_t>(logits_)].size()) {
    throw Error(ErrorCode::ShapeMismatch, "logit adjoint has wrong length");
  }
  std::vector<Vector> adj(tensors_.size());
  adj[static_cast<std::size_t>(logits_)] = logit_scale_ * logit_adjoint;
  for (auto it = steps_.rbegin(); it != steps_.rend(); ++it) backward_step(*it, v, adj);
  Tensor<Scalar> g(x.shape);
  if (adj[static_cast<std::size_t>(input_)].size() != 0) g.data = adj[static_cast<std::size_t>(input_)];
  return g;
}

template <typename Scalar>
LossGrad<Scalar> Network<Scalar>::loss_and_input_grad(const LabeledExample<Scalar>& example) const {
  auto logits = forward(example.x).data;
  if (example.y_true < 0 || example.y_true >= logits.size()) {
    throw Error(ErrorCode::InvalidArgument, "label out of range");
  }
  Scalar m = logits.maxCoeff();
  Scalar lse = m + std::log((logits.array() - m).exp().sum());
  Scalar loss = lse - logits[example.y_true];
  Vector dlogits = softmax<Scalar>(logits);
  dlogits[example.y_true] -= Scalar(1);
  return {loss, input_gradient(example.x, dlogits)};
}

template class Network<float>;
template class Network<double>;
template Vec<float> dequantize<float>(const ConstTensor&);
template Vec<double> dequantize<double>(const ConstTensor&);

}  // namespace modelprobe
