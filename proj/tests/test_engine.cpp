#include <gtest/gtest.h>

#include <functional>

#include "modelprobe/engine.hpp"
#include "support/oracles.hpp"
#include "support/test_util.hpp"
#include "tflite_builder.hpp"

using namespace modelprobe;
using fixture::NetBuilder;
namespace opc = fixture::opc;

namespace {

Tensor<double> random_input(std::mt19937_64& rng, const std::vector<int>& shape) {
  Tensor<double> t(shape);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (Eigen::Index i = 0; i < t.size(); ++i) t.data[i] = u(rng);
  return t;
}

std::vector<double> to_vector(const Tensor<double>& t) { return {t.data.data(), t.data.data() + t.size()}; }

void expect_gradients(const fixture::ModelDef& def, std::uint64_t seed = 1, int trials = 3) {
  auto check = oracle::gradient_check(def, seed, trials);
  EXPECT_GT(check.total.checked, 0u);
  EXPECT_LE(check.worst_relative, oracle::kRelTol) << "worst coordinate " << check.total.worst;
  EXPECT_LE(check.total.skipped * 5, check.total.checked + check.total.skipped)
      << "too many probes leave their linear region";
}

std::vector<float> weights(std::mt19937_64& rng, std::size_t n) { return fixture::normal(rng, n, 0.5); }

// Input [1,5,5,2] -> op under test -> flatten to logits.
template <typename Body>
fixture::ModelDef single_op(Body&& body, std::vector<int> in_shape = {1, 5, 5, 2}) {
  std::mt19937_64 rng(5);
  NetBuilder b("op/");
  int x = b.input(in_shape);
  int y = body(b, x, rng);
  int count = 1;
  for (int d : b.shape(y)) count *= d;
  if (b.shape(y).size() != 2) b.reshape(y, "flat", {1, count});
  return b.finish();
}

}  // namespace

TEST(EngineForward, MatchesReferenceInterpreterOnCorpus) {
  const auto& corpus = fixture::shared_corpus();
  for (const auto& m : corpus.models) {
    if (m.method == "quantized") continue;
    SCOPED_TRACE(m.name);
    auto g = testutil::corpus_graph(m.name);
    auto net_d = Network<double>::from_graph(g);
    auto net_f = Network<float>::from_graph(g);
    EXPECT_FALSE(net_d.quantized());
    EXPECT_EQ(net_d.class_count(), fixture::kClasses);
    for (std::size_t i = 0; i < 5; ++i) {
      const auto& x = corpus.calibration[i];
      auto ref = fixture::reference_forward(m.def, x);
      auto tx = testutil::image(x);
      auto pd = softmax<double>(net_d.forward(tx.cast<double>()).data);
      auto pf = softmax<float>(net_f.forward(tx).data);
      for (int k = 0; k < fixture::kClasses; ++k) {
        EXPECT_NEAR(pd[k], ref[static_cast<std::size_t>(k)], 1e-6);
        EXPECT_NEAR(pf[k], ref[static_cast<std::size_t>(k)], 1e-4);
      }
      EXPECT_EQ(net_f.predict(tx), fixture::argmax(ref));
    }
  }
}

TEST(EngineForward, QuantizedVariantKeepsDecisions) {
  const auto& corpus = fixture::shared_corpus();
  auto fnet = Network<float>::from_graph(testutil::corpus_graph("base_a"));
  auto qnet = Network<float>::from_graph(testutil::corpus_graph("base_a_uint8"));
  ASSERT_TRUE(qnet.quantized());
  auto [lo, hi] = qnet.input_range();
  EXPECT_NEAR(lo, 0.0, 1e-9);
  EXPECT_NEAR(hi, 1.0, 1e-6);
  std::mt19937_64 rng(2024);
  int agree = 0;
  for (int i = 0; i < 100; ++i) {
    auto x = testutil::image(fixture::smooth_image(rng));
    agree += fnet.predict(x) == qnet.predict(x, Precision::Quantized) ? 1 : 0;
  }
  EXPECT_GE(agree, 95);
}

TEST(EngineForward, SoftmaxBetaScalesLogits) {
  auto def = single_op([](NetBuilder& b, int x, std::mt19937_64& rng) {
    int w = b.constant("w", {3, 50}, weights(rng, 150));
    int bias = b.constant("b", {3}, {0.1f, 0.2f, 0.3f});
    int f = b.fully_connected(b.reshape(x, "r", {1, 50}), "fc", w, bias, fixture::kNone);
    return b.softmax(f, "sm", 2.5f);
  });
  auto net = Network<double>::from_graph(testutil::graph_of(def));
  std::mt19937_64 rng(1);
  auto x = random_input(rng, {1, 5, 5, 2});
  auto logits = net.forward(x);
  auto ref = fixture::reference_forward(def, to_vector(x));
  auto p = softmax<double>(logits.data);
  for (int k = 0; k < 3; ++k) EXPECT_NEAR(p[k], ref[static_cast<std::size_t>(k)], 1e-12);
}

TEST(EngineForward, Errors) {
  auto def = fixture::shared_corpus().model("base_b").def;
  auto gather = def;
  gather.ops[1].opcode = opc::kGather;
  EXPECT_EQ(testutil::error_code_of([&] { Network<float>::from_graph(testutil::graph_of(gather)); }),
            ErrorCode::UnsupportedOp);

  auto bad_shape = def;
  bad_shape.tensors[static_cast<std::size_t>(bad_shape.ops[0].outputs[0])].shape[1] = 15;
  EXPECT_EQ(testutil::error_code_of([&] { Network<float>::from_graph(testutil::graph_of(bad_shape)); }),
            ErrorCode::ShapeMismatch);

  auto net = Network<float>::from_graph(testutil::graph_of(def));
  EXPECT_EQ(testutil::error_code_of([&] { net.forward(TensorF({1, 8, 8, 3})); }), ErrorCode::ShapeMismatch);
}

// ---- gradients --------------------------------------------------------------

class OpGradient : public ::testing::TestWithParam<oracle::OpFixture> {};

TEST_P(OpGradient, MatchesCentralDifferences) { expect_gradients(GetParam().def); }

INSTANTIATE_TEST_SUITE_P(EveryOp, OpGradient, ::testing::ValuesIn(oracle::op_fixtures()),
                         [](const auto& info) { return info.param.name; });

TEST(EngineGradient, ComposedCorpusCnns) {
  for (const char* name : {"base_a", "base_b", "base_c"}) {
    SCOPED_TRACE(name);
    expect_gradients(fixture::shared_corpus().model(name).def, 9, 2);
  }
}

TEST(EngineGradient, CrossEntropyLoss) {
  auto net = Network<double>::from_graph(testutil::corpus_graph("base_c"));
  std::mt19937_64 rng(4);
  auto x = random_input(rng, net.input_shape());
  LabeledExample<double> ex{x, 2};
  auto lg = net.loss_and_input_grad(ex);
  auto loss = [&](const Tensor<double>& z) {
    auto l = net.forward(z).data;
    double m = l.maxCoeff();
    return m + std::log((l.array() - m).exp().sum()) - l[2];
  };
  EXPECT_NEAR(lg.loss, loss(x), 1e-12);
  int checked = 0;
  for (Eigen::Index i = 0; i < x.size(); i += 7) {
    auto xp = x, xm = x;
    xp.data[i] += oracle::kStep;
    xm.data[i] -= oracle::kStep;
    double fp = loss(xp), fm = loss(xm);
    if (std::abs(fp - 2 * lg.loss + fm) > 1e-5) continue;
    double fd = (fp - fm) / (2 * oracle::kStep);
    EXPECT_LE(std::abs(fd - lg.grad.data[i]), oracle::kRelTol * std::max(std::abs(fd), std::abs(lg.grad.data[i])) + 1e-8);
    ++checked;
  }
  EXPECT_GT(checked, 50);
}
