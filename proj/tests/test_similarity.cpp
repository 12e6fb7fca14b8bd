#include <gtest/gtest.h>

#include <random>

#include "modelprobe/similarity.hpp"
#include "support/oracles.hpp"
#include "support/test_util.hpp"

using namespace modelprobe;

using oracle::unit;

TEST(Lcs, MatchesBruteForceOnRandomPairs) {
  std::mt19937_64 rng(7);
  std::uniform_int_distribution<std::size_t> len(0, 12);
  for (int trial = 0; trial < 1000; ++trial) {
    auto a = oracle::random_sequence(rng, len(rng));
    auto b = oracle::random_sequence(rng, len(rng));
    for (auto mode : {MatchMode::Strict, MatchMode::Relaxed}) {
      MatchPolicy p{mode};
      ASSERT_EQ(lcs_length(a, b, p), oracle::brute_force_lcs(a, b, p)) << "trial " << trial;
    }
  }
}

TEST(Structural, WorkedExamples) {
  std::vector<LayerUnit> a{unit("A"), unit("B"), unit("C"), unit("D")};
  std::vector<LayerUnit> b{unit("A"), unit("B"), unit("X"), unit("D")};
  auto s = structural_similarity(a, b);
  EXPECT_EQ(s.l_match, 3u);
  EXPECT_EQ(s.l_total, 8u);
  EXPECT_EQ(s.structural, 0.75);

  std::vector<LayerUnit> base;
  for (int i = 0; i < 66; ++i) base.push_back(unit("MobilenetV1/layer_" + std::to_string(i)));
  auto tuned = base;
  tuned.push_back(unit("classifier/logits"));
  auto t = structural_similarity(base, tuned);
  EXPECT_EQ(t.l_match, 66u);
  EXPECT_EQ(t.structural, 132.0 / 133.0);
  EXPECT_NEAR(t.structural, 0.9925, 5e-5);

  EXPECT_EQ(structural_similarity(std::vector<LayerUnit>{}, std::vector<LayerUnit>{}).structural, 1.0);
  EXPECT_EQ(structural_similarity(a, std::vector<LayerUnit>{}).structural, 0.0);
}

TEST(Structural, RelaxedIgnoresIdentifiers) {
  std::vector<LayerUnit> a{unit("x/conv", {1, 8, 8, 4}, DType::Float32, 3), unit("x/fc")};
  std::vector<LayerUnit> b{unit("y/conv", {1, 8, 8, 4}, DType::Float32, 3), unit("y/fc")};
  EXPECT_EQ(structural_similarity(a, b, {MatchMode::Strict}).structural, 0.0);
  EXPECT_EQ(structural_similarity(a, b, {MatchMode::Relaxed}).structural, 1.0);
  b[1].dtype = DType::UInt8;
  EXPECT_EQ(structural_similarity(a, b, {MatchMode::Relaxed}).structural, 0.5);
}

TEST(Parametric, LongestRunOverTotal) {
  SimilarityScore s;
  s.structural = 0.9;
  auto p = with_parametric(s, {true, true, false, true});
  EXPECT_EQ(p.n_true, 2u);
  EXPECT_EQ(p.n_total, 4u);
  EXPECT_EQ(*p.parametric, 0.5);

  s.structural = 0.5;
  EXPECT_FALSE(with_parametric(s, {true, true}).parametric.has_value());

  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 500; ++trial) {
    std::vector<bool> f(rng() % 15);
    for (std::size_t i = 0; i < f.size(); ++i) f[i] = rng() % 3 != 0;
    ASSERT_EQ(longest_true_run(f), oracle::brute_force_run(f));
  }
}

TEST(Parametric, CorpusLineage) {
  auto base_a = testutil::corpus_graph("base_a");
  auto fe_a = testutil::corpus_graph("fe_a");
  auto s = compare_models(base_a, fe_a);
  EXPECT_EQ(s.structural, 14.0 / 16.0);
  ASSERT_TRUE(s.parametric);
  EXPECT_EQ(*s.parametric, 1.0);

  auto base_c = testutil::corpus_graph("base_c");
  auto ft_c = testutil::corpus_graph("ft_c");
  EXPECT_EQ(compare_models(base_c, ft_c).structural, 0.0);  // renamed tensors under the strict policy
  CompareOptions relaxed;
  relaxed.policy.mode = MatchMode::Relaxed;
  auto r = compare_models(base_c, ft_c, relaxed);
  EXPECT_EQ(r.structural, 1.0);
  EXPECT_EQ(*r.parametric, 7.0 / 9.0);
}

TEST(Parametric, ToleranceAdmitsSmallPerturbations) {
  auto def = fixture::shared_corpus().model("base_b").def;
  auto a = testutil::graph_of(def, "a");
  auto& w = def.tensors[static_cast<std::size_t>(def.ops[0].inputs[1])];
  auto vals = std::vector<float>(w.values.begin(), w.values.end());
  vals[0] += 1e-4f;
  w.data = fixture::float_bytes(vals);
  auto b = testutil::graph_of(def, "b");
  EXPECT_FALSE(params_equal(a.params[0], b.params[0]));
  EXPECT_TRUE(params_equal(a.params[0], b.params[0], 1e-3));
  EXPECT_NE(a.params[0].digest(), b.params[0].digest());
  EXPECT_EQ(*compare_models(a, b).parametric, 5.0 / 6.0);
  CompareOptions loose;
  loose.tolerance = 1e-3;
  EXPECT_EQ(*compare_models(a, b, loose).parametric, 1.0);
}

TEST(Matrix, SelfScoresSymmetryAndJson) {
  const auto& corpus = fixture::shared_corpus();
  std::vector<ModelGraph> graphs;
  for (const auto& m : corpus.models) graphs.push_back(testutil::corpus_graph(m.name));
  auto serial = pairwise_matrix(graphs, {}, 1);
  auto parallel = pairwise_matrix(graphs, {}, 4);
  for (std::size_t i = 0; i < graphs.size(); ++i) {
    EXPECT_EQ(serial.at(i, i).structural, 1.0);
    EXPECT_EQ(serial.at(i, i).parametric, 1.0);
    for (std::size_t j = 0; j < graphs.size(); ++j) {
      EXPECT_EQ(compare_models(graphs[i], graphs[j]), compare_models(graphs[j], graphs[i]));
      EXPECT_EQ(serial.at(i, j), parallel.at(i, j));
    }
  }
  auto back = SimilarityMatrix::from_json(serial.to_json());
  EXPECT_EQ(back.names(), serial.names());
  for (std::size_t i = 0; i < graphs.size(); ++i)
    for (std::size_t j = 0; j < graphs.size(); ++j) EXPECT_EQ(back.at(i, j), serial.at(i, j));
}
