// One PASS/FAIL line per acceptance criterion; exit status 1 if any fails.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <random>
#include <set>
#include <string>

#include "corpus.hpp"
#include "modelprobe/harness.hpp"
#include "modelprobe/tflite.hpp"
#include "oracles.hpp"

using namespace modelprobe;
using Clock = std::chrono::steady_clock;

namespace {

struct Verdict {
  bool pass = false;
  std::string detail;
};

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

ModelGraph graph(const std::string& name) {
  return parse_model(fixture::shared_corpus().model(name).bytes, name + ".tflite");
}

std::vector<LabeledExample<float>> examples(const std::string& target) {
  std::vector<LabeledExample<float>> out;
  for (const auto& e : fixture::shared_corpus().examples.at(target)) {
    TensorF x({1, fixture::kSide, fixture::kSide, fixture::kChannels});
    for (std::size_t i = 0; i < e.x.size(); ++i) x.data[static_cast<Eigen::Index>(i)] = static_cast<float>(e.x[i]);
    out.push_back({std::move(x), e.label});
  }
  return out;
}

Verdict lcs_oracle() {
  auto t0 = Clock::now();
  std::mt19937_64 rng(2024);
  std::uniform_int_distribution<std::size_t> len(0, 12);
  int mismatches = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    auto a = oracle::random_sequence(rng, len(rng));
    auto b = oracle::random_sequence(rng, len(rng));
    for (auto mode : {MatchMode::Strict, MatchMode::Relaxed}) {
      MatchPolicy p{mode};
      mismatches += lcs_length(a, b, p) != oracle::brute_force_lcs(a, b, p);
    }
  }
  double dt = seconds_since(t0);
  return {mismatches == 0 && dt < 30.0, fmt("1000 pairs x 2 policies, %d mismatches, %.2f s (limit 30 s)", mismatches, dt)};
}

Verdict worked_examples() {
  using oracle::unit;
  std::vector<LayerUnit> a{unit("A"), unit("B"), unit("C"), unit("D")};
  std::vector<LayerUnit> b{unit("A"), unit("B"), unit("X"), unit("D")};
  double s1 = structural_similarity(a, b).structural;

  std::vector<LayerUnit> base;
  for (int i = 0; i < 66; ++i) base.push_back(unit("MobilenetV1/layer_" + std::to_string(i)));
  auto tuned = base;
  tuned.push_back(unit("classifier/logits"));
  double s2 = structural_similarity(base, tuned).structural;

  SimilarityScore s;
  s.structural = 0.9;
  double p = *with_parametric(s, {true, true, false, true}).parametric;

  bool ok = s1 == 6.0 / 8.0 && s2 == 132.0 / 133.0 && std::abs(s2 - 0.9925) < 5e-5 && p == 2.0 / 4.0;
  return {ok, fmt("structural %.17g (want 0.75), %.17g (want 132/133), parametric %.17g (want 0.5)", s1, s2, p)};
}

Verdict self_similarity() {
  const auto& corpus = fixture::shared_corpus();
  std::vector<ModelGraph> graphs;
  for (const auto& m : corpus.models) graphs.push_back(graph(m.name));
  int bad_self = 0, asymmetric = 0, pairs = 0;
  for (auto mode : {MatchMode::Strict, MatchMode::Relaxed}) {
    CompareOptions o;
    o.policy.mode = mode;
    for (std::size_t i = 0; i < graphs.size(); ++i) {
      auto self = compare_models(graphs[i], graphs[i], o);
      bad_self += !(self.structural == 1.0 && self.parametric && *self.parametric == 1.0);
      for (std::size_t j = i + 1; j < graphs.size(); ++j, ++pairs) {
        auto ab = compare_models(graphs[i], graphs[j], o), ba = compare_models(graphs[j], graphs[i], o);
        asymmetric += !(ab.structural == ba.structural && ab.parametric == ba.parametric);
      }
    }
  }
  return {bad_self == 0 && asymmetric == 0,
          fmt("%zu models, %d not (1,1) with themselves; %d of %d pairs asymmetric", graphs.size(), bad_self, asymmetric,
              pairs)};
}

Verdict feature_extraction() {
  std::vector<Fingerprint> fps;
  for (const auto& b : fixture::shared_corpus().bases) fps.push_back(make_fingerprint(graph(b), b, "image"));
  Registry registry(std::move(fps));
  bool ok = true;
  std::string detail;
  for (const auto& [target, ancestor] : {std::pair{"fe_a", "base_a"}, std::pair{"fe_b", "base_b"}}) {
    auto m = match_pretrained(graph(target), registry);
    double p = m.score.parametric.value_or(0.0);
    ok = ok && m.tuning == TuningClass::FeatureExtraction && m.best == ancestor && p > 0.95;
    detail += fmt("%s -> %s %s (parametric %.4f); ", target, m.best.value_or("none").c_str(),
                  std::string(to_string(m.tuning)).c_str(), p);
  }
  return {ok, detail + "need FeatureExtraction, parametric > 0.95"};
}

Verdict gradients() {
  int failed = 0, nets = 0;
  double worst = 0.0;
  std::string which;
  auto run = [&](const std::string& name, const fixture::ModelDef& def, std::uint64_t seed, int trials) {
    auto c = oracle::gradient_check(def, seed, trials);
    ++nets;
    worst = std::max(worst, c.worst_relative);
    if (!c.ok()) ++failed, which += " " + name;
  };
  for (const auto& f : oracle::op_fixtures()) run(f.name, f.def, 1, 3);
  for (const char* name : {"base_a", "base_b", "base_c"}) run(name, fixture::shared_corpus().model(name).def, 9, 2);
  return {failed == 0, fmt("%d networks (ops + 3 CNNs), worst relative error %.2e (limit 1e-4), %d failed", nets, worst,
                           failed) + which};
}

Verdict attack_budgets() {
  auto surrogate = EngineModel::from_graph(graph("base_a"));
  auto target = EngineModel::from_graph(graph("fe_a"));
  const auto exs = examples("fe_a");
  int runs = 0, violations = 0;
  for (auto kind : kAllAttackKinds)
    for (const auto& ex : exs)
      for (std::uint64_t seed : {0u, 1u, 2u}) {
        auto cfg = AttackConfig::defaults(kind, seed);
        auto o = run_attack(surrogate, target, ex, cfg);
        ++runs;
        violations += !oracle::respects_budget(oracle::measure(ex.x, o.x_adv), kind, cfg.budget());
      }
  return {runs == 330 && violations == 0, fmt("%d runs (11 kinds x 10 examples x 3 seeds), %d violations", runs, violations)};
}

Verdict louvain() {
  auto planted = detect_communities(oracle::two_cliques_and_bridge());
  bool split = std::set<int>(planted.begin(), planted.end()).size() == 2 && planted[0] != planted[5];
  for (std::size_t i = 1; i < 5; ++i) split = split && planted[i] == planted[0] && planted[i + 5] == planted[5];

  std::mt19937_64 rng(11);
  int worse = 0;
  for (int trial = 0; trial < 100; ++trial) {
    auto g = oracle::random_graph(rng);
    auto p = detect_communities(g, static_cast<std::uint64_t>(trial));
    Partition singletons(g.nodes.size());
    for (std::size_t i = 0; i < singletons.size(); ++i) singletons[i] = static_cast<int>(i);
    worse += oracle::modularity(g.nodes.size(), g.edges, p) + 1e-12 < oracle::modularity(g.nodes.size(), g.edges, singletons);
  }
  return {split && worse == 0, fmt("planted graph split into the two cliques: %s; %d of 100 random graphs below singletons",
                                   split ? "yes" : "no", worse)};
}

struct Experiment {
  EvalReport report;
  double seconds = 0.0;
};

const Experiment& experiment() {
  static const Experiment e = [] {
    const auto& corpus = fixture::shared_corpus();
    std::vector<ModelGraph> graphs;
    for (const auto& t : corpus.targets) graphs.push_back(graph(t));
    std::vector<TargetCase> cases;
    for (std::size_t i = 0; i < corpus.targets.size(); ++i) cases.push_back({corpus.targets[i], &graphs[i], examples(corpus.targets[i])});
    std::vector<Fingerprint> fps;
    for (const auto& b : corpus.bases) fps.push_back(make_fingerprint(graph(b), b, "image"));
    ExperimentOptions o;
    o.seed = 0;
    o.jobs = 1;
    auto t0 = Clock::now();
    Experiment out;
    out.report = targeted_vs_blind(cases, Registry(std::move(fps)), o);
    out.seconds = seconds_since(t0);
    return out;
  }();
  return e;
}

Verdict replication() {
  const auto& [r, dt] = experiment();
  double t = r.grand_average(Arm::Targeted), b = r.grand_average(Arm::Blind);
  int ahead = 0;
  std::string per;
  for (std::size_t m = 0; m < r.models.size(); ++m) {
    double tm = r.model_average(m, Arm::Targeted), bm = r.model_average(m, Arm::Blind);
    ahead += tm > bm;
    per += fmt(" %s %.3f/%.3f", r.models[m].target.c_str(), tm, bm);
  }
  bool ok = r.models.size() >= 4 && t >= 2.0 * b && ahead >= 3 && dt < 600.0;
  return {ok, fmt("targeted %.3f vs blind %.3f (need >= 2x), T > B on %d of %zu;", t, b, ahead, r.models.size()) + per +
                  fmt("; %.1f s on one thread (limit 600 s)", dt)};
}

Verdict correlation() {
  auto c = correlate(experiment().report);
  return {c.pcc && *c.pcc > 0.0, c.pcc ? fmt("pcc %.4f over %zu targets", *c.pcc, c.pairs.size()) : "pcc undefined"};
}

Verdict rate_exactness() {
  const auto& r = experiment().report;
  int cells = 0, bad = 0;
  for (std::size_t k = 0; k < r.kinds.size(); ++k)
    for (std::size_t m = 0; m < r.models.size(); ++m)
      for (const auto* grid : {&r.targeted, &r.blind}) {
        const auto& cell = (*grid)[k][m];
        if (!cell) continue;
        ++cells;
        double pm = cell->rate() * static_cast<double>(cell->m);
        bad += !(cell->m == r.models[m].m && std::abs(pm - static_cast<double>(cell->n)) < 1e-9 &&
                 std::llround(pm) == static_cast<long long>(cell->n));
      }
  return {cells > 0 && bad == 0, fmt("%d cells, %d with P*m != n", cells, bad)};
}

}  // namespace

int main() {
  const std::vector<std::pair<const char*, std::function<Verdict()>>> criteria{
      {"lcs-oracle", lcs_oracle},
      {"worked-examples", worked_examples},
      {"self-similarity", self_similarity},
      {"feature-extraction", feature_extraction},
      {"gradients", gradients},
      {"attack-budgets", attack_budgets},
      {"louvain", louvain},
      {"targeted-vs-blind", replication},
      {"similarity-success-correlation", correlation},
      {"success-rate-exactness", rate_exactness},
  };
  int failures = 0;
  for (const auto& [name, check] : criteria) {
    Verdict v;
    try {
      v = check();
    } catch (const std::exception& e) {
      v = {false, std::string("threw: ") + e.what()};
    }
    failures += !v.pass;
    std::printf("%s %s: %s\n", v.pass ? "PASS" : "FAIL", name, v.detail.c_str());
    std::fflush(stdout);
  }
  return failures == 0 ? 0 : 1;
}
