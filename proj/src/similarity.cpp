#include "modelprobe/similarity.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <sstream>
#include <thread>

#include "json.hpp"
#include "modelprobe/error.hpp"

namespace modelprobe {

std::string_view to_string(MatchMode mode) { return mode == MatchMode::Strict ? "strict" : "relaxed"; }

MatchMode match_mode_from_string(std::string_view name) {
  if (name == "strict") return MatchMode::Strict;
  if (name == "relaxed") return MatchMode::Relaxed;
  throw Error(ErrorCode::InvalidArgument, "unknown match policy: " + std::string(name));
}

bool units_match(const LayerUnit& a, const LayerUnit& b, MatchPolicy policy) {
  if (a.shape != b.shape || a.dtype != b.dtype) return false;
  return policy.mode == MatchMode::Strict ? a.identifier == b.identifier : a.opcode == b.opcode;
}

std::size_t lcs_length(std::span<const LayerUnit> a, std::span<const LayerUnit> b, MatchPolicy policy) {
  return lcs_length(a, b, [policy](const LayerUnit& x, const LayerUnit& y) { return units_match(x, y, policy); });
}

SimilarityScore structural_similarity(std::span<const LayerUnit> a, std::span<const LayerUnit> b,
                                      MatchPolicy policy) {
  SimilarityScore s;
  s.l_total = a.size() + b.size();
  s.l_match = lcs_length(a, b, policy);
  s.structural = s.l_total == 0 ? 1.0 : 2.0 * static_cast<double>(s.l_match) / static_cast<double>(s.l_total);
  return s;
}

SimilarityScore structural_similarity(const ModelGraph& a, const ModelGraph& b, MatchPolicy policy) {
  return structural_similarity(a.layers, b.layers, policy);
}

bool params_equal(const ParamVector& a, const ParamVector& b, double tolerance) {
  if (a.tensors.size() != b.tensors.size()) return false;
  for (std::size_t k = 0; k < a.tensors.size(); ++k) {
    const auto& x = a.tensors[k];
    const auto& y = b.tensors[k];
    if (x.tflite_type != y.tflite_type || x.count() != y.count() || x.quantization != y.quantization) return false;
    auto xv = x.values();
    auto yv = y.values();
    for (std::size_t i = 0; i < xv.size(); ++i) {
      if (!(std::abs(xv[i] - yv[i]) <= tolerance)) return false;
    }
  }
  return true;
}

std::vector<bool> aligned_param_equality(std::span<const ParamVector> a, std::span<const ParamVector> b,
                                         double tolerance) {
  auto n = std::min(a.size(), b.size());
  std::vector<bool> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = params_equal(a[i], b[i], tolerance);
  return out;
}

std::vector<bool> aligned_digest_equality(std::span<const Digest> a, std::span<const Digest> b) {
  auto n = std::min(a.size(), b.size());
  std::vector<bool> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = a[i] == b[i];
  return out;
}

std::size_t longest_true_run(const std::vector<bool>& flags) {
  std::size_t best = 0, run = 0;
  for (bool f : flags) {
    run = f ? run + 1 : 0;
    best = std::max(best, run);
  }
  return best;
}

SimilarityScore with_parametric(SimilarityScore score, const std::vector<bool>& equal_positions, double threshold) {
  score.n_true = 0;
  score.n_total = 0;
  score.parametric.reset();
  if (score.structural < threshold) return score;
  score.n_total = equal_positions.size();
  score.n_true = longest_true_run(equal_positions);
  score.parametric = score.n_total == 0 ? 1.0
                                        : static_cast<double>(score.n_true) / static_cast<double>(score.n_total);
  return score;
}

SimilarityScore parametric_similarity(const ModelGraph& a, const ModelGraph& b, const CompareOptions& options) {
  auto score = structural_similarity(a, b, options.policy);
  if (score.structural < options.threshold) return with_parametric(score, {}, options.threshold);
  return with_parametric(score, aligned_param_equality(a.params, b.params, options.tolerance), options.threshold);
}

SimilarityScore self_score(std::size_t layer_count) {
  SimilarityScore s;
  s.structural = 1.0;
  s.parametric = 1.0;
  s.l_match = layer_count;
  s.l_total = 2 * layer_count;
  s.n_true = layer_count;
  s.n_total = layer_count;
  return s;
}

SimilarityMatrix::SimilarityMatrix(std::vector<std::string> names, CompareOptions options)
    : names_(std::move(names)), options_(options), cells_(names_.size() * names_.size()) {}

void SimilarityMatrix::set(std::size_t i, std::size_t j, const SimilarityScore& s) {
  cells_[i * size() + j] = s;
  cells_[j * size() + i] = s;
}

namespace {

nlohmann::json score_json(const SimilarityScore& s) {
  nlohmann::json j;
  j["structural"] = s.structural;
  j["parametric"] = s.parametric ? nlohmann::json(*s.parametric) : nlohmann::json(nullptr);
  j["l_match"] = s.l_match;
  j["l_total"] = s.l_total;
  j["n_true"] = s.n_true;
  j["n_total"] = s.n_total;
  return j;
}

SimilarityScore score_from_json(const nlohmann::json& j) {
  SimilarityScore s;
  s.structural = j.at("structural").get<double>();
  if (!j.at("parametric").is_null()) s.parametric = j.at("parametric").get<double>();
  s.l_match = j.at("l_match").get<std::size_t>();
  s.l_total = j.at("l_total").get<std::size_t>();
  s.n_true = j.at("n_true").get<std::size_t>();
  s.n_total = j.at("n_total").get<std::size_t>();
  return s;
}

}  // namespace

std::string SimilarityMatrix::to_json() const {
  nlohmann::json doc;
  doc["models"] = names_;
  doc["policy"] = to_string(options_.policy.mode);
  doc["tolerance"] = options_.tolerance;
  doc["threshold"] = options_.threshold;
  auto scores = nlohmann::json::array();
  for (std::size_t i = 0; i < size(); ++i) {
    for (std::size_t j = i; j < size(); ++j) {
      auto cell = score_json(at(i, j));
      cell["i"] = i;
      cell["j"] = j;
      scores.push_back(std::move(cell));
    }
  }
  doc["scores"] = std::move(scores);
  return doc.dump(1);
}

SimilarityMatrix SimilarityMatrix::from_json(std::string_view text) {
  try {
    auto doc = nlohmann::json::parse(text);
    CompareOptions options;
    options.policy.mode = match_mode_from_string(doc.at("policy").get<std::string>());
    options.tolerance = doc.at("tolerance").get<double>();
    options.threshold = doc.at("threshold").get<double>();
    SimilarityMatrix m(doc.at("models").get<std::vector<std::string>>(), options);
    for (const auto& cell : doc.at("scores")) {
      auto i = cell.at("i").get<std::size_t>();
      auto j = cell.at("j").get<std::size_t>();
      if (i >= m.size() || j >= m.size()) throw Error(ErrorCode::InvalidArgument, "score index out of range");
      m.set(i, j, score_from_json(cell));
    }
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::InvalidArgument, std::string("bad similarity matrix JSON: ") + e.what());
  }
}

std::string SimilarityMatrix::to_csv() const {
  std::ostringstream out;
  out.precision(17);
  out << "i,j,model_i,model_j,structural,parametric,l_match,l_total,n_true,n_total\n";
  for (std::size_t i = 0; i < size(); ++i) {
    for (std::size_t j = i; j < size(); ++j) {
      const auto& s = at(i, j);
      out << i << ',' << j << ',' << names_[i] << ',' << names_[j] << ',' << s.structural << ',';
      if (s.parametric) out << *s.parametric;
      out << ',' << s.l_match << ',' << s.l_total << ',' << s.n_true << ',' << s.n_total << '\n';
    }
  }
  return out.str();
}

SimilarityMatrix pairwise_matrix(std::span<const ModelGraph> models, const CompareOptions& options, unsigned jobs) {
  std::vector<std::string> names;
  names.reserve(models.size());
  for (const auto& m : models) names.push_back(m.meta.name);
  SimilarityMatrix matrix(std::move(names), options);

  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  for (std::size_t i = 0; i < models.size(); ++i) {
    matrix.set(i, i, self_score(models[i].layers.size()));
    for (std::size_t j = i + 1; j < models.size(); ++j) pairs.emplace_back(i, j);
  }
  std::vector<SimilarityScore> results(pairs.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (auto k = next++; k < pairs.size(); k = next++) {
      results[k] = compare_models(models[pairs[k].first], models[pairs[k].second], options);
    }
  };
  jobs = std::max(1u, std::min<unsigned>(jobs, static_cast<unsigned>(pairs.size())));
  if (jobs <= 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (unsigned t = 0; t < jobs; ++t) pool.emplace_back(worker);
  }
  for (std::size_t k = 0; k < pairs.size(); ++k) matrix.set(pairs[k].first, pairs[k].second, results[k]);
  return matrix;
}

}  // namespace modelprobe
