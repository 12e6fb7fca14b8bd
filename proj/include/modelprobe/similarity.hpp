#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "modelprobe/tflite.hpp"

namespace modelprobe {

inline constexpr double kSimilarityThreshold = 0.8;

enum class MatchMode { Strict, Relaxed };

/// Strict compares (identifier, shape, dtype); Relaxed swaps the identifier
/// text for the opcode so renamed tensors still line up.
struct MatchPolicy {
  MatchMode mode = MatchMode::Strict;
};

std::string_view to_string(MatchMode mode);
MatchMode match_mode_from_string(std::string_view name);

bool units_match(const LayerUnit& a, const LayerUnit& b, MatchPolicy policy);

/// Longest common subsequence length under an arbitrary equality predicate.
/// O(|a|·|b|) time, O(|b|) memory.
template <typename T, typename Eq>
std::size_t lcs_length(std::span<const T> a, std::span<const T> b, Eq&& eq) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = eq(a[i - 1], b[j - 1]) ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

std::size_t lcs_length(std::span<const LayerUnit> a, std::span<const LayerUnit> b, MatchPolicy policy = {});

struct SimilarityScore {
  double structural = 0.0;
  std::optional<double> parametric;  // absent when structural < threshold
  std::size_t l_match = 0;
  std::size_t l_total = 0;
  std::size_t n_true = 0;
  std::size_t n_total = 0;

  friend bool operator==(const SimilarityScore&, const SimilarityScore&) = default;
};

struct CompareOptions {
  MatchPolicy policy;
  /// Absolute tolerance for parameter equality; 0 means exact.
  double tolerance = 0.0;
  double threshold = kSimilarityThreshold;
};

/// 2·L_match / L_total; two empty models score 1.0.
SimilarityScore structural_similarity(std::span<const LayerUnit> a, std::span<const LayerUnit> b,
                                      MatchPolicy policy = {});
SimilarityScore structural_similarity(const ModelGraph& a, const ModelGraph& b, MatchPolicy policy = {});

bool params_equal(const ParamVector& a, const ParamVector& b, double tolerance = 0.0);

/// Positional equality over the common prefix of two per-layer parameter lists.
std::vector<bool> aligned_param_equality(std::span<const ParamVector> a, std::span<const ParamVector> b,
                                         double tolerance = 0.0);
std::vector<bool> aligned_digest_equality(std::span<const Digest> a, std::span<const Digest> b);

/// Length of the longest run of consecutive `true` values.
std::size_t longest_true_run(const std::vector<bool>& flags);

/// Fills the parametric part of `score` from a positional equality sequence,
/// honoring the structural precondition.
SimilarityScore with_parametric(SimilarityScore score, const std::vector<bool>& equal_positions,
                                double threshold = kSimilarityThreshold);

/// Structural score, then (when it clears the threshold) N_True / N_total.
SimilarityScore parametric_similarity(const ModelGraph& a, const ModelGraph& b, const CompareOptions& options = {});
inline SimilarityScore compare_models(const ModelGraph& a, const ModelGraph& b, const CompareOptions& options = {}) {
  return parametric_similarity(a, b, options);
}

class SimilarityMatrix {
 public:
  SimilarityMatrix() = default;
  SimilarityMatrix(std::vector<std::string> names, CompareOptions options);

  std::size_t size() const { return names_.size(); }
  const std::vector<std::string>& names() const { return names_; }
  const CompareOptions& options() const { return options_; }

  const SimilarityScore& at(std::size_t i, std::size_t j) const { return cells_[i * size() + j]; }
  /// Sets (i, j) and its mirror.
  void set(std::size_t i, std::size_t j, const SimilarityScore& s);

  /// {models, policy, tolerance, threshold, scores: upper triangle}.
  std::string to_json() const;
  static SimilarityMatrix from_json(std::string_view text);
  std::string to_csv() const;

 private:
  std::vector<std::string> names_;
  CompareOptions options_;
  std::vector<SimilarityScore> cells_;
};

/// Upper triangle only, mirrored; `jobs` > 1 computes cells on worker threads.
SimilarityMatrix pairwise_matrix(std::span<const ModelGraph> models, const CompareOptions& options = {},
                                 unsigned jobs = 1);

/// Score of a model against itself.
SimilarityScore self_score(std::size_t layer_count);

}  // namespace modelprobe
