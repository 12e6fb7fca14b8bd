#pragma once

// Targeted-vs-blind transfer experiment: success rates, report rendering and
// the similarity/success correlation.

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "modelprobe/attacks.hpp"
#include "modelprobe/registry.hpp"

namespace modelprobe {

/// n successes out of m retained examples. P = n / m.
struct SuccessCount {
  std::size_t n = 0;
  std::size_t m = 0;
  double rate() const { return m == 0 ? 0.0 : static_cast<double>(n) / static_cast<double>(m); }
  friend bool operator==(const SuccessCount&, const SuccessCount&) = default;
};

enum class Arm { Targeted, Blind };

using OutcomeSink = std::function<void(AttackKind, Arm, std::size_t example_index, const AttackOutcome&)>;

/// Indices of examples the target classifies correctly (others are excluded
/// from every attack).
std::vector<std::size_t> retained_examples(const EngineModel& target, std::span<const LabeledExample<float>> examples);

/// Per-example configs are `AttackConfig::defaults(kind)` with the seed mixed
/// with the example index, unless `config` overrides them.
SuccessCount evaluate_attack(const EngineModel& target, const EngineModel& surrogate, AttackKind kind,
                             std::span<const LabeledExample<float>> examples,
                             const std::optional<AttackConfig>& config = std::nullopt, std::uint64_t seed = 0,
                             const OutcomeSink& sink = {}, Arm arm = Arm::Targeted);

struct ModelColumn {
  std::string target;
  std::optional<std::string> targeted_surrogate;
  std::optional<std::string> blind_surrogate;
  double similarity = 0.0;  // parametric similarity to the matched ancestor; 0 when absent
  std::size_t m = 0;
  std::vector<std::string> excluded;  // example ids dropped as initially misclassified
  friend bool operator==(const ModelColumn&, const ModelColumn&) = default;
};

struct EvalReport {
  std::uint64_t seed = 0;
  std::vector<AttackKind> kinds;
  std::vector<double> epsilons;  // one per kind
  std::vector<ModelColumn> models;
  // [kind][model]; an absent cell means that arm was skipped for the model
  std::vector<std::vector<std::optional<SuccessCount>>> targeted;
  std::vector<std::vector<std::optional<SuccessCount>>> blind;
  std::vector<std::string> notes;

  double model_average(std::size_t model, Arm arm) const;
  double attack_average(std::size_t kind, Arm arm) const;
  /// Mean over every present cell of one arm.
  double grand_average(Arm arm) const;

  std::string to_json() const;
  static EvalReport from_json(std::string_view text);
  friend bool operator==(const EvalReport&, const EvalReport&) = default;
};

struct TargetCase {
  std::string name;
  const ModelGraph* graph = nullptr;
  std::vector<LabeledExample<float>> examples;
  std::vector<std::string> example_ids;  // parallel to examples; defaults to indices
};

struct ExperimentOptions {
  std::vector<AttackKind> kinds{kAllAttackKinds.begin(), kAllAttackKinds.end()};
  std::uint64_t seed = 0;
  CompareOptions match = default_match_options();
  unsigned jobs = 1;
  /// Called once per attacked example; may run on worker threads.
  std::function<void(const std::string& target, AttackKind, Arm, std::size_t example, const AttackOutcome&)> sink;
};

/// Targeted surrogate = matched ancestor; blind surrogate = uniform draw
/// among the other registry entries, once per (target, seed). Targets with
/// no ancestor are skipped with a note; the blind arm is skipped when the
/// registry holds nothing else.
EvalReport targeted_vs_blind(std::span<const TargetCase> targets, const Registry& registry,
                             const ExperimentOptions& options = {});

/// Both arms on explicit surrogates (either may be null to skip that arm).
void evaluate_arms(EvalReport& report, const TargetCase& target, const EngineModel& target_net,
                   const EngineModel* targeted, const EngineModel* blind, const ExperimentOptions& options);

/// Standard Pearson coefficient; None when either series is constant.
std::optional<double> pearson(std::span<const double> xs, std::span<const double> ys);

struct CorrelationReport {
  std::vector<std::pair<double, double>> pairs;  // (similarity, average targeted success)
  std::optional<double> pcc;
  std::string to_csv() const;
};
CorrelationReport correlate(const EvalReport& report);

/// The results table: one row per attack, T/B cells per model plus the
/// average pair (2N + 2 cells), and a closing row of per-model averages.
struct ReportTable {
  struct Row {
    std::string label;
    std::string epsilon;
    std::vector<std::string> cells;
  };
  std::vector<std::string> header;  // 2N + 2 entries
  std::vector<Row> rows;
  Row average;
};
ReportTable report_table(const EvalReport& report);
std::string render_markdown(const EvalReport& report);

}  // namespace modelprobe
