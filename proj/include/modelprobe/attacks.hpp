#pragma once

// Adversarial example generation. Every kind crafts x_adv on a surrogate
// network and judges success on a (possibly different) target network.

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>

#include "modelprobe/engine.hpp"

namespace modelprobe {

enum class AttackKind {
  FGSM,
  BIM_L2,
  BIM_Linf,
  PGD_L2,
  PGD_Linf,
  DeepFool_L2,
  NewtonFool,
  DDN,
  Inversion,
  SaltPepper,
  Boundary,
};

// Report row order.
inline constexpr std::array<AttackKind, 11> kAllAttackKinds = {
    AttackKind::Boundary, AttackKind::DDN,    AttackKind::DeepFool_L2, AttackKind::FGSM,
    AttackKind::Inversion, AttackKind::BIM_L2, AttackKind::PGD_L2,      AttackKind::BIM_Linf,
    AttackKind::PGD_Linf,  AttackKind::NewtonFool, AttackKind::SaltPepper,
};

/// Budget geometry of a kind. SaltPepper's budget counts changed pixels.
enum class NormKind { L2, Linf, L0 };

std::string_view to_string(AttackKind kind);
/// Accepts the enum spelling in any letter case.
AttackKind attack_kind_from_string(std::string_view name);
/// Row label used in reports ("Salt and Pepper Noise Attack", ...).
std::string_view display_name(AttackKind kind);

NormKind norm_of(AttackKind kind);
double default_epsilon(AttackKind kind);
/// Mechanical stand-in for "not noticeable": L-inf budgets are capped at 0.1,
/// L2 budgets at 5 (inputs in [0, 1]). L0 is uncapped.
double perceptibility_cap(AttackKind kind);

struct AttackConfig {
  AttackKind kind = AttackKind::FGSM;
  double epsilon = 0.02;
  int steps = 40;
  double step_size = 0.0;  // 0 selects the per-kind default
  std::uint64_t seed = 0;

  static AttackConfig defaults(AttackKind kind, std::uint64_t seed = 0);

  /// min(epsilon, cap): the radius actually enforced.
  double budget() const;
  double step() const;
};

struct AttackOutcome {
  TensorF x_adv;
  double l2 = 0.0;
  double linf = 0.0;
  int l0 = 0;  // changed pixels (spatial positions)
  int surrogate_pred = -1;
  int target_pred = -1;
  bool success = false;
  int queries = 0;  // surrogate evaluations spent (gradient-free kinds)
};

/// Budget check for a finished outcome: norm within budget + 1e-6 and values in [0, 1].
bool within_budget(const AttackOutcome& outcome, const AttackConfig& config);

/// One signed-gradient step of size epsilon on the surrogate, judged on the surrogate.
AttackOutcome fgsm(const EngineModel& surrogate, const LabeledExample<float>& example, const AttackConfig& config);

/// Crafts on `surrogate` (using the surrogate's own prediction on x as the
/// label it pushes away from) and evaluates on `target`. Quantized targets
/// are evaluated with their integer-grid forward pass.
AttackOutcome run_attack(const EngineModel& surrogate, const EngineModel& target,
                         const LabeledExample<float>& example, const AttackConfig& config);

/// First grid epsilon whose attack succeeds; grid values above the
/// perceptibility cap are not tried.
std::optional<double> epsilon_search(const EngineModel& surrogate, const EngineModel& target,
                                     const LabeledExample<float>& example, std::span<const double> grid,
                                     AttackConfig config);

}  // namespace modelprobe
