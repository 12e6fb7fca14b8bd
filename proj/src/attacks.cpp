#include "modelprobe/attacks.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>

#include "modelprobe/error.hpp"

namespace modelprobe {
namespace {

using Vector = Vec<float>;

struct KindInfo {
  AttackKind kind;
  std::string_view name;
  std::string_view display;
  NormKind norm;
  double epsilon;
};

constexpr KindInfo kKinds[] = {
    {AttackKind::FGSM, "FGSM", "FGSM", NormKind::Linf, 0.02},
    {AttackKind::BIM_L2, "BIM_L2", "L2 BIM", NormKind::L2, 1.0},
    {AttackKind::BIM_Linf, "BIM_Linf", "Linf BIM", NormKind::Linf, 0.05},
    {AttackKind::PGD_L2, "PGD_L2", "L2 PGD", NormKind::L2, 12.0},
    {AttackKind::PGD_Linf, "PGD_Linf", "Linf PGD", NormKind::Linf, 0.05},
    {AttackKind::DeepFool_L2, "DeepFool_L2", "L2 DeepFool Attack", NormKind::L2, 1.4},
    {AttackKind::NewtonFool, "NewtonFool", "Newton Fool Attack", NormKind::L2, 12.0},
    {AttackKind::DDN, "DDN", "DDN Attack", NormKind::L2, 0.5},
    {AttackKind::Inversion, "Inversion", "Inversion Attack", NormKind::L2, 10.0},
    {AttackKind::SaltPepper, "SaltPepper", "Salt and Pepper Noise Attack", NormKind::L0, 80.0},
    {AttackKind::Boundary, "Boundary", "Boundary Attack", NormKind::L2, 2.5},
};

const KindInfo& info(AttackKind kind) {
  for (const auto& k : kKinds) {
    if (k.kind == kind) return k;
  }
  throw Error(ErrorCode::InvalidArgument, "unknown attack kind");
}

constexpr double kLinfCap = 0.1;
constexpr double kL2Cap = 5.0;
constexpr double kNormSlack = 1e-6;

// Channels per spatial position for NHWC inputs; 1 otherwise.
int channels_of(const std::vector<int>& shape) { return shape.size() == 4 ? shape[3] : 1; }

double l2_norm(const Vector& d) { return d.cast<double>().norm(); }
double linf_norm(const Vector& d) { return d.size() == 0 ? 0.0 : d.cast<double>().cwiseAbs().maxCoeff(); }

int changed_pixels(const Vector& a, const Vector& b, int channels) {
  int count = 0;
  for (Eigen::Index p = 0; p < a.size() / channels; ++p) {
    if ((a.segment(p * channels, channels).array() != b.segment(p * channels, channels).array()).any()) ++count;
  }
  return count;
}

Vector clip01(const Vector& v) { return v.cwiseMax(0.0f).cwiseMin(1.0f); }

Vector project_linf(const Vector& v, const Vector& x, float eps) {
  Vector lo = x.array() - eps;
  Vector hi = x.array() + eps;
  return v.cwiseMax(lo).cwiseMin(hi);
}

// Projects onto the L2 ball around x and the [0, 1] box. The box step can
// only shrink the distance to x, and the final rescale loop absorbs float
// rounding so the measured norm never exceeds eps.
Vector project_l2(const Vector& v, const Vector& x, double eps) {
  Vector out = clip01(v);
  for (int round = 0; round < 8; ++round) {
    Vector d = out - x;
    double n = l2_norm(d);
    if (n <= eps) break;
    double factor = eps / n * (1.0 - 1e-7 * (round + 1));
    out = clip01(x + (d.cast<double>() * factor).cast<float>());
  }
  return out;
}

Vector unit(const Vector& g) {
  double n = l2_norm(g);
  if (n == 0.0) return Vector::Zero(g.size());
  return (g.cast<double>() / n).cast<float>();
}

Vector sign(const Vector& g) {
  return g.unaryExpr([](float v) { return v > 0.0f ? 1.0f : (v < 0.0f ? -1.0f : 0.0f); });
}

// Everything an attack needs from the surrogate, with the label it pushes
// away from fixed to the surrogate's clean prediction.
class Crafter {
 public:
  Crafter(const EngineModel& net, const TensorF& x) : net_(net), shape_(x.shape), x0_(x.data) {
    label_ = net_.predict(x);
  }

  int label() const { return label_; }
  const Vector& x0() const { return x0_; }
  int classes() const { return net_.class_count(); }

  TensorF tensor(const Vector& v) const { return TensorF(shape_, v); }
  Vector logits(const Vector& v) const { return net_.forward(tensor(v)).data; }
  int predict(const Vector& v) {
    ++queries_;
    return net_.predict(tensor(v));
  }
  bool fooled(const Vector& v) { return predict(v) != label_; }

  /// Gradient of the cross-entropy against the clean label.
  Vector loss_grad(const Vector& v) const { return net_.loss_and_input_grad({tensor(v), label_}).grad.data; }
  /// Gradient of adjoint · logits.
  Vector vjp(const Vector& v, const Vector& adjoint) const { return net_.input_gradient(tensor(v), adjoint).data; }

  int queries() const { return queries_; }

 private:
  const EngineModel& net_;
  std::vector<int> shape_;
  Vector x0_;
  int label_ = 0;
  int queries_ = 0;
};

Vector iterative_linf(Crafter& c, const AttackConfig& cfg, bool random_start) {
  const auto eps = static_cast<float>(cfg.budget());
  const auto alpha = static_cast<float>(cfg.step());
  Vector x = c.x0();
  if (random_start) {
    std::mt19937_64 rng(cfg.seed);
    std::uniform_real_distribution<float> u(-eps, eps);
    for (Eigen::Index i = 0; i < x.size(); ++i) x[i] += u(rng);
    x = clip01(project_linf(x, c.x0(), eps));
  }
  for (int t = 0; t < cfg.steps; ++t) {
    Vector stepped = x + alpha * sign(c.loss_grad(x));
    x = clip01(project_linf(stepped, c.x0(), eps));
  }
  return x;
}

Vector iterative_l2(Crafter& c, const AttackConfig& cfg, bool random_start) {
  const double eps = cfg.budget();
  const auto alpha = static_cast<float>(cfg.step());
  Vector x = c.x0();
  if (random_start) {
    std::mt19937_64 rng(cfg.seed);
    std::normal_distribution<float> n01;
    std::uniform_real_distribution<double> u01;
    Vector dir(x.size());
    for (Eigen::Index i = 0; i < dir.size(); ++i) dir[i] = n01(rng);
    double radius = eps * std::pow(u01(rng), 1.0 / static_cast<double>(x.size()));
    x = project_l2(x + (unit(dir).cast<double>() * radius).cast<float>(), c.x0(), eps);
  }
  for (int t = 0; t < cfg.steps; ++t) {
    Vector g = unit(c.loss_grad(x));
    x = project_l2(x + alpha * g, c.x0(), eps);
  }
  return x;
}

Vector deepfool(Crafter& c, const AttackConfig& cfg) {
  constexpr double overshoot = 1.02;
  const double eps = cfg.budget();
  const int k0 = c.label();
  Vector r_total = Vector::Zero(c.x0().size());
  Vector x = c.x0();
  for (int t = 0; t < cfg.steps; ++t) {
    Vector f = c.logits(x);
    Eigen::Index top = 0;
    f.maxCoeff(&top);
    if (static_cast<int>(top) != k0) break;
    double best = std::numeric_limits<double>::infinity();
    Vector best_w;
    double best_f = 0.0;
    for (int k = 0; k < c.classes(); ++k) {
      if (k == k0) continue;
      Vector adj = Vector::Zero(c.classes());
      adj[k] = 1.0f;
      adj[k0] = -1.0f;
      Vector w = c.vjp(x, adj);
      double fk = static_cast<double>(f[k]) - f[k0];
      double wn = l2_norm(w);
      if (wn == 0.0) continue;
      double dist = std::abs(fk) / wn;
      if (dist < best) best = dist, best_w = w, best_f = fk;
    }
    if (!std::isfinite(best)) break;
    double wn = l2_norm(best_w);
    double scale = (std::abs(best_f) + 1e-4) / (wn * wn);
    r_total += (best_w.cast<double>() * scale).cast<float>();
    x = project_l2(c.x0() + static_cast<float>(overshoot) * r_total, c.x0(), eps);
  }
  return x;
}

Vector newtonfool(Crafter& c, const AttackConfig& cfg) {
  constexpr double eta = 0.01;
  const double eps = cfg.budget();
  const int k0 = c.label();
  const double x0_norm = l2_norm(c.x0());
  Vector x = c.x0();
  for (int t = 0; t < cfg.steps; ++t) {
    Vector f = c.logits(x);
    Eigen::Index top = 0;
    f.maxCoeff(&top);
    if (static_cast<int>(top) != k0) break;
    Vector p = softmax<float>(f);
    // d p_k0 / d logits = p_k0 (e_k0 - p)
    Vector adj = -p[k0] * p;
    adj[k0] += p[k0];
    Vector g = c.vjp(x, adj);
    double gn = l2_norm(g);
    if (gn == 0.0) break;
    double delta = std::min(eta * x0_norm * gn, static_cast<double>(p[k0]) - 1.0 / c.classes());
    if (delta <= 0.0) break;
    x = project_l2(x - (g.cast<double>() * (delta / (gn * gn))).cast<float>(), c.x0(), eps);
  }
  return x;
}

Vector ddn(Crafter& c, const AttackConfig& cfg) {
  constexpr double gamma = 0.05;
  const double eps = cfg.budget();
  const auto alpha = static_cast<float>(cfg.step());
  double m = eps;
  Vector delta = Vector::Zero(c.x0().size());
  std::optional<Vector> best;
  double best_norm = std::numeric_limits<double>::infinity();
  for (int t = 0; t < cfg.steps; ++t) {
    Vector x = clip01(c.x0() + delta);
    bool adversarial = c.fooled(x);
    double n = l2_norm(x - c.x0());
    if (adversarial && n < best_norm) best = x, best_norm = n;
    m = std::min(adversarial ? m * (1.0 - gamma) : m * (1.0 + gamma), eps);
    delta += alpha * unit(c.loss_grad(x));
    double dn = l2_norm(delta);
    if (dn > 0.0) delta = (delta.cast<double>() * (m / dn)).cast<float>();
    delta = clip01(c.x0() + delta) - c.x0();
  }
  Vector last = project_l2(c.x0() + delta, c.x0(), eps);
  if (c.fooled(last) && l2_norm(last - c.x0()) < best_norm) return last;
  return best ? project_l2(*best, c.x0(), eps) : last;
}

Vector inversion(Crafter& c, const AttackConfig& cfg) {
  const double eps = cfg.budget();
  const auto alpha = static_cast<float>(eps / cfg.steps);
  // Goal class: the surrogate's most confident class other than the clean label.
  Vector f = c.logits(c.x0());
  int goal = -1;
  for (int k = 0; k < c.classes(); ++k) {
    if (k != c.label() && (goal < 0 || f[k] > f[goal])) goal = k;
  }
  Vector x = c.x0();
  if (goal < 0) return x;
  for (int t = 0; t < cfg.steps; ++t) {
    Vector p = softmax<float>(c.logits(x));
    Vector adj = -p[goal] * p;
    adj[goal] += p[goal];
    x = project_l2(x + alpha * unit(c.vjp(x, adj)), c.x0(), eps);
  }
  return x;
}

Vector salt_pepper(Crafter& c, const AttackConfig& cfg, const std::vector<int>& shape) {
  const int channels = channels_of(shape);
  const auto pixels = static_cast<int>(c.x0().size() / channels);
  const int budget = std::min(pixels, static_cast<int>(std::floor(cfg.budget())));
  std::mt19937_64 rng(cfg.seed);
  std::vector<int> order(static_cast<std::size_t>(pixels));
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<float> colour(order.size());
  std::bernoulli_distribution coin;
  for (auto& v : colour) v = coin(rng) ? 1.0f : 0.0f;

  // Noise grows over a nested pixel set until the surrogate flips.
  Vector x = c.x0();
  int applied = 0;
  for (int t = 1; t <= cfg.steps && budget > 0; ++t) {
    int want = static_cast<int>(std::ceil(static_cast<double>(budget) * t / cfg.steps));
    for (; applied < want; ++applied) {
      auto p = order[static_cast<std::size_t>(applied)];
      x.segment(static_cast<Eigen::Index>(p) * channels, channels).setConstant(colour[static_cast<std::size_t>(applied)]);
    }
    if (c.fooled(x)) break;
  }
  return x;
}

Vector boundary(Crafter& c, const AttackConfig& cfg) {
  constexpr int kQueries = 1000;
  constexpr double kOrthogonal = 0.01;
  constexpr double kSource = 0.01;
  constexpr int kInitTries = 100;
  const double eps = cfg.budget();
  std::mt19937_64 rng(cfg.seed);
  std::uniform_real_distribution<float> u01(0.0f, 1.0f);
  std::normal_distribution<double> n01;
  const Vector& x0 = c.x0();

  // Sizeable starting perturbation: uniform noise that is already adversarial.
  std::optional<Vector> start;
  for (int i = 0; i < kInitTries && c.queries() < kQueries; ++i) {
    Vector r(x0.size());
    for (Eigen::Index k = 0; k < r.size(); ++k) r[k] = u01(rng);
    if (c.fooled(r)) {
      start = r;
      break;
    }
  }
  if (!start) return x0;  // budget exhausted before any adversarial start

  // Binary search along the segment towards x0.
  double lo = 0.0, hi = 1.0;  // fraction of the way from x0 to start
  for (int i = 0; i < 12 && c.queries() < kQueries; ++i) {
    double mid = 0.5 * (lo + hi);
    Vector cand = x0 + (( *start - x0).cast<double>() * mid).cast<float>();
    if (c.fooled(cand)) {
      hi = mid;
    } else {
      lo = mid;
    }
  }
  Vector adv = x0 + ((*start - x0).cast<double>() * hi).cast<float>();

  while (c.queries() < kQueries) {
    Eigen::VectorXd diff = (adv - x0).cast<double>();
    double dist = diff.norm();
    if (dist == 0.0) break;
    Eigen::VectorXd eta(diff.size());
    for (Eigen::Index k = 0; k < eta.size(); ++k) eta[k] = n01(rng);
    eta -= (eta.dot(diff) / (dist * dist)) * diff;  // orthogonal to the source direction
    eta *= kOrthogonal * dist / std::max(eta.norm(), 1e-12);
    // Back onto the sphere of radius dist, then a step towards x0.
    Eigen::VectorXd moved = diff + eta;
    moved *= dist / moved.norm();
    moved *= (1.0 - kSource);
    Vector cand = clip01(x0 + moved.cast<float>());
    if (c.fooled(cand)) adv = cand;
  }
  return project_l2(adv, x0, eps);
}

}  // namespace

std::string_view to_string(AttackKind kind) { return info(kind).name; }
std::string_view display_name(AttackKind kind) { return info(kind).display; }
NormKind norm_of(AttackKind kind) { return info(kind).norm; }
double default_epsilon(AttackKind kind) { return info(kind).epsilon; }

AttackKind attack_kind_from_string(std::string_view name) {
  auto lower = [](std::string_view s) {
    std::string out(s);
    for (auto& ch : out) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
    return out;
  };
  for (const auto& k : kKinds) {
    if (lower(k.name) == lower(name) || lower(k.display) == lower(name)) return k.kind;
  }
  throw Error(ErrorCode::InvalidArgument, "unknown attack kind: " + std::string(name));
}

double perceptibility_cap(AttackKind kind) {
  switch (norm_of(kind)) {
    case NormKind::Linf: return kLinfCap;
    case NormKind::L2: return kL2Cap;
    case NormKind::L0: break;
  }
  return std::numeric_limits<double>::infinity();
}

AttackConfig AttackConfig::defaults(AttackKind kind, std::uint64_t seed) {
  AttackConfig c;
  c.kind = kind;
  c.epsilon = default_epsilon(kind);
  c.seed = seed;
  return c;
}

double AttackConfig::budget() const { return std::min(epsilon, perceptibility_cap(kind)); }

double AttackConfig::step() const {
  if (step_size > 0.0) return step_size;
  return norm_of(kind) == NormKind::Linf ? budget() / 8.0 : budget() / 10.0;
}

bool within_budget(const AttackOutcome& o, const AttackConfig& config) {
  if (o.x_adv.size() > 0 && (o.x_adv.data.minCoeff() < 0.0f || o.x_adv.data.maxCoeff() > 1.0f)) return false;
  switch (norm_of(config.kind)) {
    case NormKind::Linf: return o.linf <= config.budget() + kNormSlack;
    case NormKind::L2: return o.l2 <= config.budget() + kNormSlack;
    case NormKind::L0: return o.l0 <= config.budget();
  }
  return false;
}

namespace {

void validate(const AttackConfig& config, const LabeledExample<float>& example, const EngineModel& net) {
  if (!(config.epsilon > 0.0)) throw Error(ErrorCode::InvalidArgument, "epsilon must be positive");
  if (config.steps < 1) throw Error(ErrorCode::InvalidArgument, "steps must be at least 1");
  if (example.y_true < 0 || example.y_true >= net.class_count()) {
    throw Error(ErrorCode::InvalidArgument, "label out of range");
  }
}

AttackOutcome finish(Vector x_adv, const LabeledExample<float>& example, const EngineModel& surrogate,
                     const EngineModel& target, const AttackConfig& config, int queries) {
  AttackOutcome o;
  const Vector& x0 = example.x.data;
  Vector d = x_adv - x0;
  o.l2 = l2_norm(d);
  o.linf = linf_norm(d);
  o.l0 = changed_pixels(x_adv, x0, channels_of(example.x.shape));
  o.x_adv = TensorF(example.x.shape, std::move(x_adv));
  o.surrogate_pred = surrogate.predict(o.x_adv);
  o.target_pred = target.predict(o.x_adv, target.quantized() ? Precision::Quantized : Precision::Float);
  o.queries = queries;
  o.success = o.target_pred != example.y_true && within_budget(o, config);
  return o;
}

}  // namespace

AttackOutcome fgsm(const EngineModel& surrogate, const LabeledExample<float>& example, const AttackConfig& config) {
  validate(config, example, surrogate);
  Crafter c(surrogate, example.x);
  const auto eps = static_cast<float>(config.budget());
  Vector x = clip01(c.x0() + eps * sign(c.loss_grad(c.x0())));
  return finish(std::move(x), example, surrogate, surrogate, config, 0);
}

AttackOutcome run_attack(const EngineModel& surrogate, const EngineModel& target,
                         const LabeledExample<float>& example, const AttackConfig& config) {
  validate(config, example, target);
  if (surrogate.input_shape() != target.input_shape() &&
      shape_product(surrogate.input_shape()) != shape_product(target.input_shape())) {
    throw Error(ErrorCode::ShapeMismatch, "surrogate and target disagree on input shape");
  }
  Crafter c(surrogate, example.x);
  Vector x;
  switch (config.kind) {
    case AttackKind::FGSM: {
      const auto eps = static_cast<float>(config.budget());
      x = clip01(c.x0() + eps * sign(c.loss_grad(c.x0())));
      break;
    }
    case AttackKind::BIM_Linf: x = iterative_linf(c, config, false); break;
    case AttackKind::PGD_Linf: x = iterative_linf(c, config, true); break;
    case AttackKind::BIM_L2: x = iterative_l2(c, config, false); break;
    case AttackKind::PGD_L2: x = iterative_l2(c, config, true); break;
    case AttackKind::DeepFool_L2: x = deepfool(c, config); break;
    case AttackKind::NewtonFool: x = newtonfool(c, config); break;
    case AttackKind::DDN: x = ddn(c, config); break;
    case AttackKind::Inversion: x = inversion(c, config); break;
    case AttackKind::SaltPepper: x = salt_pepper(c, config, example.x.shape); break;
    case AttackKind::Boundary: x = boundary(c, config); break;
  }
  return finish(std::move(x), example, surrogate, target, config, c.queries());
}

std::optional<double> epsilon_search(const EngineModel& surrogate, const EngineModel& target,
                                     const LabeledExample<float>& example, std::span<const double> grid,
                                     AttackConfig config) {
  if (!std::is_sorted(grid.begin(), grid.end())) throw Error(ErrorCode::InvalidArgument, "grid must be ascending");
  for (double eps : grid) {
    if (eps > perceptibility_cap(config.kind)) break;
    config.epsilon = eps;
    if (run_attack(surrogate, target, example, config).success) return eps;
  }
  return std::nullopt;
}

}  // namespace modelprobe
