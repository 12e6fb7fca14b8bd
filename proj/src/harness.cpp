#include "modelprobe/harness.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <iomanip>
#include <map>
#include <random>
#include <sstream>
#include <thread>

#include "json.hpp"
#include "modelprobe/error.hpp"

namespace modelprobe {

using nlohmann::json;

namespace {

Precision precision_for(const EngineModel& net) { return net.quantized() ? Precision::Quantized : Precision::Float; }

std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) h = (h ^ c) * 0x100000001b3ULL;
  return h;
}

AttackConfig example_config(AttackKind kind, const std::optional<AttackConfig>& config, std::uint64_t seed,
                            std::size_t index) {
  AttackConfig cfg = config ? *config : AttackConfig::defaults(kind, seed);
  cfg.kind = kind;
  cfg.seed = cfg.seed * 1000003ULL + index;
  return cfg;
}

template <typename F>
void parallel_for(std::size_t count, unsigned jobs, F&& body) {
  jobs = std::max(1u, std::min<unsigned>(jobs, static_cast<unsigned>(std::max<std::size_t>(count, 1))));
  if (jobs == 1) {
    for (std::size_t i = 0; i < count; ++i) body(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::jthread> workers;
  for (unsigned w = 0; w < jobs; ++w) {
    workers.emplace_back([&] {
      for (std::size_t i = next++; i < count; i = next++) body(i);
    });
  }
}

double mean(const std::vector<double>& v) {
  if (v.empty()) return 0.0;
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

const std::vector<std::vector<std::optional<SuccessCount>>>& arm_cells(const EvalReport& r, Arm arm) {
  return arm == Arm::Targeted ? r.targeted : r.blind;
}

std::string fmt(double v, int digits = 2) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(digits) << v;
  return os.str();
}

std::string fmt_epsilon(double v) {
  std::ostringstream os;
  os << v;
  return os.str();
}

}  // namespace

std::vector<std::size_t> retained_examples(const EngineModel& target, std::span<const LabeledExample<float>> examples) {
  std::vector<std::size_t> keep;
  for (std::size_t i = 0; i < examples.size(); ++i) {
    if (target.predict(examples[i].x, precision_for(target)) == examples[i].y_true) keep.push_back(i);
  }
  return keep;
}

SuccessCount evaluate_attack(const EngineModel& target, const EngineModel& surrogate, AttackKind kind,
                             std::span<const LabeledExample<float>> examples,
                             const std::optional<AttackConfig>& config, std::uint64_t seed, const OutcomeSink& sink,
                             Arm arm) {
  auto keep = retained_examples(target, examples);
  if (keep.empty()) throw Error(ErrorCode::EmptyExampleSet, "no correctly classified examples to attack");
  SuccessCount c;
  c.m = keep.size();
  for (auto i : keep) {
    auto outcome = run_attack(surrogate, target, examples[i], example_config(kind, config, seed, i));
    if (outcome.success) ++c.n;
    if (sink) sink(kind, arm, i, outcome);
  }
  return c;
}

double EvalReport::model_average(std::size_t model, Arm arm) const {
  std::vector<double> v;
  for (const auto& row : arm_cells(*this, arm)) {
    if (row[model]) v.push_back(row[model]->rate());
  }
  return mean(v);
}

double EvalReport::attack_average(std::size_t kind, Arm arm) const {
  std::vector<double> v;
  for (const auto& cell : arm_cells(*this, arm)[kind]) {
    if (cell) v.push_back(cell->rate());
  }
  return mean(v);
}

double EvalReport::grand_average(Arm arm) const {
  std::vector<double> v;
  for (const auto& row : arm_cells(*this, arm)) {
    for (const auto& cell : row) {
      if (cell) v.push_back(cell->rate());
    }
  }
  return mean(v);
}

std::string EvalReport::to_json() const {
  auto cells = [](const std::vector<std::vector<std::optional<SuccessCount>>>& grid) {
    json out = json::array();
    for (const auto& row : grid) {
      json r = json::array();
      for (const auto& c : row) {
        r.push_back(c ? json{{"n", c->n}, {"m", c->m}, {"p", c->rate()}} : json(nullptr));
      }
      out.push_back(r);
    }
    return out;
  };
  json j;
  j["seed"] = seed;
  j["kinds"] = json::array();
  for (auto k : kinds) j["kinds"].push_back(to_string(k));
  j["epsilons"] = epsilons;
  j["models"] = json::array();
  for (std::size_t i = 0; i < models.size(); ++i) {
    const auto& m = models[i];
    j["models"].push_back({{"target", m.target},
                           {"targeted_surrogate", m.targeted_surrogate ? json(*m.targeted_surrogate) : json(nullptr)},
                           {"blind_surrogate", m.blind_surrogate ? json(*m.blind_surrogate) : json(nullptr)},
                           {"similarity", m.similarity},
                           {"m", m.m},
                           {"excluded", m.excluded},
                           {"average_targeted", model_average(i, Arm::Targeted)},
                           {"average_blind", model_average(i, Arm::Blind)}});
  }
  j["targeted"] = cells(targeted);
  j["blind"] = cells(blind);
  json per_attack = json::array();
  for (std::size_t k = 0; k < kinds.size(); ++k) {
    per_attack.push_back({{"kind", to_string(kinds[k])},
                          {"average_targeted", attack_average(k, Arm::Targeted)},
                          {"average_blind", attack_average(k, Arm::Blind)}});
  }
  j["attack_averages"] = per_attack;
  j["grand_average"] = {{"targeted", grand_average(Arm::Targeted)}, {"blind", grand_average(Arm::Blind)}};
  j["notes"] = notes;
  return j.dump(1);
}

EvalReport EvalReport::from_json(std::string_view text) {
  EvalReport r;
  try {
    auto j = json::parse(text);
    r.seed = j.at("seed").get<std::uint64_t>();
    for (const auto& k : j.at("kinds")) r.kinds.push_back(attack_kind_from_string(k.get<std::string>()));
    r.epsilons = j.at("epsilons").get<std::vector<double>>();
    for (const auto& m : j.at("models")) {
      ModelColumn c;
      c.target = m.at("target").get<std::string>();
      if (!m.at("targeted_surrogate").is_null()) c.targeted_surrogate = m["targeted_surrogate"].get<std::string>();
      if (!m.at("blind_surrogate").is_null()) c.blind_surrogate = m["blind_surrogate"].get<std::string>();
      c.similarity = m.at("similarity").get<double>();
      c.m = m.at("m").get<std::size_t>();
      c.excluded = m.at("excluded").get<std::vector<std::string>>();
      r.models.push_back(std::move(c));
    }
    auto grid = [](const json& g) {
      std::vector<std::vector<std::optional<SuccessCount>>> out;
      for (const auto& row : g) {
        auto& r = out.emplace_back();
        for (const auto& c : row) {
          if (c.is_null()) {
            r.emplace_back();
          } else {
            r.push_back(SuccessCount{c.at("n").get<std::size_t>(), c.at("m").get<std::size_t>()});
          }
        }
      }
      return out;
    };
    r.targeted = grid(j.at("targeted"));
    r.blind = grid(j.at("blind"));
    r.notes = j.at("notes").get<std::vector<std::string>>();
  } catch (const json::exception& e) {
    throw Error(ErrorCode::InvalidArgument, std::string("malformed report: ") + e.what());
  }
  return r;
}

void evaluate_arms(EvalReport& report, const TargetCase& target, const EngineModel& target_net,
                   const EngineModel* targeted, const EngineModel* blind, const ExperimentOptions& options) {
  if (report.kinds.empty()) report.kinds = options.kinds;
  if (report.epsilons.size() != report.kinds.size()) {
    report.epsilons.clear();
    for (auto k : report.kinds) report.epsilons.push_back(default_epsilon(k));
  }
  if (report.targeted.size() != report.kinds.size()) {
    report.targeted.resize(report.kinds.size());
    report.blind.resize(report.kinds.size());
  }
  auto keep = retained_examples(target_net, target.examples);
  ModelColumn column;
  column.target = target.name;
  column.m = keep.size();
  for (std::size_t i = 0, k = 0; i < target.examples.size(); ++i) {
    if (k < keep.size() && keep[k] == i) {
      ++k;
      continue;
    }
    column.excluded.push_back(i < target.example_ids.size() ? target.example_ids[i] : std::to_string(i));
  }
  const std::size_t col = report.models.size();
  report.models.push_back(column);
  for (std::size_t k = 0; k < report.kinds.size(); ++k) {
    report.targeted[k].emplace_back();
    report.blind[k].emplace_back();
  }
  if (keep.empty()) {
    report.notes.push_back(target.name + ": no correctly classified examples; nothing attacked");
    return;
  }

  const EngineModel* arms[2] = {targeted, blind};
  const std::size_t per_arm = report.kinds.size() * keep.size();
  std::vector<char> success(2 * per_arm, 0);
  parallel_for(2 * per_arm, options.jobs, [&](std::size_t job) {
    const std::size_t a = job / per_arm;
    const std::size_t k = (job % per_arm) / keep.size();
    const std::size_t e = keep[job % keep.size()];
    if (!arms[a]) return;
    const AttackKind kind = report.kinds[k];
    AttackConfig cfg = example_config(kind, std::nullopt, options.seed, e);
    cfg.epsilon = report.epsilons[k];
    auto outcome = run_attack(*arms[a], target_net, target.examples[e], cfg);
    success[job] = outcome.success ? 1 : 0;
    if (options.sink) options.sink(target.name, kind, a == 0 ? Arm::Targeted : Arm::Blind, e, outcome);
  });
  for (std::size_t a = 0; a < 2; ++a) {
    if (!arms[a]) continue;
    auto& grid = a == 0 ? report.targeted : report.blind;
    for (std::size_t k = 0; k < report.kinds.size(); ++k) {
      SuccessCount c;
      c.m = keep.size();
      for (std::size_t e = 0; e < keep.size(); ++e) c.n += success[a * per_arm + k * keep.size() + e];
      grid[k][col] = c;
    }
  }
}

EvalReport targeted_vs_blind(std::span<const TargetCase> targets, const Registry& registry,
                             const ExperimentOptions& options) {
  if (registry.empty()) throw Error(ErrorCode::EmptyRegistry, "registry holds no fingerprints");
  EvalReport report;
  report.seed = options.seed;
  report.kinds = options.kinds;
  for (auto k : report.kinds) report.epsilons.push_back(default_epsilon(k));
  report.targeted.resize(report.kinds.size());
  report.blind.resize(report.kinds.size());

  std::map<std::string, std::optional<EngineModel>> surrogates;
  auto surrogate = [&](const Fingerprint& fp) -> const EngineModel* {
    auto it = surrogates.find(fp.name);
    if (it == surrogates.end()) {
      std::optional<EngineModel> net;
      if (fp.model) {
        try {
          net = EngineModel::from_graph(*fp.model);
        } catch (const Error& e) {
          report.notes.push_back(fp.name + ": not executable as a surrogate (" + e.what() + ")");
        }
      } else {
        report.notes.push_back(fp.name + ": registry entry ships no weights");
      }
      it = surrogates.emplace(fp.name, std::move(net)).first;
    }
    return it->second ? &*it->second : nullptr;
  };

  for (const auto& t : targets) {
    std::optional<EngineModel> target_net;
    try {
      target_net = EngineModel::from_graph(*t.graph);
    } catch (const Error& e) {
      report.notes.push_back(t.name + ": target not executable (" + e.what() + "); skipped");
      continue;
    }
    auto match = match_pretrained(*t.graph, registry, options.match);
    if (!match.best) {
      report.notes.push_back(t.name + ": no pre-trained ancestor reaches the threshold; skipped");
      continue;
    }
    const EngineModel* targeted = surrogate(*registry.find(*match.best));
    if (!targeted) {
      report.notes.push_back(t.name + ": matched ancestor " + *match.best + " is unusable; skipped");
      continue;
    }
    std::vector<const Fingerprint*> others;
    for (const auto& fp : registry.entries()) {
      if (fp.name != *match.best && fp.model) others.push_back(&fp);
    }
    const EngineModel* blind = nullptr;
    std::optional<std::string> blind_name;
    if (others.empty()) {
      report.notes.push_back(t.name + ": registry holds no other model; blind arm skipped");
    } else {
      std::seed_seq seq{static_cast<std::uint32_t>(options.seed), static_cast<std::uint32_t>(options.seed >> 32),
                        static_cast<std::uint32_t>(fnv1a(t.name)), static_cast<std::uint32_t>(fnv1a(t.name) >> 32)};
      std::mt19937_64 rng(seq);
      std::uniform_int_distribution<std::size_t> pick(0, others.size() - 1);
      const Fingerprint* chosen = others[pick(rng)];
      blind = surrogate(*chosen);
      if (blind) blind_name = chosen->name;
    }
    evaluate_arms(report, t, *target_net, targeted, blind, options);
    auto& column = report.models.back();
    column.targeted_surrogate = match.best;
    column.blind_surrogate = blind_name;
    column.similarity = match.score.parametric.value_or(0.0);
  }
  return report;
}

std::optional<double> pearson(std::span<const double> xs, std::span<const double> ys) {
  if (xs.size() != ys.size() || xs.size() < 2) {
    throw Error(ErrorCode::LengthMismatch, "pearson needs two series of equal length >= 2");
  }
  const double n = static_cast<double>(xs.size());
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) mx += xs[i], my += ys[i];
  mx /= n;
  my /= n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    sxy += (xs[i] - mx) * (ys[i] - my);
    sxx += (xs[i] - mx) * (xs[i] - mx);
    syy += (ys[i] - my) * (ys[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) return std::nullopt;
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

CorrelationReport correlate(const EvalReport& report) {
  CorrelationReport c;
  std::vector<double> xs, ys;
  for (std::size_t i = 0; i < report.models.size(); ++i) {
    if (report.models[i].m == 0) continue;
    xs.push_back(report.models[i].similarity);
    ys.push_back(report.model_average(i, Arm::Targeted));
    c.pairs.emplace_back(xs.back(), ys.back());
  }
  if (xs.size() >= 2) c.pcc = pearson(xs, ys);
  return c;
}

std::string CorrelationReport::to_csv() const {
  std::ostringstream os;
  os << "similarity,targeted_success\n";
  os << std::setprecision(17);
  for (const auto& [s, p] : pairs) os << s << ',' << p << '\n';
  return os.str();
}

ReportTable report_table(const EvalReport& report) {
  ReportTable t;
  for (const auto& m : report.models) {
    t.header.push_back(m.target + " T");
    t.header.push_back(m.target + " B");
  }
  t.header.push_back("Average T");
  t.header.push_back("Average B");

  auto pair = [](std::optional<double> tv, std::optional<double> bv, std::vector<std::string>& out) {
    std::string ts = tv ? fmt(*tv) : "-";
    std::string bs = bv ? fmt(*bv) : "-";
    if (tv && bv && *tv > *bv) ts = "**" + ts + "**";
    if (tv && bv && *bv > *tv) bs = "**" + bs + "**";
    out.push_back(ts);
    out.push_back(bs);
  };
  auto rate = [](const std::optional<SuccessCount>& c) -> std::optional<double> {
    return c ? std::optional(c->rate()) : std::nullopt;
  };
  for (std::size_t k = 0; k < report.kinds.size(); ++k) {
    ReportTable::Row row;
    row.label = std::string(display_name(report.kinds[k]));
    row.epsilon = fmt_epsilon(report.epsilons[k]);
    for (std::size_t i = 0; i < report.models.size(); ++i) pair(rate(report.targeted[k][i]), rate(report.blind[k][i]), row.cells);
    pair(report.attack_average(k, Arm::Targeted), report.attack_average(k, Arm::Blind), row.cells);
    t.rows.push_back(std::move(row));
  }
  t.average.label = "Average (Models)";
  for (std::size_t i = 0; i < report.models.size(); ++i) {
    pair(report.model_average(i, Arm::Targeted), report.model_average(i, Arm::Blind), t.average.cells);
  }
  pair(report.grand_average(Arm::Targeted), report.grand_average(Arm::Blind), t.average.cells);
  return t;
}

std::string render_markdown(const EvalReport& report) {
  auto t = report_table(report);
  std::ostringstream os;
  os << "| Attack | Epsilon |";
  for (const auto& h : t.header) os << ' ' << h << " |";
  os << "\n|---|---|";
  for (std::size_t i = 0; i < t.header.size(); ++i) os << "---|";
  os << '\n';
  auto emit = [&](const ReportTable::Row& r) {
    os << "| " << r.label << " | " << r.epsilon << " |";
    for (const auto& c : r.cells) os << ' ' << c << " |";
    os << '\n';
  };
  for (const auto& r : t.rows) emit(r);
  emit(t.average);
  if (!report.models.empty()) {
    os << "\nSurrogates:\n\n";
    for (const auto& m : report.models) {
      os << "- " << m.target << ": targeted " << m.targeted_surrogate.value_or("-") << ", blind "
         << m.blind_surrogate.value_or("-") << ", similarity " << fmt(m.similarity, 4) << ", m = " << m.m;
      if (!m.excluded.empty()) {
        os << ", excluded";
        for (const auto& e : m.excluded) os << ' ' << e;
      }
      os << '\n';
    }
  }
  if (!report.notes.empty()) {
    os << "\nNotes:\n\n";
    for (const auto& n : report.notes) os << "- " << n << '\n';
  }
  return os.str();
}

}  // namespace modelprobe
