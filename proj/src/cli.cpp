#include "modelprobe/cli.hpp"

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <mutex>
#include <thread>

#include "CLI11.hpp"
#include "json.hpp"
#include "modelprobe/archive.hpp"
#include "modelprobe/error.hpp"
#include "modelprobe/harness.hpp"
#include "modelprobe/relation_graph.hpp"

namespace modelprobe::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct RunConfig {
  std::string subcommand;
  std::string out = "modelprobe-out";
  double threshold = kSimilarityThreshold;
  std::string policy;  // empty: the subcommand's default
  std::uint64_t seed = 0;
  unsigned jobs = 1;
  double tolerance = 0.0;
};

void add_common(CLI::App* sub, RunConfig& cfg) {
  sub->add_option("--out", cfg.out, "Output directory")->capture_default_str();
  sub->add_option("--seed", cfg.seed, "Seed for every random draw")->capture_default_str();
  sub->add_option("--jobs", cfg.jobs, "Worker threads")->check(CLI::PositiveNumber)->capture_default_str();
}

void add_similarity(CLI::App* sub, RunConfig& cfg) {
  sub->add_option("--threshold", cfg.threshold, "Similarity threshold")->check(CLI::Range(0.0, 1.0))->capture_default_str();
  sub->add_option("--policy", cfg.policy, "Layer matching policy")->check(CLI::IsMember({"strict", "relaxed"}));
  sub->add_option("--tolerance", cfg.tolerance, "Absolute tolerance for parameter equality")->capture_default_str();
}

CompareOptions compare_options(const RunConfig& cfg, MatchMode fallback) {
  CompareOptions o;
  o.policy.mode = cfg.policy.empty() ? fallback : match_mode_from_string(cfg.policy);
  o.threshold = cfg.threshold;
  o.tolerance = cfg.tolerance;
  return o;
}

json score_json(const SimilarityScore& s) {
  return {{"structural", s.structural},
          {"parametric", s.parametric ? json(*s.parametric) : json(nullptr)},
          {"l_match", s.l_match},
          {"l_total", s.l_total},
          {"n_true", s.n_true},
          {"n_total", s.n_total}};
}

std::string digest_file(const fs::path& p) { return Digest::of(read_file(p)).hex(); }

// Every input file (directories expand to their regular files) with its content digest.
json input_digests(const std::vector<fs::path>& inputs) {
  json out = json::array();
  for (const auto& p : inputs) {
    if (fs::is_directory(p)) {
      std::vector<fs::path> files;
      for (const auto& e : fs::recursive_directory_iterator(p)) {
        if (e.is_regular_file()) files.push_back(e.path());
      }
      std::sort(files.begin(), files.end());
      for (const auto& f : files) out.push_back({{"path", f.generic_string()}, {"sha256", digest_file(f)}});
    } else if (fs::is_regular_file(p)) {
      out.push_back({{"path", p.generic_string()}, {"sha256", digest_file(p)}});
    }
  }
  return out;
}

void write_text(const fs::path& path, const std::string& text) {
  fs::create_directories(path.parent_path().empty() ? fs::path(".") : path.parent_path());
  write_file(path, std::string_view(text));
}

void write_manifest(const RunConfig& cfg, json config, const std::vector<fs::path>& inputs) {
  config["out"] = cfg.out;
  config["seed"] = cfg.seed;
  config["jobs"] = cfg.jobs;
  json m = {{"tool", "modelprobe"},
            {"version", std::string(kVersion)},
            {"subcommand", cfg.subcommand},
            {"config", config},
            {"inputs", input_digests(inputs)}};
  write_text(fs::path(cfg.out) / ("manifest." + cfg.subcommand + ".json"), m.dump(1) + "\n");
}

std::vector<ModelGraph> load_models(const std::vector<std::string>& paths) {
  std::vector<ModelGraph> models;
  for (const auto& p : paths) models.push_back(load_model(p));
  return models;
}

std::vector<fs::path> as_paths(const std::vector<std::string>& v) { return {v.begin(), v.end()}; }

std::vector<fs::path> model_files(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw Error(ErrorCode::IoFailure, "not a directory: " + dir.string());
  std::vector<fs::path> out;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.is_regular_file() && has_model_extension(e.path().filename().string())) out.push_back(e.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

TensorF fit_input(TensorF t, const EngineModel& net) {
  if (t.size() == shape_product(net.input_shape())) t.shape = net.input_shape();
  return t;
}

// ---- subcommands ---------------------------------------------------------

int cmd_dig(const RunConfig& cfg, const std::vector<std::string>& archives) {
  std::vector<ExtractedModel> all;
  std::vector<std::string> log;
  for (const auto& a : archives) {
    auto found = extract_models(scan_archive(a), cfg.out, cfg.seed, &log);
    all.insert(all.end(), found.begin(), found.end());
  }
  auto manifest = extraction_manifest_json(all, cfg.seed);
  write_text(fs::path(cfg.out) / "models.json", manifest + "\n");
  write_manifest(cfg, {}, as_paths(archives));
  for (const auto& l : log) std::cerr << l << '\n';
  std::cout << manifest << '\n';
  return 0;
}

int cmd_compare(const RunConfig& cfg, const std::vector<std::string>& files) {
  auto options = compare_options(cfg, MatchMode::Strict);
  auto models = load_models(files);
  std::string text;
  if (models.size() == 2) {
    text = score_json(compare_models(models[0], models[1], options)).dump(1);
  } else {
    auto matrix = pairwise_matrix(models, options, cfg.jobs);
    text = matrix.to_json();
    write_text(fs::path(cfg.out) / "similarity.csv", matrix.to_csv());
  }
  write_text(fs::path(cfg.out) / "compare.json", text + "\n");
  write_manifest(cfg, {{"policy", to_string(options.policy.mode)}, {"threshold", cfg.threshold},
                       {"tolerance", cfg.tolerance}}, as_paths(files));
  std::cout << text << '\n';
  return 0;
}

int cmd_graph(const RunConfig& cfg, const std::vector<std::string>& files, const std::string& matrix_path,
              const std::string& format) {
  auto options = compare_options(cfg, MatchMode::Strict);
  SimilarityMatrix matrix;
  std::vector<fs::path> inputs;
  if (!matrix_path.empty()) {
    auto bytes = read_file(matrix_path);
    matrix = SimilarityMatrix::from_json(std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()));
    inputs.push_back(matrix_path);
  } else {
    if (files.empty()) throw Error(ErrorCode::InvalidArgument, "graph needs model files or --matrix");
    auto models = load_models(files);
    matrix = pairwise_matrix(models, options, cfg.jobs);
    inputs = as_paths(files);
  }
  auto graph = build_graph(matrix, cfg.threshold);
  graph.communities = detect_communities(graph, cfg.seed);
  auto fmt = graph_format_from_string(format);
  std::string ext = fmt == GraphFormat::Gexf ? "gexf" : fmt == GraphFormat::Dot ? "dot" : "json";
  write_text(fs::path(cfg.out) / ("graph." + ext), export_graph(graph, fmt));
  write_manifest(cfg, {{"policy", to_string(options.policy.mode)}, {"threshold", cfg.threshold},
                       {"format", ext}}, inputs);
  json summary = {{"nodes", graph.nodes.size()}, {"edges", graph.edges.size()}, {"communities", graph.communities}};
  std::cout << summary.dump(1) << '\n';
  return 0;
}

int cmd_match(const RunConfig& cfg, const std::string& registry_dir, const std::vector<std::string>& files) {
  if (registry_dir.empty()) throw Error(ErrorCode::InvalidArgument, "no registry: pass --registry or set MODELPROBE_REGISTRY");
  auto options = compare_options(cfg, MatchMode::Relaxed);
  auto registry = load_registry(registry_dir);
  auto models = load_models(files);
  auto summary = classify_corpus(models, registry, options, cfg.jobs);
  auto text = summary.to_json();
  write_text(fs::path(cfg.out) / "match.json", text + "\n");
  auto inputs = as_paths(files);
  inputs.emplace_back(registry_dir);
  write_manifest(cfg, {{"policy", to_string(options.policy.mode)}, {"threshold", cfg.threshold},
                       {"registry", registry_dir}}, inputs);
  std::cout << text << '\n';
  return 0;
}

struct AttackArgs {
  std::string kind;
  double epsilon = 0.0;
  int steps = 40;
  double step_size = 0.0;
  std::string surrogate, target, input;
  int label = -1;
};

json outcome_json(const AttackOutcome& o, const AttackConfig& c) {
  return {{"kind", to_string(c.kind)}, {"epsilon", c.epsilon},      {"budget", c.budget()},
          {"steps", c.steps},           {"step_size", c.step()},     {"seed", c.seed},
          {"l2", o.l2},                 {"linf", o.linf},            {"l0", o.l0},
          {"surrogate_pred", o.surrogate_pred}, {"target_pred", o.target_pred},
          {"success", o.success},       {"queries", o.queries}};
}

int cmd_attack(const RunConfig& cfg, const AttackArgs& a) {
  auto config = AttackConfig::defaults(attack_kind_from_string(a.kind), cfg.seed);
  if (a.epsilon > 0.0) config.epsilon = a.epsilon;
  config.steps = a.steps;
  config.step_size = a.step_size;
  auto surrogate = EngineModel::from_graph(load_model(a.surrogate));
  auto target = EngineModel::from_graph(load_model(a.target));
  LabeledExample<float> ex{fit_input(read_tensor_any(a.input), target), a.label};
  auto outcome = run_attack(surrogate, target, ex, config);
  write_tensor_file(fs::path(cfg.out) / "x_adv.tensor", outcome.x_adv);
  auto text = outcome_json(outcome, config).dump(1);
  write_text(fs::path(cfg.out) / "attack.json", text + "\n");
  write_manifest(cfg, {{"kind", to_string(config.kind)}, {"epsilon", config.epsilon}, {"steps", config.steps},
                       {"step_size", config.step()}, {"label", a.label}},
                 {a.surrogate, a.target, a.input});
  std::cout << text << '\n';
  return 0;
}

struct ExperimentArgs {
  std::string targets, registry, examples, kinds = "all";
};

std::vector<AttackKind> parse_kinds(const std::string& spec) {
  if (spec == "all") return {kAllAttackKinds.begin(), kAllAttackKinds.end()};
  std::vector<AttackKind> out;
  std::stringstream ss(spec);
  for (std::string item; std::getline(ss, item, ',');) {
    if (!item.empty()) out.push_back(attack_kind_from_string(item));
  }
  if (out.empty()) throw Error(ErrorCode::InvalidArgument, "no attack kinds selected");
  return out;
}

int cmd_experiment(const RunConfig& cfg, const ExperimentArgs& a) {
  if (a.registry.empty()) throw Error(ErrorCode::InvalidArgument, "no registry: pass --registry or set MODELPROBE_REGISTRY");
  auto registry = load_registry(a.registry);
  auto files = model_files(a.targets);
  std::vector<ModelGraph> graphs;
  for (const auto& f : files) graphs.push_back(load_model(f));

  std::vector<TargetCase> cases;
  std::vector<std::string> notes;
  for (const auto& g : graphs) {
    auto dir = fs::path(a.examples) / g.meta.name;
    auto labels_path = dir / "labels.json";
    if (!fs::exists(labels_path)) {
      notes.push_back(g.meta.name + ": no examples at " + labels_path.generic_string() + "; skipped");
      continue;
    }
    auto bytes = read_file(labels_path);
    json labels;
    try {
      labels = json::parse(bytes.begin(), bytes.end());
    } catch (const json::exception& e) {
      throw Error(ErrorCode::InvalidArgument, labels_path.string() + ": " + e.what());
    }
    TargetCase tc;
    tc.name = g.meta.name;
    tc.graph = &g;
    for (const auto& [file, label] : labels.items()) {  // object keys iterate sorted
      tc.examples.push_back({read_tensor_any(dir / file), label.get<int>()});
      tc.example_ids.push_back(file);
    }
    cases.push_back(std::move(tc));
  }

  ExperimentOptions options;
  options.kinds = parse_kinds(a.kinds);
  options.seed = cfg.seed;
  options.match = compare_options(cfg, MatchMode::Relaxed);
  options.jobs = cfg.jobs;
  const fs::path artifacts = fs::path(cfg.out) / "x_adv";
  std::mutex io;
  options.sink = [&](const std::string& target, AttackKind kind, Arm arm, std::size_t example, const AttackOutcome& o) {
    auto dir = artifacts / target / std::string(to_string(kind)) / (arm == Arm::Targeted ? "targeted" : "blind");
    std::lock_guard lock(io);
    fs::create_directories(dir);
    write_tensor_file(dir / (std::to_string(example) + ".tensor"), o.x_adv);
  };
  auto report = targeted_vs_blind(cases, registry, options);
  report.notes.insert(report.notes.begin(), notes.begin(), notes.end());

  write_text(fs::path(cfg.out) / "report.json", report.to_json() + "\n");
  write_text(fs::path(cfg.out) / "report.md", render_markdown(report));
  auto corr = correlate(report);
  write_text(fs::path(cfg.out) / "scatter.csv", corr.to_csv());
  write_manifest(cfg, {{"policy", to_string(options.match.policy.mode)}, {"threshold", cfg.threshold},
                       {"kinds", a.kinds}, {"targets", a.targets}, {"registry", a.registry}, {"examples", a.examples}},
                 {a.targets, a.registry, a.examples});
  json summary = {{"targeted", report.grand_average(Arm::Targeted)},
                  {"blind", report.grand_average(Arm::Blind)},
                  {"pcc", corr.pcc ? json(*corr.pcc) : json(nullptr)},
                  {"models", report.models.size()}};
  std::cout << summary.dump(1) << '\n';
  return 0;
}

int cmd_layers(const RunConfig& cfg, const std::string& file) {
  auto g = load_model(file);
  auto text = layer_sequence_json(g.layers);
  write_text(fs::path(cfg.out) / (g.meta.name + ".layers.json"), text + "\n");
  write_manifest(cfg, {}, {file});
  std::cout << text << '\n';
  return 0;
}

int cmd_register(const RunConfig& cfg, const std::string& registry_dir, const std::string& file, std::string name,
                 const std::string& domain) {
  if (registry_dir.empty()) throw Error(ErrorCode::InvalidArgument, "no registry: pass --registry or set MODELPROBE_REGISTRY");
  auto bytes = read_file(file);
  auto g = parse_model(bytes, file);
  if (name.empty()) name = fs::path(file).stem().string();
  auto fp = make_fingerprint(g, name, domain, false);
  write_registry_entry(registry_dir, fp, bytes);
  write_manifest(cfg, {{"registry", registry_dir}, {"name", name}, {"task_domain", domain}}, {file});
  std::cout << json{{"registered", name}, {"layers", fp.layers.size()}}.dump() << '\n';
  return 0;
}

int domain_error(ErrorCode code, const std::string& message) {
  std::cerr << json{{"error", std::string(to_string(code))}, {"message", message}}.dump() << '\n';
  return 1;
}

}  // namespace

int run(int argc, char** argv) {
  CLI::App app{"modelprobe: on-device model provenance and transfer-attack toolkit", "modelprobe"};
  app.set_version_flag("--version", std::string(kVersion));
  app.require_subcommand(1);
  RunConfig cfg;

  std::vector<std::string> files;
  std::string registry_dir, matrix_path, format = "gexf", single, name, domain;
  AttackArgs attack;
  ExperimentArgs experiment;
  if (const char* env = std::getenv("MODELPROBE_REGISTRY")) registry_dir = env;

  auto* dig = app.add_subcommand("dig", "Find and extract models inside app archives");
  dig->add_option("archives", files, "APK / ZIP files")->required()->check(CLI::ExistingFile);
  add_common(dig, cfg);

  auto* compare = app.add_subcommand("compare", "Structural and parametric similarity");
  compare->add_option("models", files, "Two models (scores) or more (matrix)")->required()->expected(2, -1);
  add_common(compare, cfg);
  add_similarity(compare, cfg);

  auto* graph = app.add_subcommand("graph", "Relation graph with Louvain communities");
  graph->add_option("models", files, "Models to compare");
  graph->add_option("--matrix", matrix_path, "Similarity matrix JSON from `compare`")->check(CLI::ExistingFile);
  graph->add_option("--format", format, "gexf, dot or json")->check(CLI::IsMember({"gexf", "dot", "json"}))->capture_default_str();
  add_common(graph, cfg);
  add_similarity(graph, cfg);

  auto* match = app.add_subcommand("match", "Find the pre-trained ancestor of each model");
  match->add_option("--registry", registry_dir, "Fingerprint registry directory (default $MODELPROBE_REGISTRY)");
  match->add_option("models", files, "Models to match")->required();
  add_common(match, cfg);
  add_similarity(match, cfg);

  auto* atk = app.add_subcommand("attack", "Craft one adversarial example on a surrogate, judge it on a target");
  atk->add_option("--kind", attack.kind, "Attack kind")->required();
  atk->add_option("--epsilon", attack.epsilon, "Budget (default: per-kind)");
  atk->add_option("--steps", attack.steps, "Iterations")->check(CLI::PositiveNumber)->capture_default_str();
  atk->add_option("--step-size", attack.step_size, "Step size (default: per-kind)");
  atk->add_option("--surrogate", attack.surrogate, "Surrogate model")->required()->check(CLI::ExistingFile);
  atk->add_option("--target", attack.target, "Target model")->required()->check(CLI::ExistingFile);
  atk->add_option("--input", attack.input, "Input tensor (.tensor or .csv)")->required()->check(CLI::ExistingFile);
  atk->add_option("--label", attack.label, "True label")->required();
  add_common(atk, cfg);

  auto* exp = app.add_subcommand("experiment", "Targeted vs blind transfer experiment");
  exp->add_option("--targets", experiment.targets, "Directory of target models")->required()->check(CLI::ExistingDirectory);
  exp->add_option("--registry", experiment.registry, "Fingerprint registry directory (default $MODELPROBE_REGISTRY)");
  exp->add_option("--examples", experiment.examples, "Directory of <target>/labels.json + tensors")->required()->check(CLI::ExistingDirectory);
  exp->add_option("--kinds", experiment.kinds, "all, or a comma-separated list")->capture_default_str();
  add_common(exp, cfg);
  add_similarity(exp, cfg);

  auto* layers = app.add_subcommand("layers", "Dump a model's layer sequence");
  layers->add_option("model", single, "Model file")->required()->check(CLI::ExistingFile);
  add_common(layers, cfg);

  auto* reg = app.add_subcommand("register", "Add a model to a fingerprint registry");
  reg->add_option("model", single, "Model file")->required()->check(CLI::ExistingFile);
  reg->add_option("--registry", registry_dir, "Registry directory (default $MODELPROBE_REGISTRY)");
  reg->add_option("--name", name, "Entry name (default: file stem)");
  reg->add_option("--domain", domain, "Task domain label");
  add_common(reg, cfg);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }
  if (experiment.registry.empty()) experiment.registry = registry_dir;

  try {
    auto* sub = app.get_subcommands().front();
    cfg.subcommand = sub->get_name();
    if (sub == dig) return cmd_dig(cfg, files);
    if (sub == compare) return cmd_compare(cfg, files);
    if (sub == graph) return cmd_graph(cfg, files, matrix_path, format);
    if (sub == match) return cmd_match(cfg, registry_dir, files);
    if (sub == atk) return cmd_attack(cfg, attack);
    if (sub == exp) return cmd_experiment(cfg, experiment);
    if (sub == layers) return cmd_layers(cfg, single);
    if (sub == reg) return cmd_register(cfg, registry_dir, single, name, domain);
  } catch (const Error& e) {
    return domain_error(e.code(), e.what());
  } catch (const fs::filesystem_error& e) {
    return domain_error(ErrorCode::IoFailure, e.what());
  }
  return 2;
}

}  // namespace modelprobe::cli
