#include "modelprobe/registry.hpp"

#include <algorithm>
#include <thread>

#include "json.hpp"
#include "modelprobe/error.hpp"

namespace modelprobe {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr std::string_view kSuffix = ".fingerprint.json";

json unit_json(const LayerUnit& u) {
  return {{"identifier", u.identifier}, {"shape", u.shape}, {"dtype", to_string(u.dtype)}, {"opcode", u.opcode}};
}

}  // namespace

std::vector<Digest> param_digests(const ModelGraph& model) {
  std::vector<Digest> out;
  out.reserve(model.params.size());
  for (const auto& p : model.params) out.push_back(p.digest());
  return out;
}

Fingerprint make_fingerprint(const ModelGraph& model, std::string name, std::string task_domain, bool keep_model) {
  Fingerprint fp;
  fp.name = std::move(name);
  fp.task_domain = std::move(task_domain);
  fp.layers = model.layers;
  fp.param_digests = param_digests(model);
  if (keep_model) fp.model = std::make_shared<const ModelGraph>(model);
  return fp;
}

std::string fingerprint_json(const Fingerprint& fp) {
  json j;
  j["name"] = fp.name;
  j["task_domain"] = fp.task_domain;
  j["layer_sequence"] = json::array();
  for (const auto& u : fp.layers) j["layer_sequence"].push_back(unit_json(u));
  j["param_digests"] = json::array();
  for (const auto& d : fp.param_digests) j["param_digests"].push_back(d.hex());
  return j.dump(1);
}

Fingerprint parse_fingerprint_json(std::string_view text) {
  Fingerprint fp;
  try {
    auto j = json::parse(text);
    fp.name = j.at("name").get<std::string>();
    fp.task_domain = j.value("task_domain", "");
    for (const auto& u : j.at("layer_sequence")) {
      LayerUnit unit;
      unit.identifier = u.at("identifier").get<std::string>();
      unit.shape = u.at("shape").get<std::vector<std::int32_t>>();
      unit.dtype = dtype_from_string(u.at("dtype").get<std::string>());
      unit.opcode = u.value("opcode", 0);
      fp.layers.push_back(std::move(unit));
    }
    for (const auto& d : j.at("param_digests")) fp.param_digests.push_back(Digest::from_hex(d.get<std::string>()));
  } catch (const json::exception& e) {
    throw Error(ErrorCode::CorruptRegistry, std::string("malformed fingerprint: ") + e.what());
  } catch (const Error& e) {
    throw Error(ErrorCode::CorruptRegistry, std::string("malformed fingerprint: ") + e.what());
  }
  if (fp.param_digests.size() != fp.layers.size()) {
    throw Error(ErrorCode::CorruptRegistry, "fingerprint " + fp.name + ": digest count differs from layer count");
  }
  return fp;
}

Registry::Registry(std::vector<Fingerprint> entries) : entries_(std::move(entries)) {
  std::sort(entries_.begin(), entries_.end(), [](const auto& a, const auto& b) { return a.name < b.name; });
}

const Fingerprint* Registry::find(std::string_view name) const {
  for (const auto& e : entries_) {
    if (e.name == name) return &e;
  }
  return nullptr;
}

Registry load_registry(const fs::path& dir) {
  std::error_code ec;
  if (!fs::is_directory(dir, ec)) throw Error(ErrorCode::IoFailure, "registry directory not found: " + dir.string());
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(dir)) {
    auto name = entry.path().filename().string();
    if (entry.is_regular_file() && name.size() > kSuffix.size() && name.ends_with(kSuffix)) files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  std::vector<Fingerprint> entries;
  for (const auto& file : files) {
    auto bytes = read_file(file);
    auto fp = parse_fingerprint_json(std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()));
    auto stem = file.filename().string();
    stem.resize(stem.size() - kSuffix.size());
    auto weights = dir / (stem + ".tflite");
    if (fs::exists(weights)) {
      ModelGraph model;
      try {
        model = load_model(weights);
      } catch (const Error& e) {
        throw Error(ErrorCode::CorruptRegistry, "registry model " + weights.string() + " unreadable: " + e.what());
      }
      if (param_digests(model) != fp.param_digests || model.layers.size() != fp.layers.size()) {
        throw Error(ErrorCode::CorruptRegistry, "registry model " + weights.string() + " does not match its fingerprint");
      }
      fp.model = std::make_shared<const ModelGraph>(std::move(model));
    }
    entries.push_back(std::move(fp));
  }
  return Registry(std::move(entries));
}

void write_registry_entry(const fs::path& dir, const Fingerprint& fp, std::span<const std::uint8_t> model_bytes) {
  fs::create_directories(dir);
  write_file(dir / (fp.name + std::string(kSuffix)), fingerprint_json(fp));
  if (!model_bytes.empty()) write_file(dir / (fp.name + ".tflite"), model_bytes);
}

std::string_view to_string(TuningClass c) {
  switch (c) {
    case TuningClass::Identical: return "Identical";
    case TuningClass::FeatureExtraction: return "FeatureExtraction";
    case TuningClass::FineTuned: return "FineTuned";
    case TuningClass::Unrelated: return "Unrelated";
  }
  return "Unrelated";
}

TuningClass classify_tuning(const SimilarityScore& score, double threshold) {
  if (score.structural < threshold || !score.parametric) return TuningClass::Unrelated;
  if (score.structural == 1.0 && *score.parametric == 1.0) return TuningClass::Identical;
  return *score.parametric > kFeatureExtractionCut ? TuningClass::FeatureExtraction : TuningClass::FineTuned;
}

SimilarityScore score_against(const ModelGraph& model, const Fingerprint& fp, const CompareOptions& options) {
  auto score = structural_similarity(model.layers, fp.layers, options.policy);
  if (score.structural < options.threshold) return score;
  if (options.tolerance > 0.0 && fp.model) {
    return with_parametric(score, aligned_param_equality(model.params, fp.model->params, options.tolerance),
                           options.threshold);
  }
  auto mine = param_digests(model);
  return with_parametric(score, aligned_digest_equality(mine, fp.param_digests), options.threshold);
}

PretrainedMatch match_pretrained(const ModelGraph& model, const Registry& registry, const CompareOptions& options) {
  PretrainedMatch m;
  m.query = model.meta.name;
  const Fingerprint* best = nullptr;
  SimilarityScore best_score;
  for (const auto& fp : registry.entries()) {
    auto s = score_against(model, fp, options);
    if (s.structural < options.threshold) continue;
    auto better = [&] {
      if (!best) return true;
      if (s.structural != best_score.structural) return s.structural > best_score.structural;
      double p = s.parametric.value_or(0.0), q = best_score.parametric.value_or(0.0);
      if (p != q) return p > q;
      return fp.name < best->name;
    }();
    if (better) best = &fp, best_score = s;
  }
  if (best) {
    m.best = best->name;
    m.score = best_score;
    m.tuning = classify_tuning(best_score, options.threshold);
  }
  return m;
}

std::string CorpusSummary::to_json() const {
  json j;
  j["matches"] = json::array();
  for (const auto& m : matches) {
    json s = {{"structural", m.score.structural},
              {"parametric", m.score.parametric ? json(*m.score.parametric) : json(nullptr)}};
    j["matches"].push_back({{"query", m.query},
                            {"best", m.best ? json(*m.best) : json(nullptr)},
                            {"tuning", to_string(m.tuning)},
                            {"score", s}});
  }
  j["per_class"] = per_class;
  j["per_fingerprint"] = per_fingerprint;
  return j.dump(1);
}

CorpusSummary classify_corpus(std::span<const ModelGraph> models, const Registry& registry,
                              const CompareOptions& options, unsigned jobs) {
  CorpusSummary summary;
  summary.matches.resize(models.size());
  jobs = std::max(1u, std::min<unsigned>(jobs, static_cast<unsigned>(models.size())));
  {
    std::vector<std::jthread> workers;
    for (unsigned w = 0; w < jobs; ++w) {
      workers.emplace_back([&, w] {
        for (std::size_t i = w; i < models.size(); i += jobs) {
          summary.matches[i] = match_pretrained(models[i], registry, options);
        }
      });
    }
  }
  for (const auto& m : summary.matches) {
    ++summary.per_class[std::string(to_string(m.tuning))];
    ++summary.per_fingerprint[m.best ? *m.best : std::string("Unrelated")];
  }
  return summary;
}

}  // namespace modelprobe
