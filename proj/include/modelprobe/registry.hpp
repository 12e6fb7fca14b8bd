#pragma once

// Registry of pre-trained model fingerprints and ancestor matching.
//
// On disk a registry is a directory holding one `<name>.fingerprint.json`
// per model, optionally next to the model itself as `<name>.tflite`. When
// the model file is present its per-layer parameter digests must reproduce
// the fingerprint's, otherwise loading fails with CorruptRegistry.

#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "modelprobe/similarity.hpp"

namespace modelprobe {

struct Fingerprint {
  std::string name;
  std::string task_domain;
  std::vector<LayerUnit> layers;
  std::vector<Digest> param_digests;  // one per layer
  std::shared_ptr<const ModelGraph> model;  // present when the weights ship alongside
};

Fingerprint make_fingerprint(const ModelGraph& model, std::string name, std::string task_domain,
                             bool keep_model = true);
std::vector<Digest> param_digests(const ModelGraph& model);

std::string fingerprint_json(const Fingerprint& fp);
Fingerprint parse_fingerprint_json(std::string_view text);

class Registry {
 public:
  Registry() = default;
  explicit Registry(std::vector<Fingerprint> entries);

  const std::vector<Fingerprint>& entries() const { return entries_; }
  bool empty() const { return entries_.empty(); }
  std::size_t size() const { return entries_.size(); }
  const Fingerprint* find(std::string_view name) const;

 private:
  std::vector<Fingerprint> entries_;  // sorted by name
};

/// Loads every fingerprint in `dir` and verifies shipped weights. A missing
/// directory is an IoFailure; an empty one yields an empty registry.
Registry load_registry(const std::filesystem::path& dir);

/// Writes `<name>.fingerprint.json` and, when `model_bytes` is non-empty, `<name>.tflite`.
void write_registry_entry(const std::filesystem::path& dir, const Fingerprint& fp,
                          std::span<const std::uint8_t> model_bytes = {});

enum class TuningClass { Identical, FeatureExtraction, FineTuned, Unrelated };
std::string_view to_string(TuningClass c);

inline constexpr double kFeatureExtractionCut = 0.95;

/// Total over (structural, parametric): Identical iff both are 1, Unrelated
/// below the structural threshold, otherwise split at the 0.95 parametric cut.
TuningClass classify_tuning(const SimilarityScore& score, double threshold = kSimilarityThreshold);

struct PretrainedMatch {
  std::string query;
  std::optional<std::string> best;
  SimilarityScore score;
  TuningClass tuning = TuningClass::Unrelated;
};

/// Matching defaults to the relaxed policy: fine-tuning toolchains rename tensors.
inline CompareOptions default_match_options() {
  CompareOptions o;
  o.policy.mode = MatchMode::Relaxed;
  return o;
}

SimilarityScore score_against(const ModelGraph& model, const Fingerprint& fp,
                              const CompareOptions& options = default_match_options());

/// Argmax by structural score, then parametric, then name. `best` stays empty
/// when nothing reaches the structural threshold.
PretrainedMatch match_pretrained(const ModelGraph& model, const Registry& registry,
                                 const CompareOptions& options = default_match_options());

struct CorpusSummary {
  std::vector<PretrainedMatch> matches;
  std::map<std::string, std::size_t> per_class;        // tuning class -> count
  std::map<std::string, std::size_t> per_fingerprint;  // best name (or "Unrelated") -> count
  std::string to_json() const;
};

CorpusSummary classify_corpus(std::span<const ModelGraph> models, const Registry& registry,
                              const CompareOptions& options = default_match_options(), unsigned jobs = 1);

}  // namespace modelprobe
