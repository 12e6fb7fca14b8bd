#pragma once

// Deterministic fixture corpus: three small base CNNs, four derived targets
// (two frozen-base feature extractors, one fine-tune, one extra-layer
// variant), a uint8-quantized base, labeled examples and a registry.

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "tflite_builder.hpp"

namespace fixture {

inline constexpr int kSide = 16;
inline constexpr int kChannels = 3;
inline constexpr int kClasses = 4;
inline constexpr int kExamplesPerTarget = 10;

struct CorpusModel {
  std::string name;
  std::string lineage;  // "base" or "derived"
  std::string base;     // ancestor name for derived models
  std::string method;   // feature_extraction, fine_tune, extra_layer, quantized
  ModelDef def;
  std::vector<std::uint8_t> bytes;
};

struct Example {
  std::vector<double> x;  // NHWC, values in [0, 1]
  int label = 0;
};

struct Corpus {
  std::vector<CorpusModel> models;
  std::vector<std::string> bases;    // registry members
  std::vector<std::string> targets;  // derived models used as attack targets
  std::map<std::string, std::vector<Example>> examples;
  std::vector<std::vector<double>> calibration;

  const CorpusModel& model(const std::string& name) const;
};

/// Smooth random image: coarse 4x4 noise upsampled bilinearly plus fine jitter.
std::vector<double> smooth_image(std::mt19937_64& rng);

Corpus build_corpus(std::uint64_t seed = 0);

/// Writes models/, registry/, examples/<target>/ and manifest.json under dir.
void write_corpus(const Corpus& corpus, const std::filesystem::path& dir);

/// Corpus built once per process (seed 0).
const Corpus& shared_corpus();

int argmax(const std::vector<double>& v);

}  // namespace fixture
