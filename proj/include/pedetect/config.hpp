#pragma once

// Experiment configuration: one JSON document holding every module's settings,
// the scenario tag, the artifact paths and the global seed.

#include <cstdint>
#include <filesystem>
#include <string>

#include <nlohmann/json.hpp>

#include "pedetect/aggregator.hpp"
#include "pedetect/encoder.hpp"
#include "pedetect/losses.hpp"
#include "pedetect/preprocess.hpp"
#include "pedetect/synthcorpus.hpp"

namespace pedetect::config {

struct Paths {
  std::string corpus = "corpus";
  std::string slabs = "work/slabs";
  std::string features = "work/features";
  std::string checkpoints = "work/checkpoints";
  std::string reports = "work/reports";
  std::string attention = "work/attention";
};

// Seed streams derived from the global seed.
enum class SeedStream : std::uint64_t { encoder = 1, stage1_sampling = 2, aggregator = 3 };

struct ExperimentConfig {
  synth::CorpusConfig corpus;
  preprocess::PreprocessConfig preprocess;
  encoder::EncoderConfig encoder;
  losses::LossConfig loss;
  aggregator::AggregatorConfig aggregator;
  int scenario = 3;
  Paths paths;
  std::uint64_t seed = 0;

  // Directory relative paths are resolved against (the config file's
  // directory when loaded from disk). Not serialized.
  std::filesystem::path base_dir;

  // Throws ConfigError naming the first invalid field.
  void validate() const;
  std::filesystem::path resolve(const std::string& path) const;
  std::uint64_t derived_seed(SeedStream stream) const;
  // FNV-1a of the canonical serialization.
  std::string hash() const;

  // Stage-I settings with or without attention training (lambda = 0 when
  // off) and the derived encoder seed.
  encoder::EncoderConfig stage1_encoder(bool attention) const;
  losses::LossConfig stage1_loss(bool attention) const;
  // AT is on for scenarios 1 and 3.
  bool attention_training() const { return scenario != 2; }
  // Scenario 1 trains stage II on the annotated subset only.
  bool annotated_only() const { return scenario == 1; }
  aggregator::AggregatorConfig stage2_aggregator() const;
};

void to_json(nlohmann::json& j, const ExperimentConfig& c);
// Rejects unknown top-level and path keys; sub-configs fill defaults.
void from_json(const nlohmann::json& j, ExperimentConfig& c);

// Parse a config file; ConfigError on unreadable or malformed input, then
// validate().
ExperimentConfig load(const std::filesystem::path& path);
void save(const std::filesystem::path& path, const ExperimentConfig& c);

// Full-scale defaults use the struct defaults; this is the CPU desk setup the
// acceptance suite runs.
ExperimentConfig desk_config();

}  // namespace pedetect::config
