#pragma once

// Subcommand implementations behind the command-line tool. Every command reads
// one ExperimentConfig; artifacts land under the configured paths.

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pedetect/config.hpp"
#include "pedetect/error.hpp"
#include "pedetect/history.hpp"
#include "pedetect/metrics.hpp"
#include "pedetect/stage2.hpp"
#include "pedetect/synthcorpus.hpp"

namespace pedetect::pipeline {

struct Options {
  bool force = false;   // regenerate even when the artifact is up to date
  bool resume = false;  // reuse stage artifacts whose recorded hash matches
  // Replaces the command's output directory (the whole work tree for
  // run-scenario).
  std::optional<std::filesystem::path> out;
  std::optional<std::filesystem::path> checkpoint;  // stage-I checkpoint override
  std::vector<std::string> study_ids;               // export-attention selection
  std::ostream* log = nullptr;                      // progress; std::cerr when null
};

// Resolved artifact locations.
struct Layout {
  std::filesystem::path corpus, slabs, features, checkpoints, reports, attention;

  std::filesystem::path stage1_checkpoint(bool attention, std::uint64_t seed) const;
  std::filesystem::path feature_dir(bool attention, std::uint64_t seed) const;
  std::filesystem::path stage2_checkpoint(int scenario, std::uint64_t seed) const;
  std::filesystem::path report(int scenario, std::uint64_t seed) const;
};

// `out` replaces every work directory (not the corpus).
Layout layout(const config::ExperimentConfig& c, const std::optional<std::filesystem::path>& out = {});

// Any exception escaping `body` is rethrown as the same error kind with the
// stage name prefixed to its message.
template <class F>
auto run_stage(const std::string& name, F&& body) -> decltype(body());

struct GenResult {
  synth::CorpusManifest manifest;
  std::filesystem::path dir;
  bool generated = false;  // false: an identical corpus was already on disk
};
GenResult cmd_gen(const config::ExperimentConfig& c, const Options& o = {});

struct PreprocessResult {
  std::filesystem::path dir;
  std::int64_t studies = 0;
  std::int64_t fallback_bands = 0;
};
// One "ASLB1" slab-sequence file per study plus index.json.
PreprocessResult cmd_preprocess(const config::ExperimentConfig& c, const Options& o = {});

struct Stage1Outcome {
  std::filesystem::path checkpoint;
  bool attention = true;
  bool reused = false;
  std::string run_hash;
  TrainingHistory history;  // empty when reused
  nlohmann::json validation;
};
// Hash of everything that determines the stage-I weights.
std::string stage1_run_hash(const config::ExperimentConfig& c, const synth::CorpusManifest& m, bool attention);
// AT follows the scenario unless `attention` is given.
Stage1Outcome cmd_train_stage1(const config::ExperimentConfig& c, const Options& o = {},
                               std::optional<bool> attention = {});

struct FeatureOutcome {
  std::filesystem::path dir;
  stage2::FeatureIndex index;
  bool reused = false;
};
// Encodes every development and test study with the scenario's stage-I
// checkpoint (or o.checkpoint).
FeatureOutcome cmd_extract_features(const config::ExperimentConfig& c, const Options& o = {},
                                    std::optional<bool> attention = {});

// Study ids of a split in the scenario's stage-II study set.
std::vector<std::string> stage2_studies(const config::ExperimentConfig& c, const synth::CorpusManifest& m,
                                        synth::Split split);

struct Stage2Outcome {
  std::filesystem::path checkpoint;
  bool reused = false;
  TrainingHistory history;
  std::int64_t train_studies = 0, validation_studies = 0;
};
Stage2Outcome cmd_train_stage2(const config::ExperimentConfig& c, const Options& o = {});

struct ScenarioReport {
  nlohmann::json report;
  metrics::EvalResult test;
  std::filesystem::path report_path, scores_path;
};
// Stage I -> features -> stage II -> test evaluation on an existing corpus.
ScenarioReport cmd_run_scenario(const config::ExperimentConfig& c, const Options& o = {});

// Mean/max slab-score baselines per study set next to the recurrent model's
// AUC when the matching stage-II checkpoint exists.
nlohmann::json cmd_eval_baselines(const config::ExperimentConfig& c, const Options& o = {});

struct ExportResult {
  std::vector<std::filesystem::path> images;
  std::vector<std::string> warnings;
};
// Overlay per annotated slab (negatives: the band centre slab), the 8-bit
// attention map, and one "AATT1" file per study.
ExportResult cmd_export_attention(const config::ExperimentConfig& c, const Options& o = {});

// ----------------------------------------------------------------------------

template <class F>
auto run_stage(const std::string& name, F&& body) -> decltype(body()) {
  const std::string tag = "stage " + name + ": ";
  try {
    return body();
  } catch (const ConfigError& e) {
    throw ConfigError("stage " + name, e.what());
  } catch (const TrainingDivergence& e) {
    throw TrainingDivergence(tag + e.what());
  } catch (const GeometryError& e) {
    throw GeometryError(tag + e.what());
  } catch (const DataError& e) {
    throw DataError(tag + e.what());
  } catch (const std::exception& e) {
    throw std::runtime_error(tag + e.what());
  }
}

}  // namespace pedetect::pipeline
