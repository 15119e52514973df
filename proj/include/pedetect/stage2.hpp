#pragma once

// Stage-II plumbing: frozen-encoder feature extraction, the on-disk feature
// store, and aggregator training on stored sequences.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "pedetect/aggregator.hpp"
#include "pedetect/encoder.hpp"
#include "pedetect/history.hpp"
#include "pedetect/preprocess.hpp"
#include "pedetect/synthcorpus.hpp"

namespace pedetect::stage2 {

struct FeatureSequence {
  torch::Tensor values;  // (T, u, v, K) float32
  std::string study_id;
  int label = 0;
  std::vector<double> slab_scores;  // stage-I positive-class probability per slab
};

// Windowed, cropped slab sequence over the selected band of one study.
preprocess::SlabSequence study_sequence(const std::filesystem::path& corpus_dir, const synth::ManifestEntry& entry,
                                        const preprocess::PreprocessConfig& pre);

// Features of every slab in z order; the encoder is run in eval mode without
// gradients. Throws GeometryError when the slab size does not match.
FeatureSequence encode_study(encoder::ResidualEncoder& model, const preprocess::SlabSequence& sequence,
                             const std::string& study_id = {});

struct FeatureIndexEntry {
  std::string id;
  int label = 0;
  synth::Split split = synth::Split::train;
  bool annotated = false;
  std::string file;
  std::int64_t length = 0;
  std::vector<double> slab_scores;
};

struct FeatureIndex {
  std::string encoder_digest;  // checksum of the stage-I checkpoint file
  std::int64_t rows = 0, cols = 0, channels = 0;
  std::vector<FeatureIndexEntry> studies;

  const FeatureIndexEntry* find(const std::string& id) const;
};

void to_json(nlohmann::json& j, const FeatureIndex& index);
void from_json(const nlohmann::json& j, FeatureIndex& index);

inline constexpr const char* kFeatureIndexFile = "index.json";

void write_features(const std::filesystem::path& path, const FeatureSequence& sequence);
// Reads an "AFTR1" file back into (T, u, v, K) values.
torch::Tensor read_features(const std::filesystem::path& path);

// Encodes `studies` with the checkpoint and writes one feature file per study
// plus index.json into `out_dir`.
FeatureIndex extract_features(const std::filesystem::path& checkpoint, const std::filesystem::path& corpus_dir,
                              const std::vector<const synth::ManifestEntry*>& studies,
                              const preprocess::PreprocessConfig& pre, const std::filesystem::path& out_dir);
FeatureIndex read_feature_index(const std::filesystem::path& dir);

// Stacked aggregator input: features (N, T, K, u, v), lengths (N,), labels (N,).
struct SequenceBatch {
  torch::Tensor features;
  torch::Tensor lengths;
  torch::Tensor labels;
  std::vector<std::string> study_ids;
  std::vector<std::vector<double>> slab_scores;

  std::int64_t size() const { return features.defined() ? features.size(0) : 0; }
};

// Loads the listed studies from a feature store; DataError for a study the
// store does not cover.
SequenceBatch load_sequences(const std::filesystem::path& dir, const FeatureIndex& index,
                             const std::vector<std::string>& study_ids);
SequenceBatch stack_sequences(const std::vector<FeatureSequence>& sequences);

struct Stage2Result {
  aggregator::RecurrentAggregator model{nullptr};
  TrainingHistory history;
};

// BCE training; keeps the epoch with the best validation accuracy.
Stage2Result train_stage2(const SequenceBatch& train, const SequenceBatch& validation,
                          const aggregator::AggregatorConfig& config,
                          const std::filesystem::path& checkpoint_path = {}, const nlohmann::json& extra = {});

std::vector<double> predict(aggregator::RecurrentAggregator& model, const SequenceBatch& batch,
                            std::int64_t batch_size = 32);

}  // namespace pedetect::stage2
