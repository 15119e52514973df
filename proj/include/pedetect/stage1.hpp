#pragma once

// Stage-I data assembly and training.

#include <cstdint>
#include <filesystem>
#include <map>
#include <random>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "pedetect/encoder.hpp"
#include "pedetect/history.hpp"
#include "pedetect/losses.hpp"
#include "pedetect/metrics.hpp"
#include "pedetect/preprocess.hpp"
#include "pedetect/synthcorpus.hpp"

namespace pedetect::stage1 {

struct PreparedStudy {
  Volume volume;                         // windowed, cropped
  std::map<std::int64_t, Mask2D> masks;  // resampled slice -> cropped mask
};

PreparedStudy prepare_study(const std::filesystem::path& corpus_dir, const synth::ManifestEntry& entry,
                            const preprocess::PreprocessConfig& pre);

struct SlabDataset {
  torch::Tensor images;    // (N, 5, H, W) float in [0, 255]
  torch::Tensor masks;     // (N, u, v) float {0, 1}; zero for negatives
  torch::Tensor labels;    // (N,) int64
  torch::Tensor has_mask;  // (N,) bool; true for annotated positives
  std::vector<std::string> study_ids;
  std::vector<std::int64_t> slices;

  std::int64_t size() const { return images.defined() ? images.size(0) : 0; }
  SlabDataset subset(const torch::Tensor& index) const;
  static SlabDataset concat(const SlabDataset& a, const SlabDataset& b);
};

// Prepared negative volumes from which balanced negative slabs are drawn.
struct NegativePool {
  std::vector<std::string> study_ids;
  std::vector<Volume> volumes;  // windowed, cropped
  std::vector<preprocess::Band> bands;
  std::int64_t mask_rows = 0, mask_cols = 0;

  SlabDataset draw(std::int64_t count, std::mt19937_64& rng) const;
};

struct Stage1Data {
  SlabDataset train_positives;
  SlabDataset train_negatives;
  SlabDataset validation;
  NegativePool train_pool;

  SlabDataset train() const { return SlabDataset::concat(train_positives, train_negatives); }
};

// Annotated positive slabs plus an equal number of negative slabs for each
// split, drawn with `seed`. Only studies flagged `annotated` are used.
Stage1Data build_stage1_data(const std::filesystem::path& corpus_dir, const synth::CorpusManifest& manifest,
                             const preprocess::PreprocessConfig& pre, const encoder::EncoderConfig& enc,
                             std::uint64_t seed);

struct Stage1Result {
  encoder::ResidualEncoder model{nullptr};
  TrainingHistory history;
};

// Trains with CE (+ lambda * attention loss when use_attention_loss) and keeps
// the epoch with the best validation accuracy. The checkpoint is written when
// `checkpoint_path` is nonempty; `extra` keys go into its metadata.
Stage1Result train_stage1(const Stage1Data& data, const encoder::EncoderConfig& enc, const losses::LossConfig& loss,
                          const std::filesystem::path& checkpoint_path = {}, const nlohmann::json& extra = {});

struct Stage1Validation {
  double accuracy = 0.0;
  metrics::EvalResult eval;
  std::vector<double> scores;  // positive-class softmax probability
  std::vector<int> labels;
  double mean_inside_fraction = 0.0;  // over annotated positives
  double hit_rate = 0.0;
  double classification_loss = 0.0;
  double attention_loss = 0.0;
};

Stage1Validation validate_stage1(encoder::ResidualEncoder& model, const SlabDataset& data,
                                 const losses::LossConfig& loss = {}, std::int64_t batch_size = 64);
Stage1Validation validate_stage1(const std::filesystem::path& checkpoint, const SlabDataset& data,
                                 const losses::LossConfig& loss = {});

torch::Tensor slab_tensor(const preprocess::Slab& slab);
torch::Tensor mask_tensor(const Mask2D& mask);

}  // namespace pedetect::stage1
