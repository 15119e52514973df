#pragma once

// Stage-I slab classifier: an 18-layer residual network over 5-channel slabs
// with a global-average-pool + linear two-class head. The designated feature
// layer is the output of the last residual stage.

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "pedetect/attention.hpp"

namespace pedetect::encoder {

struct EncoderConfig {
  std::int64_t input_rows = 384;
  std::int64_t input_cols = 384;
  std::int64_t in_channels = 5;
  std::int64_t total_stride = 16;
  double width_multiplier = 1.0;
  // Explicit widths override {64, 128, 256, 512} * width_multiplier.
  std::vector<std::int64_t> stage_widths_override;
  std::vector<std::int64_t> blocks_per_stage{2, 2, 2, 2};
  std::int64_t stem_kernel = 7;
  double input_scale = 1.0 / 255.0;

  std::int64_t epochs = 100;
  std::int64_t batch_size = 48;
  double learning_rate = 1e-4;
  bool use_attention_loss = true;
  // Leading epochs trained on CE alone before the attention term switches on.
  // Only epochs with the full objective are eligible for model selection.
  std::int64_t attention_warmup_epochs = 0;
  // False: negatives drawn once per run seed; true: redrawn every epoch.
  bool redraw_negatives = false;
  // Random flips/transposes of each training batch (square inputs only).
  bool augment = false;
  std::uint64_t seed = 0;

  void validate() const;
  std::vector<std::int64_t> stage_widths() const;
  std::vector<std::int64_t> stage_strides() const;
  std::int64_t feature_channels() const { return stage_widths().back(); }
  std::int64_t feature_rows() const { return input_rows / total_stride; }
  std::int64_t feature_cols() const { return input_cols / total_stride; }
  // Hash of the fields that determine parameter shapes.
  std::uint64_t architecture_hash() const;
};

void to_json(nlohmann::json& j, const EncoderConfig& c);
void from_json(const nlohmann::json& j, EncoderConfig& c);

struct BasicBlockImpl : torch::nn::Module {
  BasicBlockImpl(std::int64_t in, std::int64_t out, std::int64_t stride);
  torch::Tensor forward(const torch::Tensor& x);

  torch::nn::Conv2d conv1{nullptr}, conv2{nullptr};
  torch::nn::BatchNorm2d bn1{nullptr}, bn2{nullptr};
  torch::nn::Sequential shortcut{nullptr};
};
TORCH_MODULE(BasicBlock);

struct EncoderOutput {
  torch::Tensor scores;    // (N, 2) logits
  torch::Tensor features;  // (N, K, u, v)
};

class ResidualEncoderImpl : public torch::nn::Module, public attention::FeatureScoreModel {
 public:
  explicit ResidualEncoderImpl(EncoderConfig config);

  torch::Tensor features(const torch::Tensor& input) override;
  torch::Tensor head(const torch::Tensor& features) override;
  std::int64_t num_classes() const override { return 2; }
  EncoderOutput forward(const torch::Tensor& input);

  const EncoderConfig& config() const { return config_; }
  std::int64_t parameter_count() const;

 private:
  void check_input(const torch::Tensor& input) const;

  EncoderConfig config_;
  torch::nn::Conv2d stem_conv{nullptr};
  torch::nn::BatchNorm2d stem_bn{nullptr};
  torch::nn::ModuleList stages{nullptr};
  torch::nn::Linear classifier{nullptr};
};
TORCH_MODULE(ResidualEncoder);

ResidualEncoder make_encoder(const EncoderConfig& config);

// Re-estimates every BatchNorm running statistic as the exact average over
// `images` (train-mode forward, no gradients), removing the lag of the
// exponential average after fast weight updates.
void recalibrate_batch_norm(ResidualEncoder& model, const torch::Tensor& images, std::int64_t batch_size);

void save_encoder(const std::filesystem::path& path, ResidualEncoder& model, const nlohmann::json& extra = {});
// Rebuilds the model from the embedded config and loads it in eval mode.
ResidualEncoder load_encoder(const std::filesystem::path& path);

}  // namespace pedetect::encoder
