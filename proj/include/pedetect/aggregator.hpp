#pragma once

// Stage-II study classifier: stacked bidirectional convolutional LSTM units
// over per-slab encoder features, a mean over the slab axis and a sigmoid head.

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

namespace pedetect::aggregator {

enum class MergeMode { concat, sum };
enum class ZPooling {
  // Mean over slabs, then flatten channels x space into the dense head.
  mean_then_flatten,
  // Mean over slabs and space.
  global_average,
};

struct AggregatorConfig {
  std::int64_t units = 2;
  std::int64_t filters = 96;
  std::int64_t kernel = 3;
  std::int64_t pool = 2;
  double recurrent_dropout = 0.2;
  double head_dropout = 0.5;
  std::int64_t epochs = 50;
  std::int64_t batch_size = 32;
  double learning_rate = 1e-4;
  MergeMode merge_mode = MergeMode::concat;
  ZPooling z_pooling = ZPooling::mean_then_flatten;
  std::uint64_t seed = 0;

  void validate() const;
};

void to_json(nlohmann::json& j, const AggregatorConfig& c);
void from_json(const nlohmann::json& j, AggregatorConfig& c);

// Encoder feature geometry the aggregator is built for.
struct InputGeometry {
  std::int64_t channels = 512;
  std::int64_t rows = 24;
  std::int64_t cols = 24;
};

// Spatial side after every unit; throws GeometryError when a pooling step
// meets an odd side.
std::vector<std::pair<std::int64_t, std::int64_t>> unit_geometry(const AggregatorConfig& config,
                                                                 const InputGeometry& input);

struct ConvLstmCellImpl : torch::nn::Module {
  ConvLstmCellImpl(std::int64_t input_channels, std::int64_t hidden, std::int64_t kernel);
  // One step; returns (h, c).
  std::pair<torch::Tensor, torch::Tensor> forward(const torch::Tensor& x, const torch::Tensor& h,
                                                  const torch::Tensor& c);

  std::int64_t input_channels, hidden;
  torch::nn::Conv2d gates{nullptr};
};
TORCH_MODULE(ConvLstmCell);

struct BidirectionalUnitImpl : torch::nn::Module {
  BidirectionalUnitImpl(std::int64_t input_channels, const AggregatorConfig& config);
  // (N, T, C, u, v) -> (N, T, C', u / 2, v / 2). `lengths` holds the valid
  // prefix length of every sequence.
  torch::Tensor forward(const torch::Tensor& sequence, const torch::Tensor& lengths);

  std::int64_t output_channels() const;

  AggregatorConfig config;
  ConvLstmCell ascending{nullptr}, descending{nullptr};
  torch::nn::BatchNorm2d norm{nullptr};

 private:
  torch::Tensor run(ConvLstmCell& cell, const torch::Tensor& sequence);
};
TORCH_MODULE(BidirectionalUnit);

class RecurrentAggregatorImpl : public torch::nn::Module {
 public:
  RecurrentAggregatorImpl(AggregatorConfig config, InputGeometry input);

  // (N, T, K, u, v) features -> (N,) probabilities. `lengths` (N,) int64 is
  // optional; sequences are right padded beyond their length.
  torch::Tensor forward(const torch::Tensor& features, const torch::Tensor& lengths = {});
  torch::Tensor logits(const torch::Tensor& features, const torch::Tensor& lengths = {});

  const AggregatorConfig& config() const { return config_; }
  const InputGeometry& input_geometry() const { return input_; }
  std::uint64_t architecture_hash() const;

  // Same function on z-reversed input: ascending and descending cells swap
  // roles and downstream channel order is permuted to match.
  std::shared_ptr<RecurrentAggregatorImpl> direction_swapped() const;

  torch::nn::ModuleList units{nullptr};
  torch::nn::Dropout dropout{nullptr};
  torch::nn::Linear dense{nullptr};

 private:
  AggregatorConfig config_;
  InputGeometry input_;
};
TORCH_MODULE(RecurrentAggregator);

RecurrentAggregator make_aggregator(const AggregatorConfig& config, const InputGeometry& input);

// Reverses the valid prefix of each sequence along dim 1.
torch::Tensor reverse_valid(const torch::Tensor& sequence, const torch::Tensor& lengths);

// Right-pads (T_i, K, u, v) sequences to a batch; returns (batch, lengths).
std::pair<torch::Tensor, torch::Tensor> pad_sequences(const std::vector<torch::Tensor>& sequences);

double baseline_aggregate(std::span<const double> slab_scores, std::string_view mode);

void save_aggregator(const std::filesystem::path& path, RecurrentAggregator& model, const nlohmann::json& extra = {});
RecurrentAggregator load_aggregator(const std::filesystem::path& path);

}  // namespace pedetect::aggregator
