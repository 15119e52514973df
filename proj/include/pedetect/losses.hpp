#pragma once

#include <cstdint>
#include <span>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "pedetect/attention.hpp"

namespace pedetect::losses {

inline constexpr double kProbabilityClamp = 1e-7;

struct LossConfig {
  double lambda_attention = 1.0;
  double smoothing_epsilon = 1.0;
  attention::GradientMode attention_mode = attention::GradientMode::double_backprop;

  void validate() const;
};

void to_json(nlohmann::json& j, const LossConfig& c);
void from_json(const nlohmann::json& j, LossConfig& c);

// Continuous Dice between attention maps in [0,1] and binary masks, per
// sample: (N, u, v) x (N, u, v) -> (N,). Also accepts a single (u, v) pair.
//   cDC = (2 sum(M A) + eps) / (c sum(M) + sum(A) + eps),
//   c   = sum(M A) / sum(M [A > 0]), or 1 when that support is empty.
// With eps = 0 and both maps empty, cDC = 1.
torch::Tensor continuous_dice(const torch::Tensor& attention, const torch::Tensor& mask, double epsilon);

// 1 - cDC, averaged over the batch.
torch::Tensor attention_loss(const torch::Tensor& attention, const torch::Tensor& mask, double epsilon);

// Mean categorical cross-entropy from (N, 2) logits.
torch::Tensor cross_entropy_from_logits(const torch::Tensor& logits, const torch::Tensor& labels);

struct TotalLoss {
  torch::Tensor total;
  torch::Tensor classification;
  torch::Tensor attention;  // undefined when the attention term is off
};

// CE + lambda * (1 - cDC). `attention` may be undefined when lambda == 0.
TotalLoss total_loss(const torch::Tensor& logits, const torch::Tensor& labels,
                     const torch::Tensor& attention, const torch::Tensor& mask, const LossConfig& config);

// Mean binary cross-entropy; probabilities clamped to [1e-7, 1 - 1e-7].
torch::Tensor binary_cross_entropy(const torch::Tensor& probability, const torch::Tensor& label);

// Scalar forms.
double continuous_dice(std::span<const double> attention, std::span<const std::uint8_t> mask, double epsilon);
double attention_loss(std::span<const double> attention, std::span<const std::uint8_t> mask, double epsilon);
// Throws std::invalid_argument unless p sums to 1 within 1e-6 with every entry > 0.
double categorical_cross_entropy(std::span<const double> distribution, std::int64_t label);
double binary_cross_entropy(double probability, int label);

}  // namespace pedetect::losses
