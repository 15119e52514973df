#pragma once

// Gradient-weighted class activation maps computed in a form that can sit
// inside a training loss.

#include <cstdint>

#include <torch/torch.h>

namespace pedetect::attention {

// A classifier split at its designated feature layer.
class FeatureScoreModel {
 public:
  virtual ~FeatureScoreModel() = default;
  // (N, C, H, W) input -> (N, K, u, v) activations of the designated layer.
  virtual torch::Tensor features(const torch::Tensor& input) = 0;
  // (N, K, u, v) features -> (N, classes) pre-softmax scores.
  virtual torch::Tensor head(const torch::Tensor& features) = 0;
  virtual std::int64_t num_classes() const = 0;
};

enum class GradientMode {
  // Keep d(score)/d(features) in the graph so the loss differentiates through it.
  double_backprop,
  // Treat the neuron weights as constants of the loss.
  detached_weights,
};

struct AttentionMaps {
  torch::Tensor values;      // (N, u, v), each map in [0, 1]
  torch::Tensor normalized;  // (N,) bool; false iff the map is all zero
};

// d scores[:, class_index] / d features. Samples are independent as long as
// the head acts per sample, so the batch sum yields per-sample gradients.
torch::Tensor class_score_gradients(const torch::Tensor& scores, const torch::Tensor& features,
                                    std::int64_t class_index, GradientMode mode);
// Retrospective variant: runs the model and returns (N, K, u, v) gradients.
torch::Tensor class_score_gradients(FeatureScoreModel& model, const torch::Tensor& input,
                                    std::int64_t class_index);

// Spatial mean of the gradients: (N, K, u, v) -> (N, K), or (K, u, v) -> (K).
torch::Tensor neuron_weights(const torch::Tensor& gradients);

// ReLU(sum_k w_k f^k), divided by its maximum where that maximum is positive.
AttentionMaps attention_map(const torch::Tensor& features, const torch::Tensor& weights);

// Unnormalized ReLU(sum_k w_k f^k).
torch::Tensor raw_attention(const torch::Tensor& features, const torch::Tensor& weights);

AttentionMaps compute_attention(FeatureScoreModel& model, const torch::Tensor& input,
                                std::int64_t class_index);

struct ForwardWithAttention {
  torch::Tensor scores;
  torch::Tensor features;
  AttentionMaps attention;
};

// Training-time forward: scores plus the class attention, kept differentiable
// with respect to the model parameters under `mode`.
ForwardWithAttention forward_with_attention(FeatureScoreModel& model, const torch::Tensor& input,
                                            std::int64_t class_index, GradientMode mode);

}  // namespace pedetect::attention
