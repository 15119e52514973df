#include "pedetect/attention.hpp"

#include <stdexcept>
#include <string>

#include "pedetect/error.hpp"

namespace pedetect::attention {
namespace {

void check_features(const torch::Tensor& features) {
  if (!features.defined() || features.dim() != 4)
    throw GeometryError("model does not expose a 4-D (N, K, u, v) feature layer");
}

void check_class(const torch::Tensor& scores, std::int64_t class_index) {
  if (scores.dim() != 2) throw GeometryError("scores must be (N, classes)");
  if (class_index < 0 || class_index >= scores.size(1))
    throw std::out_of_range("class index " + std::to_string(class_index) + " outside [0, " +
                            std::to_string(scores.size(1)) + ")");
}

}  // namespace

torch::Tensor class_score_gradients(const torch::Tensor& scores, const torch::Tensor& features,
                                    std::int64_t class_index, GradientMode mode) {
  check_features(features);
  check_class(scores, class_index);
  const auto score = scores.select(1, class_index).sum();
  if (!score.requires_grad() || !features.requires_grad()) return torch::zeros_like(features);
  const bool create_graph = mode == GradientMode::double_backprop;
  auto grads = torch::autograd::grad({score}, {features}, {}, /*retain_graph=*/true, create_graph,
                                     /*allow_unused=*/true);
  if (!grads[0].defined()) return torch::zeros_like(features);
  return create_graph ? grads[0] : grads[0].detach();
}

torch::Tensor class_score_gradients(FeatureScoreModel& model, const torch::Tensor& input,
                                    std::int64_t class_index) {
  torch::AutoGradMode grad_on(true);
  auto f = model.features(input);
  check_features(f);
  if (!f.requires_grad()) f = f.detach().requires_grad_(true);
  auto scores = model.head(f);
  return class_score_gradients(scores, f, class_index, GradientMode::detached_weights);
}

torch::Tensor neuron_weights(const torch::Tensor& gradients) {
  if (gradients.dim() == 3) return gradients.mean({1, 2});
  if (gradients.dim() == 4) return gradients.mean({2, 3});
  throw GeometryError("gradients must be (K, u, v) or (N, K, u, v)");
}

torch::Tensor raw_attention(const torch::Tensor& features, const torch::Tensor& weights) {
  const bool single = features.dim() == 3;
  auto f = single ? features.unsqueeze(0) : features;
  auto w = single ? weights.unsqueeze(0) : weights;
  check_features(f);
  if (w.dim() != 2 || w.size(0) != f.size(0) || w.size(1) != f.size(1))
    throw GeometryError("weights must be (N, K) matching features (N, K, u, v)");
  auto raw = torch::relu((f * w.unsqueeze(-1).unsqueeze(-1)).sum(1));
  return single ? raw.squeeze(0) : raw;
}

AttentionMaps attention_map(const torch::Tensor& features, const torch::Tensor& weights) {
  const bool single = features.dim() == 3;
  auto raw = raw_attention(features, weights);
  if (single) raw = raw.unsqueeze(0);
  auto peak = raw.amax({1, 2});
  auto normalized = peak > 0;
  auto denom = torch::where(normalized, peak, torch::ones_like(peak));
  auto values = raw / denom.unsqueeze(-1).unsqueeze(-1);
  if (single) return {values.squeeze(0), normalized.squeeze(0)};
  return {values, normalized};
}

AttentionMaps compute_attention(FeatureScoreModel& model, const torch::Tensor& input,
                                std::int64_t class_index) {
  torch::AutoGradMode grad_on(true);
  auto f = model.features(input);
  check_features(f);
  if (!f.requires_grad()) f = f.detach().requires_grad_(true);
  auto scores = model.head(f);
  auto grads = class_score_gradients(scores, f, class_index, GradientMode::detached_weights);
  auto maps = attention_map(f.detach(), neuron_weights(grads));
  return {maps.values.detach(), maps.normalized};
}

ForwardWithAttention forward_with_attention(FeatureScoreModel& model, const torch::Tensor& input,
                                            std::int64_t class_index, GradientMode mode) {
  auto f = model.features(input);
  check_features(f);
  auto scores = model.head(f);
  auto grads = class_score_gradients(scores, f, class_index, mode);
  auto maps = attention_map(f, neuron_weights(grads));
  return {scores, f, maps};
}

}  // namespace pedetect::attention
