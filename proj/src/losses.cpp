#include "pedetect/losses.hpp"

#include <cmath>
#include <stdexcept>

#include "pedetect/error.hpp"

namespace pedetect::losses {

void LossConfig::validate() const {
  if (!(lambda_attention >= 0.0)) throw ConfigError("lambda_attention", "must be >= 0");
  if (!(smoothing_epsilon >= 0.0)) throw ConfigError("smoothing_epsilon", "must be >= 0");
}

void to_json(nlohmann::json& j, const LossConfig& c) {
  j = nlohmann::json{{"lambda_attention", c.lambda_attention},
                     {"smoothing_epsilon", c.smoothing_epsilon},
                     {"attention_mode", c.attention_mode == attention::GradientMode::double_backprop
                                            ? "double_backprop"
                                            : "detached_weights"}};
}

void from_json(const nlohmann::json& j, LossConfig& c) {
  LossConfig d;
  c.lambda_attention = j.value("lambda_attention", d.lambda_attention);
  c.smoothing_epsilon = j.value("smoothing_epsilon", d.smoothing_epsilon);
  const auto mode = j.value("attention_mode", std::string("double_backprop"));
  if (mode == "double_backprop")
    c.attention_mode = attention::GradientMode::double_backprop;
  else if (mode == "detached_weights")
    c.attention_mode = attention::GradientMode::detached_weights;
  else
    throw ConfigError("attention_mode", "expected double_backprop or detached_weights, got " + mode);
}

torch::Tensor continuous_dice(const torch::Tensor& attention, const torch::Tensor& mask, double epsilon) {
  if (attention.sizes() != mask.sizes())
    throw GeometryError("continuous_dice: attention and mask shapes differ");
  const bool single = attention.dim() == 2;
  auto a = single ? attention.unsqueeze(0) : attention;
  auto m = (single ? mask.unsqueeze(0) : mask).to(a.dtype());
  if (a.dim() != 3) throw GeometryError("continuous_dice expects (u, v) or (N, u, v)");

  auto overlap = (m * a).sum({1, 2});
  auto support = (m * (a > 0).to(a.dtype())).sum({1, 2});
  auto has_support = support > 0;
  auto safe_support = torch::where(has_support, support, torch::ones_like(support));
  auto c = torch::where(has_support, overlap / safe_support, torch::ones_like(overlap));

  auto num = 2.0 * overlap + epsilon;
  auto den = c * m.sum({1, 2}) + a.sum({1, 2}) + epsilon;
  auto nonzero = den > 0;
  auto safe_den = torch::where(nonzero, den, torch::ones_like(den));
  auto cdc = torch::where(nonzero, num / safe_den, torch::ones_like(num));
  return single ? cdc.squeeze(0) : cdc;
}

torch::Tensor attention_loss(const torch::Tensor& attention, const torch::Tensor& mask, double epsilon) {
  return (1.0 - continuous_dice(attention, mask, epsilon)).mean();
}

torch::Tensor cross_entropy_from_logits(const torch::Tensor& logits, const torch::Tensor& labels) {
  return torch::nll_loss(torch::log_softmax(logits, 1), labels.to(torch::kLong));
}

TotalLoss total_loss(const torch::Tensor& logits, const torch::Tensor& labels, const torch::Tensor& attention,
                     const torch::Tensor& mask, const LossConfig& config) {
  config.validate();
  TotalLoss out;
  out.classification = cross_entropy_from_logits(logits, labels);
  out.total = out.classification;
  if (config.lambda_attention > 0.0) {
    if (!attention.defined()) throw std::invalid_argument("total_loss: attention required when lambda > 0");
    out.attention = attention_loss(attention, mask, config.smoothing_epsilon);
    out.total = out.classification + config.lambda_attention * out.attention;
  }
  return out;
}

torch::Tensor binary_cross_entropy(const torch::Tensor& probability, const torch::Tensor& label) {
  auto p = probability.clamp(kProbabilityClamp, 1.0 - kProbabilityClamp);
  auto y = label.to(p.dtype());
  return -(y * torch::log(p) + (1.0 - y) * torch::log(1.0 - p)).mean();
}

double continuous_dice(std::span<const double> attention, std::span<const std::uint8_t> mask, double epsilon) {
  if (attention.size() != mask.size()) throw GeometryError("continuous_dice: attention and mask shapes differ");
  auto a = torch::tensor(std::vector<double>(attention.begin(), attention.end()), torch::kFloat64);
  auto m = torch::tensor(std::vector<double>(mask.begin(), mask.end()), torch::kFloat64);
  return continuous_dice(a.view({1, -1}), m.view({1, -1}), epsilon).item<double>();
}

double attention_loss(std::span<const double> attention, std::span<const std::uint8_t> mask, double epsilon) {
  return 1.0 - continuous_dice(attention, mask, epsilon);
}

double categorical_cross_entropy(std::span<const double> distribution, std::int64_t label) {
  double total = 0.0;
  for (double p : distribution) {
    if (!(p > 0.0)) throw std::invalid_argument("categorical_cross_entropy: probabilities must be > 0");
    total += p;
  }
  if (std::abs(total - 1.0) > 1e-6) throw std::invalid_argument("categorical_cross_entropy: probabilities must sum to 1");
  if (label < 0 || label >= static_cast<std::int64_t>(distribution.size()))
    throw std::out_of_range("categorical_cross_entropy: label outside the distribution");
  return -std::log(distribution[static_cast<std::size_t>(label)]);
}

double binary_cross_entropy(double probability, int label) {
  const double p = std::clamp(probability, kProbabilityClamp, 1.0 - kProbabilityClamp);
  return label ? -std::log(p) : -std::log(1.0 - p);
}

}  // namespace pedetect::losses
