#include "doctest_torch.hpp"

#include <random>

#include <torch/torch.h>

#include "pedetect/attention.hpp"
#include "pedetect/encoder.hpp"

using namespace pedetect;
using namespace pedetect::attention;

namespace {

// Features are the input itself; the single class score is their global mean.
struct MeanScore : FeatureScoreModel {
  torch::Tensor features(const torch::Tensor& input) override { return input; }
  torch::Tensor head(const torch::Tensor& f) override { return f.mean({1, 2, 3}).unsqueeze(1); }
  std::int64_t num_classes() const override { return 1; }
};

// Head ignores the features.
struct ConstantHead : FeatureScoreModel {
  torch::Tensor features(const torch::Tensor& input) override { return input * 2.0; }
  torch::Tensor head(const torch::Tensor& f) override {
    return torch::full({f.size(0), 2}, 0.7, f.options());
  }
  std::int64_t num_classes() const override { return 2; }
};

// Small nonlinear model in float64.
struct Tiny : torch::nn::Module, FeatureScoreModel {
  Tiny(std::int64_t k, std::int64_t side) {
    conv = register_module("conv", torch::nn::Conv2d(torch::nn::Conv2dOptions(2, k, 3).padding(1)));
    fc = register_module("fc", torch::nn::Linear(k * side * side, 2));
    to(torch::kFloat64);
  }
  torch::Tensor features(const torch::Tensor& input) override { return torch::tanh(conv(input)); }
  torch::Tensor head(const torch::Tensor& f) override { return torch::sin(fc(f.flatten(1))) * 3.0; }
  std::int64_t num_classes() const override { return 2; }
  torch::nn::Conv2d conv{nullptr};
  torch::nn::Linear fc{nullptr};
  double scale = 1.0;
};

// Scalar-loop Grad-CAM oracle for one (K, u, v) map.
std::vector<double> loop_attention(const torch::Tensor& f, const std::vector<double>& w) {
  const auto K = f.size(0), u = f.size(1), v = f.size(2);
  auto acc = f.accessor<double, 3>();
  std::vector<double> out(static_cast<std::size_t>(u * v), 0.0);
  double peak = 0.0;
  for (std::int64_t i = 0; i < u; ++i)
    for (std::int64_t j = 0; j < v; ++j) {
      double s = 0.0;
      for (std::int64_t k = 0; k < K; ++k) s += w[static_cast<std::size_t>(k)] * acc[k][i][j];
      s = s > 0.0 ? s : 0.0;
      out[static_cast<std::size_t>(i * v + j)] = s;
      peak = std::max(peak, s);
    }
  if (peak > 0.0)
    for (auto& x : out) x /= peak;
  return out;
}

}  // namespace

TEST_CASE("mean score gives a uniform 1/(u v) gradient") {
  MeanScore model;
  auto x = torch::randn({2, 1, 4, 5}, torch::kFloat64);
  auto g = class_score_gradients(model, x, 0);
  CHECK(torch::allclose(g, torch::full_like(g, 1.0 / 20.0)));
}

TEST_CASE("constant head yields zero gradients and a silent map") {
  ConstantHead model;
  auto x = torch::randn({3, 2, 4, 4});
  CHECK(class_score_gradients(model, x, 1).abs().max().item<double>() == 0.0);
  auto maps = compute_attention(model, x, 1);
  CHECK(maps.values.abs().max().item<double>() == 0.0);
  CHECK_FALSE(maps.normalized.any().item<bool>());
  CHECK_THROWS(class_score_gradients(model, x, 2));
}

TEST_CASE("score gradients match central differences of injected feature perturbations") {
  torch::manual_seed(5);
  Tiny model(3, 4);
  auto x = torch::randn({1, 2, 4, 4}, torch::kFloat64);
  auto f = model.features(x).detach().requires_grad_(true);
  auto g = class_score_gradients(model.head(f), f, 1, GradientMode::detached_weights);
  const double h = 1e-6;
  auto flat = f.detach().clone().view(-1);
  for (std::int64_t i = 0; i < flat.numel(); ++i) {
    auto up = flat.clone(), down = flat.clone();
    up[i] += h;
    down[i] -= h;
    const double fd = (model.head(up.view_as(f))[0][1].item<double>() - model.head(down.view_as(f))[0][1].item<double>()) /
                      (2 * h);
    const double an = g.view(-1)[i].item<double>();
    CHECK(std::abs(fd - an) <= 1e-4 * std::max(1.0, std::abs(an)));
  }
}

TEST_CASE("neuron weights are spatial means") {
  CHECK(torch::allclose(neuron_weights(torch::full({3, 2, 2}, 3.0)), torch::full({3}, 3.0)));
  auto g = torch::tensor({1.0, 2.0, 3.0, 4.0}).view({1, 2, 2});
  CHECK(neuron_weights(g).item<double>() == doctest::Approx(2.5));
  CHECK(neuron_weights(torch::zeros({4, 3, 3})).abs().sum().item<double>() == 0.0);
}

TEST_CASE("single nonnegative map is divided by its maximum") {
  auto f = torch::rand({1, 5, 5}, torch::kFloat64);
  auto maps = attention_map(f, torch::ones({1}, torch::kFloat64));
  CHECK(torch::allclose(maps.values, f[0] / f.max()));
  CHECK(maps.normalized.item<bool>());
}

TEST_CASE("opposite weights on equal maps cancel to an unnormalized zero map") {
  auto one = torch::rand({1, 4, 4}, torch::kFloat64);
  auto f = torch::cat({one, one});
  auto maps = attention_map(f, torch::tensor({1.0, -1.0}, torch::kFloat64));
  CHECK(maps.values.abs().max().item<double>() == 0.0);
  CHECK_FALSE(maps.normalized.item<bool>());
}

TEST_CASE("attention map equals the scalar-loop oracle on random instances") {
  std::mt19937_64 rng(17);
  for (int trial = 0; trial < 50; ++trial) {
    const auto K = 1 + static_cast<std::int64_t>(rng() % 8);
    const auto u = 1 + static_cast<std::int64_t>(rng() % 6), v = 1 + static_cast<std::int64_t>(rng() % 6);
    torch::manual_seed(trial);
    auto f = torch::randn({K, u, v}, torch::kFloat64);
    auto w = torch::randn({K}, torch::kFloat64);
    auto maps = attention_map(f, w);
    auto expect = loop_attention(f, std::vector<double>(w.data_ptr<double>(), w.data_ptr<double>() + K));
    auto got = maps.values.contiguous();
    double peak = 0.0;
    for (std::size_t i = 0; i < expect.size(); ++i) {
      CHECK(std::abs(got.data_ptr<double>()[i] - expect[i]) <= 1e-6);
      peak = std::max(peak, got.data_ptr<double>()[i]);
    }
    CHECK((peak == 0.0 || std::abs(peak - 1.0) < 1e-12));
    CHECK(maps.normalized.item<bool>() == (peak > 0.0));
  }
}

TEST_CASE("compute_attention is the composition of its steps") {
  torch::manual_seed(2);
  Tiny model(4, 5);
  auto x = torch::randn({3, 2, 5, 5}, torch::kFloat64);
  auto maps = compute_attention(model, x, 1);
  auto f = model.features(x).detach().requires_grad_(true);
  auto g = class_score_gradients(model.head(f), f, 1, GradientMode::detached_weights);
  auto manual = attention_map(f.detach(), neuron_weights(g));
  CHECK(torch::equal(maps.values, manual.values));
  CHECK(torch::equal(maps.normalized, manual.normalized));
}

TEST_CASE("scaling the class score scales the raw map and leaves the normalized map") {
  torch::manual_seed(4);
  Tiny model(3, 4);
  auto x = torch::randn({2, 2, 4, 4}, torch::kFloat64);
  auto f = model.features(x).detach().requires_grad_(true);
  auto s = model.head(f);
  auto g1 = class_score_gradients(s, f, 1, GradientMode::detached_weights);
  auto g2 = class_score_gradients(s * 3.5, f, 1, GradientMode::detached_weights);
  auto r1 = raw_attention(f.detach(), neuron_weights(g1));
  auto r2 = raw_attention(f.detach(), neuron_weights(g2));
  CHECK(torch::allclose(r2, 3.5 * r1));
  CHECK(torch::allclose(attention_map(f.detach(), neuron_weights(g1)).values,
                        attention_map(f.detach(), neuron_weights(g2)).values));
}

TEST_CASE("384 input on the residual encoder gives 24 x 24 maps in [0, 1]") {
  encoder::EncoderConfig cfg;
  cfg.width_multiplier = 0.0625;
  auto model = encoder::make_encoder(cfg);
  model->eval();
  auto maps = compute_attention(*model, torch::rand({1, 5, 384, 384}) * 255.0, 1);
  CHECK(maps.values.sizes() == torch::IntArrayRef({1, 24, 24}));
  CHECK(maps.values.min().item<float>() >= 0.0f);
  const float peak = maps.values.max().item<float>();
  CHECK((peak == 0.0f || peak == doctest::Approx(1.0f)));
}

TEST_CASE("double backprop keeps the map differentiable in the parameters") {
  torch::manual_seed(8);
  Tiny model(2, 3);
  auto x = torch::randn({1, 2, 3, 3}, torch::kFloat64);
  auto r = torch::rand({1, 3, 3}, torch::kFloat64);
  auto objective = [&] {
    auto fwd = forward_with_attention(model, x, 1, GradientMode::double_backprop);
    return (fwd.attention.values * r).sum();
  };
  auto params = model.parameters();
  auto grads = torch::autograd::grad({objective()}, params, {}, false, false, true);
  const double h = 1e-6;
  int checked = 0;
  for (std::size_t p = 0; p < params.size(); ++p) {
    auto flat = params[p].view(-1);
    for (std::int64_t i = 0; i < flat.numel(); i += 3) {
      double plus, minus;
      {
        torch::NoGradGuard ng;
        flat[i] += h;
      }
      plus = objective().item<double>();
      {
        torch::NoGradGuard ng;
        flat[i] -= 2 * h;
      }
      minus = objective().item<double>();
      {
        torch::NoGradGuard ng;
        flat[i] += h;
      }
      const double fd = (plus - minus) / (2 * h);
      const double an = grads[p].defined() ? grads[p].view(-1)[i].item<double>() : 0.0;
      CHECK(std::abs(fd - an) <= 1e-3 * std::max(1.0, std::abs(fd)));
      ++checked;
    }
  }
  CHECK(checked > 5);
}
