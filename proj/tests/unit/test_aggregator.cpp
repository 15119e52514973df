#include "doctest_torch.hpp"

#include <numeric>

#include "helpers.hpp"
#include "pedetect/aggregator.hpp"
#include "pedetect/checkpoint.hpp"
#include "pedetect/error.hpp"
#include "pedetect/stage2.hpp"

using namespace pedetect;
using namespace pedetect::aggregator;

namespace {

AggregatorConfig small_config() {
  AggregatorConfig c;
  c.filters = 4;
  c.epochs = 2;
  c.batch_size = 4;
  c.learning_rate = 1e-2;
  return c;
}

InputGeometry small_geometry() { return {3, 8, 8}; }

// Studies whose label is visible in the mean feature level.
stage2::SequenceBatch toy_batch(std::int64_t n, std::int64_t T, std::uint64_t seed) {
  torch::manual_seed(seed);
  stage2::SequenceBatch b;
  b.labels = torch::arange(n) % 2;
  b.features = torch::randn({n, T, 3, 8, 8}) * 0.3 + b.labels.to(torch::kFloat32).view({n, 1, 1, 1, 1});
  b.lengths = torch::full({n}, T, torch::kLong);
  for (std::int64_t i = 0; i < n; ++i) b.study_ids.push_back("s" + std::to_string(i));
  return b;
}

}  // namespace

TEST_CASE("full-scale geometry halves 24 to 12 to 6") {
  AggregatorConfig c;
  auto g = unit_geometry(c, {512, 24, 24});
  REQUIRE(g.size() == 2);
  CHECK((g[0] == std::pair<std::int64_t, std::int64_t>{12, 12}));
  CHECK((g[1] == std::pair<std::int64_t, std::int64_t>{6, 6}));
  c.units = 4;
  CHECK_THROWS_AS(unit_geometry(c, {512, 24, 24}), GeometryError);
  c.units = 1;
  CHECK_THROWS_AS(unit_geometry(c, {8, 5, 6}), GeometryError);
  // Number of pool steps equals units while sides stay even.
  for (std::int64_t u = 1; u <= 3; ++u) {
    c.units = u;
    CHECK(unit_geometry(c, {4, 32, 16}).back().first == 32 >> u);
  }
}

TEST_CASE("outputs are probabilities and inference is repeatable") {
  auto m = make_aggregator(small_config(), small_geometry());
  m->eval();
  auto x = torch::randn({3, 5, 3, 8, 8});
  auto p = m->forward(x);
  CHECK(p.sizes() == torch::IntArrayRef({3}));
  CHECK((p > 0).all().item<bool>());
  CHECK((p < 1).all().item<bool>());
  CHECK(torch::equal(p, m->forward(x)));
  CHECK_THROWS_AS(m->forward(torch::randn({3, 5, 4, 8, 8})), GeometryError);
}

TEST_CASE("direction-swapped weights on reversed input give the same output") {
  for (auto pooling : {ZPooling::mean_then_flatten, ZPooling::global_average}) {
    auto c = small_config();
    c.z_pooling = pooling;
    auto m = make_aggregator(c, small_geometry());
    m->train();
    m->forward(torch::randn({4, 6, 3, 8, 8}));  // non-trivial BN statistics
    m->eval();
    auto swapped = m->direction_swapped();
    swapped->eval();
    auto x = torch::randn({2, 6, 3, 8, 8});
    auto lengths = torch::tensor({6, 4}, torch::kLong);
    auto a = m->logits(x, lengths);
    auto b = swapped->logits(reverse_valid(x, lengths), lengths);
    CHECK(torch::allclose(a, b, 1e-4, 1e-5));
  }
}

TEST_CASE("reverse_valid flips only the valid prefix") {
  auto x = torch::arange(10).view({2, 5}).to(torch::kFloat32).view({2, 5, 1, 1, 1});
  auto r = reverse_valid(x, torch::tensor({5, 3}, torch::kLong)).view({2, 5});
  CHECK(torch::equal(r[0], torch::tensor({4.f, 3.f, 2.f, 1.f, 0.f})));
  CHECK(torch::equal(r[1], torch::tensor({7.f, 6.f, 5.f, 8.f, 9.f})));
}

TEST_CASE("right padding does not change a sequence's output") {
  auto m = make_aggregator(small_config(), small_geometry());
  m->eval();
  auto a = torch::randn({3, 3, 8, 8}), b = torch::randn({5, 3, 8, 8});
  auto alone = m->forward(a.unsqueeze(0));
  auto [batch, lengths] = pad_sequences({a, b});
  CHECK(batch.sizes() == torch::IntArrayRef({2, 5, 3, 8, 8}));
  CHECK(lengths[0].item<std::int64_t>() == 3);
  auto both = m->forward(batch, lengths);
  CHECK(both[0].item<float>() == doctest::Approx(alone[0].item<float>()).epsilon(1e-5));
}

TEST_CASE("slab order matters to the recurrent model but not to mean/max") {
  auto m = make_aggregator(small_config(), small_geometry());
  m->eval();
  torch::manual_seed(3);
  auto x = torch::randn({1, 6, 3, 8, 8}) * 2.0;
  auto perm = torch::tensor({3, 0, 5, 1, 4, 2}, torch::kLong);
  const float a = m->forward(x).item<float>();
  const float b = m->forward(x.index_select(1, perm)).item<float>();
  CHECK(std::abs(a - b) > 1e-6f);

  std::vector<double> s = {0.1, 0.9, 0.2, 0.4, 0.7, 0.3};
  std::vector<double> p(s.size());
  for (std::size_t i = 0; i < s.size(); ++i) p[i] = s[static_cast<std::size_t>(perm[i].item<std::int64_t>())];
  CHECK(baseline_aggregate(s, "max") == baseline_aggregate(p, "max"));
  CHECK(baseline_aggregate(s, "mean") == doctest::Approx(baseline_aggregate(p, "mean")).epsilon(1e-12));
}

TEST_CASE("baseline aggregation examples") {
  std::vector<double> s = {0.1, 0.9, 0.2};
  CHECK(baseline_aggregate(s, "max") == 0.9);
  CHECK(baseline_aggregate(s, "mean") == doctest::Approx(0.4));
  std::vector<double> c(7, 0.35);
  CHECK(baseline_aggregate(c, "max") == 0.35);
  CHECK(baseline_aggregate(c, "mean") == doctest::Approx(0.35));
  CHECK_THROWS_AS(baseline_aggregate(std::vector<double>{}, "mean"), std::invalid_argument);
  CHECK_THROWS_AS(baseline_aggregate(s, "median"), std::invalid_argument);
}

TEST_CASE("sum merge halves the post-merge channel count") {
  auto c = small_config();
  BidirectionalUnit concat(3, c);
  c.merge_mode = MergeMode::sum;
  BidirectionalUnit sum(3, c);
  CHECK(concat->output_channels() == 8);
  CHECK(sum->output_channels() == 4);
  auto m = make_aggregator(c, small_geometry());
  m->eval();
  CHECK(m->forward(torch::randn({2, 4, 3, 8, 8})).sizes() == torch::IntArrayRef({2}));
}

TEST_CASE("config validation and serialization") {
  auto c = small_config();
  c.merge_mode = MergeMode::sum;
  c.z_pooling = ZPooling::global_average;
  auto back = nlohmann::json(c).get<AggregatorConfig>();
  CHECK(nlohmann::json(back) == nlohmann::json(c));
  c.recurrent_dropout = 1.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = small_config();
  c.units = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  auto j = nlohmann::json(small_config());
  j["merge_mode"] = "product";
  CHECK_THROWS_AS(j.get<AggregatorConfig>(), ConfigError);
}

TEST_CASE("aggregator checkpoint round trip") {
  testing::TempDir dir("agg-ckpt");
  auto m = make_aggregator(small_config(), small_geometry());
  m->train();
  m->forward(torch::randn({4, 3, 3, 8, 8}));
  m->eval();
  save_aggregator(dir.path() / "a.ackp", m);
  auto back = load_aggregator(dir.path() / "a.ackp");
  auto x = torch::randn({2, 4, 3, 8, 8});
  CHECK(torch::equal(m->forward(x), back->forward(x)));
}

TEST_CASE("two-epoch stage-II smoke run on eight studies") {
  testing::TempDir dir("stage2-smoke");
  auto train = toy_batch(8, 4, 1), val = toy_batch(4, 4, 2);
  auto r = stage2::train_stage2(train, val, small_config(), dir.path() / "s2.ackp");
  CHECK(std::filesystem::exists(dir.path() / "s2.ackp"));
  REQUIRE(r.history.epochs.size() == 2);
  for (const auto& e : r.history.epochs) {
    CHECK(std::isfinite(e.train_classification));
    CHECK(std::isfinite(e.validation_classification));
  }
  auto again = stage2::train_stage2(train, val, small_config(), dir.path() / "s2b.ackp");
  CHECK(checkpoint::file_digest(dir.path() / "s2.ackp") == checkpoint::file_digest(dir.path() / "s2b.ackp"));
}

TEST_CASE("identical labels train to completion with a warning") {
  auto train = toy_batch(6, 3, 4);
  train.labels = torch::ones({6}, torch::kLong);
  auto c = small_config();
  c.epochs = 5;
  auto r = stage2::train_stage2(train, train, c);
  CHECK(r.history.epochs.size() == 5);
  bool warned = false;
  for (const auto& w : r.history.warnings) warned |= w.find("labels") != std::string::npos;
  CHECK(warned);
}

TEST_CASE("six studies overfit below 0.05 BCE within 300 epochs") {
  auto train = toy_batch(6, 4, 5);
  auto c = small_config();
  c.epochs = 300;
  c.batch_size = 6;
  c.head_dropout = 0.0;
  c.recurrent_dropout = 0.0;
  auto r = stage2::train_stage2(train, train, c);
  double best = 1e9;
  for (const auto& e : r.history.epochs) best = std::min(best, e.train_classification);
  CHECK(best < 0.05);
}

TEST_CASE("missing studies in a feature store are data errors") {
  stage2::FeatureIndex index;
  CHECK_THROWS_AS(stage2::load_sequences("nowhere", index, {"dev-000001"}), DataError);
}
