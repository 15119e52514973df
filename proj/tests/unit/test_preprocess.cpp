#include "doctest_torch.hpp"

#include <cmath>
#include <random>

#include "helpers.hpp"
#include "pedetect/error.hpp"
#include "pedetect/preprocess.hpp"
#include "pedetect/synthcorpus.hpp"

using namespace pedetect;
using namespace pedetect::preprocess;

namespace {

Volume ramp_volume(std::int64_t slices, double dz, std::int64_t rows = 3, std::int64_t cols = 4) {
  Volume v({slices, rows, cols}, {dz, 1.0, 1.0});
  for (std::int64_t z = 0; z < slices; ++z)
    for (std::int64_t y = 0; y < rows; ++y)
      for (std::int64_t x = 0; x < cols; ++x) v.at(z, y, x) = static_cast<float>(10 * z + y - x);
  return v;
}

}  // namespace

TEST_CASE("resampling at the current thickness is the identity") {
  auto v = ramp_volume(7, 2.5);
  auto r = resample_thickness(v, 2.5);
  CHECK(r.shape == v.shape);
  CHECK(r.voxels == v.voxels);
}

TEST_CASE("two slices at 2 mm resampled to 1 mm gain the linear midpoint") {
  Volume v({2, 1, 1}, {2.0, 1.0, 1.0});
  v.at(0, 0, 0) = 0.0f;
  v.at(1, 0, 0) = 10.0f;
  auto r = resample_thickness(v, 1.0);
  REQUIRE(r.shape.slices == 3);
  CHECK(r.at(1, 0, 0) == doctest::Approx(5.0));
  CHECK(r.spacing.z == 1.0);
}

TEST_CASE("output slice count follows an independent coordinate grid") {
  for (auto [n, dz, target] : {std::tuple{40, 5.0, 2.5}, {33, 1.25, 2.5}, {10, 3.0, 2.5}, {5, 0.625, 2.5}}) {
    // Grid points k * target that stay within the physical extent.
    std::int64_t count = 0;
    const double extent = (n - 1) * dz;
    for (double z = 0.0; z <= extent + 1e-9; z += target) ++count;
    auto r = resample_thickness(ramp_volume(n, dz, 1, 1), target);
    CHECK(r.shape.slices == count);
    CHECK(resampled_slice_count(n, dz, target) == count);
    // Interpolated values match the linear ramp 10 * z_index.
    for (std::int64_t k = 0; k < count; ++k) CHECK(r.at(k, 0, 0) == doctest::Approx(10.0 * k * target / dz));
  }
  CHECK(resample_thickness(ramp_volume(40, 5.0, 1, 1), 2.5).shape.slices == 79);
}

TEST_CASE("resampling keeps constant volumes constant and rejects one slice") {
  Volume v({9, 4, 4}, {3.3, 1.0, 1.0}, 42.5f);
  for (float x : resample_thickness(v, 1.7).voxels) CHECK(x == 42.5f);
  CHECK_THROWS_AS(resample_thickness(Volume({1, 2, 2}, {1.0, 1.0, 1.0}), 1.0), GeometryError);
}

TEST_CASE("HU window endpoints, midpoint and clamp") {
  CHECK(window_hu(-1024.0f) == 0.0f);
  CHECK(window_hu(500.0f) == 255.0f);
  CHECK(window_hu(-262.0f) == doctest::Approx(127.5));
  CHECK(window_hu(3000.0f) == 255.0f);
  CHECK(window_hu(-3000.0f) == 0.0f);
  float prev = -1.0f;
  for (float hu = -1500.0f; hu <= 1500.0f; hu += 7.5f) {
    const float w = window_hu(hu);
    CHECK(w >= prev);
    prev = w;
  }
  // Already-windowed volumes pass through unchanged.
  Volume v({1, 1, 2}, {1, 1, 1}, 0.0f);
  v.voxels = {-100.0f, 100.0f};
  auto once = window_hu(v);
  CHECK(window_hu(once).voxels == once.voxels);
}

TEST_CASE("512 crop to 384 keeps rows and columns 64..447") {
  Volume v({1, 512, 512}, {1, 1, 1});
  for (std::int64_t y = 0; y < 512; ++y)
    for (std::int64_t x = 0; x < 512; ++x) v.at(0, y, x) = static_cast<float>(y * 1000 + x);
  auto c = center_crop(v, 384, 384);
  CHECK(c.shape.rows == 384);
  CHECK(c.at(0, 0, 0) == 64 * 1000 + 64);
  CHECK(c.at(0, 383, 383) == 447 * 1000 + 447);
  CHECK(center_crop(c, 384, 384).voxels == c.voxels);
}

TEST_CASE("small inputs are zero padded around the centre") {
  Volume v({1, 100, 100}, {1, 1, 1}, 7.0f);
  auto c = center_crop(v, 384, 384);
  CHECK(c.at(0, 0, 0) == 0.0f);
  CHECK(c.at(0, 141, 141) == 0.0f);
  CHECK(c.at(0, 142, 142) == 7.0f);
  CHECK(c.at(0, 241, 241) == 7.0f);
  CHECK(c.at(0, 242, 242) == 0.0f);
}

TEST_CASE("lung band equals the generator's structure extent") {
  auto cfg = testing::tiny_corpus(12);
  cfg.volume_shape = {40, 96, 96};
  for (std::int64_t i = 0; i < 12; ++i) {
    auto s = synth::generate_study(cfg, i);
    auto band = select_lung_band(window_hu(s.volume));
    CHECK_FALSE(band.fallback);
    CHECK(band.start == s.geometry.structure_start);
    CHECK(band.end == s.geometry.structure_end);
  }
}

TEST_CASE("uniform volume falls back to the full range") {
  auto band = select_lung_band(Volume({12, 8, 8}, {1, 1, 1}, -50.0f));
  CHECK(band.fallback);
  CHECK(band.start == 0);
  CHECK(band.end == 11);
}

TEST_CASE("band touching the volume edge stays inside it") {
  Volume v({10, 8, 8}, {1, 1, 1}, 0.0f, IntensityScale::windowed);
  for (std::int64_t z = 6; z < 10; ++z)
    for (std::int64_t y = 0; y < 8; ++y) v.at(z, y, y) = 255.0f;
  auto band = select_lung_band(v);
  CHECK(band.start == 6);
  CHECK(band.end == 9);
}

TEST_CASE("200-slice band gives 50 slabs centred every 4 slices without interpolation") {
  Volume v({200, 2, 2}, {2.5, 1, 1}, 0.0f, IntensityScale::windowed);
  for (std::int64_t z = 0; z < 200; ++z)
    for (auto& x : v.slice(z)) x = static_cast<float>(z);
  auto seq = build_slab_sequence(v, {0, 199}, 50, 4);
  REQUIRE(seq.slabs.size() == 50);
  for (std::int64_t t = 0; t < 50; ++t) {
    const auto& s = seq.slabs[static_cast<std::size_t>(t)];
    CHECK(s.center_slice == 4 * t);
    // Channel k holds slice clamp(c - 2 + k), boundary replicated.
    for (std::int64_t k = 0; k < 5; ++k) {
      const auto z = std::clamp<std::int64_t>(4 * t - 2 + k, 0, 199);
      CHECK(s.pixels[static_cast<std::size_t>(k * 4)] == static_cast<float>(z));
    }
  }
}

TEST_CASE("sequence length is T for every band length") {
  Volume v({30, 2, 2}, {2.5, 1, 1}, 1.0f, IntensityScale::windowed);
  for (std::int64_t L : {1, 2, 7, 30})
    for (std::int64_t T : {1, 3, 8, 50}) CHECK(build_slab_sequence(v, {0, L - 1}, T, 4).slabs.size() == T);
  auto one = build_slab_sequence(v, {10, 20}, 1, 4);
  CHECK(one.slabs.front().center_slice == 15);
}

TEST_CASE("mask downsampling edge cases") {
  Mask2D zero(32, 32);
  CHECK(downsample_mask(zero, 8).empty());
  Mask2D ones(32, 32);
  std::fill(ones.bits.begin(), ones.bits.end(), 1);
  auto d = downsample_mask(ones, 8);
  CHECK(d.count() == 16);
}

TEST_CASE("single pixel marks exactly the overlapping tent kernels") {
  const std::int64_t f = 4, n = 24;
  std::mt19937 rng(3);
  for (int trial = 0; trial < 40; ++trial) {
    const auto py = static_cast<std::int64_t>(rng() % n), px = static_cast<std::int64_t>(rng() % n);
    Mask2D m(n, n);
    m.at(py, px) = 1;
    auto d = downsample_mask(m, f);
    REQUIRE(d.rows == n / f);
    for (std::int64_t i = 0; i < d.rows; ++i)
      for (std::int64_t j = 0; j < d.cols; ++j) {
        // Output sample centres sit at (i + 0.5) f - 0.5; the kernel has radius f.
        const double cy = (i + 0.5) * f - 0.5, cx = (j + 0.5) * f - 0.5;
        const bool overlap = std::abs(py - cy) < f && std::abs(px - cx) < f;
        CHECK(static_cast<bool>(d.at(i, j)) == overlap);
      }
  }
}

TEST_CASE("downsampling never loses a lesion") {
  std::mt19937 rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    const std::int64_t rows = 20 + rng() % 30, cols = 20 + rng() % 30;
    Mask2D m(rows, cols);
    const int k = 1 + rng() % 5;
    for (int i = 0; i < k; ++i) m.at(rng() % rows, rng() % cols) = 1;
    CHECK(downsample_mask(m, 8).count() > 0);
    CHECK(downsample_mask(m, 16).count() > 0);
  }
}

TEST_CASE("prepare_volume crops and windows") {
  PreprocessConfig cfg;
  cfg.crop_rows = cfg.crop_cols = 16;
  Volume v({6, 20, 20}, {5.0, 1, 1}, -1024.0f);
  auto p = prepare_volume(v, cfg);
  CHECK(p.shape == Shape3{11, 16, 16});
  CHECK(p.scale == IntensityScale::windowed);
  for (float x : p.voxels) CHECK(x == 0.0f);
}

TEST_CASE("config round trip and validation") {
  PreprocessConfig c;
  c.crop_rows = 96;
  c.sequence_length = 8;
  auto back = nlohmann::json(c).get<PreprocessConfig>();
  CHECK(nlohmann::json(back) == nlohmann::json(c));
  c.slices_per_slab = 3;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}
