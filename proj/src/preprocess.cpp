#include "pedetect/preprocess.hpp"

#include <algorithm>
#include <cmath>

#include "pedetect/error.hpp"

namespace pedetect::preprocess {
namespace {

// Tent-filter weights mapping `in` samples onto `out = in / factor` samples.
std::vector<std::vector<double>> tent_weights(std::int64_t in, std::int64_t factor) {
  const std::int64_t out = in / factor;
  const double f = static_cast<double>(factor);
  std::vector<std::vector<double>> w(static_cast<std::size_t>(out), std::vector<double>(static_cast<std::size_t>(in), 0.0));
  for (std::int64_t i = 0; i < out; ++i) {
    const double center = (static_cast<double>(i) + 0.5) * f - 0.5;
    double total = 0.0;
    for (std::int64_t s = 0; s < in; ++s) {
      const double d = std::abs(static_cast<double>(s) - center);
      if (d < f) {
        w[static_cast<std::size_t>(i)][static_cast<std::size_t>(s)] = 1.0 - d / f;
        total += 1.0 - d / f;
      }
    }
    for (auto& v : w[static_cast<std::size_t>(i)]) v /= total;
  }
  return w;
}

std::int64_t crop_shift(std::int64_t in, std::int64_t out) {
  return in >= out ? (in - out) / 2 : -((out - in) / 2);
}

}  // namespace

void PreprocessConfig::validate() const {
  if (!(target_thickness_mm > 0.0)) throw ConfigError("target_thickness_mm", "must be > 0");
  if (crop_rows < 1 || crop_cols < 1) throw ConfigError("crop_rows", "crop size must be >= 1");
  if (sequence_length < 1) throw ConfigError("sequence_length", "must be >= 1");
  if (sequence_stride < 1) throw ConfigError("sequence_stride", "must be >= 1");
  if (slices_per_slab != kSlicesPerSlab) throw ConfigError("slices_per_slab", "slabs hold exactly 5 slices");
  if (band_variance_threshold < 0.0) throw ConfigError("band_variance_threshold", "must be >= 0");
}

void to_json(nlohmann::json& j, const PreprocessConfig& c) {
  j = nlohmann::json{{"target_thickness_mm", c.target_thickness_mm},
                     {"crop_size", {c.crop_rows, c.crop_cols}},
                     {"sequence_length", c.sequence_length},
                     {"sequence_stride", c.sequence_stride},
                     {"slices_per_slab", c.slices_per_slab},
                     {"band_variance_threshold", c.band_variance_threshold}};
}

void from_json(const nlohmann::json& j, PreprocessConfig& c) {
  PreprocessConfig d;
  c.target_thickness_mm = j.value("target_thickness_mm", d.target_thickness_mm);
  if (j.contains("crop_size")) {
    const auto& s = j.at("crop_size");
    if (!s.is_array() || s.size() != 2) throw ConfigError("crop_size", "expected [rows, cols]");
    c.crop_rows = s[0].get<std::int64_t>();
    c.crop_cols = s[1].get<std::int64_t>();
  } else {
    c.crop_rows = d.crop_rows;
    c.crop_cols = d.crop_cols;
  }
  c.sequence_length = j.value("sequence_length", d.sequence_length);
  c.sequence_stride = j.value("sequence_stride", d.sequence_stride);
  c.slices_per_slab = j.value("slices_per_slab", d.slices_per_slab);
  c.band_variance_threshold = j.value("band_variance_threshold", d.band_variance_threshold);
}

std::int64_t resampled_slice_count(std::int64_t slices, double spacing_mm, double target_mm) {
  const double extent = static_cast<double>(slices - 1) * spacing_mm;
  return static_cast<std::int64_t>(std::floor(extent / target_mm + 1e-9)) + 1;
}

Volume resample_thickness(const Volume& volume, double target_mm) {
  if (volume.shape.slices < 2) throw GeometryError("resample_thickness needs at least 2 slices");
  if (!(target_mm > 0.0)) throw ConfigError("target_mm", "must be > 0");
  const auto n_out = resampled_slice_count(volume.shape.slices, volume.spacing.z, target_mm);
  Volume out({n_out, volume.shape.rows, volume.shape.cols},
             {target_mm, volume.spacing.y, volume.spacing.x}, 0.0f, volume.scale);
  const auto plane = static_cast<std::size_t>(volume.shape.plane());
  for (std::int64_t k = 0; k < n_out; ++k) {
    const double pos = static_cast<double>(k) * target_mm / volume.spacing.z;
    auto lo = std::min(static_cast<std::int64_t>(std::floor(pos + 1e-9)), volume.shape.slices - 1);
    const double frac = std::max(0.0, pos - static_cast<double>(lo));
    auto dst = out.slice(k);
    auto a = volume.slice(lo);
    if (frac < 1e-9 || lo + 1 >= volume.shape.slices) {
      std::copy(a.begin(), a.end(), dst.begin());
      continue;
    }
    auto b = volume.slice(lo + 1);
    const auto t = static_cast<float>(frac);
    for (std::size_t i = 0; i < plane; ++i) dst[i] = a[i] + t * (b[i] - a[i]);
  }
  return out;
}

float window_hu(float hu) {
  const double v = 255.0 * (static_cast<double>(hu) - kWindowLowHu) / (kWindowHighHu - kWindowLowHu);
  return static_cast<float>(std::clamp(v, 0.0, 255.0));
}

void window_hu(std::span<float> values) {
  for (auto& v : values) v = window_hu(v);
}

Volume window_hu(const Volume& volume) {
  if (volume.scale == IntensityScale::windowed) return volume;
  Volume out = volume;
  window_hu(std::span<float>(out.voxels));
  out.scale = IntensityScale::windowed;
  return out;
}

Volume center_crop(const Volume& stack, std::int64_t out_rows, std::int64_t out_cols) {
  if (stack.shape.rows == out_rows && stack.shape.cols == out_cols) return stack;
  Volume out({stack.shape.slices, out_rows, out_cols}, stack.spacing, 0.0f, stack.scale);
  const auto dy = crop_shift(stack.shape.rows, out_rows);
  const auto dx = crop_shift(stack.shape.cols, out_cols);
  for (std::int64_t z = 0; z < stack.shape.slices; ++z)
    for (std::int64_t y = 0; y < out_rows; ++y) {
      const auto sy = y + dy;
      if (sy < 0 || sy >= stack.shape.rows) continue;
      for (std::int64_t x = 0; x < out_cols; ++x) {
        const auto sx = x + dx;
        if (sx >= 0 && sx < stack.shape.cols) out.at(z, y, x) = stack.at(z, sy, sx);
      }
    }
  return out;
}

Mask2D center_crop(const Mask2D& mask, std::int64_t out_rows, std::int64_t out_cols) {
  if (mask.rows == out_rows && mask.cols == out_cols) return mask;
  Mask2D out(out_rows, out_cols);
  const auto dy = crop_shift(mask.rows, out_rows);
  const auto dx = crop_shift(mask.cols, out_cols);
  for (std::int64_t y = 0; y < out_rows; ++y)
    for (std::int64_t x = 0; x < out_cols; ++x) {
      const auto sy = y + dy, sx = x + dx;
      if (sy >= 0 && sy < mask.rows && sx >= 0 && sx < mask.cols) out.at(y, x) = mask.at(sy, sx);
    }
  return out;
}

Band select_lung_band(const Volume& volume, double variance_threshold) {
  const bool hu = volume.scale == IntensityScale::hounsfield;
  const auto n = volume.shape.slices;
  std::int64_t best_start = -1, best_len = 0, run_start = -1;
  for (std::int64_t z = 0; z <= n; ++z) {
    bool on = false;
    if (z < n) {
      double sum = 0.0, sq = 0.0;
      for (float v : volume.slice(z)) {
        const double w = hu ? window_hu(v) : v;
        sum += w;
        sq += w * w;
      }
      const double count = static_cast<double>(volume.shape.plane());
      const double mean = sum / count;
      on = sq / count - mean * mean > variance_threshold;
    }
    if (on && run_start < 0) run_start = z;
    if (!on && run_start >= 0) {
      if (z - run_start > best_len) {
        best_len = z - run_start;
        best_start = run_start;
      }
      run_start = -1;
    }
  }
  if (best_len == 0) return {0, std::max<std::int64_t>(0, n - 1), true};
  return {best_start, best_start + best_len - 1, false};
}

Slab extract_slab(const Volume& windowed, std::int64_t center, std::int64_t slices_per_slab) {
  Slab s;
  s.rows = windowed.shape.rows;
  s.cols = windowed.shape.cols;
  s.center_slice = center;
  s.pixels.resize(static_cast<std::size_t>(slices_per_slab * windowed.shape.plane()));
  const auto half = slices_per_slab / 2;
  for (std::int64_t k = 0; k < slices_per_slab; ++k) {
    const auto z = std::clamp(center - half + k, std::int64_t{0}, windowed.shape.slices - 1);
    auto src = windowed.slice(z);
    std::copy(src.begin(), src.end(), s.pixels.begin() + static_cast<std::ptrdiff_t>(k * windowed.shape.plane()));
  }
  return s;
}

SlabSequence build_slab_sequence(const Volume& windowed, const Band& band, std::int64_t T,
                                 std::int64_t stride, std::int64_t slices_per_slab) {
  if (band.length() < 1 || band.start < 0 || band.end >= windowed.shape.slices)
    throw GeometryError("band outside the volume or empty");
  if (T < 1 || stride < 1) throw ConfigError("sequence_length", "T and stride must be >= 1");
  SlabSequence seq;
  const auto L = band.length();

  Volume band_vol({L, windowed.shape.rows, windowed.shape.cols}, windowed.spacing, 0.0f, windowed.scale);
  for (std::int64_t z = 0; z < L; ++z) {
    auto src = windowed.slice(band.start + z);
    std::copy(src.begin(), src.end(), band_vol.slice(z).begin());
  }
  if (T == 1) {
    auto slab = extract_slab(band_vol, (L - 1) / 2, slices_per_slab);
    slab.center_slice = band.start + (L - 1) / 2;
    seq.slabs.push_back(std::move(slab));
    return seq;
  }

  const auto N = T * stride;
  Volume resized({N, windowed.shape.rows, windowed.shape.cols}, windowed.spacing, 0.0f, windowed.scale);
  if (N == L) {
    resized.voxels = band_vol.voxels;
  } else {
    const auto plane = static_cast<std::size_t>(windowed.shape.plane());
    for (std::int64_t j = 0; j < N; ++j) {
      const double pos = L == 1 ? 0.0 : static_cast<double>(j) * static_cast<double>(L - 1) / static_cast<double>(N - 1);
      const auto lo = std::min(static_cast<std::int64_t>(std::floor(pos)), L - 1);
      const auto t = static_cast<float>(pos - static_cast<double>(lo));
      auto a = band_vol.slice(lo);
      auto b = band_vol.slice(std::min(lo + 1, L - 1));
      auto dst = resized.slice(j);
      for (std::size_t i = 0; i < plane; ++i) dst[i] = a[i] + t * (b[i] - a[i]);
    }
  }
  for (std::int64_t t = 0; t < T; ++t) {
    auto slab = extract_slab(resized, t * stride, slices_per_slab);
    seq.slabs.push_back(std::move(slab));
  }
  return seq;
}

Mask2D downsample_mask(const Mask2D& mask, std::int64_t factor) {
  if (factor < 1) throw ConfigError("factor", "must be >= 1");
  const auto rows = (mask.rows + factor - 1) / factor * factor;
  const auto cols = (mask.cols + factor - 1) / factor * factor;
  Mask2D padded(rows, cols);
  for (std::int64_t y = 0; y < mask.rows; ++y)
    for (std::int64_t x = 0; x < mask.cols; ++x) padded.at(y, x) = mask.at(y, x);

  const auto wy = tent_weights(rows, factor);
  const auto wx = tent_weights(cols, factor);
  Mask2D out(rows / factor, cols / factor);
  for (std::int64_t i = 0; i < out.rows; ++i)
    for (std::int64_t j = 0; j < out.cols; ++j) {
      double v = 0.0;
      for (std::int64_t s = 0; s < rows; ++s) {
        const double a = wy[static_cast<std::size_t>(i)][static_cast<std::size_t>(s)];
        if (a == 0.0) continue;
        for (std::int64_t t = 0; t < cols; ++t) {
          const double b = wx[static_cast<std::size_t>(j)][static_cast<std::size_t>(t)];
          if (b != 0.0 && padded.at(s, t)) v += a * b;
        }
      }
      out.at(i, j) = v > 0.0;
    }
  return out;
}

Volume prepare_volume(const Volume& hu_volume, const PreprocessConfig& config) {
  Volume v = hu_volume.shape.slices >= 2 && std::abs(hu_volume.spacing.z - config.target_thickness_mm) > 1e-9
                 ? resample_thickness(hu_volume, config.target_thickness_mm)
                 : hu_volume;
  v = window_hu(v);
  return center_crop(v, config.crop_rows, config.crop_cols);
}

}  // namespace pedetect::preprocess
