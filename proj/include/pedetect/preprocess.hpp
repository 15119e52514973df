#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pedetect/volume.hpp"

namespace pedetect::preprocess {

inline constexpr double kWindowLowHu = -1024.0;
inline constexpr double kWindowHighHu = 500.0;
inline constexpr std::int64_t kSlicesPerSlab = 5;

struct PreprocessConfig {
  double target_thickness_mm = 2.5;
  std::int64_t crop_rows = 384;
  std::int64_t crop_cols = 384;
  std::int64_t sequence_length = 50;  // T
  std::int64_t sequence_stride = 4;
  std::int64_t slices_per_slab = kSlicesPerSlab;
  // Minimum windowed-intensity variance of a slice counted as inside the band.
  double band_variance_threshold = 30.0;

  void validate() const;
};

void to_json(nlohmann::json& j, const PreprocessConfig& c);
void from_json(const nlohmann::json& j, PreprocessConfig& c);

struct Slab {
  std::int64_t rows = 0;
  std::int64_t cols = 0;
  std::vector<float> pixels;  // (5, rows, cols) in [0, 255]
  std::optional<Mask2D> center_mask;
  int label = 0;
  std::string study_id;
  std::int64_t center_slice = 0;
};

struct SlabSequence {
  std::vector<Slab> slabs;
  int label = 0;
};

struct Band {
  std::int64_t start = 0;
  std::int64_t end = 0;  // inclusive
  bool fallback = false;  // heuristic found nothing; full range returned

  std::int64_t length() const { return end - start + 1; }
};

// Linear interpolation along z onto a grid of spacing `target_mm` starting at
// the first slice; floor(extent / target) + 1 output slices.
Volume resample_thickness(const Volume& volume, double target_mm);
std::int64_t resampled_slice_count(std::int64_t slices, double spacing_mm, double target_mm);

float window_hu(float hu);
void window_hu(std::span<float> values);
Volume window_hu(const Volume& volume);

// Centre crop of every slice to (out_rows, out_cols); zero padding where the
// input is smaller.
Volume center_crop(const Volume& stack, std::int64_t out_rows, std::int64_t out_cols);
Mask2D center_crop(const Mask2D& mask, std::int64_t out_rows, std::int64_t out_cols);

// Longest contiguous run of slices whose windowed variance exceeds the
// threshold. Ties go to the earliest run.
Band select_lung_band(const Volume& volume, double variance_threshold = 30.0);

// Band resized to T*stride slices, slab t centred at t*stride. T == 1 yields
// one slab centred on the middle band slice.
SlabSequence build_slab_sequence(const Volume& windowed, const Band& band, std::int64_t T = 50,
                                 std::int64_t stride = 4, std::int64_t slices_per_slab = kSlicesPerSlab);

// Five-slice slab around `center`, boundary slices replicated.
Slab extract_slab(const Volume& windowed, std::int64_t center,
                  std::int64_t slices_per_slab = kSlicesPerSlab);

// Antialiased bilinear (tent filter of radius `factor`) downsampling followed
// by (value > 0) binarization. Input is zero padded to a multiple of factor.
Mask2D downsample_mask(const Mask2D& mask, std::int64_t factor);

// resample -> window -> crop, the chain shared by both training stages.
Volume prepare_volume(const Volume& hu_volume, const PreprocessConfig& config);

}  // namespace pedetect::preprocess
