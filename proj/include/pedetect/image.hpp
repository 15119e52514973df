#pragma once

// 8-bit PNG output for attention maps and overlays.

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

namespace pedetect::image {

struct Rgb {
  std::int64_t rows = 0, cols = 0;
  std::vector<std::uint8_t> pixels;  // row-major, 3 bytes per pixel

  Rgb() = default;
  Rgb(std::int64_t r, std::int64_t c) : rows(r), cols(c), pixels(static_cast<std::size_t>(r * c * 3), 0) {}
  std::uint8_t* at(std::int64_t r, std::int64_t c) { return pixels.data() + (r * cols + c) * 3; }
};

void write_png_gray(const std::filesystem::path& path, std::int64_t rows, std::int64_t cols,
                    std::span<const std::uint8_t> pixels);
void write_png_rgb(const std::filesystem::path& path, const Rgb& image);

// Values in [0, 1] -> [0, 255], clamped.
std::vector<std::uint8_t> to_gray8(std::span<const float> values);

// Bilinear upsampling of a (rows, cols) map to (out_rows, out_cols), pixel
// centres aligned.
std::vector<float> upsample(std::span<const float> map, std::int64_t rows, std::int64_t cols, std::int64_t out_rows,
                            std::int64_t out_cols);

// Blue-to-red heat colour of t in [0, 1].
void heat_color(float t, std::uint8_t rgb[3]);

// Slice | slice + attention heat | slice + mask contour, side by side.
// `attention` is (slice rows x cols) in [0, 1] and may be empty (no heat
// layer); `mask` may be empty (no contour).
Rgb attention_overlay(std::span<const float> slice, std::int64_t rows, std::int64_t cols,
                      std::span<const float> attention, std::span<const std::uint8_t> mask);

}  // namespace pedetect::image
