#include "pedetect/image.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>

#include "pedetect/error.hpp"

namespace pedetect::image {
namespace {

void write_png(const std::filesystem::path& path, std::int64_t rows, std::int64_t cols, int color_type, int channels,
               const std::uint8_t* data) {
  std::unique_ptr<FILE, int (*)(FILE*)> file(std::fopen(path.c_str(), "wb"), &std::fclose);
  if (!file) throw DataError("cannot open " + path.string() + " for writing");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, nullptr);
    throw DataError("libpng initialisation failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw DataError("png write failed: " + path.string());
  }
  png_init_io(png, file.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(cols), static_cast<png_uint_32>(rows), 8, color_type,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (std::int64_t r = 0; r < rows; ++r)
    png_write_row(png, const_cast<png_bytep>(data + r * cols * channels));
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

std::uint8_t byte(float v) { return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f)); }

}  // namespace

void write_png_gray(const std::filesystem::path& path, std::int64_t rows, std::int64_t cols,
                    std::span<const std::uint8_t> pixels) {
  if (pixels.size() != static_cast<std::size_t>(rows * cols)) throw GeometryError("write_png_gray: size mismatch");
  write_png(path, rows, cols, PNG_COLOR_TYPE_GRAY, 1, pixels.data());
}

void write_png_rgb(const std::filesystem::path& path, const Rgb& image) {
  if (image.pixels.size() != static_cast<std::size_t>(image.rows * image.cols * 3))
    throw GeometryError("write_png_rgb: size mismatch");
  write_png(path, image.rows, image.cols, PNG_COLOR_TYPE_RGB, 3, image.pixels.data());
}

std::vector<std::uint8_t> to_gray8(std::span<const float> values) {
  std::vector<std::uint8_t> out(values.size());
  std::transform(values.begin(), values.end(), out.begin(), byte);
  return out;
}

std::vector<float> upsample(std::span<const float> map, std::int64_t rows, std::int64_t cols, std::int64_t out_rows,
                            std::int64_t out_cols) {
  if (map.size() != static_cast<std::size_t>(rows * cols)) throw GeometryError("upsample: size mismatch");
  std::vector<float> out(static_cast<std::size_t>(out_rows * out_cols));
  const double sy = static_cast<double>(rows) / static_cast<double>(out_rows);
  const double sx = static_cast<double>(cols) / static_cast<double>(out_cols);
  for (std::int64_t r = 0; r < out_rows; ++r) {
    const double y = std::clamp((static_cast<double>(r) + 0.5) * sy - 0.5, 0.0, static_cast<double>(rows - 1));
    const auto y0 = static_cast<std::int64_t>(y);
    const auto y1 = std::min(y0 + 1, rows - 1);
    const double fy = y - static_cast<double>(y0);
    for (std::int64_t c = 0; c < out_cols; ++c) {
      const double x = std::clamp((static_cast<double>(c) + 0.5) * sx - 0.5, 0.0, static_cast<double>(cols - 1));
      const auto x0 = static_cast<std::int64_t>(x);
      const auto x1 = std::min(x0 + 1, cols - 1);
      const double fx = x - static_cast<double>(x0);
      const double top = map[y0 * cols + x0] * (1 - fx) + map[y0 * cols + x1] * fx;
      const double bottom = map[y1 * cols + x0] * (1 - fx) + map[y1 * cols + x1] * fx;
      out[r * out_cols + c] = static_cast<float>(top * (1 - fy) + bottom * fy);
    }
  }
  return out;
}

void heat_color(float t, std::uint8_t rgb[3]) {
  t = std::clamp(t, 0.0f, 1.0f);
  // Piecewise-linear jet: blue, cyan, yellow, red.
  const float r = std::clamp(1.5f - std::abs(4.0f * t - 3.0f), 0.0f, 1.0f);
  const float g = std::clamp(1.5f - std::abs(4.0f * t - 2.0f), 0.0f, 1.0f);
  const float b = std::clamp(1.5f - std::abs(4.0f * t - 1.0f), 0.0f, 1.0f);
  rgb[0] = byte(r);
  rgb[1] = byte(g);
  rgb[2] = byte(b);
}

Rgb attention_overlay(std::span<const float> slice, std::int64_t rows, std::int64_t cols,
                      std::span<const float> attention, std::span<const std::uint8_t> mask) {
  const auto n = static_cast<std::size_t>(rows * cols);
  if (slice.size() != n || (!attention.empty() && attention.size() != n) || (!mask.empty() && mask.size() != n))
    throw GeometryError("attention_overlay: panel sizes differ");
  Rgb out(rows, cols * 3);
  for (std::int64_t r = 0; r < rows; ++r) {
    for (std::int64_t c = 0; c < cols; ++c) {
      const auto i = static_cast<std::size_t>(r * cols + c);
      const std::uint8_t g = byte(slice[i]);
      for (int p = 0; p < 3; ++p) std::fill_n(out.at(r, c + p * cols), 3, g);
      if (!attention.empty()) {
        std::uint8_t h[3];
        heat_color(attention[i], h);
        // Heat alpha follows the attention value so cold regions keep the slice visible.
        const float a = 0.6f * std::clamp(attention[i], 0.0f, 1.0f);
        auto* px = out.at(r, c + cols);
        for (int k = 0; k < 3; ++k) px[k] = static_cast<std::uint8_t>(std::lround((1 - a) * g + a * h[k]));
      }
      if (!mask.empty() && mask[i]) {
        bool edge = r == 0 || c == 0 || r == rows - 1 || c == cols - 1;
        if (!edge)
          edge = !mask[i - 1] || !mask[i + 1] || !mask[i - static_cast<std::size_t>(cols)] ||
                 !mask[i + static_cast<std::size_t>(cols)];
        if (edge) {
          auto* px = out.at(r, c + 2 * cols);
          px[0] = 255;
          px[1] = 32;
          px[2] = 32;
        }
      }
    }
  }
  return out;
}

}  // namespace pedetect::image
