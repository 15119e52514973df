#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

namespace pedetect {

// (slices, rows, cols), z-major.
struct Shape3 {
  std::int64_t slices = 0;
  std::int64_t rows = 0;
  std::int64_t cols = 0;

  std::int64_t voxels() const { return slices * rows * cols; }
  std::int64_t plane() const { return rows * cols; }
  bool operator==(const Shape3&) const = default;
};

// Physical voxel size in millimetres along (z, y, x).
struct Spacing3 {
  double z = 1.0;
  double y = 1.0;
  double x = 1.0;
  bool operator==(const Spacing3&) const = default;
};

enum class IntensityScale : std::uint8_t { hounsfield, windowed };

// Dense scalar volume. Values are HU until windowed into [0, 255].
struct Volume {
  Shape3 shape;
  Spacing3 spacing;
  IntensityScale scale = IntensityScale::hounsfield;
  std::vector<float> voxels;

  Volume() = default;
  Volume(Shape3 s, Spacing3 sp, float fill = 0.0f,
         IntensityScale sc = IntensityScale::hounsfield)
      : shape(s), spacing(sp), scale(sc),
        voxels(static_cast<std::size_t>(s.voxels()), fill) {}

  float& at(std::int64_t z, std::int64_t y, std::int64_t x) {
    return voxels[static_cast<std::size_t>((z * shape.rows + y) * shape.cols + x)];
  }
  float at(std::int64_t z, std::int64_t y, std::int64_t x) const {
    return voxels[static_cast<std::size_t>((z * shape.rows + y) * shape.cols + x)];
  }
  std::span<float> slice(std::int64_t z) {
    return std::span(voxels).subspan(static_cast<std::size_t>(z * shape.plane()),
                                     static_cast<std::size_t>(shape.plane()));
  }
  std::span<const float> slice(std::int64_t z) const {
    return std::span(voxels).subspan(static_cast<std::size_t>(z * shape.plane()),
                                     static_cast<std::size_t>(shape.plane()));
  }
};

// Row-major binary 2D mask.
struct Mask2D {
  std::int64_t rows = 0;
  std::int64_t cols = 0;
  std::vector<std::uint8_t> bits;

  Mask2D() = default;
  Mask2D(std::int64_t r, std::int64_t c)
      : rows(r), cols(c), bits(static_cast<std::size_t>(r * c), 0) {}

  std::uint8_t& at(std::int64_t y, std::int64_t x) {
    return bits[static_cast<std::size_t>(y * cols + x)];
  }
  std::uint8_t at(std::int64_t y, std::int64_t x) const {
    return bits[static_cast<std::size_t>(y * cols + x)];
  }
  std::int64_t count() const {
    std::int64_t n = 0;
    for (auto b : bits) n += b != 0;
    return n;
  }
  bool empty() const { return count() == 0; }
  bool operator==(const Mask2D&) const = default;
};

}  // namespace pedetect
