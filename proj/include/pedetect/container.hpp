#pragma once

// Little-endian tensor container shared by all on-disk arrays.
//
//   offset  size  field
//   0       5     magic ("AVOL1", "ASLB1", "AATT1", "AFTR1", "AMSK1")
//   5       1     dtype code (see DType)
//   6       24    record shape, 3 x uint64 (d0, d1, d2)
//   30      24    spacing, 3 x float64
//   54      ...   payload, one or more records of d0*d1*d2 elements
//
// Volumes hold exactly one record. Slab and feature files hold one record per
// sequence step; the record count follows from the payload size.

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "pedetect/volume.hpp"

namespace pedetect::container {

enum class DType : std::uint8_t { uint8 = 1, float32 = 2 };

inline constexpr std::string_view kVolumeMagic = "AVOL1";
inline constexpr std::string_view kSlabMagic = "ASLB1";
inline constexpr std::string_view kAttentionMagic = "AATT1";
inline constexpr std::string_view kFeatureMagic = "AFTR1";
inline constexpr std::string_view kMaskMagic = "AMSK1";
inline constexpr std::size_t kHeaderBytes = 54;

struct Header {
  std::string magic;
  DType dtype = DType::float32;
  std::array<std::uint64_t, 3> shape{};
  std::array<double, 3> spacing{1.0, 1.0, 1.0};

  std::uint64_t record_elements() const { return shape[0] * shape[1] * shape[2]; }
};

struct Blob {
  Header header;
  std::uint64_t records = 0;
  std::vector<float> f32;    // filled for float32 payloads
  std::vector<std::uint8_t> u8;  // filled for uint8 payloads
};

std::vector<std::uint8_t> encode_header(const Header& h);
Header decode_header(std::span<const std::uint8_t> bytes);

void write_f32(const std::filesystem::path& path, const Header& h,
               std::span<const float> data);
void write_u8(const std::filesystem::path& path, const Header& h,
              std::span<const std::uint8_t> data);
// Throws DataError when the magic differs from `expected_magic` (if nonempty)
// or the payload is not a whole number of records.
Blob read(const std::filesystem::path& path, std::string_view expected_magic = {});

void write_volume(const std::filesystem::path& path, const Volume& v);
Volume read_volume(const std::filesystem::path& path);

}  // namespace pedetect::container
