#include "pedetect/container.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "pedetect/error.hpp"
#include "pedetect/hash.hpp"

static_assert(std::endian::native == std::endian::little,
              "container I/O assumes a little-endian host");

namespace pedetect {

std::string hex64(std::uint64_t v) {
  static constexpr char digits[] = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i) {
    out[static_cast<std::size_t>(i)] = digits[v & 0xF];
    v >>= 4;
  }
  return out;
}

namespace container {
namespace {

template <typename T>
void put(std::vector<std::uint8_t>& out, T v) {
  std::uint8_t raw[sizeof(T)];
  std::memcpy(raw, &v, sizeof(T));
  out.insert(out.end(), raw, raw + sizeof(T));
}

template <typename T>
T get(std::span<const std::uint8_t> bytes, std::size_t offset) {
  T v;
  std::memcpy(&v, bytes.data() + offset, sizeof(T));
  return v;
}

std::size_t dtype_size(DType d) {
  switch (d) {
    case DType::uint8: return 1;
    case DType::float32: return 4;
  }
  throw DataError("unknown dtype code " + std::to_string(static_cast<int>(d)));
}

void write_raw(const std::filesystem::path& path, const Header& h, const void* data,
               std::size_t bytes) {
  if (h.magic.size() != 5) throw DataError("container magic must be 5 bytes: " + h.magic);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot open " + path.string() + " for writing");
  auto header = encode_header(h);
  out.write(reinterpret_cast<const char*>(header.data()),
            static_cast<std::streamsize>(header.size()));
  out.write(static_cast<const char*>(data), static_cast<std::streamsize>(bytes));
  if (!out) throw DataError("write failed: " + path.string());
}

}  // namespace

std::vector<std::uint8_t> encode_header(const Header& h) {
  std::vector<std::uint8_t> out;
  out.reserve(kHeaderBytes);
  out.insert(out.end(), h.magic.begin(), h.magic.end());
  out.push_back(static_cast<std::uint8_t>(h.dtype));
  for (auto d : h.shape) put<std::uint64_t>(out, d);
  for (auto s : h.spacing) put<double>(out, s);
  return out;
}

Header decode_header(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < kHeaderBytes) throw DataError("truncated container header");
  Header h;
  h.magic.assign(reinterpret_cast<const char*>(bytes.data()), 5);
  h.dtype = static_cast<DType>(bytes[5]);
  dtype_size(h.dtype);
  for (std::size_t i = 0; i < 3; ++i) h.shape[i] = get<std::uint64_t>(bytes, 6 + 8 * i);
  for (std::size_t i = 0; i < 3; ++i) h.spacing[i] = get<double>(bytes, 30 + 8 * i);
  return h;
}

void write_f32(const std::filesystem::path& path, const Header& h,
               std::span<const float> data) {
  Header hh = h;
  hh.dtype = DType::float32;
  if (hh.record_elements() == 0 || data.size() % hh.record_elements() != 0)
    throw DataError("payload is not a whole number of records: " + path.string());
  write_raw(path, hh, data.data(), data.size_bytes());
}

void write_u8(const std::filesystem::path& path, const Header& h,
              std::span<const std::uint8_t> data) {
  Header hh = h;
  hh.dtype = DType::uint8;
  if (hh.record_elements() == 0 || data.size() % hh.record_elements() != 0)
    throw DataError("payload is not a whole number of records: " + path.string());
  write_raw(path, hh, data.data(), data.size());
}

Blob read(const std::filesystem::path& path, std::string_view expected_magic) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::vector<std::uint8_t> head(kHeaderBytes);
  in.read(reinterpret_cast<char*>(head.data()), static_cast<std::streamsize>(kHeaderBytes));
  if (in.gcount() != static_cast<std::streamsize>(kHeaderBytes))
    throw DataError("truncated container header: " + path.string());
  Blob blob;
  blob.header = decode_header(head);
  if (!expected_magic.empty() && blob.header.magic != expected_magic)
    throw DataError(path.string() + ": expected magic " + std::string(expected_magic) +
                    ", found " + blob.header.magic);

  std::vector<char> payload((std::istreambuf_iterator<char>(in)),
                            std::istreambuf_iterator<char>());
  const std::size_t record_bytes = blob.header.record_elements() * dtype_size(blob.header.dtype);
  if (record_bytes == 0 || payload.size() % record_bytes != 0)
    throw DataError(path.string() + ": payload of " + std::to_string(payload.size()) +
                    " bytes is not a whole number of records");
  blob.records = payload.size() / record_bytes;
  if (blob.header.dtype == DType::float32) {
    blob.f32.resize(payload.size() / 4);
    std::memcpy(blob.f32.data(), payload.data(), payload.size());
  } else {
    blob.u8.assign(payload.begin(), payload.end());
  }
  return blob;
}

void write_volume(const std::filesystem::path& path, const Volume& v) {
  Header h{std::string(kVolumeMagic), DType::float32,
           {static_cast<std::uint64_t>(v.shape.slices), static_cast<std::uint64_t>(v.shape.rows),
            static_cast<std::uint64_t>(v.shape.cols)},
           {v.spacing.z, v.spacing.y, v.spacing.x}};
  write_f32(path, h, v.voxels);
}

Volume read_volume(const std::filesystem::path& path) {
  Blob blob = read(path, kVolumeMagic);
  if (blob.records != 1 || blob.header.dtype != DType::float32)
    throw DataError(path.string() + ": volume must hold one float32 record");
  Volume v;
  v.shape = {static_cast<std::int64_t>(blob.header.shape[0]),
             static_cast<std::int64_t>(blob.header.shape[1]),
             static_cast<std::int64_t>(blob.header.shape[2])};
  v.spacing = {blob.header.spacing[0], blob.header.spacing[1], blob.header.spacing[2]};
  v.voxels = std::move(blob.f32);
  return v;
}

}  // namespace container
}  // namespace pedetect
