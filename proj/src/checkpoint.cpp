#include "pedetect/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <map>

#include "pedetect/error.hpp"
#include "pedetect/hash.hpp"

namespace pedetect::checkpoint {
namespace {

constexpr char kMagic[5] = {'A', 'C', 'K', 'P', '1'};

std::uint8_t dtype_code(torch::ScalarType t) {
  switch (t) {
    case torch::kFloat32: return 2;
    case torch::kFloat64: return 3;
    case torch::kInt64: return 4;
    default: throw DataError("checkpoint: unsupported tensor dtype");
  }
}

torch::ScalarType dtype_from(std::uint8_t code) {
  switch (code) {
    case 2: return torch::kFloat32;
    case 3: return torch::kFloat64;
    case 4: return torch::kInt64;
    default: throw DataError("checkpoint: unknown dtype code " + std::to_string(code));
  }
}

template <typename T>
void put(std::ofstream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::ifstream& in, const std::filesystem::path& path) {
  T v;
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw DataError("truncated checkpoint: " + path.string());
  return v;
}

std::map<std::string, torch::Tensor> named_state(const torch::nn::Module& module) {
  std::map<std::string, torch::Tensor> state;
  for (const auto& p : module.named_parameters(true)) state.emplace(p.key(), p.value());
  for (const auto& b : module.named_buffers(true)) state.emplace(b.key(), b.value());
  return state;
}

Header read_prefix(std::ifstream& in, const std::filesystem::path& path) {
  char magic[5];
  in.read(magic, 5);
  if (!in || std::memcmp(magic, kMagic, 5) != 0) throw DataError(path.string() + " is not a checkpoint");
  Header h;
  h.architecture_hash = get<std::uint64_t>(in, path);
  const auto len = get<std::uint64_t>(in, path);
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  if (!in) throw DataError("truncated checkpoint: " + path.string());
  h.metadata = nlohmann::json::parse(text);
  return h;
}

}  // namespace

void save(const std::filesystem::path& path, const torch::nn::Module& module, std::uint64_t architecture_hash,
          const nlohmann::json& metadata) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot open " + tmp + " for writing");
    out.write(kMagic, 5);
    put<std::uint64_t>(out, architecture_hash);
    const auto text = metadata.dump();
    put<std::uint64_t>(out, text.size());
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    const auto state = named_state(module);
    put<std::uint64_t>(out, state.size());
    for (const auto& [name, tensor] : state) {
      auto t = tensor.detach().contiguous().cpu();
      put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
      out.write(name.data(), static_cast<std::streamsize>(name.size()));
      put<std::uint8_t>(out, dtype_code(t.scalar_type()));
      put<std::uint8_t>(out, static_cast<std::uint8_t>(t.dim()));
      for (auto d : t.sizes()) put<std::uint64_t>(out, static_cast<std::uint64_t>(d));
      out.write(static_cast<const char*>(t.data_ptr()), static_cast<std::streamsize>(t.nbytes()));
    }
    if (!out) throw DataError("write failed: " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

Header read_header(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint " + path.string());
  return read_prefix(in, path);
}

Header load(const std::filesystem::path& path, torch::nn::Module& module, std::uint64_t architecture_hash) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint " + path.string());
  Header h = read_prefix(in, path);
  if (h.architecture_hash != architecture_hash)
    throw DataError(path.string() + ": architecture hash " + hex64(h.architecture_hash) +
                    " does not match model " + hex64(architecture_hash));
  auto state = named_state(module);
  const auto count = get<std::uint64_t>(in, path);
  if (count != state.size()) throw DataError(path.string() + ": tensor count does not match model");
  torch::NoGradGuard no_grad;
  for (std::uint64_t k = 0; k < count; ++k) {
    const auto len = get<std::uint32_t>(in, path);
    std::string name(len, '\0');
    in.read(name.data(), len);
    const auto dtype = dtype_from(get<std::uint8_t>(in, path));
    const auto rank = get<std::uint8_t>(in, path);
    std::vector<std::int64_t> dims(rank);
    for (auto& d : dims) d = static_cast<std::int64_t>(get<std::uint64_t>(in, path));
    auto it = state.find(name);
    if (it == state.end()) throw DataError(path.string() + ": unexpected tensor " + name);
    auto& target = it->second;
    if (target.sizes() != torch::IntArrayRef(dims) || target.scalar_type() != dtype)
      throw DataError(path.string() + ": shape or dtype mismatch for " + name);
    auto buffer = torch::empty(dims, torch::TensorOptions().dtype(dtype));
    in.read(static_cast<char*>(buffer.data_ptr()), static_cast<std::streamsize>(buffer.nbytes()));
    if (!in) throw DataError("truncated checkpoint: " + path.string());
    target.copy_(buffer);
  }
  return h;
}

std::string file_digest(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return hex64(fnv1a(bytes));
}

}  // namespace pedetect::checkpoint
