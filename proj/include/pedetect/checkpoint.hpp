#pragma once

// Single-file parameter store:
//   "ACKP1" | u64 architecture hash | u64 json length | json | u64 tensor count |
//   per tensor: u32 name length, name, u8 dtype, u8 rank, rank x u64 dims, raw data
// Parameters and buffers are stored by their module path.

#include <cstdint>
#include <filesystem>
#include <string>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

namespace pedetect::checkpoint {

struct Header {
  std::uint64_t architecture_hash = 0;
  nlohmann::json metadata;
};

void save(const std::filesystem::path& path, const torch::nn::Module& module, std::uint64_t architecture_hash,
          const nlohmann::json& metadata);

// Throws DataError when the stored architecture hash differs from
// `architecture_hash` or any tensor name/shape does not match the module.
Header load(const std::filesystem::path& path, torch::nn::Module& module, std::uint64_t architecture_hash);

Header read_header(const std::filesystem::path& path);

std::string file_digest(const std::filesystem::path& path);

}  // namespace pedetect::checkpoint
