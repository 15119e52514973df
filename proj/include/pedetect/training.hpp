#pragma once

// Small helpers shared by both training loops.

#include <cstdint>
#include <functional>
#include <vector>

#include <torch/torch.h>

namespace pedetect::training {

// Copies of every parameter and buffer, in module order.
std::vector<torch::Tensor> snapshot(const torch::nn::Module& module);
void restore(torch::nn::Module& module, const std::vector<torch::Tensor>& state);

// Re-estimates all BatchNorm running statistics as exact averages over one
// train-mode pass without gradients. `run(start, n)` forwards items
// [start, start + n). Removes the lag of the exponential average that
// otherwise follows fast weight updates.
void recalibrate_batch_norm(torch::nn::Module& module, std::int64_t count, std::int64_t batch_size,
                            const std::function<void(std::int64_t, std::int64_t)>& run);

}  // namespace pedetect::training
