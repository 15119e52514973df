#include "pedetect/training.hpp"

namespace pedetect::training {

std::vector<torch::Tensor> snapshot(const torch::nn::Module& module) {
  std::vector<torch::Tensor> out;
  for (const auto& p : module.parameters()) out.push_back(p.detach().clone());
  for (const auto& b : module.buffers()) out.push_back(b.detach().clone());
  return out;
}

void restore(torch::nn::Module& module, const std::vector<torch::Tensor>& state) {
  torch::NoGradGuard no_grad;
  std::size_t k = 0;
  for (auto& p : module.parameters()) p.copy_(state.at(k++));
  for (auto& b : module.buffers()) b.copy_(state.at(k++));
}

void recalibrate_batch_norm(torch::nn::Module& module, std::int64_t count, std::int64_t batch_size,
                            const std::function<void(std::int64_t, std::int64_t)>& run) {
  std::vector<torch::nn::BatchNorm2dImpl*> norms;
  for (auto& m : module.modules(/*include_self=*/false))
    if (auto* bn = dynamic_cast<torch::nn::BatchNorm2dImpl*>(m.get())) norms.push_back(bn);
  if (norms.empty() || count == 0) return;
  std::vector<std::optional<double>> momenta;
  for (auto* bn : norms) {
    momenta.push_back(bn->options.momentum());
    bn->options.momentum(std::nullopt);  // cumulative average
    bn->reset_running_stats();
  }
  const bool was_training = module.is_training();
  module.train();
  {
    torch::NoGradGuard no_grad;
    for (std::int64_t start = 0; start < count; start += batch_size) run(start, std::min(batch_size, count - start));
  }
  for (std::size_t i = 0; i < norms.size(); ++i) norms[i]->options.momentum(momenta[i]);
  module.train(was_training);
}

}  // namespace pedetect::training
