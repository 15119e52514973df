#include "pedetect/aggregator.hpp"

#include <algorithm>
#include <numeric>
#include <stdexcept>
#include <string>

#include "pedetect/checkpoint.hpp"
#include "pedetect/error.hpp"
#include "pedetect/hash.hpp"

namespace pedetect::aggregator {
namespace {

// Channel-wise keep mask, fixed over the sequence.
torch::Tensor channel_mask(const torch::Tensor& like, std::int64_t channels, double rate, bool training) {
  if (!training || rate <= 0.0) return {};
  auto keep = torch::bernoulli(torch::full({like.size(0), channels, 1, 1}, 1.0 - rate, like.options()));
  return keep / (1.0 - rate);
}

// Permutation exchanging the two halves of a concat-merged channel axis.
torch::Tensor half_swap(std::int64_t channels) {
  const auto half = channels / 2;
  return torch::cat({torch::arange(half, channels), torch::arange(0, half)});
}

}  // namespace

void AggregatorConfig::validate() const {
  if (units < 1) throw ConfigError("units", "must be >= 1");
  if (filters < 1) throw ConfigError("filters", "must be >= 1");
  if (kernel < 1 || kernel % 2 == 0) throw ConfigError("kernel", "must be odd and >= 1");
  if (pool < 1) throw ConfigError("pool", "must be >= 1");
  if (!(recurrent_dropout >= 0.0 && recurrent_dropout < 1.0)) throw ConfigError("recurrent_dropout", "must lie in [0, 1)");
  if (!(head_dropout >= 0.0 && head_dropout < 1.0)) throw ConfigError("head_dropout", "must lie in [0, 1)");
  if (epochs < 1) throw ConfigError("epochs", "must be >= 1");
  if (batch_size < 1) throw ConfigError("batch_size", "must be >= 1");
  if (!(learning_rate > 0.0)) throw ConfigError("learning_rate", "must be > 0");
}

void to_json(nlohmann::json& j, const AggregatorConfig& c) {
  j = nlohmann::json{{"units", c.units},
                     {"filters", c.filters},
                     {"kernel", c.kernel},
                     {"pool", c.pool},
                     {"recurrent_dropout", c.recurrent_dropout},
                     {"head_dropout", c.head_dropout},
                     {"epochs", c.epochs},
                     {"batch_size", c.batch_size},
                     {"learning_rate", c.learning_rate},
                     {"merge_mode", c.merge_mode == MergeMode::concat ? "concat" : "sum"},
                     {"z_pooling", c.z_pooling == ZPooling::mean_then_flatten ? "mean_then_flatten" : "global_average"},
                     {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, AggregatorConfig& c) {
  AggregatorConfig d;
  c.units = j.value("units", d.units);
  c.filters = j.value("filters", d.filters);
  c.kernel = j.value("kernel", d.kernel);
  c.pool = j.value("pool", d.pool);
  c.recurrent_dropout = j.value("recurrent_dropout", d.recurrent_dropout);
  c.head_dropout = j.value("head_dropout", d.head_dropout);
  c.epochs = j.value("epochs", d.epochs);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.learning_rate = j.value("learning_rate", d.learning_rate);
  const auto merge = j.value("merge_mode", std::string("concat"));
  if (merge == "concat") c.merge_mode = MergeMode::concat;
  else if (merge == "sum") c.merge_mode = MergeMode::sum;
  else throw ConfigError("merge_mode", "expected concat or sum, got " + merge);
  const auto pooling = j.value("z_pooling", std::string("mean_then_flatten"));
  if (pooling == "mean_then_flatten") c.z_pooling = ZPooling::mean_then_flatten;
  else if (pooling == "global_average") c.z_pooling = ZPooling::global_average;
  else throw ConfigError("z_pooling", "expected mean_then_flatten or global_average, got " + pooling);
  c.seed = j.value("seed", d.seed);
}

std::vector<std::pair<std::int64_t, std::int64_t>> unit_geometry(const AggregatorConfig& config,
                                                                 const InputGeometry& input) {
  std::vector<std::pair<std::int64_t, std::int64_t>> out;
  auto rows = input.rows, cols = input.cols;
  for (std::int64_t u = 0; u < config.units; ++u) {
    if (rows % config.pool != 0 || cols % config.pool != 0 || rows < config.pool || cols < config.pool)
      throw GeometryError("unit " + std::to_string(u + 1) + ": " + std::to_string(rows) + "x" + std::to_string(cols) +
                          " is not divisible by the pooling size " + std::to_string(config.pool));
    rows /= config.pool;
    cols /= config.pool;
    out.emplace_back(rows, cols);
  }
  return out;
}

ConvLstmCellImpl::ConvLstmCellImpl(std::int64_t input_channels_, std::int64_t hidden_, std::int64_t kernel)
    : input_channels(input_channels_), hidden(hidden_) {
  gates = register_module(
      "gates", torch::nn::Conv2d(torch::nn::Conv2dOptions(input_channels + hidden, 4 * hidden, kernel).padding(kernel / 2)));
}

std::pair<torch::Tensor, torch::Tensor> ConvLstmCellImpl::forward(const torch::Tensor& x, const torch::Tensor& h,
                                                                  const torch::Tensor& c) {
  auto z = gates(torch::cat({x, h}, 1));
  auto parts = z.chunk(4, 1);
  auto i = torch::sigmoid(parts[0]);
  auto f = torch::sigmoid(parts[1]);
  auto g = torch::tanh(parts[2]);
  auto o = torch::sigmoid(parts[3]);
  auto c_next = f * c + i * g;
  return {o * torch::tanh(c_next), c_next};
}

BidirectionalUnitImpl::BidirectionalUnitImpl(std::int64_t input_channels, const AggregatorConfig& cfg) : config(cfg) {
  ascending = register_module("ascending", ConvLstmCell(input_channels, config.filters, config.kernel));
  descending = register_module("descending", ConvLstmCell(input_channels, config.filters, config.kernel));
  norm = register_module("norm", torch::nn::BatchNorm2d(output_channels()));
}

std::int64_t BidirectionalUnitImpl::output_channels() const {
  return config.merge_mode == MergeMode::concat ? 2 * config.filters : config.filters;
}

torch::Tensor BidirectionalUnitImpl::run(ConvLstmCell& cell, const torch::Tensor& sequence) {
  const auto N = sequence.size(0), T = sequence.size(1);
  auto x0 = sequence.select(1, 0);
  auto h = torch::zeros({N, config.filters, sequence.size(3), sequence.size(4)}, sequence.options());
  auto c = torch::zeros_like(h);
  auto in_mask = channel_mask(x0, sequence.size(2), config.recurrent_dropout, is_training());
  auto rec_mask = channel_mask(x0, config.filters, config.recurrent_dropout, is_training());
  std::vector<torch::Tensor> outputs;
  outputs.reserve(static_cast<std::size_t>(T));
  for (std::int64_t t = 0; t < T; ++t) {
    auto x = sequence.select(1, t);
    if (in_mask.defined()) x = x * in_mask;
    auto h_in = rec_mask.defined() ? h * rec_mask : h;
    std::tie(h, c) = cell->forward(x, h_in, c);
    outputs.push_back(h);
  }
  return torch::stack(outputs, 1);
}

torch::Tensor BidirectionalUnitImpl::forward(const torch::Tensor& sequence, const torch::Tensor& lengths) {
  const auto N = sequence.size(0), T = sequence.size(1);
  auto up = run(ascending, sequence);
  auto down = reverse_valid(run(descending, reverse_valid(sequence, lengths)), lengths);
  auto merged = config.merge_mode == MergeMode::concat ? torch::cat({up, down}, 2) : up + down;
  const auto C = merged.size(2), rows = merged.size(3), cols = merged.size(4);
  if (rows % config.pool != 0 || cols % config.pool != 0)
    throw GeometryError("pooling a " + std::to_string(rows) + "x" + std::to_string(cols) + " map by " +
                        std::to_string(config.pool));
  auto flat = norm(merged.reshape({N * T, C, rows, cols}));
  flat = torch::max_pool2d(flat, config.pool, config.pool);
  return flat.reshape({N, T, C, rows / config.pool, cols / config.pool});
}

RecurrentAggregatorImpl::RecurrentAggregatorImpl(AggregatorConfig config, InputGeometry input)
    : config_(std::move(config)), input_(input) {
  config_.validate();
  const auto geometry = unit_geometry(config_, input_);
  units = register_module("units", torch::nn::ModuleList());
  std::int64_t channels = input_.channels;
  for (std::int64_t u = 0; u < config_.units; ++u) {
    BidirectionalUnit unit(channels, config_);
    channels = unit->output_channels();
    units->push_back(unit);
  }
  const auto [rows, cols] = geometry.back();
  const auto flat = config_.z_pooling == ZPooling::mean_then_flatten ? channels * rows * cols : channels;
  dropout = register_module("dropout", torch::nn::Dropout(config_.head_dropout));
  dense = register_module("dense", torch::nn::Linear(flat, 1));
}

std::uint64_t RecurrentAggregatorImpl::architecture_hash() const {
  nlohmann::json arch = {{"units", config_.units},
                         {"filters", config_.filters},
                         {"kernel", config_.kernel},
                         {"pool", config_.pool},
                         {"merge", config_.merge_mode == MergeMode::concat},
                         {"z_pooling", config_.z_pooling == ZPooling::mean_then_flatten},
                         {"input", {input_.channels, input_.rows, input_.cols}}};
  return fnv1a(arch.dump());
}

torch::Tensor RecurrentAggregatorImpl::logits(const torch::Tensor& features, const torch::Tensor& lengths_in) {
  if (features.dim() != 5 || features.size(2) != input_.channels || features.size(3) != input_.rows ||
      features.size(4) != input_.cols)
    throw GeometryError("aggregator expects (N, T, " + std::to_string(input_.channels) + ", " +
                        std::to_string(input_.rows) + ", " + std::to_string(input_.cols) + ") features");
  const auto N = features.size(0), T = features.size(1);
  auto lengths = lengths_in.defined() ? lengths_in.to(torch::kLong)
                                      : torch::full({N}, T, torch::TensorOptions().dtype(torch::kLong));
  auto x = features;
  for (const auto& unit : *units) x = unit->as<BidirectionalUnitImpl>()->forward(x, lengths);

  auto valid = (torch::arange(T).unsqueeze(0) < lengths.unsqueeze(1)).to(x.dtype());  // (N, T)
  auto weights = (valid / lengths.to(x.dtype()).unsqueeze(1)).view({N, T, 1, 1, 1});
  auto pooled = (x * weights).sum(1);  // (N, C, u, v)
  auto flat = config_.z_pooling == ZPooling::mean_then_flatten ? pooled.flatten(1) : pooled.mean({2, 3});
  return dense(dropout(flat)).squeeze(1);
}

torch::Tensor RecurrentAggregatorImpl::forward(const torch::Tensor& features, const torch::Tensor& lengths) {
  return torch::sigmoid(logits(features, lengths));
}

std::shared_ptr<RecurrentAggregatorImpl> RecurrentAggregatorImpl::direction_swapped() const {
  auto out = std::make_shared<RecurrentAggregatorImpl>(config_, input_);
  torch::NoGradGuard no_grad;
  const bool concat = config_.merge_mode == MergeMode::concat;
  for (std::size_t u = 0; u < units->size(); ++u) {
    const auto& src = *std::dynamic_pointer_cast<BidirectionalUnitImpl>(units->ptr(u));
    auto& dst = *out->units[u]->as<BidirectionalUnitImpl>();
    auto copy_cell = [&](const ConvLstmCell& from, ConvLstmCell& to) {
      auto w = from->gates->weight;
      // Inputs of every unit after the first arrive with swapped halves.
      if (concat && u > 0) {
        auto x_part = w.narrow(1, 0, from->input_channels).index_select(1, half_swap(from->input_channels));
        w = torch::cat({x_part, w.narrow(1, from->input_channels, from->hidden)}, 1);
      }
      to->gates->weight.copy_(w);
      to->gates->bias.copy_(from->gates->bias);
    };
    copy_cell(src.descending, dst.ascending);
    copy_cell(src.ascending, dst.descending);
    const auto C = src.output_channels();
    auto perm = concat ? half_swap(C) : torch::arange(C);
    dst.norm->weight.copy_(src.norm->weight.index_select(0, perm));
    dst.norm->bias.copy_(src.norm->bias.index_select(0, perm));
    dst.norm->running_mean.copy_(src.norm->running_mean.index_select(0, perm));
    dst.norm->running_var.copy_(src.norm->running_var.index_select(0, perm));
    dst.norm->num_batches_tracked.copy_(src.norm->num_batches_tracked);
  }
  auto w = dense->weight;
  if (concat) {
    const auto C = std::dynamic_pointer_cast<BidirectionalUnitImpl>(units->ptr(units->size() - 1))->output_channels();
    const auto spatial = w.size(1) / C;
    w = w.view({1, C, spatial}).index_select(1, half_swap(C)).reshape({1, C * spatial});
  }
  out->dense->weight.copy_(w);
  out->dense->bias.copy_(dense->bias);
  out->train(is_training());
  return out;
}

RecurrentAggregator make_aggregator(const AggregatorConfig& config, const InputGeometry& input) {
  torch::manual_seed(config.seed);
  return RecurrentAggregator(config, input);
}

torch::Tensor reverse_valid(const torch::Tensor& sequence, const torch::Tensor& lengths) {
  const auto N = sequence.size(0), T = sequence.size(1);
  auto t = torch::arange(T, torch::TensorOptions().dtype(torch::kLong)).unsqueeze(0).expand({N, T});
  auto len = lengths.to(torch::kLong).unsqueeze(1);
  auto index = torch::where(t < len, len - 1 - t, t);
  std::vector<std::int64_t> shape{N, T};
  for (std::int64_t d = 2; d < sequence.dim(); ++d) shape.push_back(1);
  auto expanded = index.view(shape).expand(sequence.sizes());
  return sequence.gather(1, expanded);
}

std::pair<torch::Tensor, torch::Tensor> pad_sequences(const std::vector<torch::Tensor>& sequences) {
  if (sequences.empty()) throw std::invalid_argument("pad_sequences: empty batch");
  std::int64_t T = 0;
  for (const auto& s : sequences) T = std::max(T, s.size(0));
  std::vector<torch::Tensor> padded;
  std::vector<std::int64_t> lengths;
  for (const auto& s : sequences) {
    lengths.push_back(s.size(0));
    auto sizes = s.sizes().vec();
    sizes[0] = T - s.size(0);
    padded.push_back(sizes[0] > 0 ? torch::cat({s, torch::zeros(sizes, s.options())}, 0) : s);
  }
  return {torch::stack(padded, 0), torch::tensor(lengths, torch::TensorOptions().dtype(torch::kLong))};
}

double baseline_aggregate(std::span<const double> slab_scores, std::string_view mode) {
  if (slab_scores.empty()) throw std::invalid_argument("baseline_aggregate: empty sequence");
  if (mode == "mean")
    return std::accumulate(slab_scores.begin(), slab_scores.end(), 0.0) / static_cast<double>(slab_scores.size());
  if (mode == "max") return *std::max_element(slab_scores.begin(), slab_scores.end());
  throw std::invalid_argument("baseline_aggregate: mode must be mean or max");
}

void save_aggregator(const std::filesystem::path& path, RecurrentAggregator& model, const nlohmann::json& extra) {
  const auto& g = model->input_geometry();
  nlohmann::json meta = {{"kind", "aggregator"},
                         {"config", model->config()},
                         {"input", {g.channels, g.rows, g.cols}},
                         {"extra", extra}};
  checkpoint::save(path, *model, model->architecture_hash(), meta);
}

RecurrentAggregator load_aggregator(const std::filesystem::path& path) {
  const auto header = checkpoint::read_header(path);
  if (header.metadata.value("kind", "") != "aggregator") throw DataError(path.string() + " is not an aggregator checkpoint");
  auto config = header.metadata.at("config").get<AggregatorConfig>();
  const auto& in = header.metadata.at("input");
  RecurrentAggregator model(config, InputGeometry{in[0].get<std::int64_t>(), in[1].get<std::int64_t>(), in[2].get<std::int64_t>()});
  checkpoint::load(path, *model, model->architecture_hash());
  model->eval();
  return model;
}

}  // namespace pedetect::aggregator
