#include "pedetect/encoder.hpp"

#include <cmath>

#include "pedetect/checkpoint.hpp"
#include "pedetect/error.hpp"
#include "pedetect/hash.hpp"
#include "pedetect/training.hpp"

namespace pedetect::encoder {
namespace {

constexpr std::int64_t kStemStride = 4;  // strided stem convolution + max-pool
constexpr std::int64_t kBaseWidths[4] = {64, 128, 256, 512};

torch::nn::Conv2d conv(std::int64_t in, std::int64_t out, std::int64_t k, std::int64_t stride) {
  return torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, k).stride(stride).padding(k / 2).bias(false));
}

}  // namespace

void EncoderConfig::validate() const {
  if (in_channels < 1) throw ConfigError("in_channels", "must be >= 1");
  if (!(width_multiplier > 0.0)) throw ConfigError("width_multiplier", "must be > 0");
  if (blocks_per_stage.size() != 4) throw ConfigError("blocks_per_stage", "expected four stages");
  for (auto b : blocks_per_stage)
    if (b < 1) throw ConfigError("blocks_per_stage", "every stage needs >= 1 block");
  if (!stage_widths_override.empty() && stage_widths_override.size() != 4)
    throw ConfigError("stage_widths", "expected four widths");
  for (auto w : stage_widths_override)
    if (w < 1) throw ConfigError("stage_widths", "widths must be >= 1");
  if (total_stride != 4 && total_stride != 8 && total_stride != 16 && total_stride != 32)
    throw ConfigError("total_stride", "must be one of 4, 8, 16, 32");
  if (input_rows < total_stride || input_cols < total_stride || input_rows % total_stride != 0 ||
      input_cols % total_stride != 0)
    throw ConfigError("input_size", "must be divisible by total_stride");
  if (stem_kernel < 1 || stem_kernel % 2 == 0) throw ConfigError("stem_kernel", "must be odd and >= 1");
  if (epochs < 1) throw ConfigError("epochs", "must be >= 1");
  if (attention_warmup_epochs < 0 || attention_warmup_epochs >= epochs)
    throw ConfigError("attention_warmup_epochs", "must lie in [0, epochs)");
  if (batch_size < 1) throw ConfigError("batch_size", "must be >= 1");
  if (!(learning_rate > 0.0)) throw ConfigError("learning_rate", "must be > 0");
  if (augment && input_rows != input_cols) throw ConfigError("augment", "needs a square input size");
}

std::vector<std::int64_t> EncoderConfig::stage_widths() const {
  if (!stage_widths_override.empty()) return stage_widths_override;
  std::vector<std::int64_t> w;
  for (auto b : kBaseWidths)
    w.push_back(std::max<std::int64_t>(1, std::llround(static_cast<double>(b) * width_multiplier)));
  return w;
}

std::vector<std::int64_t> EncoderConfig::stage_strides() const {
  std::vector<std::int64_t> s{1, 1, 1, 1};
  std::int64_t cumulative = kStemStride;
  for (std::size_t i = 1; i < 4 && cumulative < total_stride; ++i) {
    s[i] = 2;
    cumulative *= 2;
  }
  return s;
}

std::uint64_t EncoderConfig::architecture_hash() const {
  nlohmann::json arch = {{"input", {input_rows, input_cols}}, {"in_channels", in_channels},
                         {"widths", stage_widths()},          {"blocks", blocks_per_stage},
                         {"stem_kernel", stem_kernel},        {"total_stride", total_stride}};
  return fnv1a(arch.dump());
}

void to_json(nlohmann::json& j, const EncoderConfig& c) {
  j = nlohmann::json{{"input_size", {c.input_rows, c.input_cols}},
                     {"in_channels", c.in_channels},
                     {"feature_channels", c.feature_channels()},
                     {"total_stride", c.total_stride},
                     {"width_multiplier", c.width_multiplier},
                     {"stage_widths", c.stage_widths_override},
                     {"blocks_per_stage", c.blocks_per_stage},
                     {"stem_kernel", c.stem_kernel},
                     {"input_scale", c.input_scale},
                     {"epochs", c.epochs},
                     {"batch_size", c.batch_size},
                     {"learning_rate", c.learning_rate},
                     {"use_attention_loss", c.use_attention_loss},
                     {"attention_warmup_epochs", c.attention_warmup_epochs},
                     {"redraw_negatives", c.redraw_negatives},
                     {"augment", c.augment},
                     {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, EncoderConfig& c) {
  EncoderConfig d;
  if (j.contains("input_size")) {
    const auto& s = j.at("input_size");
    if (!s.is_array() || s.size() != 2) throw ConfigError("input_size", "expected [rows, cols]");
    c.input_rows = s[0].get<std::int64_t>();
    c.input_cols = s[1].get<std::int64_t>();
  } else {
    c.input_rows = d.input_rows;
    c.input_cols = d.input_cols;
  }
  c.in_channels = j.value("in_channels", d.in_channels);
  c.total_stride = j.value("total_stride", d.total_stride);
  c.width_multiplier = j.value("width_multiplier", d.width_multiplier);
  c.stage_widths_override = j.value("stage_widths", d.stage_widths_override);
  c.blocks_per_stage = j.value("blocks_per_stage", d.blocks_per_stage);
  c.stem_kernel = j.value("stem_kernel", d.stem_kernel);
  c.input_scale = j.value("input_scale", d.input_scale);
  c.epochs = j.value("epochs", d.epochs);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.learning_rate = j.value("learning_rate", d.learning_rate);
  c.use_attention_loss = j.value("use_attention_loss", d.use_attention_loss);
  c.attention_warmup_epochs = j.value("attention_warmup_epochs", d.attention_warmup_epochs);
  c.redraw_negatives = j.value("redraw_negatives", d.redraw_negatives);
  c.augment = j.value("augment", d.augment);
  c.seed = j.value("seed", d.seed);
  if (j.contains("feature_channels") && j.at("feature_channels").get<std::int64_t>() != c.feature_channels())
    throw ConfigError("feature_channels", "inconsistent with stage widths (" +
                                              std::to_string(c.feature_channels()) + ")");
}

BasicBlockImpl::BasicBlockImpl(std::int64_t in, std::int64_t out, std::int64_t stride) {
  conv1 = register_module("conv1", conv(in, out, 3, stride));
  bn1 = register_module("bn1", torch::nn::BatchNorm2d(out));
  conv2 = register_module("conv2", conv(out, out, 3, 1));
  bn2 = register_module("bn2", torch::nn::BatchNorm2d(out));
  if (stride != 1 || in != out) {
    shortcut = register_module("shortcut", torch::nn::Sequential(conv(in, out, 1, stride), torch::nn::BatchNorm2d(out)));
  }
}

torch::Tensor BasicBlockImpl::forward(const torch::Tensor& x) {
  auto y = torch::relu(bn1(conv1(x)));
  y = bn2(conv2(y));
  return torch::relu(y + (shortcut ? shortcut->forward(x) : x));
}

ResidualEncoderImpl::ResidualEncoderImpl(EncoderConfig config) : config_(std::move(config)) {
  config_.validate();
  const auto widths = config_.stage_widths();
  const auto strides = config_.stage_strides();
  stem_conv = register_module("stem_conv", conv(config_.in_channels, widths[0], config_.stem_kernel, 2));
  stem_bn = register_module("stem_bn", torch::nn::BatchNorm2d(widths[0]));
  stages = register_module("stages", torch::nn::ModuleList());
  std::int64_t in = widths[0];
  for (std::size_t s = 0; s < 4; ++s) {
    torch::nn::Sequential stage;
    for (std::int64_t b = 0; b < config_.blocks_per_stage[s]; ++b) {
      stage->push_back(BasicBlock(in, widths[s], b == 0 ? strides[s] : 1));
      in = widths[s];
    }
    stages->push_back(stage);
  }
  classifier = register_module("classifier", torch::nn::Linear(torch::nn::LinearOptions(widths[3], 1)));
}

void ResidualEncoderImpl::check_input(const torch::Tensor& input) const {
  if (input.dim() != 4 || input.size(1) != config_.in_channels || input.size(2) != config_.input_rows ||
      input.size(3) != config_.input_cols)
    throw GeometryError("encoder expects (N, " + std::to_string(config_.in_channels) + ", " +
                        std::to_string(config_.input_rows) + ", " + std::to_string(config_.input_cols) + ") input");
}

torch::Tensor ResidualEncoderImpl::features(const torch::Tensor& input) {
  check_input(input);
  auto x = input * config_.input_scale;
  x = torch::relu(stem_bn(stem_conv(x)));
  x = torch::max_pool2d(x, 3, 2, 1);
  for (const auto& stage : *stages) x = stage->as<torch::nn::Sequential>()->forward(x);
  return x;
}

torch::Tensor ResidualEncoderImpl::head(const torch::Tensor& features) {
  // Antisymmetric logits (-z/2, z/2): softmax over them is sigmoid(z), and the
  // positive logit cannot drift independently of the class evidence.
  auto half = 0.5 * classifier(features.mean({2, 3}));
  return torch::cat({-half, half}, 1);
}

EncoderOutput ResidualEncoderImpl::forward(const torch::Tensor& input) {
  auto f = features(input);
  return {head(f), f};
}

std::int64_t ResidualEncoderImpl::parameter_count() const {
  std::int64_t n = 0;
  for (const auto& p : parameters()) n += p.numel();
  return n;
}

void recalibrate_batch_norm(ResidualEncoder& model, const torch::Tensor& images, std::int64_t batch_size) {
  training::recalibrate_batch_norm(*model, images.size(0), batch_size, [&](std::int64_t start, std::int64_t n) {
    model->features(images.narrow(0, start, n));
  });
}

ResidualEncoder make_encoder(const EncoderConfig& config) {
  torch::manual_seed(config.seed);
  return ResidualEncoder(config);
}

void save_encoder(const std::filesystem::path& path, ResidualEncoder& model, const nlohmann::json& extra) {
  nlohmann::json meta = {{"kind", "encoder"}, {"config", model->config()}, {"extra", extra}};
  checkpoint::save(path, *model, model->config().architecture_hash(), meta);
}

ResidualEncoder load_encoder(const std::filesystem::path& path) {
  const auto header = checkpoint::read_header(path);
  if (header.metadata.value("kind", "") != "encoder") throw DataError(path.string() + " is not an encoder checkpoint");
  auto config = header.metadata.at("config").get<EncoderConfig>();
  ResidualEncoder model(config);
  checkpoint::load(path, *model, config.architecture_hash());
  model->eval();
  return model;
}

}  // namespace pedetect::encoder
