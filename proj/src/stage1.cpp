#include "pedetect/stage1.hpp"

#include <chrono>
#include <cmath>
#include <numeric>

#include "pedetect/attention.hpp"
#include "pedetect/error.hpp"
#include "pedetect/training.hpp"

namespace pedetect::stage1 {
namespace {

using preprocess::Band;

struct Builder {
  std::vector<torch::Tensor> images, masks;
  std::vector<std::int64_t> labels;
  std::vector<std::uint8_t> has_mask;
  std::vector<std::string> ids;
  std::vector<std::int64_t> slices;

  void add(torch::Tensor image, torch::Tensor mask, int label, bool annotated, const std::string& id,
           std::int64_t slice) {
    images.push_back(std::move(image));
    masks.push_back(std::move(mask));
    labels.push_back(label);
    has_mask.push_back(annotated);
    ids.push_back(id);
    slices.push_back(slice);
  }

  SlabDataset finish(std::int64_t rows, std::int64_t cols, std::int64_t mask_rows, std::int64_t mask_cols) {
    SlabDataset d;
    if (images.empty()) {
      d.images = torch::zeros({0, preprocess::kSlicesPerSlab, rows, cols});
      d.masks = torch::zeros({0, mask_rows, mask_cols});
      d.labels = torch::zeros({0}, torch::kLong);
      d.has_mask = torch::zeros({0}, torch::kBool);
      return d;
    }
    d.images = torch::stack(images);
    d.masks = torch::stack(masks);
    d.labels = torch::tensor(labels, torch::TensorOptions().dtype(torch::kLong));
    d.has_mask = torch::tensor(std::vector<std::int64_t>(has_mask.begin(), has_mask.end())).to(torch::kBool);
    d.study_ids = std::move(ids);
    d.slices = std::move(slices);
    return d;
  }
};

struct SplitData {
  SlabDataset positives;
  NegativePool pool;
};

SplitData collect(const std::filesystem::path& corpus_dir, const synth::CorpusManifest& manifest, synth::Split split,
                  const preprocess::PreprocessConfig& pre, const encoder::EncoderConfig& enc) {
  SplitData out;
  Builder pos;
  const auto stride = enc.total_stride;
  out.pool.mask_rows = enc.feature_rows();
  out.pool.mask_cols = enc.feature_cols();
  for (const auto* entry : manifest.select(split, true)) {
    auto prepared = prepare_study(corpus_dir, *entry, pre);
    if (entry->label) {
      for (const auto& [z, m] : prepared.masks) {
        auto slab = preprocess::extract_slab(prepared.volume, z);
        pos.add(slab_tensor(slab), mask_tensor(preprocess::downsample_mask(m, stride)), 1, true, entry->id, z);
      }
    } else {
      out.pool.bands.push_back(preprocess::select_lung_band(prepared.volume, pre.band_variance_threshold));
      out.pool.volumes.push_back(std::move(prepared.volume));
      out.pool.study_ids.push_back(entry->id);
    }
  }
  out.positives = pos.finish(enc.input_rows, enc.input_cols, enc.feature_rows(), enc.feature_cols());
  return out;
}

}  // namespace

PreparedStudy prepare_study(const std::filesystem::path& corpus_dir, const synth::ManifestEntry& entry,
                            const preprocess::PreprocessConfig& pre) {
  auto study = synth::load_study(corpus_dir, entry);
  PreparedStudy out;
  const double dz = study.volume.spacing.z;
  out.volume = preprocess::prepare_volume(study.volume, pre);
  // Annotated slices follow the z resampling; masks follow the crop.
  for (auto& [z, m] : study.lesion_masks) {
    auto nz = static_cast<std::int64_t>(std::llround(static_cast<double>(z) * dz / out.volume.spacing.z));
    nz = std::clamp<std::int64_t>(nz, 0, out.volume.shape.slices - 1);
    out.masks.emplace(nz, preprocess::center_crop(m, pre.crop_rows, pre.crop_cols));
  }
  return out;
}

SlabDataset SlabDataset::subset(const torch::Tensor& index) const {
  SlabDataset d;
  d.images = images.index_select(0, index);
  d.masks = masks.index_select(0, index);
  d.labels = labels.index_select(0, index);
  d.has_mask = has_mask.index_select(0, index);
  auto acc = index.accessor<std::int64_t, 1>();
  for (std::int64_t i = 0; i < index.size(0); ++i) {
    if (!study_ids.empty()) d.study_ids.push_back(study_ids[static_cast<std::size_t>(acc[i])]);
    if (!slices.empty()) d.slices.push_back(slices[static_cast<std::size_t>(acc[i])]);
  }
  return d;
}

SlabDataset SlabDataset::concat(const SlabDataset& a, const SlabDataset& b) {
  if (a.size() == 0) return b;
  if (b.size() == 0) return a;
  SlabDataset d;
  d.images = torch::cat({a.images, b.images});
  d.masks = torch::cat({a.masks, b.masks});
  d.labels = torch::cat({a.labels, b.labels});
  d.has_mask = torch::cat({a.has_mask, b.has_mask});
  d.study_ids = a.study_ids;
  d.study_ids.insert(d.study_ids.end(), b.study_ids.begin(), b.study_ids.end());
  d.slices = a.slices;
  d.slices.insert(d.slices.end(), b.slices.begin(), b.slices.end());
  return d;
}

SlabDataset NegativePool::draw(std::int64_t count, std::mt19937_64& rng) const {
  Builder b;
  std::int64_t rows = 0, cols = 0;
  if (!volumes.empty()) {
    rows = volumes.front().shape.rows;
    cols = volumes.front().shape.cols;
    std::vector<std::size_t> order(volumes.size());
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    for (std::int64_t k = 0; k < count; ++k) {
      const auto s = order[static_cast<std::size_t>(k) % order.size()];
      const auto& band = bands[s];
      const auto z = std::uniform_int_distribution<std::int64_t>(band.start, band.end)(rng);
      auto slab = preprocess::extract_slab(volumes[s], z);
      b.add(slab_tensor(slab), torch::zeros({mask_rows, mask_cols}), 0, false, study_ids[s], z);
    }
  }
  return b.finish(rows, cols, mask_rows, mask_cols);
}

torch::Tensor slab_tensor(const preprocess::Slab& slab) {
  return torch::from_blob(const_cast<float*>(slab.pixels.data()),
                          {preprocess::kSlicesPerSlab, slab.rows, slab.cols}, torch::kFloat32)
      .clone();
}

torch::Tensor mask_tensor(const Mask2D& mask) {
  std::vector<float> v(mask.bits.begin(), mask.bits.end());
  return torch::tensor(v).view({mask.rows, mask.cols});
}

Stage1Data build_stage1_data(const std::filesystem::path& corpus_dir, const synth::CorpusManifest& manifest,
                             const preprocess::PreprocessConfig& pre, const encoder::EncoderConfig& enc,
                             std::uint64_t seed) {
  pre.validate();
  enc.validate();
  if (pre.crop_rows != enc.input_rows || pre.crop_cols != enc.input_cols)
    throw ConfigError("crop_size", "must equal the encoder input size");
  Stage1Data data;
  auto train = collect(corpus_dir, manifest, synth::Split::train, pre, enc);
  auto val = collect(corpus_dir, manifest, synth::Split::validation, pre, enc);
  if (train.positives.size() == 0 || train.pool.volumes.empty())
    throw DataError("stage I training split needs annotated positives and negatives");
  if (val.positives.size() == 0 || val.pool.volumes.empty())
    throw DataError("stage I validation split needs annotated positives and negatives");
  std::mt19937_64 rng(seed);
  data.train_positives = std::move(train.positives);
  data.train_pool = std::move(train.pool);
  data.train_negatives = data.train_pool.draw(data.train_positives.size(), rng);
  data.validation = SlabDataset::concat(val.positives, val.pool.draw(val.positives.size(), rng));
  return data;
}

Stage1Validation validate_stage1(encoder::ResidualEncoder& model, const SlabDataset& data, const losses::LossConfig& loss,
                                 std::int64_t batch_size) {
  if (data.size() == 0) throw DataError("validate_stage1: empty split");
  model->eval();
  Stage1Validation out;
  double ce_sum = 0.0, att_sum = 0.0, inside_sum = 0.0;
  std::int64_t correct = 0, n_masked = 0, hits = 0;
  for (std::int64_t start = 0; start < data.size(); start += batch_size) {
    const auto n = std::min(batch_size, data.size() - start);
    auto x = data.images.narrow(0, start, n);
    auto y = data.labels.narrow(0, start, n);
    auto maps = attention::compute_attention(*model, x, 1);
    torch::NoGradGuard no_grad;
    auto scores = model->forward(x).scores;
    ce_sum += losses::cross_entropy_from_logits(scores, y).item<double>() * static_cast<double>(n);
    att_sum += losses::attention_loss(maps.values, data.masks.narrow(0, start, n), loss.smoothing_epsilon).item<double>() *
               static_cast<double>(n);
    auto prob = torch::softmax(scores, 1).select(1, 1).to(torch::kFloat64).contiguous();
    auto pred = scores.argmax(1);
    correct += (pred == y).sum().item<std::int64_t>();
    auto p = prob.accessor<double, 1>();
    auto yl = y.accessor<std::int64_t, 1>();
    auto values = maps.values.to(torch::kFloat32).contiguous();
    for (std::int64_t i = 0; i < n; ++i) {
      out.scores.push_back(p[i]);
      out.labels.push_back(static_cast<int>(yl[i]));
      if (!data.has_mask[start + i].item<bool>()) continue;
      auto m = data.masks[start + i].to(torch::kUInt8).contiguous();
      auto a = values[i].contiguous();
      auto loc = metrics::attention_localization(
          std::span<const float>(a.data_ptr<float>(), static_cast<std::size_t>(a.numel())),
          std::span<const std::uint8_t>(m.data_ptr<std::uint8_t>(), static_cast<std::size_t>(m.numel())));
      inside_sum += loc.inside_fraction;
      hits += loc.hit;
      ++n_masked;
    }
  }
  const auto N = static_cast<double>(data.size());
  out.accuracy = static_cast<double>(correct) / N;
  out.classification_loss = ce_sum / N;
  out.attention_loss = att_sum / N;
  out.eval = metrics::evaluate(out.scores, out.labels);
  if (n_masked > 0) {
    out.mean_inside_fraction = inside_sum / static_cast<double>(n_masked);
    out.hit_rate = static_cast<double>(hits) / static_cast<double>(n_masked);
  }
  return out;
}

Stage1Validation validate_stage1(const std::filesystem::path& checkpoint, const SlabDataset& data,
                                 const losses::LossConfig& loss) {
  auto model = encoder::load_encoder(checkpoint);
  return validate_stage1(model, data, loss);
}

Stage1Result train_stage1(const Stage1Data& data, const encoder::EncoderConfig& enc, const losses::LossConfig& loss,
                          const std::filesystem::path& checkpoint_path, const nlohmann::json& extra) {
  enc.validate();
  loss.validate();
  if (data.train_positives.size() == 0) throw DataError("train_stage1: empty training split");
  if (data.validation.size() == 0) throw DataError("train_stage1: empty validation split");

  Stage1Result result;
  result.model = encoder::make_encoder(enc);
  auto& model = result.model;
  torch::optim::Adam optimizer(model->parameters(), torch::optim::AdamOptions(enc.learning_rate));
  losses::LossConfig effective = loss;
  if (!enc.use_attention_loss) effective.lambda_attention = 0.0;
  const bool with_attention = effective.lambda_attention > 0.0;
  const std::int64_t warmup = with_attention ? enc.attention_warmup_epochs : 0;

  std::mt19937_64 rng(enc.seed ^ 0x5EEDULL);
  SlabDataset train = data.train();
  std::vector<torch::Tensor> best_state;
  double best_accuracy = -1.0;

  for (std::int64_t epoch = 0; epoch < enc.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    if (enc.redraw_negatives && epoch > 0)
      train = SlabDataset::concat(data.train_positives, data.train_pool.draw(data.train_positives.size(), rng));
    std::vector<std::int64_t> order(static_cast<std::size_t>(train.size()));
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);

    model->train();
    double ce_sum = 0.0, att_sum = 0.0, total_sum = 0.0;
    for (std::int64_t start = 0; start < train.size(); start += enc.batch_size) {
      const auto n = std::min(enc.batch_size, train.size() - start);
      auto index = torch::tensor(std::vector<std::int64_t>(order.begin() + start, order.begin() + start + n),
                                 torch::TensorOptions().dtype(torch::kLong));
      auto x = train.images.index_select(0, index);
      auto y = train.labels.index_select(0, index);
      auto m = train.masks.index_select(0, index);
      if (enc.augment) {
        // One of the eight square symmetries, applied to slabs and masks alike.
        const auto op = std::uniform_int_distribution<int>(0, 7)(rng);
        if (op & 4) {
          x = x.transpose(2, 3);
          m = m.transpose(1, 2);
        }
        if (op & 2) {
          x = x.flip({2});
          m = m.flip({1});
        }
        if (op & 1) {
          x = x.flip({3});
          m = m.flip({2});
        }
        x = x.contiguous();
        m = m.contiguous();
      }

      optimizer.zero_grad();
      losses::TotalLoss l;
      if (with_attention && epoch >= warmup) {
        auto fwd = attention::forward_with_attention(*model, x, 1, effective.attention_mode);
        l = losses::total_loss(fwd.scores, y, fwd.attention.values, m, effective);
      } else {
        auto ce_only = effective;
        ce_only.lambda_attention = 0.0;
        l = losses::total_loss(model->forward(x).scores, y, {}, {}, ce_only);
      }
      const double total = l.total.item<double>();
      if (!std::isfinite(total))
        throw TrainingDivergence("stage I: non-finite loss at epoch " + std::to_string(epoch) + ", batch starting " +
                                 std::to_string(start));
      l.total.backward();
      optimizer.step();
      ce_sum += l.classification.item<double>() * static_cast<double>(n);
      if (l.attention.defined()) att_sum += l.attention.item<double>() * static_cast<double>(n);
      total_sum += total * static_cast<double>(n);
    }

    encoder::recalibrate_batch_norm(model, train.images, enc.batch_size);
    auto val = validate_stage1(model, data.validation, effective);
    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_classification = ce_sum / static_cast<double>(train.size());
    rec.train_attention = att_sum / static_cast<double>(train.size());
    rec.train_total = total_sum / static_cast<double>(train.size());
    rec.validation_classification = val.classification_loss;
    rec.validation_attention = with_attention ? val.attention_loss : 0.0;
    rec.validation_accuracy = val.accuracy;
    rec.validation_auc = val.eval.auc;
    rec.validation_inside_fraction = val.mean_inside_fraction;
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    result.history.epochs.push_back(rec);
    if (epoch >= warmup && val.accuracy > best_accuracy) {
      best_accuracy = val.accuracy;
      best_state = training::snapshot(*model);
    }
  }
  result.history.selected_epoch = select_epoch(result.history.epochs, warmup);
  if (auto w = loss_trend_warning(result.history.epochs, warmup); !w.empty()) result.history.warnings.push_back(w);
  training::restore(*model, best_state);
  model->eval();
  if (!checkpoint_path.empty()) {
    nlohmann::json meta = extra.is_object() ? extra : nlohmann::json::object();
    meta["loss"] = effective;
    meta["selected_epoch"] = result.history.selected_epoch;
    encoder::save_encoder(checkpoint_path, model, meta);
  }
  return result;
}

}  // namespace pedetect::stage1
