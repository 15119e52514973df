#include "pedetect/stage2.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>

#include "pedetect/checkpoint.hpp"
#include "pedetect/container.hpp"
#include "pedetect/error.hpp"
#include "pedetect/losses.hpp"
#include "pedetect/metrics.hpp"
#include "pedetect/stage1.hpp"
#include "pedetect/training.hpp"

namespace pedetect::stage2 {

preprocess::SlabSequence study_sequence(const std::filesystem::path& corpus_dir, const synth::ManifestEntry& entry,
                                        const preprocess::PreprocessConfig& pre) {
  auto study = synth::load_study(corpus_dir, entry);
  auto volume = preprocess::prepare_volume(study.volume, pre);
  auto band = preprocess::select_lung_band(volume, pre.band_variance_threshold);
  auto seq = preprocess::build_slab_sequence(volume, band, pre.sequence_length, pre.sequence_stride,
                                             pre.slices_per_slab);
  seq.label = entry.label;
  for (auto& s : seq.slabs) {
    s.study_id = entry.id;
    s.label = entry.label;
  }
  return seq;
}

FeatureSequence encode_study(encoder::ResidualEncoder& model, const preprocess::SlabSequence& sequence,
                             const std::string& study_id) {
  if (sequence.slabs.empty()) throw GeometryError("encode_study: empty slab sequence");
  const auto& cfg = model->config();
  std::vector<torch::Tensor> slabs;
  for (const auto& s : sequence.slabs) {
    if (s.rows != cfg.input_rows || s.cols != cfg.input_cols)
      throw GeometryError("encode_study: slabs are " + std::to_string(s.rows) + "x" + std::to_string(s.cols) +
                          " but the encoder expects " + std::to_string(cfg.input_rows) + "x" +
                          std::to_string(cfg.input_cols));
    slabs.push_back(stage1::slab_tensor(s));
  }
  model->eval();
  torch::NoGradGuard no_grad;
  auto out = model->forward(torch::stack(slabs));
  FeatureSequence fs;
  fs.values = out.features.permute({0, 2, 3, 1}).contiguous();
  fs.study_id = study_id.empty() ? sequence.slabs.front().study_id : study_id;
  fs.label = sequence.label;
  auto p = torch::softmax(out.scores, 1).select(1, 1).to(torch::kFloat64).contiguous();
  fs.slab_scores.assign(p.data_ptr<double>(), p.data_ptr<double>() + p.numel());
  return fs;
}

const FeatureIndexEntry* FeatureIndex::find(const std::string& id) const {
  for (const auto& s : studies)
    if (s.id == id) return &s;
  return nullptr;
}

void to_json(nlohmann::json& j, const FeatureIndex& index) {
  nlohmann::json studies = nlohmann::json::array();
  for (const auto& s : index.studies)
    studies.push_back({{"id", s.id},
                       {"label", s.label},
                       {"split", synth::to_string(s.split)},
                       {"annotated", s.annotated},
                       {"file", s.file},
                       {"length", s.length},
                       {"slab_scores", s.slab_scores}});
  j = nlohmann::json{{"format", "pedetect-features-1"},
                     {"encoder_digest", index.encoder_digest},
                     {"geometry", {{"rows", index.rows}, {"cols", index.cols}, {"channels", index.channels}}},
                     {"studies", studies}};
}

void from_json(const nlohmann::json& j, FeatureIndex& index) {
  if (j.value("format", "") != "pedetect-features-1") throw DataError("unrecognized feature index format");
  index.encoder_digest = j.at("encoder_digest").get<std::string>();
  const auto& g = j.at("geometry");
  index.rows = g.at("rows").get<std::int64_t>();
  index.cols = g.at("cols").get<std::int64_t>();
  index.channels = g.at("channels").get<std::int64_t>();
  index.studies.clear();
  for (const auto& s : j.at("studies")) {
    FeatureIndexEntry e;
    e.id = s.at("id").get<std::string>();
    e.label = s.at("label").get<int>();
    e.split = synth::split_from_string(s.at("split").get<std::string>());
    e.annotated = s.value("annotated", false);
    e.file = s.at("file").get<std::string>();
    e.length = s.at("length").get<std::int64_t>();
    e.slab_scores = s.value("slab_scores", std::vector<double>{});
    index.studies.push_back(std::move(e));
  }
}

void write_features(const std::filesystem::path& path, const FeatureSequence& sequence) {
  const auto& v = sequence.values;
  if (v.dim() != 4) throw GeometryError("feature sequence must be (T, u, v, K)");
  container::Header h;
  h.magic = std::string(container::kFeatureMagic);
  h.dtype = container::DType::float32;
  h.shape = {static_cast<std::uint64_t>(v.size(1)), static_cast<std::uint64_t>(v.size(2)),
             static_cast<std::uint64_t>(v.size(3))};
  auto data = v.to(torch::kFloat32).contiguous();
  container::write_f32(path, h, std::span<const float>(data.data_ptr<float>(), static_cast<std::size_t>(data.numel())));
}

torch::Tensor read_features(const std::filesystem::path& path) {
  auto blob = container::read(path, container::kFeatureMagic);
  const auto& s = blob.header.shape;
  auto t = torch::from_blob(blob.f32.data(),
                            {static_cast<std::int64_t>(blob.records), static_cast<std::int64_t>(s[0]),
                             static_cast<std::int64_t>(s[1]), static_cast<std::int64_t>(s[2])},
                            torch::kFloat32);
  return t.clone();
}

FeatureIndex extract_features(const std::filesystem::path& checkpoint, const std::filesystem::path& corpus_dir,
                              const std::vector<const synth::ManifestEntry*>& studies,
                              const preprocess::PreprocessConfig& pre, const std::filesystem::path& out_dir) {
  auto model = encoder::load_encoder(checkpoint);
  std::filesystem::create_directories(out_dir);
  FeatureIndex index;
  index.encoder_digest = checkpoint::file_digest(checkpoint);
  index.rows = model->config().feature_rows();
  index.cols = model->config().feature_cols();
  index.channels = model->config().feature_channels();
  for (const auto* entry : studies) {
    auto fs = encode_study(model, study_sequence(corpus_dir, *entry, pre), entry->id);
    FeatureIndexEntry e;
    e.id = entry->id;
    e.label = entry->label;
    e.split = entry->split;
    e.annotated = entry->annotated;
    e.file = entry->id + ".aftr";
    e.length = fs.values.size(0);
    e.slab_scores = fs.slab_scores;
    write_features(out_dir / e.file, fs);
    index.studies.push_back(std::move(e));
  }
  const auto tmp = out_dir / (std::string(kFeatureIndexFile) + ".tmp");
  {
    std::ofstream out(tmp);
    if (!out) throw DataError("cannot write " + tmp.string());
    out << nlohmann::json(index).dump(2) << '\n';
  }
  std::filesystem::rename(tmp, out_dir / kFeatureIndexFile);
  return index;
}

FeatureIndex read_feature_index(const std::filesystem::path& dir) {
  std::ifstream in(dir / kFeatureIndexFile);
  if (!in) throw DataError("missing feature index in " + dir.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed feature index: " + std::string(e.what()));
  }
  return j.get<FeatureIndex>();
}

SequenceBatch load_sequences(const std::filesystem::path& dir, const FeatureIndex& index,
                             const std::vector<std::string>& study_ids) {
  std::vector<FeatureSequence> seqs;
  for (const auto& id : study_ids) {
    const auto* e = index.find(id);
    if (!e) throw DataError("feature store " + dir.string() + " has no features for study " + id);
    FeatureSequence fs;
    fs.values = read_features(dir / e->file);
    fs.study_id = id;
    fs.label = e->label;
    fs.slab_scores = e->slab_scores;
    seqs.push_back(std::move(fs));
  }
  return stack_sequences(seqs);
}

SequenceBatch stack_sequences(const std::vector<FeatureSequence>& sequences) {
  SequenceBatch b;
  if (sequences.empty()) return b;
  std::vector<torch::Tensor> values;
  std::vector<float> labels;
  for (const auto& s : sequences) {
    values.push_back(s.values.permute({0, 3, 1, 2}));  // (T, K, u, v)
    labels.push_back(static_cast<float>(s.label));
    b.study_ids.push_back(s.study_id);
    b.slab_scores.push_back(s.slab_scores);
  }
  auto [features, lengths] = aggregator::pad_sequences(values);
  b.features = features.contiguous();
  b.lengths = lengths;
  b.labels = torch::tensor(labels);
  return b;
}

std::vector<double> predict(aggregator::RecurrentAggregator& model, const SequenceBatch& batch,
                            std::int64_t batch_size) {
  model->eval();
  torch::NoGradGuard no_grad;
  std::vector<double> out;
  for (std::int64_t start = 0; start < batch.size(); start += batch_size) {
    const auto n = std::min(batch_size, batch.size() - start);
    auto p = model->forward(batch.features.narrow(0, start, n), batch.lengths.narrow(0, start, n))
                 .to(torch::kFloat64)
                 .contiguous();
    out.insert(out.end(), p.data_ptr<double>(), p.data_ptr<double>() + p.numel());
  }
  return out;
}

namespace {

std::vector<int> int_labels(const torch::Tensor& labels) {
  auto l = labels.to(torch::kFloat32).contiguous();
  std::vector<int> out;
  for (std::int64_t i = 0; i < l.numel(); ++i) out.push_back(l.data_ptr<float>()[i] > 0.5f ? 1 : 0);
  return out;
}

}  // namespace

Stage2Result train_stage2(const SequenceBatch& train, const SequenceBatch& validation,
                          const aggregator::AggregatorConfig& config, const std::filesystem::path& checkpoint_path,
                          const nlohmann::json& extra) {
  config.validate();
  if (train.size() == 0) throw DataError("train_stage2: empty training split");
  if (validation.size() == 0) throw DataError("train_stage2: empty validation split");
  const aggregator::InputGeometry geometry{train.features.size(2), train.features.size(3), train.features.size(4)};

  Stage2Result result;
  result.model = aggregator::make_aggregator(config, geometry);
  auto& model = result.model;
  torch::optim::Adam optimizer(model->parameters(), torch::optim::AdamOptions(config.learning_rate));

  const auto train_labels = int_labels(train.labels);
  const auto val_labels = int_labels(validation.labels);
  const auto positives = std::accumulate(train_labels.begin(), train_labels.end(), 0);
  if (positives == 0 || positives == static_cast<int>(train_labels.size()))
    result.history.warnings.push_back("all stage II training labels are " + std::to_string(train_labels.front()) +
                                      "; the model can only learn the prior");
  const bool val_two_classes =
      std::find(val_labels.begin(), val_labels.end(), 1 - val_labels.front()) != val_labels.end();

  std::mt19937_64 rng(config.seed ^ 0xA66ULL);
  std::vector<torch::Tensor> best_state;
  double best_accuracy = -1.0;

  for (std::int64_t epoch = 0; epoch < config.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    std::vector<std::int64_t> order(static_cast<std::size_t>(train.size()));
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    model->train();
    double loss_sum = 0.0;
    for (std::int64_t start = 0; start < train.size(); start += config.batch_size) {
      const auto n = std::min(config.batch_size, train.size() - start);
      auto index = torch::tensor(std::vector<std::int64_t>(order.begin() + start, order.begin() + start + n),
                                 torch::TensorOptions().dtype(torch::kLong));
      optimizer.zero_grad();
      auto p = model->forward(train.features.index_select(0, index), train.lengths.index_select(0, index));
      auto loss = losses::binary_cross_entropy(p, train.labels.index_select(0, index));
      const double value = loss.item<double>();
      if (!std::isfinite(value))
        throw TrainingDivergence("stage II: non-finite loss at epoch " + std::to_string(epoch));
      loss.backward();
      optimizer.step();
      loss_sum += value * static_cast<double>(n);
    }
    training::recalibrate_batch_norm(*model, train.size(), config.batch_size, [&](std::int64_t s, std::int64_t n) {
      model->forward(train.features.narrow(0, s, n), train.lengths.narrow(0, s, n));
    });

    auto scores = predict(model, validation);
    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_classification = loss_sum / static_cast<double>(train.size());
    rec.train_total = rec.train_classification;
    {
      auto p = torch::tensor(scores).to(torch::kFloat32);
      rec.validation_classification = losses::binary_cross_entropy(p, validation.labels).item<double>();
    }
    rec.validation_accuracy = metrics::accuracy_at(scores, val_labels);
    rec.validation_auc = val_two_classes ? metrics::auc(scores, val_labels) : 0.5;
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    result.history.epochs.push_back(rec);
    if (rec.validation_accuracy > best_accuracy) {
      best_accuracy = rec.validation_accuracy;
      best_state = training::snapshot(*model);
    }
  }
  result.history.selected_epoch = select_epoch(result.history.epochs);
  if (auto w = loss_trend_warning(result.history.epochs); !w.empty()) result.history.warnings.push_back(w);
  training::restore(*model, best_state);
  model->eval();
  if (!checkpoint_path.empty()) {
    nlohmann::json meta = extra.is_object() ? extra : nlohmann::json::object();
    meta["selected_epoch"] = result.history.selected_epoch;
    aggregator::save_aggregator(checkpoint_path, model, meta);
  }
  return result;
}

}  // namespace pedetect::stage2
