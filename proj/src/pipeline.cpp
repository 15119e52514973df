#include "pedetect/pipeline.hpp"

#include <cstdio>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "pedetect/attention.hpp"
#include "pedetect/checkpoint.hpp"
#include "pedetect/container.hpp"
#include "pedetect/encoder.hpp"
#include "pedetect/error.hpp"
#include "pedetect/hash.hpp"
#include "pedetect/image.hpp"
#include "pedetect/preprocess.hpp"
#include "pedetect/stage1.hpp"

namespace pedetect::pipeline {
namespace fs = std::filesystem;
using config::ExperimentConfig;
using config::SeedStream;

namespace {

std::ostream& log(const Options& o) { return o.log ? *o.log : std::cerr; }

std::string tag(bool attention) { return attention ? "at" : "noat"; }

void make_dirs(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw DataError("cannot create " + dir.string() + ": " + ec.message());
}

// Write-then-rename so a crash never leaves a truncated artifact behind.
void write_text_atomic(const fs::path& path, const std::string& text) {
  make_dirs(path.parent_path());
  const auto tmp = fs::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::trunc);
    if (!out) throw DataError("cannot open " + tmp.string() + " for writing");
    out << text;
    if (!out) throw DataError("write failed: " + tmp.string());
  }
  fs::rename(tmp, path);
}

nlohmann::json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  try {
    nlohmann::json j;
    in >> j;
    return j;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

fs::path history_path(const fs::path& checkpoint) { return fs::path(checkpoint.string() + ".history.json"); }

nlohmann::json stored_extra(const fs::path& checkpoint) {
  try {
    return checkpoint::read_header(checkpoint).metadata.value("extra", nlohmann::json::object());
  } catch (const std::exception&) {
    return nlohmann::json::object();
  }
}

// The corpus a scenario reads; never regenerated from here.
synth::CorpusManifest load_corpus(const ExperimentConfig& c, const fs::path& dir) {
  if (!fs::exists(dir / synth::kManifestFile))
    throw DataError("no corpus at " + dir.string() + " (run gen first)");
  auto m = synth::read_manifest(dir);
  if (nlohmann::json(m.config) != nlohmann::json(c.corpus))
    throw DataError("corpus at " + dir.string() + " was generated from a different corpus config");
  return m;
}

std::vector<std::string> ids_of(const std::vector<const synth::ManifestEntry*>& entries) {
  std::vector<std::string> ids;
  for (const auto* e : entries) ids.push_back(e->id);
  return ids;
}

std::vector<const synth::ManifestEntry*> all_studies(const synth::CorpusManifest& m) {
  std::vector<const synth::ManifestEntry*> out;
  for (const auto& e : m.studies) out.push_back(&e);
  return out;
}

nlohmann::json eval_summary(const metrics::EvalResult& r) {
  return {{"auc", r.auc},           {"ci", {r.ci.low, r.ci.high}}, {"accuracy", r.accuracy},
          {"n_pos", r.n_pos},       {"n_neg", r.n_neg},            {"warnings", r.warnings}};
}

std::vector<int> labels_of(const stage2::SequenceBatch& b) {
  std::vector<int> out;
  auto l = b.labels.contiguous();
  for (std::int64_t i = 0; i < l.numel(); ++i) out.push_back(l.data_ptr<float>()[i] > 0.5f ? 1 : 0);
  return out;
}

std::string zero_pad(std::int64_t v, int width) {
  std::ostringstream s;
  s << std::setw(width) << std::setfill('0') << v;
  return s.str();
}

}  // namespace

fs::path Layout::stage1_checkpoint(bool attention, std::uint64_t seed) const {
  return checkpoints / ("stage1-" + tag(attention) + "-s" + std::to_string(seed) + ".ackp");
}

fs::path Layout::feature_dir(bool attention, std::uint64_t seed) const {
  return features / (tag(attention) + "-s" + std::to_string(seed));
}

fs::path Layout::stage2_checkpoint(int scenario, std::uint64_t seed) const {
  return checkpoints / ("stage2-scenario" + std::to_string(scenario) + "-s" + std::to_string(seed) + ".ackp");
}

fs::path Layout::report(int scenario, std::uint64_t seed) const {
  return reports / ("scenario" + std::to_string(scenario) + "-s" + std::to_string(seed) + ".json");
}

Layout layout(const ExperimentConfig& c, const std::optional<fs::path>& out) {
  Layout l;
  l.corpus = c.resolve(c.paths.corpus);
  if (out) {
    l.slabs = *out / "slabs";
    l.features = *out / "features";
    l.checkpoints = *out / "checkpoints";
    l.reports = *out / "reports";
    l.attention = *out / "attention";
  } else {
    l.slabs = c.resolve(c.paths.slabs);
    l.features = c.resolve(c.paths.features);
    l.checkpoints = c.resolve(c.paths.checkpoints);
    l.reports = c.resolve(c.paths.reports);
    l.attention = c.resolve(c.paths.attention);
  }
  return l;
}

GenResult cmd_gen(const ExperimentConfig& c, const Options& o) {
  GenResult r;
  r.dir = o.out.value_or(c.resolve(c.paths.corpus));
  if (!o.force && synth::corpus_matches(r.dir, c.corpus)) {
    r.manifest = synth::read_manifest(r.dir);
    log(o) << "gen: corpus at " << r.dir.string() << " is up to date (checksum " << r.manifest.checksum << ")\n";
    return r;
  }
  r.manifest = synth::generate_corpus(c.corpus, r.dir);
  r.generated = true;
  log(o) << "gen: wrote " << r.manifest.studies.size() << " studies to " << r.dir.string() << " (checksum "
         << r.manifest.checksum << ")\n";
  return r;
}

PreprocessResult cmd_preprocess(const ExperimentConfig& c, const Options& o) {
  const auto L = layout(c, o.out);
  const auto m = load_corpus(c, L.corpus);
  PreprocessResult r;
  r.dir = L.slabs;
  const nlohmann::json key = {{"corpus", m.checksum}, {"preprocess", c.preprocess}};
  const auto index_path = r.dir / "index.json";
  if (!o.force && fs::exists(index_path)) {
    auto idx = read_json(index_path);
    if (idx.value("key", nlohmann::json()) == key) {
      r.studies = static_cast<std::int64_t>(idx.at("studies").size());
      for (const auto& s : idx.at("studies")) r.fallback_bands += s.value("fallback", false);
      log(o) << "preprocess: slabs in " << r.dir.string() << " are up to date\n";
      return r;
    }
  }
  make_dirs(r.dir);
  nlohmann::json studies = nlohmann::json::array();
  for (const auto& e : m.studies) {
    auto study = synth::load_study(L.corpus, e);
    auto volume = preprocess::prepare_volume(study.volume, c.preprocess);
    auto band = preprocess::select_lung_band(volume, c.preprocess.band_variance_threshold);
    auto seq = preprocess::build_slab_sequence(volume, band, c.preprocess.sequence_length,
                                               c.preprocess.sequence_stride, c.preprocess.slices_per_slab);
    std::vector<float> data;
    std::vector<std::int64_t> centers;
    for (const auto& s : seq.slabs) {
      data.insert(data.end(), s.pixels.begin(), s.pixels.end());
      centers.push_back(s.center_slice);
    }
    container::Header h;
    h.magic = std::string(container::kSlabMagic);
    h.shape = {static_cast<std::uint64_t>(c.preprocess.slices_per_slab), static_cast<std::uint64_t>(volume.shape.rows),
               static_cast<std::uint64_t>(volume.shape.cols)};
    h.spacing = {volume.spacing.z, volume.spacing.y, volume.spacing.x};
    const auto file = e.id + ".aslb";
    container::write_f32(r.dir / file, h, data);
    studies.push_back({{"id", e.id},
                       {"label", e.label},
                       {"split", synth::to_string(e.split)},
                       {"file", file},
                       {"band", {band.start, band.end}},
                       {"fallback", band.fallback},
                       {"centers", centers}});
    r.fallback_bands += band.fallback;
    ++r.studies;
  }
  write_text_atomic(index_path, nlohmann::json{{"key", key}, {"studies", studies}}.dump(2) + "\n");
  log(o) << "preprocess: " << r.studies << " slab sequences in " << r.dir.string() << " (" << r.fallback_bands
         << " band fallbacks)\n";
  return r;
}

std::string stage1_run_hash(const ExperimentConfig& c, const synth::CorpusManifest& m, bool attention) {
  const nlohmann::json key = {{"corpus", m.checksum},
                              {"preprocess", c.preprocess},
                              {"encoder", c.stage1_encoder(attention)},
                              {"loss", c.stage1_loss(attention)},
                              {"sampling_seed", c.derived_seed(SeedStream::stage1_sampling)}};
  return hex64(fnv1a(key.dump()));
}

Stage1Outcome cmd_train_stage1(const ExperimentConfig& c, const Options& o, std::optional<bool> attention) {
  const bool at = attention.value_or(c.attention_training());
  const auto L = layout(c, o.out);
  const auto m = load_corpus(c, L.corpus);
  Stage1Outcome r;
  r.attention = at;
  r.checkpoint = L.stage1_checkpoint(at, c.seed);
  r.run_hash = stage1_run_hash(c, m, at);

  if (o.resume && fs::exists(r.checkpoint)) {
    if (stored_extra(r.checkpoint).value("run_hash", "") == r.run_hash) {
      r.reused = true;
      if (fs::exists(history_path(r.checkpoint)))
        r.validation = read_json(history_path(r.checkpoint)).value("validation", nlohmann::json::object());
      log(o) << "train-stage1: reusing " << r.checkpoint.string() << " (run hash " << r.run_hash << ")\n";
      return r;
    }
    log(o) << "train-stage1: warning: " << r.checkpoint.string() << " was trained with different settings; retraining\n";
  }

  const auto enc = c.stage1_encoder(at);
  const auto loss = c.stage1_loss(at);
  log(o) << "train-stage1: " << (at ? "AT" : "no-AT") << ", " << enc.epochs << " epochs\n";
  auto data = stage1::build_stage1_data(L.corpus, m, c.preprocess, enc, c.derived_seed(SeedStream::stage1_sampling));
  make_dirs(L.checkpoints);
  const auto tmp = fs::path(r.checkpoint.string() + ".tmp");
  auto result = stage1::train_stage1(data, enc, loss, tmp, {{"run_hash", r.run_hash}});
  fs::rename(tmp, r.checkpoint);
  r.history = result.history;

  auto v = stage1::validate_stage1(result.model, data.validation, loss);
  r.validation = {{"accuracy", v.accuracy},
                  {"auc", v.eval.auc},
                  {"mean_inside_fraction", v.mean_inside_fraction},
                  {"hit_rate", v.hit_rate},
                  {"slabs", data.validation.size()}};
  write_text_atomic(history_path(r.checkpoint),
                    nlohmann::json{{"run_hash", r.run_hash}, {"history", r.history}, {"validation", r.validation}}
                            .dump(2) +
                        "\n");
  for (const auto& w : r.history.warnings) log(o) << "train-stage1: warning: " << w << "\n";
  log(o) << "train-stage1: selected epoch " << r.history.selected_epoch << ", validation accuracy " << v.accuracy
         << ", AUC " << v.eval.auc << ", inside fraction " << v.mean_inside_fraction << "\n";
  return r;
}

FeatureOutcome cmd_extract_features(const ExperimentConfig& c, const Options& o, std::optional<bool> attention) {
  const bool at = attention.value_or(c.attention_training());
  const auto L = layout(c, o.out);
  const auto m = load_corpus(c, L.corpus);
  const auto ckpt = o.checkpoint.value_or(L.stage1_checkpoint(at, c.seed));
  if (!fs::exists(ckpt)) throw DataError("missing stage-I checkpoint " + ckpt.string());
  FeatureOutcome r;
  r.dir = o.checkpoint ? L.features / ckpt.stem() : L.feature_dir(at, c.seed);
  const auto digest = checkpoint::file_digest(ckpt);

  if (o.resume && !o.force && fs::exists(r.dir / stage2::kFeatureIndexFile)) {
    auto idx = stage2::read_feature_index(r.dir);
    bool complete = idx.encoder_digest == digest;
    for (const auto& e : m.studies) complete = complete && idx.find(e.id);
    if (complete) {
      r.index = std::move(idx);
      r.reused = true;
      log(o) << "extract-features: reusing " << r.dir.string() << "\n";
      return r;
    }
  }
  r.index = stage2::extract_features(ckpt, L.corpus, all_studies(m), c.preprocess, r.dir);
  log(o) << "extract-features: " << r.index.studies.size() << " studies -> " << r.dir.string() << " ("
         << r.index.rows << "x" << r.index.cols << "x" << r.index.channels << ")\n";
  return r;
}

std::vector<std::string> stage2_studies(const ExperimentConfig& c, const synth::CorpusManifest& m, synth::Split split) {
  if (split == synth::Split::test) return ids_of(m.select(split));
  return ids_of(m.select(split, c.annotated_only() ? std::optional<bool>(true) : std::nullopt));
}

Stage2Outcome cmd_train_stage2(const ExperimentConfig& c, const Options& o) {
  const bool at = c.attention_training();
  const auto L = layout(c, o.out);
  const auto m = load_corpus(c, L.corpus);
  const auto dir = L.feature_dir(at, c.seed);
  const auto index = stage2::read_feature_index(dir);
  const auto train_ids = stage2_studies(c, m, synth::Split::train);
  const auto val_ids = stage2_studies(c, m, synth::Split::validation);
  const auto agg = c.stage2_aggregator();

  Stage2Outcome r;
  r.checkpoint = L.stage2_checkpoint(c.scenario, c.seed);
  r.train_studies = static_cast<std::int64_t>(train_ids.size());
  r.validation_studies = static_cast<std::int64_t>(val_ids.size());
  const nlohmann::json key = {{"encoder_digest", index.encoder_digest},
                              {"aggregator", agg},
                              {"train", train_ids},
                              {"validation", val_ids}};
  const auto run_hash = hex64(fnv1a(key.dump()));
  if (o.resume && fs::exists(r.checkpoint)) {
    if (stored_extra(r.checkpoint).value("run_hash", "") == run_hash) {
      r.reused = true;
      log(o) << "train-stage2: reusing " << r.checkpoint.string() << "\n";
      return r;
    }
    log(o) << "train-stage2: warning: " << r.checkpoint.string() << " was trained with different settings; retraining\n";
  }

  auto train = stage2::load_sequences(dir, index, train_ids);
  auto validation = stage2::load_sequences(dir, index, val_ids);
  log(o) << "train-stage2: scenario " << c.scenario << ", " << train.size() << " training / " << validation.size()
         << " validation studies\n";
  make_dirs(L.checkpoints);
  const auto tmp = fs::path(r.checkpoint.string() + ".tmp");
  auto result = stage2::train_stage2(
      train, validation, agg, tmp,
      {{"run_hash", run_hash}, {"encoder_digest", index.encoder_digest}, {"scenario", c.scenario}});
  fs::rename(tmp, r.checkpoint);
  r.history = result.history;
  write_text_atomic(history_path(r.checkpoint),
                    nlohmann::json{{"run_hash", run_hash}, {"history", r.history}}.dump(2) + "\n");
  for (const auto& w : r.history.warnings) log(o) << "train-stage2: warning: " << w << "\n";
  log(o) << "train-stage2: selected epoch " << r.history.selected_epoch << ", validation accuracy "
         << r.history.selected().validation_accuracy << "\n";
  return r;
}

ScenarioReport cmd_run_scenario(const ExperimentConfig& c, const Options& o) {
  c.validate();
  const auto L = layout(c, o.out);
  Options inner = o;
  inner.checkpoint.reset();
  const auto m = run_stage("corpus", [&] { return load_corpus(c, L.corpus); });
  const auto s1 = run_stage("train-stage1", [&] { return cmd_train_stage1(c, inner); });
  const auto f = run_stage("extract-features", [&] { return cmd_extract_features(c, inner); });
  const auto s2 = run_stage("train-stage2", [&] { return cmd_train_stage2(c, inner); });

  return run_stage("evaluate", [&] {
    ScenarioReport r;
    auto model = aggregator::load_aggregator(s2.checkpoint);
    auto test = stage2::load_sequences(f.dir, f.index, stage2_studies(c, m, synth::Split::test));
    auto validation = stage2::load_sequences(f.dir, f.index, stage2_studies(c, m, synth::Split::validation));
    const auto test_scores = stage2::predict(model, test);
    const auto test_labels = labels_of(test);
    r.test = metrics::evaluate(test_scores, test_labels);
    const auto val_eval = metrics::evaluate(stage2::predict(model, validation), labels_of(validation));

    nlohmann::json baselines;
    for (const char* mode : {"mean", "max"}) {
      std::vector<double> s;
      for (const auto& slab : test.slab_scores) s.push_back(aggregator::baseline_aggregate(slab, mode));
      baselines[mode] = eval_summary(metrics::evaluate(s, test_labels));
    }

    std::vector<std::string> warnings = r.test.warnings;
    for (const auto& w : s1.history.warnings) warnings.push_back("stage I: " + w);
    for (const auto& w : s2.history.warnings) warnings.push_back("stage II: " + w);

    r.report = {{"format", "pedetect-report-1"},
                {"scenario", c.scenario},
                {"seed", c.seed},
                {"config_hash", c.hash()},
                {"version", PEDETECT_VERSION},
                {"corpus_checksum", m.checksum},
                {"attention_training", c.attention_training()},
                {"stage1",
                 {{"checkpoint", s1.checkpoint.string()},
                  {"digest", f.index.encoder_digest},
                  {"run_hash", s1.run_hash},
                  {"reused", s1.reused},
                  {"validation", s1.validation}}},
                {"stage2",
                 {{"checkpoint", s2.checkpoint.string()},
                  {"reused", s2.reused},
                  {"train_studies", s2.train_studies},
                  {"validation_studies", s2.validation_studies}}},
                {"validation", eval_summary(val_eval)},
                {"test", r.test},
                {"test_baselines", baselines},
                {"warnings", warnings}};
    r.report_path = L.report(c.scenario, c.seed);
    r.scores_path = r.report_path;
    r.scores_path.replace_extension(".csv");
    write_text_atomic(r.report_path, r.report.dump(2) + "\n");
    write_text_atomic(r.scores_path, metrics::scores_csv(test.study_ids, test_scores, test_labels));
    write_text_atomic(fs::path(r.report_path).replace_extension(".config.json"), nlohmann::json(c).dump(2) + "\n");
    log(o) << "run-scenario: scenario " << c.scenario << " test AUC " << r.test.auc << " [" << r.test.ci.low << ", "
           << r.test.ci.high << "], accuracy " << r.test.accuracy << " -> " << r.report_path.string() << "\n";
    return r;
  });
}

nlohmann::json cmd_eval_baselines(const ExperimentConfig& c, const Options& o) {
  const bool at = c.attention_training();
  const auto L = layout(c, o.out);
  const auto m = run_stage("corpus", [&] { return load_corpus(c, L.corpus); });
  const auto f = run_stage("extract-features", [&] { return cmd_extract_features(c, o, at); });

  // The recurrent model counts only when it was trained on these features.
  const auto s2_path = L.stage2_checkpoint(c.scenario, c.seed);
  const bool have_recurrent =
      fs::exists(s2_path) && stored_extra(s2_path).value("encoder_digest", "") == f.index.encoder_digest;

  return run_stage("evaluate", [&] {
    nlohmann::json sets;
    for (auto split : {synth::Split::validation, synth::Split::test}) {
      const auto ids = stage2_studies(c, m, split);
      std::vector<int> labels;
      std::vector<std::vector<double>> slab_scores;
      for (const auto& id : ids) {
        const auto* e = f.index.find(id);
        if (!e) throw DataError("feature store has no study " + id);
        labels.push_back(e->label);
        slab_scores.push_back(e->slab_scores);
      }
      nlohmann::json entry = {{"studies", ids.size()}};
      for (const char* mode : {"mean", "max"}) {
        std::vector<double> s;
        for (const auto& slab : slab_scores) s.push_back(aggregator::baseline_aggregate(slab, mode));
        entry[mode] = eval_summary(metrics::evaluate(s, labels));
      }
      if (have_recurrent) {
        auto model = aggregator::load_aggregator(s2_path);
        auto batch = stage2::load_sequences(f.dir, f.index, ids);
        entry["recurrent"] = eval_summary(metrics::evaluate(stage2::predict(model, batch), labels));
      }
      sets[synth::to_string(split)] = entry;
    }
    nlohmann::json report = {{"format", "pedetect-baselines-1"},
                             {"scenario", c.scenario},
                             {"seed", c.seed},
                             {"config_hash", c.hash()},
                             {"version", PEDETECT_VERSION},
                             {"encoder_digest", f.index.encoder_digest},
                             {"attention_training", at},
                             {"recurrent_checkpoint", have_recurrent ? s2_path.string() : std::string()},
                             {"sets", sets}};
    const auto path = L.reports / ("baselines-" + tag(at) + "-s" + std::to_string(c.seed) + ".json");
    write_text_atomic(path, report.dump(2) + "\n");
    const auto& t = sets.at("test");
    log(o) << "eval-baselines: test AUC mean " << t.at("mean").at("auc") << ", max " << t.at("max").at("auc");
    if (have_recurrent) log(o) << ", recurrent " << t.at("recurrent").at("auc");
    log(o) << " -> " << path.string() << "\n";
    return report;
  });
}

ExportResult cmd_export_attention(const ExperimentConfig& c, const Options& o) {
  const auto L = layout(c);
  const auto m = load_corpus(c, L.corpus);
  const auto ckpt = o.checkpoint.value_or(L.stage1_checkpoint(c.attention_training(), c.seed));
  if (!fs::exists(ckpt)) throw DataError("missing stage-I checkpoint " + ckpt.string());
  auto model = encoder::load_encoder(ckpt);
  const auto out = o.out.value_or(L.attention);
  make_dirs(out);

  auto ids = o.study_ids;
  if (ids.empty()) ids = ids_of(m.select(synth::Split::validation, true));

  ExportResult r;
  nlohmann::json index = nlohmann::json::object();
  const auto u = model->config().feature_rows(), v = model->config().feature_cols();
  for (const auto& id : ids) {
    const auto* entry = m.find(id);
    if (!entry) {
      r.warnings.push_back("unknown study id " + id + "; skipped");
      log(o) << "export-attention: warning: " << r.warnings.back() << "\n";
      continue;
    }
    auto prepared = stage1::prepare_study(L.corpus, *entry, c.preprocess);
    std::vector<std::int64_t> slices;
    for (const auto& [z, mask] : prepared.masks) slices.push_back(z);
    if (slices.empty()) {
      auto band = preprocess::select_lung_band(prepared.volume, c.preprocess.band_variance_threshold);
      slices.push_back(band.start + (band.length() - 1) / 2);
    }
    const auto rows = prepared.volume.shape.rows, cols = prepared.volume.shape.cols;
    std::vector<float> raw;
    nlohmann::json files = nlohmann::json::array();
    for (auto z : slices) {
      auto slab = preprocess::extract_slab(prepared.volume, z, c.preprocess.slices_per_slab);
      auto maps = attention::compute_attention(*model, stage1::slab_tensor(slab).unsqueeze(0), 1);
      auto a = maps.values[0].to(torch::kFloat32).contiguous();
      std::vector<float> map(a.data_ptr<float>(), a.data_ptr<float>() + a.numel());
      raw.insert(raw.end(), map.begin(), map.end());
      const bool nonzero = maps.normalized[0].item<bool>();

      const auto centre = static_cast<std::size_t>(c.preprocess.slices_per_slab / 2);
      const auto plane = static_cast<std::size_t>(rows * cols);
      std::vector<float> slice(slab.pixels.begin() + static_cast<std::ptrdiff_t>(centre * plane),
                               slab.pixels.begin() + static_cast<std::ptrdiff_t>((centre + 1) * plane));
      for (auto& p : slice) p /= 255.0f;
      std::vector<std::uint8_t> mask;
      if (auto it = prepared.masks.find(z); it != prepared.masks.end()) mask = it->second.bits;
      const auto heat = nonzero ? image::upsample(map, u, v, rows, cols) : std::vector<float>{};

      const auto stem = id + "_z" + zero_pad(z, 3) + (nonzero ? "" : "_noattn");
      image::write_png_rgb(out / (stem + ".png"), image::attention_overlay(slice, rows, cols, heat, mask));
      image::write_png_gray(out / (stem + "_map.png"), u, v, image::to_gray8(map));
      r.images.push_back(out / (stem + ".png"));
      files.push_back({{"slice", z}, {"image", stem + ".png"}, {"map", stem + "_map.png"}, {"nonzero", nonzero}});
    }
    container::Header h;
    h.magic = std::string(container::kAttentionMagic);
    h.shape = {1, static_cast<std::uint64_t>(u), static_cast<std::uint64_t>(v)};
    container::write_f32(out / (id + ".aatt"), h, raw);
    index[id] = {{"label", entry->label}, {"slabs", files}, {"attention", id + ".aatt"}};
  }
  write_text_atomic(out / "index.json",
                    nlohmann::json{{"checkpoint", ckpt.string()},
                                   {"digest", checkpoint::file_digest(ckpt)},
                                   {"studies", index},
                                   {"warnings", r.warnings}}
                            .dump(2) +
                        "\n");
  log(o) << "export-attention: " << r.images.size() << " overlays -> " << out.string() << "\n";
  return r;
}

}  // namespace pedetect::pipeline
