#include "pedetect/config.hpp"

#include <fstream>
#include <set>

#include "pedetect/error.hpp"
#include "pedetect/hash.hpp"

namespace pedetect::config {
namespace {

const std::set<std::string> kTopKeys = {"format", "corpus", "preprocess", "encoder", "loss",
                                        "aggregator", "scenario", "paths", "seed"};
const std::set<std::string> kPathKeys = {"corpus", "slabs", "features", "checkpoints", "reports", "attention"};

void reject_unknown(const nlohmann::json& j, const std::set<std::string>& known, const std::string& prefix) {
  for (const auto& [key, value] : j.items())
    if (!known.contains(key)) throw ConfigError(prefix + key, "unknown key");
}

}  // namespace

void ExperimentConfig::validate() const {
  if (scenario < 1 || scenario > 3) throw ConfigError("scenario", "must be 1, 2 or 3");
  corpus.validate();
  preprocess.validate();
  encoder.validate();
  loss.validate();
  aggregator.validate();
  if (preprocess.crop_rows != encoder.input_rows || preprocess.crop_cols != encoder.input_cols)
    throw ConfigError("preprocess.crop_size", "must equal encoder.input_size");
  if (corpus.test_study_count < 2) throw ConfigError("corpus.test_study_count", "scenario runs need a test partition");
  for (const auto* p : {&paths.corpus, &paths.slabs, &paths.features, &paths.checkpoints, &paths.reports,
                        &paths.attention})
    if (p->empty()) throw ConfigError("paths", "paths must be nonempty");
  try {
    aggregator::unit_geometry(aggregator, {encoder.feature_channels(), encoder.feature_rows(), encoder.feature_cols()});
  } catch (const GeometryError& e) {
    throw ConfigError("aggregator.units", e.what());
  }
}

std::filesystem::path ExperimentConfig::resolve(const std::string& path) const {
  std::filesystem::path p(path);
  return p.is_absolute() || base_dir.empty() ? p : base_dir / p;
}

std::uint64_t ExperimentConfig::derived_seed(SeedStream stream) const {
  return derive_seed(seed, static_cast<std::uint64_t>(stream), 0);
}

std::string ExperimentConfig::hash() const { return hex64(fnv1a(nlohmann::json(*this).dump())); }

encoder::EncoderConfig ExperimentConfig::stage1_encoder(bool attention) const {
  auto e = encoder;
  e.seed = derived_seed(SeedStream::encoder);
  if (!attention) e.attention_warmup_epochs = 0;
  return e;
}

losses::LossConfig ExperimentConfig::stage1_loss(bool attention) const {
  auto l = loss;
  // Classification-only training is the same objective with lambda = 0.
  if (!attention) l.lambda_attention = 0.0;
  return l;
}

aggregator::AggregatorConfig ExperimentConfig::stage2_aggregator() const {
  auto a = aggregator;
  a.seed = derived_seed(SeedStream::aggregator);
  return a;
}

void to_json(nlohmann::json& j, const ExperimentConfig& c) {
  j = nlohmann::json{{"format", "pedetect-experiment-1"},
                     {"corpus", c.corpus},
                     {"preprocess", c.preprocess},
                     {"encoder", c.encoder},
                     {"loss", c.loss},
                     {"aggregator", c.aggregator},
                     {"scenario", c.scenario},
                     {"paths",
                      {{"corpus", c.paths.corpus},
                       {"slabs", c.paths.slabs},
                       {"features", c.paths.features},
                       {"checkpoints", c.paths.checkpoints},
                       {"reports", c.paths.reports},
                       {"attention", c.paths.attention}}},
                     {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, ExperimentConfig& c) {
  if (!j.is_object()) throw ConfigError("config", "expected a JSON object");
  reject_unknown(j, kTopKeys, "");
  ExperimentConfig d;
  c.corpus = j.value("corpus", nlohmann::json::object()).get<synth::CorpusConfig>();
  c.preprocess = j.value("preprocess", nlohmann::json::object()).get<preprocess::PreprocessConfig>();
  c.encoder = j.value("encoder", nlohmann::json::object()).get<encoder::EncoderConfig>();
  c.loss = j.value("loss", nlohmann::json::object()).get<losses::LossConfig>();
  c.aggregator = j.value("aggregator", nlohmann::json::object()).get<aggregator::AggregatorConfig>();
  c.scenario = j.value("scenario", d.scenario);
  c.seed = j.value("seed", d.seed);
  c.paths = d.paths;
  if (j.contains("paths")) {
    const auto& p = j.at("paths");
    if (!p.is_object()) throw ConfigError("paths", "expected an object");
    reject_unknown(p, kPathKeys, "paths.");
    c.paths.corpus = p.value("corpus", d.paths.corpus);
    c.paths.slabs = p.value("slabs", d.paths.slabs);
    c.paths.features = p.value("features", d.paths.features);
    c.paths.checkpoints = p.value("checkpoints", d.paths.checkpoints);
    c.paths.reports = p.value("reports", d.paths.reports);
    c.paths.attention = p.value("attention", d.paths.attention);
  }
}

ExperimentConfig load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config", "cannot open " + path.string());
  ExperimentConfig c;
  try {
    nlohmann::json j;
    in >> j;
    c = j.get<ExperimentConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config", path.string() + ": " + e.what());
  }
  c.base_dir = std::filesystem::absolute(path).parent_path();
  c.validate();
  return c;
}

void save(const std::filesystem::path& path, const ExperimentConfig& c) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot open " + path.string() + " for writing");
  out << nlohmann::json(c).dump(2) << "\n";
  if (!out) throw DataError("write failed: " + path.string());
}

ExperimentConfig desk_config() {
  ExperimentConfig c;
  c.corpus.study_count = 400;
  c.corpus.test_study_count = 200;
  c.corpus.annotated_fraction = 0.5;
  c.corpus.label_only_confounder_correlation = 0.5;

  c.preprocess.crop_rows = c.preprocess.crop_cols = 96;
  c.preprocess.sequence_length = 8;
  c.preprocess.sequence_stride = 4;

  c.encoder.input_rows = c.encoder.input_cols = 96;
  c.encoder.total_stride = 8;
  c.encoder.width_multiplier = 0.125;
  c.encoder.blocks_per_stage = {1, 1, 1, 1};
  c.encoder.epochs = 30;
  c.encoder.batch_size = 16;
  c.encoder.learning_rate = 1e-3;
  c.encoder.attention_warmup_epochs = 5;
  c.encoder.augment = true;

  c.aggregator.filters = 16;
  c.aggregator.epochs = 30;
  c.aggregator.batch_size = 16;
  c.aggregator.learning_rate = 1e-3;
  return c;
}

}  // namespace pedetect::config
