#include "doctest_torch.hpp"

#include <cstdlib>
#include <fstream>
#include <map>
#include <sstream>

#include "helpers.hpp"
#include "pedetect/checkpoint.hpp"
#include "pedetect/config.hpp"
#include "pedetect/container.hpp"
#include "pedetect/error.hpp"
#include "pedetect/history.hpp"
#include "pedetect/pipeline.hpp"

using namespace pedetect;
namespace fs = std::filesystem;

namespace {

config::ExperimentConfig tiny_experiment(const fs::path& base) {
  auto c = config::desk_config();
  c.corpus = testing::tiny_corpus(12);
  c.corpus.test_study_count = 6;
  c.corpus.annotated_fraction = 0.75;
  c.corpus.lesion_radius_range_vox = {2.5, 3.5};
  c.preprocess.crop_rows = c.preprocess.crop_cols = 32;
  c.preprocess.sequence_length = 4;
  c.encoder.input_rows = c.encoder.input_cols = 32;
  c.encoder.stage_widths_override = {4, 4, 4, 4};
  c.encoder.stem_kernel = 3;
  c.encoder.epochs = 2;
  c.encoder.attention_warmup_epochs = 1;
  c.encoder.batch_size = 8;
  c.aggregator.filters = 2;
  c.aggregator.epochs = 2;
  c.aggregator.batch_size = 4;
  c.base_dir = base;
  return c;
}

std::map<std::string, std::string> tree_digest(const fs::path& dir) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file()) out[fs::relative(e.path(), dir).string()] = checkpoint::file_digest(e.path());
  return out;
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(PEDETECT_CLI_PATH) + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST_CASE("container records round trip and reject bad input") {
  testing::TempDir dir("container");
  container::Header h;
  h.magic = std::string(container::kSlabMagic);
  h.shape = {2, 3, 4};
  h.spacing = {2.5, 1.0, 0.5};
  std::vector<float> data(48);
  for (std::size_t i = 0; i < data.size(); ++i) data[i] = static_cast<float>(i) * 0.5f;
  container::write_f32(dir.path() / "x.aslb", h, data);
  auto blob = container::read(dir.path() / "x.aslb", container::kSlabMagic);
  CHECK(blob.records == 2);
  CHECK(blob.f32 == data);
  CHECK(blob.header.spacing == h.spacing);
  CHECK(fs::file_size(dir.path() / "x.aslb") == container::kHeaderBytes + 48 * 4);
  CHECK_THROWS_AS(container::read(dir.path() / "x.aslb", container::kVolumeMagic), DataError);
  fs::resize_file(dir.path() / "x.aslb", fs::file_size(dir.path() / "x.aslb") - 2);
  CHECK_THROWS_AS(container::read(dir.path() / "x.aslb"), DataError);
  CHECK_THROWS_AS(container::read(dir.path() / "missing.aslb"), DataError);

  Volume v({2, 2, 3}, {2.5, 0.7, 0.7});
  for (std::size_t i = 0; i < v.voxels.size(); ++i) v.voxels[i] = static_cast<float>(i) - 4.0f;
  container::write_volume(dir.path() / "v.avol", v);
  auto back = container::read_volume(dir.path() / "v.avol");
  CHECK(back.voxels == v.voxels);
  CHECK(back.shape == v.shape);
}

TEST_CASE("epoch selection picks the earliest best eligible epoch") {
  std::vector<EpochRecord> e(6);
  const double acc[] = {0.9, 0.7, 0.8, 0.85, 0.85, 0.6};
  for (int i = 0; i < 6; ++i) e[i].epoch = i, e[i].validation_accuracy = acc[i];
  CHECK(select_epoch(e) == 0);
  CHECK(select_epoch(e, 1) == 3);
  CHECK(select_epoch(e, 6) == -1);
  CHECK(select_epoch({}) == -1);
}

TEST_CASE("rising smoothed loss in the first half is flagged") {
  std::vector<EpochRecord> down(20), up(20);
  for (int i = 0; i < 20; ++i) {
    down[i].train_total = 1.0 / (1 + i);
    up[i].train_total = 0.1 * i;
  }
  CHECK(loss_trend_warning(down).empty());
  CHECK_FALSE(loss_trend_warning(up).empty());
  auto j = nlohmann::json(TrainingHistory{down, 3, {}});
  CHECK(j.at("selected_epoch") == 3);
}

TEST_CASE("experiment config round trip, seeds and validation") {
  testing::TempDir dir("config");
  auto c = tiny_experiment(dir.path());
  auto j = nlohmann::json(c);
  auto back = j.get<config::ExperimentConfig>();
  CHECK(nlohmann::json(back) == j);
  CHECK(back.hash() == c.hash());

  config::save(dir.path() / "exp.json", c);
  auto loaded = config::load(dir.path() / "exp.json");
  CHECK(nlohmann::json(loaded) == j);
  CHECK(loaded.resolve("corpus") == fs::absolute(dir.path()) / "corpus");

  CHECK(c.derived_seed(config::SeedStream::encoder) != c.derived_seed(config::SeedStream::aggregator));
  auto c2 = c;
  c2.seed = 1;
  CHECK(c.stage1_encoder(true).seed != c2.stage1_encoder(true).seed);
  CHECK(c.stage1_loss(false).lambda_attention == 0.0);
  CHECK(c.stage1_encoder(false).attention_warmup_epochs == 0);
  CHECK(c.hash() != c2.hash());

  auto bad = j;
  bad["scenario"] = 4;
  CHECK_THROWS_AS(bad.get<config::ExperimentConfig>().validate(), ConfigError);
  bad = j;
  bad["sceanrio"] = 1;
  CHECK_THROWS_AS(bad.get<config::ExperimentConfig>(), ConfigError);
  auto mismatch = c;
  mismatch.preprocess.crop_rows = 64;
  CHECK_THROWS_AS(mismatch.validate(), ConfigError);

  std::ofstream(dir.path() / "broken.json") << "{ not json";
  CHECK_THROWS_AS(config::load(dir.path() / "broken.json"), ConfigError);
  CHECK_THROWS_AS(config::load(dir.path() / "absent.json"), ConfigError);
}

TEST_CASE("desk config validates") { CHECK_NOTHROW(config::desk_config().validate()); }

TEST_CASE("gen creates the corpus once and regenerates only when forced") {
  testing::TempDir dir("gen");
  auto c = tiny_experiment(dir.path());
  std::ostringstream log;
  pipeline::Options o;
  o.log = &log;
  auto first = pipeline::cmd_gen(c, o);
  CHECK(first.generated);
  CHECK(fs::exists(first.dir / synth::kManifestFile));
  auto second = pipeline::cmd_gen(c, o);
  CHECK_FALSE(second.generated);
  CHECK(second.manifest.checksum == first.manifest.checksum);
  o.force = true;
  CHECK(pipeline::cmd_gen(c, o).generated);
  o.force = false;
  o.out = dir.path() / "elsewhere" / "deep";
  CHECK(pipeline::cmd_gen(c, o).generated);
  CHECK(fs::exists(dir.path() / "elsewhere" / "deep" / synth::kManifestFile));
}

TEST_CASE("scenario run end to end on a tiny corpus") {
  testing::TempDir dir("scenario");
  auto c = tiny_experiment(dir.path());
  std::ostringstream log;
  pipeline::Options o;
  o.log = &log;

  // No corpus yet: data error naming the stage.
  try {
    pipeline::cmd_run_scenario(c, o);
    FAIL("expected DataError");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find("stage") != std::string::npos);
  }

  pipeline::cmd_gen(c, o);
  const auto corpus_before = tree_digest(dir.path() / "corpus");
  auto pre = pipeline::cmd_preprocess(c, o);
  CHECK(pre.studies == 18);
  auto report = pipeline::cmd_run_scenario(c, o);
  CHECK(fs::exists(report.report_path));
  CHECK(fs::exists(report.scores_path));
  CHECK(report.report.at("scenario") == 3);
  CHECK(report.report.at("config_hash") == c.hash());
  CHECK(report.report.contains("version"));
  CHECK(report.test.n_pos + report.test.n_neg == 6);
  CHECK(report.test.auc >= 0.0);
  CHECK(report.test.auc <= 1.0);
  CHECK(tree_digest(dir.path() / "corpus") == corpus_before);

  const auto L = pipeline::layout(c);
  const auto s1 = L.stage1_checkpoint(true, c.seed);
  const auto s1_digest = checkpoint::file_digest(s1);

  // Resume reuses the matching stage-I checkpoint; stage II never touches it.
  o.resume = true;
  auto resumed = pipeline::cmd_train_stage1(c, o);
  CHECK(resumed.reused);
  auto s2 = pipeline::cmd_train_stage2(c, o);
  CHECK(s2.reused);
  o.resume = false;
  pipeline::cmd_train_stage2(c, o);
  CHECK(checkpoint::file_digest(s1) == s1_digest);

  // Changed settings invalidate the cached checkpoint.
  auto changed = c;
  changed.encoder.learning_rate = 5e-3;
  o.resume = true;
  CHECK_FALSE(pipeline::cmd_train_stage1(changed, o).reused);
  o.resume = false;

  auto baselines = pipeline::cmd_eval_baselines(c, o);
  for (const auto* set : {"validation", "test"}) {
    CHECK(baselines.at("sets").at(set).contains("mean"));
    CHECK(baselines.at("sets").at(set).contains("max"));
  }

  // Scenario 1 trains stage II on annotated studies only.
  auto s1cfg = c;
  s1cfg.scenario = 1;
  const auto m = synth::read_manifest(dir.path() / "corpus");
  for (const auto& id : pipeline::stage2_studies(s1cfg, m, synth::Split::train)) CHECK(m.find(id)->annotated);
  CHECK(pipeline::stage2_studies(s1cfg, m, synth::Split::test).size() == 6);
  CHECK(pipeline::stage2_studies(c, m, synth::Split::train).size() >
        pipeline::stage2_studies(s1cfg, m, synth::Split::train).size());

  // Export: unknown ids are skipped with a warning; one overlay per annotated slice.
  pipeline::Options e = o;
  const auto* positive = m.select(synth::Split::validation, true).front();
  e.study_ids = {"dev-999999", positive->id};
  e.out = dir.path() / "overlays";
  auto exported = pipeline::cmd_export_attention(c, e);
  REQUIRE(exported.warnings.size() == 1);
  CHECK(exported.warnings[0].find("dev-999999") != std::string::npos);
  CHECK(fs::exists(dir.path() / "overlays" / (positive->id + ".aatt")));
  CHECK(fs::exists(dir.path() / "overlays" / "index.json"));
  CHECK_FALSE(exported.images.empty());

  // A zero classifier gives zero attention: overlays are flagged in the name.
  auto silent = encoder::make_encoder(c.stage1_encoder(true));
  {
    torch::NoGradGuard ng;
    for (auto& p : silent->named_parameters())
      if (p.key().rfind("classifier", 0) == 0) p.value().zero_();
  }
  silent->eval();
  encoder::save_encoder(dir.path() / "silent.ackp", silent);
  e.checkpoint = dir.path() / "silent.ackp";
  e.out = dir.path() / "silent";
  auto quiet = pipeline::cmd_export_attention(c, e);
  REQUIRE_FALSE(quiet.images.empty());
  for (const auto& p : quiet.images) CHECK(p.filename().string().find("_noattn") != std::string::npos);
}

TEST_CASE("command-line exit codes") {
  testing::TempDir dir("cli");
  auto c = tiny_experiment(dir.path());
  config::save(dir.path() / "exp.json", c);
  const auto cfg = (dir.path() / "exp.json").string();

  CHECK(run_cli("--help") == 0);
  CHECK(run_cli("") == 2);
  CHECK(run_cli("gen") == 2);
  CHECK(run_cli("train-stage1 --config " + cfg) == 3);  // no corpus yet
  CHECK(run_cli("gen --config " + cfg) == 0);
  CHECK(run_cli("gen --config " + cfg + " --seed 3") == 0);

  auto j = nlohmann::json(c);
  j["scenario"] = 7;
  std::ofstream(dir.path() / "bad.json") << j.dump();
  CHECK(run_cli("run-scenario --config " + (dir.path() / "bad.json").string()) == 2);
  CHECK(run_cli("gen --config " + (dir.path() / "missing.json").string()) == 2);
}
