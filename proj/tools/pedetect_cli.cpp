// Command-line front end: one subcommand per pipeline stage.

#include <CLI11.hpp>
#include <torch/torch.h>

#include <iostream>

#include "pedetect/config.hpp"
#include "pedetect/error.hpp"
#include "pedetect/pipeline.hpp"

namespace {

enum Exit : int { ok = 0, failure = 1, config_error = 2, data_error = 3, divergence = 4 };

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  bool force = false, resume = false;
  std::string out;
  std::string checkpoint;
  std::vector<std::string> studies;
};

void add_common(CLI::App* sub, Common& c) {
  sub->add_option("--config", c.config, "experiment config (JSON)")->required();
  sub->add_option("--seed", c.seed, "global seed; overrides the config");
  sub->add_flag("--force", c.force, "recompute even when outputs are up to date");
  sub->add_flag("--resume", c.resume, "reuse stage artifacts whose recorded hash matches");
  sub->add_option("--out", c.out, "output directory (corpus for gen, images for export-attention, else work root)");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Two-stage volumetric lesion detection with attention-trained slab encoders"};
  app.require_subcommand(1);
  Common common;
  const std::vector<std::pair<std::string, std::string>> commands = {
      {"gen", "generate the synthetic corpus"},
      {"preprocess", "write windowed slab sequences"},
      {"train-stage1", "train the slab encoder"},
      {"extract-features", "encode every study with the frozen encoder"},
      {"train-stage2", "train the recurrent study classifier"},
      {"run-scenario", "stage I, features, stage II and test evaluation"},
      {"eval-baselines", "mean/max slab-score baselines"},
      {"export-attention", "attention overlays for selected studies"},
  };
  std::map<std::string, CLI::App*> subs;
  for (const auto& [name, help] : commands) {
    auto* sub = app.add_subcommand(name, help);
    add_common(sub, common);
    subs[name] = sub;
  }
  subs["extract-features"]->add_option("--checkpoint", common.checkpoint, "stage-I checkpoint");
  subs["eval-baselines"]->add_option("--checkpoint", common.checkpoint, "stage-I checkpoint");
  subs["export-attention"]->add_option("--checkpoint", common.checkpoint, "stage-I checkpoint");
  subs["export-attention"]->add_option("--study", common.studies, "study id (repeatable)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? ok : config_error;
  }

  torch::set_num_threads(1);
  try {
    auto cfg = pedetect::config::load(common.config);
    if (common.seed) cfg.seed = *common.seed;
    pedetect::pipeline::Options o;
    o.force = common.force;
    o.resume = common.resume;
    if (!common.out.empty()) o.out = common.out;
    if (!common.checkpoint.empty()) o.checkpoint = common.checkpoint;
    o.study_ids = common.studies;

    namespace p = pedetect::pipeline;
    const auto& name = app.get_subcommands().front()->get_name();
    if (name == "gen") p::cmd_gen(cfg, o);
    else if (name == "preprocess") p::cmd_preprocess(cfg, o);
    else if (name == "train-stage1") p::cmd_train_stage1(cfg, o);
    else if (name == "extract-features") p::cmd_extract_features(cfg, o);
    else if (name == "train-stage2") p::cmd_train_stage2(cfg, o);
    else if (name == "run-scenario") p::cmd_run_scenario(cfg, o);
    else if (name == "eval-baselines") p::cmd_eval_baselines(cfg, o);
    else if (name == "export-attention") p::cmd_export_attention(cfg, o);
    return ok;
  } catch (const pedetect::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return config_error;
  } catch (const pedetect::TrainingDivergence& e) {
    std::cerr << "training diverged: " << e.what() << "\n";
    return divergence;
  } catch (const pedetect::DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return data_error;
  } catch (const pedetect::GeometryError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return data_error;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return failure;
  }
}
