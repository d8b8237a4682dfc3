#include <cstdlib>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "brain3d/pipeline.hpp"

namespace fs = std::filesystem;
using namespace brain3d;

namespace {

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "experiment config (JSON)");
  cmd->add_option("--seed", c.seed, "global seed, overrides the config");
  cmd->add_option("--out", c.out, "experiment directory (default: $BRAIN3D_DATA_DIR)");
}

ExperimentConfig resolve_config(const Common& c) {
  ExperimentConfig cfg = c.config.empty() ? ExperimentConfig{} : load_experiment_config(c.config);
  if (c.seed) cfg.apply_seed(*c.seed);
  cfg.validate();
  return cfg;
}

fs::path resolve_out(const Common& c) {
  if (!c.out.empty()) return c.out;
  if (const char* env = std::getenv("BRAIN3D_DATA_DIR"); env && *env) return env;
  throw UsageError("no experiment directory: pass --out or set BRAIN3D_DATA_DIR");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"3D brain MRI report generation: synthetic cohort, training, decoding, evaluation, attribution"};
  app.require_subcommand(1);
  Common common;

  auto* synth = app.add_subcommand("synth", "generate the synthetic cohort and its splits");
  add_common(synth, common);

  auto* train = app.add_subcommand("train", "run one training phase");
  add_common(train, common);
  std::string phase;
  std::string init;
  train->add_option("--phase", phase, "1, 2a or 2b")->required()->check(CLI::IsMember({"1", "2a", "2b"}));
  train->add_option("--init", init, "checkpoint to start from (default: the parent stage under --out)");

  auto* gen = app.add_subcommand("generate", "decode reports for a split");
  add_common(gen, common);
  std::string split = "test";
  std::string checkpoint;
  gen->add_option("--split", split, "train, val, test or all")->check(CLI::IsMember({"train", "val", "test", "all"}));
  gen->add_option("--checkpoint", checkpoint, "checkpoint directory (default: phase2b)");

  auto* eval = app.add_subcommand("evaluate", "score predictions against the gold reports");
  add_common(eval, common);
  std::string predictions;
  eval->add_option("--predictions", predictions, "predictions JSON-lines (default: predictions/test.jsonl)");

  auto* explain = app.add_subcommand("explain", "supervoxel LIME attribution for one subject");
  add_common(explain, common);
  std::string subject;
  explain->add_option("--subject", subject, "subject id")->required();
  explain->add_option("--checkpoint", checkpoint, "checkpoint directory (default: phase2b)");

  CLI11_PARSE(app, argc, argv);

  auto opt_path = [](const std::string& s) { return s.empty() ? std::nullopt : std::optional<fs::path>(s); };
  try {
    const ExperimentConfig cfg = resolve_config(common);
    const fs::path out = resolve_out(common);
    fs::path result;
    if (*synth) {
      result = cmd_synth(cfg, out);
    } else if (*train) {
      result = cmd_train(cfg, phase_from_string(phase), out, opt_path(init));
    } else if (*gen) {
      result = cmd_generate(cfg, out, split, opt_path(checkpoint));
    } else if (*eval) {
      result = cmd_evaluate(cfg, out, predictions.empty() ? out / "predictions" / "test.jsonl" : fs::path(predictions));
    } else if (*explain) {
      result = cmd_explain(cfg, out, subject, opt_path(checkpoint));
    }
    std::cout << result.string() << "\n";
  } catch (const ProvenanceError& e) {
    std::cerr << "provenance error: " << e.what() << "\n";
    return 3;
  } catch (const IntegrityError& e) {
    std::cerr << "integrity error: " << e.what() << "\n";
    return 4;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
