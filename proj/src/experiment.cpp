#include "brain3d/experiment.hpp"

#include <fstream>

namespace brain3d {

namespace {

std::uint64_t mix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 0xCBF29CE484222325ull;
  for (unsigned char c : s) h = (h ^ c) * 0x100000001B3ull;
  return h;
}

TrainConfig phase_defaults(Phase phase) {
  TrainConfig t;
  t.phase = phase;
  t.effective_batch = 128;
  t.micro_batch = 8;
  t.early_stop_patience = 15;
  switch (phase) {
    case Phase::k1: t.base_lr = 1e-3, t.total_steps = 1500, t.warmup_steps = 50; break;
    case Phase::k2a: t.base_lr = 3e-3, t.total_steps = 500, t.warmup_steps = 20; break;
    case Phase::k2b: t.base_lr = 1e-3, t.total_steps = 500, t.warmup_steps = 20; break;
  }
  return t;
}

void reject_unknown(const nlohmann::json& given, const nlohmann::json& known, const std::string& where) {
  if (!given.is_object()) throw ConfigError(where + ": expected an object");
  for (const auto& [key, value] : given.items()) {
    if (!known.contains(key)) throw ConfigError(where + ": unknown key '" + key + "'");
    if (known[key].is_object() && key != "config") reject_unknown(value, known[key], where + "." + key);
  }
}

nlohmann::json dims_json(const Dims& d) { return {d.depth, d.height, d.width}; }

}  // namespace

ExperimentConfig::ExperimentConfig()
    : phase1(phase_defaults(Phase::k1)), phase2a(phase_defaults(Phase::k2a)), phase2b(phase_defaults(Phase::k2b)) {
  apply_seed(0);
}

const TrainConfig& ExperimentConfig::train(Phase phase) const {
  switch (phase) {
    case Phase::k1: return phase1;
    case Phase::k2a: return phase2a;
    case Phase::k2b: return phase2b;
  }
  return phase1;
}

std::uint64_t ExperimentConfig::seed_for(const std::string& component) const {
  return mix64(seed ^ fnv1a(component));
}

void ExperimentConfig::apply_seed(std::uint64_t s) {
  seed = s;
  data.cohort.seed = seed_for("cohort");
  lm_pretrain.seed = seed_for("lm_pretrain");
  phase1.seed = seed_for("phase1");
  phase2a.seed = seed_for("phase2a");
  phase2b.seed = seed_for("phase2b");
  decode.seed = seed_for("decode");
  eval.seed = seed_for("eval");
  interpret.lime.seed = seed_for("lime");
}

void ExperimentConfig::validate() const {
  data.cohort.validate();
  double sum = 0.0;
  for (double r : data.splits) {
    if (r < 0.0) throw ConfigError("data.splits must be non-negative");
    sum += r;
  }
  if (std::abs(sum - 1.0) > 1e-9) throw ConfigError("data.splits must sum to 1");
  PreprocessConfig{data.clip_low_percentile, data.clip_high_percentile, model.encoder.volume_dims}.validate();
  ModelConfig m = model;
  if (m.lm.vocab_size < 4) m.lm.vocab_size = 4;
  m.validate();
  if (lm_pretrain.steps < 0 || lm_pretrain.batch < 1) throw ConfigError("lm_pretrain: invalid steps or batch");
  for (Phase p : {Phase::k1, Phase::k2a, Phase::k2b}) {
    if (train(p).phase != p) throw ConfigError("train: phase mismatch");
    train(p).validate();
  }
  decode.validate();
  if (eval.n_boot < 1) throw ConfigError("eval.n_boot must be >= 1");
  if (interpret.slic.n_supervoxels < 1 || interpret.slic.iterations < 1) throw ConfigError("interpret.slic invalid");
  if (interpret.lime.n_samples < interpret.slic.n_supervoxels + 1) {
    throw ConfigError("interpret.lime.n_samples must be >= n_supervoxels + 1");
  }
  if (!(interpret.mask_threshold > 0.0 && interpret.mask_threshold < 1.0)) {
    throw ConfigError("interpret.mask_threshold must be in (0, 1)");
  }
}

nlohmann::json train_config_to_json(const TrainConfig& t) {
  return {{"base_lr", t.base_lr},
          {"warmup_steps", t.warmup_steps},
          {"total_steps", t.total_steps},
          {"effective_batch", t.effective_batch},
          {"micro_batch", t.micro_batch},
          {"early_stop_patience", t.early_stop_patience},
          {"beta1", t.beta1},
          {"beta2", t.beta2},
          {"eps", t.eps},
          {"weight_decay", t.weight_decay}};
}

TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig t) {
  t.base_lr = j.value("base_lr", t.base_lr);
  t.warmup_steps = j.value("warmup_steps", t.warmup_steps);
  t.total_steps = j.value("total_steps", t.total_steps);
  t.effective_batch = j.value("effective_batch", t.effective_batch);
  t.micro_batch = j.value("micro_batch", t.micro_batch);
  t.early_stop_patience = j.value("early_stop_patience", t.early_stop_patience);
  t.beta1 = j.value("beta1", t.beta1);
  t.beta2 = j.value("beta2", t.beta2);
  t.eps = j.value("eps", t.eps);
  t.weight_decay = j.value("weight_decay", t.weight_decay);
  return t;
}

nlohmann::json experiment_config_to_json(const ExperimentConfig& c) {
  const auto& co = c.data.cohort;
  nlohmann::json decode = decode_config_to_json(c.decode);
  decode.erase("seed");
  return {
      {"seed", c.seed},
      {"data",
       {{"n_pathological", co.n_pathological},
        {"n_healthy", co.n_healthy},
        {"laterality_mix", co.laterality_mix},
        {"volume_dims", dims_json(co.volume_dims)},
        {"splits", c.data.splits},
        {"clip_low_percentile", c.data.clip_low_percentile},
        {"clip_high_percentile", c.data.clip_high_percentile}}},
      {"model", model_config_to_json(c.model)},
      {"lm_pretrain",
       {{"steps", c.lm_pretrain.steps},
        {"batch", c.lm_pretrain.batch},
        {"lr", c.lm_pretrain.lr},
        {"warmup_steps", c.lm_pretrain.warmup_steps},
        {"prefix_noise", c.lm_pretrain.prefix_noise}}},
      {"train",
       {{"phase1", train_config_to_json(c.phase1)},
        {"phase2a", train_config_to_json(c.phase2a)},
        {"phase2b", train_config_to_json(c.phase2b)}}},
      {"decode", decode},
      {"eval", {{"n_boot", c.eval.n_boot}}},
      {"interpret",
       {{"n_supervoxels", c.interpret.slic.n_supervoxels},
        {"compactness", c.interpret.slic.compactness},
        {"slic_iterations", c.interpret.slic.iterations},
        {"n_samples", c.interpret.lime.n_samples},
        {"kernel_width", c.interpret.lime.kernel_width},
        {"ridge", c.interpret.lime.ridge},
        {"mask_threshold", c.interpret.mask_threshold}}}};
}

ExperimentConfig experiment_config_from_json(const nlohmann::json& j) {
  const ExperimentConfig defaults;
  const nlohmann::json known = experiment_config_to_json(defaults);
  reject_unknown(j, known, "config");
  nlohmann::json m = known;
  m.merge_patch(j);

  ExperimentConfig c;
  try {
    const auto& d = m["data"];
    c.data.cohort.n_pathological = d["n_pathological"].get<std::size_t>();
    c.data.cohort.n_healthy = d["n_healthy"].get<std::size_t>();
    c.data.cohort.laterality_mix = d["laterality_mix"].get<std::array<double, 4>>();
    const auto vd = d["volume_dims"].get<std::array<std::size_t, 3>>();
    c.data.cohort.volume_dims = {vd[0], vd[1], vd[2]};
    c.data.splits = d["splits"].get<std::array<double, 3>>();
    c.data.clip_low_percentile = d["clip_low_percentile"].get<double>();
    c.data.clip_high_percentile = d["clip_high_percentile"].get<double>();
    c.model = model_config_from_json(m["model"]);
    const auto& lp = m["lm_pretrain"];
    c.lm_pretrain.steps = lp["steps"].get<int>();
    c.lm_pretrain.batch = lp["batch"].get<int>();
    c.lm_pretrain.lr = lp["lr"].get<double>();
    c.lm_pretrain.warmup_steps = lp["warmup_steps"].get<int>();
    c.lm_pretrain.prefix_noise = lp["prefix_noise"].get<double>();
    c.phase1 = train_config_from_json(m["train"]["phase1"], defaults.phase1);
    c.phase2a = train_config_from_json(m["train"]["phase2a"], defaults.phase2a);
    c.phase2b = train_config_from_json(m["train"]["phase2b"], defaults.phase2b);
    c.decode = decode_config_from_json(m["decode"]);
    c.eval.n_boot = m["eval"]["n_boot"].get<int>();
    const auto& in = m["interpret"];
    c.interpret.slic.n_supervoxels = in["n_supervoxels"].get<int>();
    c.interpret.slic.compactness = in["compactness"].get<double>();
    c.interpret.slic.iterations = in["slic_iterations"].get<int>();
    c.interpret.lime.n_samples = in["n_samples"].get<int>();
    c.interpret.lime.kernel_width = in["kernel_width"].get<double>();
    c.interpret.lime.ridge = in["ridge"].get<double>();
    c.interpret.mask_threshold = in["mask_threshold"].get<double>();
    c.apply_seed(m["seed"].get<std::uint64_t>());
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  c.validate();
  return c;
}

ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config " + path.string() + ": " + e.what());
  }
  return experiment_config_from_json(j);
}

}  // namespace brain3d
