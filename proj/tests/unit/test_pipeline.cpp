#include <doctest.h>

#include <fstream>
#include <random>

#include "brain3d/checkpoint.hpp"
#include "brain3d/experiment.hpp"
#include "brain3d/pipeline.hpp"
#include "helpers.hpp"

using namespace brain3d;
namespace fs = std::filesystem;

namespace {

Checkpoint tiny_checkpoint(bool lora) {
  Checkpoint c;
  c.model = init_model<float>(testing::tiny_config(), testing::tiny_vocab(), 7);
  c.provenance = {"base", "1", "2a"};
  if (lora) {
    std::mt19937_64 rng(1);
    lora_inject(c.model.params, c.model.config.lm, c.model.config.lora, rng);
    c.provenance.push_back("2b");
  }
  c.extra = {{"note", "unit"}};
  return c;
}

ExperimentConfig tiny_experiment() {
  ExperimentConfig cfg;
  cfg.data.cohort.n_pathological = 6;
  cfg.data.cohort.n_healthy = 2;
  cfg.data.cohort.volume_dims = {8, 8, 8};
  cfg.model = testing::tiny_config();
  cfg.lm_pretrain.steps = 2;
  cfg.lm_pretrain.batch = 2;
  for (TrainConfig* t : {&cfg.phase1, &cfg.phase2a, &cfg.phase2b}) {
    t->total_steps = 2;
    t->warmup_steps = 1;
    t->effective_batch = 2;
    t->micro_batch = 1;
  }
  cfg.apply_seed(3);
  return cfg;
}

}  // namespace

TEST_CASE("sha256 known answers") {
  CHECK(sha256_hex(std::span<const char>()) == "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
  const std::string abc = "abc";
  CHECK(sha256_hex(std::span<const char>(abc.data(), 3)) ==
        "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

TEST_CASE("checkpoint roundtrip is bitwise") {
  testing::TempDir tmp("ckpt");
  for (bool lora : {false, true}) {
    const auto c = tiny_checkpoint(lora);
    const fs::path dir = tmp.path() / (lora ? "2b" : "2a");
    save_checkpoint(c, dir);
    const auto back = load_checkpoint(dir);
    CHECK(back.provenance == c.provenance);
    CHECK(back.extra == c.extra);
    CHECK(back.model.vocab.to_json() == c.model.vocab.to_json());
    CHECK(model_config_to_json(back.model.config) == model_config_to_json(c.model.config));
    REQUIRE(back.model.params.entries().size() == c.model.params.entries().size());
    for (const auto& e : c.model.params.entries()) {
      const auto& v = back.model.params.get(e.name);
      REQUIRE(v.rows() == e.value.rows());
      REQUIRE(v.cols() == e.value.cols());
      CHECK(std::memcmp(v.data(), e.value.data(), sizeof(float) * std::size_t(v.size())) == 0);
      CHECK(back.model.params.group_of(e.name) == e.group);
    }
    CHECK(back.model.has_lora() == lora);
    CHECK_FALSE(fs::exists(dir.string() + ".tmp"));
  }
}

TEST_CASE("checkpoint corruption is detected") {
  testing::TempDir tmp("ckpt_bad");
  const fs::path dir = tmp.path() / "c";
  save_checkpoint(tiny_checkpoint(false), dir);
  {
    std::fstream f(dir / "bridge.gate.f32", std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(0);
    f.put('\x7f');
  }
  CHECK_THROWS_AS(load_checkpoint(dir), IntegrityError);

  save_checkpoint(tiny_checkpoint(false), dir);
  fs::remove(dir / "lm.embed.f32");
  CHECK_THROWS_AS(load_checkpoint(dir), IntegrityError);

  CHECK_THROWS_AS(load_checkpoint(tmp.path() / "absent"), IntegrityError);

  auto unlabeled = tiny_checkpoint(false);
  unlabeled.provenance.clear();
  CHECK_THROWS_AS(save_checkpoint(unlabeled, tmp.path() / "u"), ProvenanceError);

  // A 2b checkpoint must carry adapters.
  auto fake = tiny_checkpoint(false);
  fake.provenance.push_back("2b");
  save_checkpoint(fake, tmp.path() / "fake");
  CHECK_THROWS_AS(load_checkpoint(tmp.path() / "fake"), IntegrityError);
}

TEST_CASE("experiment config defaults") {
  const ExperimentConfig c;
  CHECK(c.data.cohort.n_pathological == 369);
  CHECK(c.data.cohort.n_healthy == 99);
  CHECK(c.data.cohort.laterality_mix == std::array<double, 4>{0.425, 0.407, 0.146, 0.022});
  CHECK(c.data.splits == std::array<double, 3>{0.7, 0.1, 0.2});
  CHECK(c.model.lora.rank == 16);
  CHECK(c.model.lora.alpha == 32.0);
  CHECK(c.model.initial_temperature == 0.07);
  CHECK(c.decode.temperature == 0.1);
  CHECK(c.decode.top_p == 0.9);
  CHECK(c.decode.repetition_penalty == 1.2);
  CHECK(c.decode.trigram_blocking);
  for (Phase p : {Phase::k1, Phase::k2a, Phase::k2b}) {
    CHECK(c.train(p).effective_batch == 128);
    CHECK(c.train(p).early_stop_patience == 15);
    CHECK(c.train(p).phase == p);
  }
  CHECK_NOTHROW(c.validate());
}

TEST_CASE("experiment config json") {
  const ExperimentConfig c = tiny_experiment();
  const auto j = experiment_config_to_json(c);
  const auto back = experiment_config_from_json(j);
  CHECK(experiment_config_to_json(back) == j);
  CHECK(back.phase1.seed == c.phase1.seed);
  CHECK(back.seed_for("x") == c.seed_for("x"));
  CHECK(c.seed_for("a") != c.seed_for("b"));

  CHECK_THROWS_AS(experiment_config_from_json({{"bogus", 1}}), ConfigError);
  CHECK_THROWS_AS(experiment_config_from_json({{"decode", {{"temprature", 0.5}}}}), ConfigError);
  CHECK_THROWS_AS(experiment_config_from_json({{"data", {{"splits", {0.5, 0.5, 0.5}}}}}), ConfigError);
  CHECK_THROWS_AS(experiment_config_from_json({{"seed", "seven"}}), ConfigError);
  const auto partial = experiment_config_from_json({{"decode", {{"top_p", 0.5}}}, {"seed", 9}});
  CHECK(partial.decode.top_p == 0.5);
  CHECK(partial.decode.temperature == 0.1);
  CHECK(partial.seed == 9);

  testing::TempDir tmp("cfg");
  CHECK_THROWS_AS(load_experiment_config(tmp.path() / "none.json"), ConfigError);
  std::ofstream(tmp.path() / "broken.json") << "{ not json";
  CHECK_THROWS_AS(load_experiment_config(tmp.path() / "broken.json"), ConfigError);
}

TEST_CASE("experiment lock is exclusive") {
  testing::TempDir tmp("lock");
  {
    ExperimentLock a(tmp.path());
    CHECK_THROWS_AS(ExperimentLock(tmp.path()), UsageError);
  }
  CHECK_NOTHROW(ExperimentLock(tmp.path()));
}

TEST_CASE("phases must follow their parent stage") {
  CHECK(required_parent(Phase::k1) == "base");
  CHECK(required_parent(Phase::k2a) == "1");
  CHECK(required_parent(Phase::k2b) == "2a");

  testing::TempDir tmp("prov");
  const auto cfg = tiny_experiment();
  cmd_synth(cfg, tmp.path());
  const auto cohort = load_cohort(tmp.path());
  CHECK(cohort.entries.size() == 8);
  CHECK_THROWS_AS(cmd_train(cfg, Phase::k2b, tmp.path()), ProvenanceError);
  CHECK_THROWS_AS(cmd_train(cfg, Phase::k2a, tmp.path()), ProvenanceError);

  const fs::path p1 = cmd_train(cfg, Phase::k1, tmp.path());
  CHECK(load_checkpoint(p1).provenance == std::vector<std::string>{"base", "1"});
  CHECK_THROWS_AS(cmd_train(cfg, Phase::k2b, tmp.path(), p1), ProvenanceError);
  const fs::path p2a = cmd_train(cfg, Phase::k2a, tmp.path());
  const fs::path p2b = cmd_train(cfg, Phase::k2b, tmp.path());
  const auto final = load_checkpoint(p2b);
  CHECK(final.provenance == std::vector<std::string>{"base", "1", "2a", "2b"});
  CHECK(final.model.has_lora());
  CHECK_FALSE(load_checkpoint(p2a).model.has_lora());
  CHECK(fs::exists(tmp.path() / "metrics" / "phase2b.jsonl"));
}
