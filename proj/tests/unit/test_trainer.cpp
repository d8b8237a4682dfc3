#include <doctest.h>

#include <cmath>
#include <cstring>
#include <random>

#include "brain3d/trainer.hpp"
#include "helpers.hpp"

using namespace brain3d;

namespace {

std::vector<TrainingExample> examples(const Vocabulary& vocab, const ModelConfig& cfg, std::size_t n, std::uint64_t seed) {
  const std::vector<std::string> texts{"left frontal edema.", "right temporal necrosis.", "no abnormality detected.",
                                       "right frontal edema.", "left temporal necrosis."};
  std::mt19937_64 rng(seed);
  std::vector<TrainingExample> out;
  for (std::size_t i = 0; i < n; ++i) {
    out.push_back({"s" + std::to_string(i), testing::random_volume(cfg.encoder.volume_dims, rng),
                   report_ids(vocab, texts[i % texts.size()])});
  }
  return out;
}

std::vector<const TrainingExample*> pointers(const std::vector<TrainingExample>& xs) {
  std::vector<const TrainingExample*> p;
  for (const auto& x : xs) p.push_back(&x);
  return p;
}

std::map<std::string, std::vector<char>> group_bytes(const ParamStore<float>& store) {
  std::map<std::string, std::vector<char>> out;
  for (const auto& e : store.entries()) {
    auto& b = out[e.group];
    const auto* p = reinterpret_cast<const char*>(e.value.data());
    b.insert(b.end(), p, p + e.value.size() * Eigen::Index(sizeof(float)));
  }
  return out;
}

double closed_form_infonce(int b, double tau) {
  return -std::log(std::exp(1.0 / tau) / (std::exp(1.0 / tau) + b - 1));
}

Model<double> model_with_lora(std::uint64_t seed) {
  auto m = init_model<double>(testing::tiny_config(), testing::tiny_vocab(), seed);
  std::mt19937_64 rng(seed);
  lora_inject(m.params, m.config.lm, m.config.lora, rng);
  for (auto& e : m.params.entries()) {
    if (e.group == "lora.adapters") e.value = random_normal<double>(e.value.rows(), e.value.cols(), 0.2, rng);
  }
  return m;
}

TrainConfig short_run(Phase phase, int steps) {
  TrainConfig c;
  c.phase = phase;
  c.total_steps = steps;
  c.warmup_steps = 2;
  c.effective_batch = 4;
  c.micro_batch = 2;
  c.base_lr = 1e-2;
  c.seed = 5;
  return c;
}

}  // namespace

TEST_CASE("learning-rate schedule") {
  TrainConfig c;
  c.base_lr = 1e-3;
  c.warmup_steps = 10;
  c.total_steps = 100;
  CHECK(lr_at(5, c) == doctest::Approx(5e-4));
  CHECK(lr_at(10, c) == 1e-3);
  CHECK(lr_at(100, c) == 0.0);
  CHECK(lr_at(55, c) == doctest::Approx(0.5e-3));
  CHECK(lr_at(0, c) == 0.0);
  double prev = 1.0;
  for (int s = 10; s <= 100; ++s) {
    CHECK(lr_at(s, c) <= prev);
    prev = lr_at(s, c);
  }
  CHECK_THROWS_AS(lr_at(101, c), DomainError);
  CHECK_THROWS_AS(lr_at(-1, c), DomainError);
}

TEST_CASE("train config validation") {
  TrainConfig c;
  c.warmup_steps = c.total_steps + 1;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  TrainConfig d;
  d.effective_batch = 10;
  d.micro_batch = 4;
  CHECK_THROWS_AS(d.validate(), ConfigError);
  CHECK(TrainConfig{}.effective_batch == 128);
  CHECK(TrainConfig{}.early_stop_patience == 15);
  CHECK(phase_from_string("2a") == Phase::k2a);
  CHECK_THROWS_AS(phase_from_string("3"), ConfigError);
}

TEST_CASE("trainable groups per phase") {
  CHECK(trainable_groups(Phase::k1) == std::vector<std::string>{"encoder.patch3d", "encoder.pos_depth", "bridge.proj1",
                                                                "bridge.proj2", "bridge.gate", "contrastive.tau"});
  CHECK(trainable_groups(Phase::k2a) == std::vector<std::string>{"bridge.proj1", "bridge.proj2", "bridge.gate"});
  CHECK(trainable_groups(Phase::k2b) ==
        std::vector<std::string>{"bridge.proj1", "bridge.proj2", "bridge.gate", "lora.adapters"});
}

TEST_CASE("infonce closed forms") {
  Matrix<double> eye2 = Matrix<double>::Identity(2, 2);
  CHECK(infonce_symmetric(eye2, eye2, 1.0) == doctest::Approx(-std::log(std::exp(1.0) / (std::exp(1.0) + 1.0))));
  CHECK(infonce_symmetric(eye2, eye2, 1.0) == doctest::Approx(0.3133).epsilon(1e-4));
  Matrix<double> same = Matrix<double>::Zero(2, 3);
  same.col(0).setOnes();
  CHECK(infonce_symmetric(same, same, 1.0) == doctest::Approx(std::log(2.0)));
  CHECK_THROWS_AS(infonce_symmetric(Matrix<double>::Identity(1, 3), Matrix<double>::Identity(1, 3), 1.0), DomainError);

  for (int b : {2, 4, 8})
    for (double tau : {0.07, 1.0}) {
      const Matrix<double> e = Matrix<double>::Identity(b, b + 2);
      CHECK(std::abs(infonce_symmetric(e, e, tau) - closed_form_infonce(b, tau)) < 1e-6);
    }
}

TEST_CASE("infonce is symmetric in modality and prefers matches") {
  std::mt19937_64 rng(1);
  for (int t = 0; t < 20; ++t) {
    Matrix<double> v = random_normal<double>(5, 7, 1.0, rng), w = random_normal<double>(5, 7, 1.0, rng);
    v.rowwise().normalize();
    w.rowwise().normalize();
    CHECK(infonce_symmetric(v, w, 0.3) == doctest::Approx(infonce_symmetric(w, v, 0.3)).epsilon(1e-12));
  }
  const Matrix<double> e = Matrix<double>::Identity(4, 4);
  Matrix<double> shifted(4, 4);
  for (int i = 0; i < 4; ++i) shifted.row(i) = e.row((i + 1) % 4);
  CHECK(infonce_symmetric(e, e, 0.5) < infonce_symmetric(e, shifted, 0.5));
}

TEST_CASE("infonce gradients match finite differences") {
  std::mt19937_64 rng(2);
  ParamStore<double> store;
  store.add("v", "v", random_normal<double>(4, 5, 1.0, rng));
  store.add("t", "t", random_normal<double>(4, 5, 1.0, rng));
  store.add("tau", "tau", Matrix<double>::Constant(1, 1, 0.3));
  const double err = testing::gradcheck(store, {"v", "t", "tau"}, [](Binder<double>& p) {
    auto& tape = p.tape();
    return tape.infonce(tape.l2_normalize_rows(p("v")), tape.l2_normalize_rows(p("t")), p("tau"));
  });
  CHECK(err < 1e-6);
}

TEST_CASE("global embeddings") {
  std::mt19937_64 rng(3);
  const Matrix<double> table = random_normal<double>(10, 4, 1.0, rng);
  RowVector<double> u(4);
  u << 1.0, -2.0, 0.5, 3.0;
  Matrix<double> z(3, 4);
  z.rowwise() = u;
  const std::vector<int> one{7};
  const auto g = global_embeddings(z, table, one);
  CHECK((g.v - u / u.norm()).norm() < 1e-12);
  CHECK((g.t - table.row(7) / table.row(7).norm()).norm() < 1e-12);
  for (int t = 0; t < 20; ++t) {
    const std::vector<int> ids{t % 10, (3 * t) % 10, (7 * t + 1) % 10};
    const auto e = global_embeddings(random_normal<double>(5, 4, 1.0, rng), table, ids);
    CHECK(std::abs(e.v.norm() - 1.0) < 1e-6);
    CHECK(std::abs(e.t.norm() - 1.0) < 1e-6);
  }
  CHECK_THROWS_AS(global_embeddings(Matrix<double>::Zero(2, 4), table, one), DegenerateInputError);
  CHECK(strip_eos(std::vector<int>{5, 6, Vocabulary::kEos}) == std::vector<int>{5, 6});
}

TEST_CASE("adamw first step") {
  ParamStore<double> store;
  store.add("w", "g", Matrix<double>::Constant(2, 2, 1.0));
  store.add("b", "g", Matrix<double>::Constant(1, 2, 1.0));
  std::map<std::string, Matrix<double>> grads{{"w", Matrix<double>::Constant(2, 2, 0.5)},
                                              {"b", Matrix<double>::Constant(1, 2, -2.0)}};
  TrainConfig cfg;
  AdamW<double> opt(cfg);
  opt.step(store, grads, 0.1);
  // Bias-corrected first step moves by lr * g / (|g| + eps); only matrices decay.
  const double w = 1.0 * (1.0 - 0.1 * 0.01) - 0.1 * 0.5 / (0.5 + 1e-8);
  const double b = 1.0 + 0.1 * 2.0 / (2.0 + 1e-8);
  CHECK(store.get("w")(0, 0) == doctest::Approx(w).epsilon(1e-12));
  CHECK(store.get("b")(0, 1) == doctest::Approx(b).epsilon(1e-12));
}

TEST_CASE("gradient accumulation equals the full batch") {
  for (Phase phase : {Phase::k1, Phase::k2a, Phase::k2b}) {
    const auto model = model_with_lora(11);
    const auto data = examples(model.vocab, model.config, 6, 4);
    const auto ptr = pointers(data);
    const auto full = batch_gradient<double>(model, phase, ptr, 6);
    for (int micro : {1, 2, 3, 4}) {
      const auto acc = batch_gradient<double>(model, phase, ptr, micro);
      CHECK(std::abs(acc.loss - full.loss) < 1e-9);
      REQUIRE(acc.grads.size() == full.grads.size());
      for (const auto& [name, g] : full.grads) {
        CHECK((acc.grads.at(name) - g).cwiseAbs().maxCoeff() < 1e-9);
      }
      // One optimiser update from either gradient lands on the same parameters.
      auto a = model, b = model;
      TrainConfig cfg;
      AdamW<double>(cfg).step(a.params, acc.grads, 1e-3);
      AdamW<double>(cfg).step(b.params, full.grads, 1e-3);
      for (const auto& [name, g] : full.grads) CHECK((a.params.get(name) - b.params.get(name)).cwiseAbs().maxCoeff() < 1e-6);
    }
    for (const auto& [name, g] : full.grads) {
      const auto& groups = trainable_groups(phase);
      CHECK(std::find(groups.begin(), groups.end(), model.params.group_of(name)) != groups.end());
    }
  }
}

TEST_CASE("phase 2 loss is the mean of per-sample losses") {
  const auto model = model_with_lora(12);
  const auto data = examples(model.vocab, model.config, 3, 5);
  const auto ptr = pointers(data);
  double sum = 0.0;
  for (const auto* x : ptr) {
    const std::vector<const TrainingExample*> one{x};
    sum += batch_gradient<double>(model, Phase::k2a, one, 1, {}, false).loss;
  }
  CHECK(batch_gradient<double>(model, Phase::k2a, ptr, 2, {}, false).loss == doctest::Approx(sum / 3.0).epsilon(1e-12));
}

TEST_CASE("frozen groups keep their bytes") {
  for (Phase phase : {Phase::k1, Phase::k2a, Phase::k2b}) {
    auto model = init_model<float>(testing::tiny_config(), testing::tiny_vocab(), 21);
    if (phase == Phase::k2b) {
      std::mt19937_64 rng(1);
      lora_inject(model.params, model.config.lm, model.config.lora, rng);
    }
    const auto data = examples(model.vocab, model.config, 6, 6);
    const auto val = examples(model.vocab, model.config, 2, 7);
    const auto before = group_bytes(model.params);
    run_phase<float>(model, data, val, short_run(phase, 6));
    const auto after = group_bytes(model.params);
    const auto trainable = trainable_groups(phase);
    for (const auto& [group, bytes] : before) {
      const bool train = std::find(trainable.begin(), trainable.end(), group) != trainable.end();
      INFO(to_string(phase) << " " << group);
      if (!train) CHECK(bytes == after.at(group));
    }
    if (phase == Phase::k1) CHECK(before.at("encoder.patch3d") != after.at("encoder.patch3d"));
    CHECK(before.at("bridge.proj1") != after.at("bridge.proj1"));
  }
}

TEST_CASE("training is deterministic and restores the best epoch") {
  auto run = [](Phase phase) {
    auto model = init_model<float>(testing::tiny_config(), testing::tiny_vocab(), 31);
    const auto data = examples(model.vocab, model.config, 6, 8);
    const auto val = examples(model.vocab, model.config, 3, 9);
    const auto result = run_phase<float>(model, data, val, short_run(phase, 9));
    return std::make_pair(group_bytes(model.params), result);
  };
  for (Phase phase : {Phase::k1, Phase::k2a}) {
    const auto [a, ra] = run(phase);
    const auto [b, rb] = run(phase);
    CHECK(a == b);
    CHECK(ra.best_val_loss == rb.best_val_loss);
    CHECK(ra.updates == 9);
    double best = 1e300;
    for (const auto& m : ra.log) best = std::min(best, m.val_loss);
    CHECK(ra.best_val_loss == best);
  }

  auto model = init_model<float>(testing::tiny_config(), testing::tiny_vocab(), 31);
  const auto data = examples(model.vocab, model.config, 6, 8);
  const auto val = examples(model.vocab, model.config, 3, 9);
  const auto result = run_phase<float>(model, data, val, short_run(Phase::k2a, 9));
  const auto vp = pointers(val);
  const double restored = batch_gradient<float>(model, Phase::k2a, vp, 2, {}, false).loss;
  CHECK(restored == doctest::Approx(result.best_val_loss).epsilon(1e-5));
}

TEST_CASE("training aborts on bad state") {
  auto model = init_model<float>(testing::tiny_config(), testing::tiny_vocab(), 41);
  const auto data = examples(model.vocab, model.config, 4, 10);
  CHECK_THROWS_AS(run_phase<float>(model, data, {}, short_run(Phase::k2b, 2)), ConfigError);
  model.params.get("bridge.gate")(0, 0) = std::numeric_limits<float>::quiet_NaN();
  CHECK_THROWS_AS(run_phase<float>(model, data, {}, short_run(Phase::k2a, 2)), NumericError);
  auto stripped = init_model<float>(testing::tiny_config(), testing::tiny_vocab(), 41);
  stripped.params.remove_group("bridge.gate");
  CHECK_THROWS_AS(run_phase<float>(stripped, data, {}, short_run(Phase::k2a, 2)), ConfigError);
}

TEST_CASE("language-model preparation touches only the language model") {
  auto model = init_model<float>(testing::tiny_config(), testing::tiny_vocab(), 51);
  const auto before = group_bytes(model.params);
  std::vector<std::vector<int>> reports{report_ids(model.vocab, "left frontal edema."),
                                        report_ids(model.vocab, "right temporal necrosis.")};
  LmPretrainConfig cfg;
  cfg.steps = 30;
  cfg.batch = 2;
  const auto losses = pretrain_language_model<float>(model, reports, cfg);
  CHECK(losses.size() == 30);
  CHECK(losses.back() < losses.front());
  const auto after = group_bytes(model.params);
  for (const auto& [group, bytes] : before) {
    const bool lm = group.rfind("lm.", 0) == 0;
    INFO(group);
    CHECK((bytes == after.at(group)) == !lm);
  }
}
