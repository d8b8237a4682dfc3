#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>

#include "brain3d/decoder.hpp"
#include "helpers.hpp"

using namespace brain3d;

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

// Exhaustive nucleus: the smallest subset by descending probability (ties by
// id) reaching mass p, found by checking each prefix length.
std::vector<double> brute_top_p(const std::vector<double>& probs, double p) {
  std::vector<int> order(probs.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return probs[a] > probs[b]; });
  for (std::size_t k = 1; k <= order.size(); ++k) {
    double mass = 0.0;
    for (std::size_t i = 0; i < k; ++i) mass += probs[order[i]];
    if (mass >= p - 1e-12 || k == order.size()) {
      std::vector<double> out(probs.size(), 0.0);
      for (std::size_t i = 0; i < k; ++i) out[order[i]] = probs[order[i]] / mass;
      return out;
    }
  }
  return {};
}

Model<float> tiny_model(std::uint64_t seed) {
  auto m = init_model<float>(testing::tiny_config(), testing::tiny_vocab(), seed);
  std::mt19937_64 rng(seed);
  // Sharper output layer so that sampling has clear preferences.
  for (auto& e : m.params.entries())
    if (e.group == "lm.embed") e.value *= 8.0f;
  return m;
}

}  // namespace

TEST_CASE("repetition penalty examples") {
  std::vector<double> l{2.0, -2.0, 0.5, 1.0};
  const std::vector<int> hist{0, 1, 1};
  apply_repetition_penalty(l, hist, 1.2);
  CHECK(l[0] == doctest::Approx(1.6667).epsilon(1e-4));
  CHECK(l[1] == doctest::Approx(-2.4));
  CHECK(l[2] == 0.5);
  CHECK(l[3] == 1.0);

  std::mt19937_64 rng(1);
  std::normal_distribution<double> n(0.0, 2.0);
  for (int t = 0; t < 50; ++t) {
    std::vector<double> a(6);
    for (auto& x : a) x = n(rng);
    const std::vector<int> h{t % 6, (t + 2) % 6};
    auto same = a;
    apply_repetition_penalty(same, h, 1.0);
    CHECK(same == a);
    auto b = a;
    apply_repetition_penalty(b, h, 1.5);
    for (int i = 0; i < 6; ++i) {
      const bool seen = std::find(h.begin(), h.end(), i) != h.end();
      if (seen) CHECK(b[i] <= a[i]);
      else CHECK(b[i] == a[i]);
    }
    // Odds of a penalised token against an untouched one never improve.
    const auto pa = softmax_with_temperature(a, 1.0), pb = softmax_with_temperature(b, 1.0);
    const int free = (t + 1) % 6;
    for (int i : h) CHECK(pb[i] / pb[free] <= pa[i] / pa[free] * (1 + 1e-12));
  }
}

TEST_CASE("trigram blocking") {
  std::vector<double> l(6, 1.0);
  const std::vector<int> hist{1, 2, 3, 4, 1, 2};
  trigram_block(l, hist);
  CHECK(l[3] == kNegInf);
  for (int i : {0, 1, 2, 4, 5}) CHECK(l[i] == 1.0);

  std::vector<double> short_hist(6, 1.0);
  trigram_block(short_hist, std::vector<int>{1});
  CHECK(std::all_of(short_hist.begin(), short_hist.end(), [](double x) { return x == 1.0; }));

  CHECK(has_repeated_trigram(std::vector<int>{1, 2, 3, 1, 2, 3}));
  CHECK_FALSE(has_repeated_trigram(std::vector<int>{1, 2, 3, 1, 2, 4}));
  CHECK_FALSE(has_repeated_trigram(std::vector<int>{1, 1}));
}

TEST_CASE("softmax with temperature") {
  const std::vector<double> l{1.0, 2.0, kNegInf};
  const auto p = softmax_with_temperature(l, 1.0);
  CHECK(p[2] == 0.0);
  CHECK(p[1] == doctest::Approx(std::exp(1.0) / (1.0 + std::exp(1.0))));
  const auto cold = softmax_with_temperature(std::vector<double>{1000.0, 999.0}, 0.1);
  CHECK(std::isfinite(cold[0]));
  CHECK(cold[0] == doctest::Approx(1.0 / (1.0 + std::exp(-10.0))));
}

TEST_CASE("top-p examples and oracle") {
  const auto a = top_p_filter(std::vector<double>{0.5, 0.3, 0.2}, 0.7);
  CHECK(a[0] == doctest::Approx(0.625));
  CHECK(a[1] == doctest::Approx(0.375));
  CHECK(a[2] == 0.0);
  const auto b = top_p_filter(std::vector<double>{0.95, 0.03, 0.02}, 0.9);
  CHECK(b == std::vector<double>{1.0, 0.0, 0.0});
  const auto tie = top_p_filter(std::vector<double>{0.25, 0.25, 0.25, 0.25}, 0.5);
  CHECK(tie[0] == doctest::Approx(0.5));
  CHECK(tie[1] == doctest::Approx(0.5));
  CHECK(tie[2] == 0.0);

  std::mt19937_64 rng(2);
  std::gamma_distribution<double> g(0.5);
  std::uniform_real_distribution<double> u(0.05, 1.0);
  for (int t = 0; t < 200; ++t) {
    std::vector<double> probs(2 + t % 9);
    for (auto& x : probs) x = g(rng) + 1e-9;
    const double s = std::accumulate(probs.begin(), probs.end(), 0.0);
    for (auto& x : probs) x /= s;
    const double p = u(rng);
    const auto got = top_p_filter(probs, p), want = brute_top_p(probs, p);
    REQUIRE(got.size() == want.size());
    for (std::size_t i = 0; i < got.size(); ++i) CHECK(got[i] == doctest::Approx(want[i]).epsilon(1e-12));
    CHECK(std::accumulate(got.begin(), got.end(), 0.0) == doctest::Approx(1.0));
  }
}

TEST_CASE("decode config validation") {
  DecodeConfig c;
  CHECK(c.temperature == 0.1);
  CHECK(c.top_p == 0.9);
  CHECK(c.repetition_penalty == 1.2);
  CHECK(c.trigram_blocking);
  DecodeConfig bad;
  bad.temperature = 0.0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = {};
  bad.top_p = 1.5;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = {};
  bad.repetition_penalty = 0.5;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("cached session matches full recomputation") {
  const auto model = tiny_model(3);
  std::mt19937_64 rng(4);
  const Matrix<float> prefix = random_normal<float>(6, model.config.lm.width, 1.0f, rng);
  const std::vector<int> tail{4, 5, 6, 4, 7};
  LmSession session(model.params, model.config.lm);
  auto cached = session.feed(prefix);
  Matrix<float> u = prefix;
  for (std::size_t i = 0; i <= tail.size(); ++i) {
    const Matrix<float> full = lm_logits(model.params, model.config.lm, u);
    for (Eigen::Index v = 0; v < full.cols(); ++v) CHECK(std::abs(cached[v] - full(full.rows() - 1, v)) < 1e-4);
    if (i == tail.size()) break;
    cached = session.feed_token(tail[i]);
    const std::vector<int> one{tail[i]};
    Matrix<float> grown(u.rows() + 1, u.cols());
    grown << u, embed_text(model.params, std::span<const int>(one));
    u = grown;
  }
  CHECK(session.length() == prefix.rows() + tail.size());
}

TEST_CASE("generation is deterministic and blocks repeated trigrams") {
  const auto model = tiny_model(5);
  const ReportGenerator gen(model);
  std::mt19937_64 rng(6);
  const Volume vol = testing::random_volume(model.config.encoder.volume_dims, rng);
  DecodeConfig cfg;
  cfg.temperature = 1.0;
  cfg.top_p = 1.0;
  cfg.max_new_tokens = 30;
  int nonempty = 0;
  for (std::uint64_t seed = 0; seed < 40; ++seed) {
    cfg.seed = seed;
    const auto a = gen.generate(vol, cfg);
    const auto b = gen.generate(vol, cfg);
    CHECK(a.ids == b.ids);
    CHECK(a.text == b.text);
    CHECK_FALSE(has_repeated_trigram(a.ids));
    CHECK(a.ids.size() <= 30);
    CHECK(std::find(a.ids.begin(), a.ids.end(), int(Vocabulary::kEos)) == a.ids.end());
    nonempty += !a.ids.empty();
  }
  CHECK(nonempty > 0);
  CHECK(generate(vol, model, cfg) == gen.generate(vol, cfg).text);
}

TEST_CASE("cold sampling without penalties is greedy") {
  const auto model = tiny_model(7);
  const ReportGenerator gen(model);
  std::mt19937_64 rng(8);
  for (int t = 0; t < 5; ++t) {
    const Matrix<float> z = random_normal<float>(4, model.config.lm.width, 1.0f, rng);
    DecodeConfig cfg;
    cfg.temperature = 1e-4;
    cfg.repetition_penalty = 1.0;
    cfg.trigram_blocking = false;
    cfg.max_new_tokens = 20;
    cfg.seed = static_cast<std::uint64_t>(t);
    CHECK(gen.generate_from_tokens(z, cfg).ids == gen.greedy_from_tokens(z, 20).ids);
  }
}
