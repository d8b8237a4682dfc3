#include "brain3d/decoder.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <set>
#include <tuple>

namespace brain3d {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

RowVector<float> layer_norm_row(const RowVector<float>& x, const Matrix<float>& gamma, const Matrix<float>& beta) {
  const float mean = x.mean();
  const RowVector<float> c = x.array() - mean;
  const float var = c.squaredNorm() / static_cast<float>(x.size());
  const float inv = 1.0f / std::sqrt(var + 1e-5f);
  return (c.array() * inv * gamma.row(0).array() + beta.row(0).array()).matrix();
}

RowVector<float> linear_row(const ParamStore<float>& s, const std::string& prefix, const RowVector<float>& x) {
  RowVector<float> y = x * s.get(prefix + ".weight").transpose();
  return y + s.get(prefix + ".bias").row(0);
}

std::vector<double> to_doubles(const RowVector<float>& r) {
  std::vector<double> out(static_cast<std::size_t>(r.size()));
  for (Eigen::Index i = 0; i < r.size(); ++i) out[static_cast<std::size_t>(i)] = r(i);
  return out;
}

}  // namespace

void DecodeConfig::validate() const {
  if (!(temperature > 0.0)) throw ConfigError("decode: temperature must be > 0");
  if (!(top_p > 0.0 && top_p <= 1.0)) throw ConfigError("decode: top_p must be in (0, 1]");
  if (!(repetition_penalty >= 1.0)) throw ConfigError("decode: repetition_penalty must be >= 1");
  if (max_new_tokens < 0) throw ConfigError("decode: max_new_tokens must be >= 0");
}

nlohmann::json decode_config_to_json(const DecodeConfig& c) {
  return {{"temperature", c.temperature},
          {"top_p", c.top_p},
          {"repetition_penalty", c.repetition_penalty},
          {"trigram_blocking", c.trigram_blocking},
          {"max_new_tokens", c.max_new_tokens},
          {"seed", c.seed}};
}

DecodeConfig decode_config_from_json(const nlohmann::json& j) {
  DecodeConfig c;
  c.temperature = j.value("temperature", c.temperature);
  c.top_p = j.value("top_p", c.top_p);
  c.repetition_penalty = j.value("repetition_penalty", c.repetition_penalty);
  c.trigram_blocking = j.value("trigram_blocking", c.trigram_blocking);
  c.max_new_tokens = j.value("max_new_tokens", c.max_new_tokens);
  c.seed = j.value("seed", c.seed);
  return c;
}

void apply_repetition_penalty(std::span<double> logits, std::span<const int> history, double theta) {
  if (!(theta >= 1.0)) throw DomainError("repetition penalty must be >= 1");
  for (int id : std::set<int>(history.begin(), history.end())) {
    if (id < 0 || static_cast<std::size_t>(id) >= logits.size()) continue;
    double& l = logits[static_cast<std::size_t>(id)];
    l = l > 0.0 ? l / theta : l * theta;
  }
}

void trigram_block(std::span<double> logits, std::span<const int> history) {
  const std::size_t n = history.size();
  if (n < 2) return;
  const int a = history[n - 2], b = history[n - 1];
  for (std::size_t i = 0; i + 2 < n; ++i) {
    if (history[i] == a && history[i + 1] == b) {
      const int c = history[i + 2];
      if (c >= 0 && static_cast<std::size_t>(c) < logits.size()) logits[static_cast<std::size_t>(c)] = kNegInf;
    }
  }
}

std::vector<double> top_p_filter(std::span<const double> probs, double p) {
  std::vector<std::size_t> order(probs.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) { return probs[x] > probs[y]; });
  std::vector<double> out(probs.size(), 0.0);
  double mass = 0.0;
  for (std::size_t idx : order) {
    out[idx] = probs[idx];
    mass += probs[idx];
    if (mass >= p - 1e-12) break;
  }
  if (mass > 0.0) {
    for (double& x : out) x /= mass;
  }
  return out;
}

std::vector<double> softmax_with_temperature(std::span<const double> logits, double temperature) {
  if (!(temperature > 0.0)) throw DomainError("temperature must be > 0");
  const double mx = *std::max_element(logits.begin(), logits.end());
  std::vector<double> out(logits.size(), 0.0);
  if (mx == kNegInf) return out;
  double sum = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = logits[i] == kNegInf ? 0.0 : std::exp((logits[i] - mx) / temperature);
    sum += out[i];
  }
  for (double& x : out) x /= sum;
  return out;
}

bool has_repeated_trigram(std::span<const int> ids) {
  std::set<std::tuple<int, int, int>> seen;
  for (std::size_t i = 0; i + 2 < ids.size(); ++i) {
    if (!seen.emplace(ids[i], ids[i + 1], ids[i + 2]).second) return true;
  }
  return false;
}

LmSession::LmSession(const ParamStore<float>& store, const LmConfig& cfg)
    : store_(store), cfg_(cfg), layers_(static_cast<std::size_t>(cfg.layers)) {
  if (store.has_group("lora.adapters")) throw ConfigError("LmSession: merge LoRA adapters first");
}

std::vector<double> LmSession::feed(const Matrix<float>& rows) {
  if (rows.rows() == 0) throw ShapeError("LmSession: nothing to feed");
  RowVector<float> last;
  for (Eigen::Index i = 0; i < rows.rows(); ++i) last = step(rows.row(i));
  RowVector<float> logits = last * store_.get("lm.embed").transpose();
  return to_doubles(logits);
}

std::vector<double> LmSession::feed_token(int id) {
  return feed(embed_text(store_, std::span<const int>(&id, 1)));
}

RowVector<float> LmSession::step(const RowVector<float>& input) {
  if (length_ >= static_cast<std::size_t>(cfg_.max_positions)) throw ShapeError("LmSession: max_positions exceeded");
  RowVector<float> x = input + store_.get("lm.pos").row(static_cast<Eigen::Index>(length_));
  const Eigen::Index d = cfg_.width;
  const Eigen::Index dh = d / cfg_.heads;
  const float scale = 1.0f / std::sqrt(static_cast<float>(dh));
  for (int l = 0; l < cfg_.layers; ++l) {
    const std::string pre = "lm.blocks." + std::to_string(l);
    Layer& layer = layers_[static_cast<std::size_t>(l)];
    RowVector<float> h = layer_norm_row(x, store_.get(pre + ".ln1.gamma"), store_.get(pre + ".ln1.beta"));
    const RowVector<float> q = linear_row(store_, pre + ".attn.q", h);
    const auto n = static_cast<Eigen::Index>(length_);
    layer.keys.conservativeResize(n + 1, d);
    layer.values.conservativeResize(n + 1, d);
    layer.keys.row(n) = linear_row(store_, pre + ".attn.k", h);
    layer.values.row(n) = linear_row(store_, pre + ".attn.v", h);
    RowVector<float> att(d);
    for (int hd = 0; hd < cfg_.heads; ++hd) {
      Eigen::Matrix<float, Eigen::Dynamic, 1> s = layer.keys.middleCols(hd * dh, dh) * q.segment(hd * dh, dh).transpose();
      s *= scale;
      const float mx = s.maxCoeff();
      s = (s.array() - mx).exp();
      s /= s.sum();
      att.segment(hd * dh, dh) = s.transpose() * layer.values.middleCols(hd * dh, dh);
    }
    x += linear_row(store_, pre + ".attn.o", att);
    h = layer_norm_row(x, store_.get(pre + ".ln2.gamma"), store_.get(pre + ".ln2.beta"));
    RowVector<float> f = linear_row(store_, pre + ".mlp.fc1", h);
    for (Eigen::Index i = 0; i < f.size(); ++i) f(i) = ag::gelu(f(i));
    x += linear_row(store_, pre + ".mlp.fc2", f);
  }
  ++length_;
  return layer_norm_row(x, store_.get("lm.norm.gamma"), store_.get("lm.norm.beta"));
}

ReportGenerator::ReportGenerator(const Model<float>& model)
    : merged_{model.config, model.vocab,
              model.has_lora() ? lora_merge(model.params, model.config.lm, model.config.lora) : model.params} {}

Generation ReportGenerator::generate(const Volume& volume, const DecodeConfig& cfg) const {
  return generate_from_tokens(visual_tokens(merged_, volume), cfg);
}

Generation ReportGenerator::generate_from_tokens(const Matrix<float>& z_vis, const DecodeConfig& cfg) const {
  cfg.validate();
  const auto prompt = prompt_ids(merged_.vocab);
  LmSession session(merged_.params, merged_.config.lm);
  Matrix<float> prefix(z_vis.rows() + static_cast<Eigen::Index>(prompt.size()), z_vis.cols());
  prefix << z_vis, embed_text(merged_.params, prompt);
  std::vector<double> logits = session.feed(prefix);
  std::mt19937_64 rng(cfg.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  Generation out;
  const int budget = std::min(cfg.max_new_tokens, merged_.config.lm.max_positions - static_cast<int>(prefix.rows()));
  for (int step = 0; step < budget; ++step) {
    apply_repetition_penalty(logits, out.ids, cfg.repetition_penalty);
    if (cfg.trigram_blocking) trigram_block(logits, out.ids);
    const auto probs = top_p_filter(softmax_with_temperature(logits, cfg.temperature), cfg.top_p);
    const double u = unit(rng);
    double cum = 0.0;
    int choice = -1;
    for (std::size_t i = 0; i < probs.size(); ++i) {
      if (probs[i] <= 0.0) continue;
      cum += probs[i];
      choice = static_cast<int>(i);
      if (u < cum) break;
    }
    if (choice < 0 || choice == Vocabulary::kEos) break;
    out.ids.push_back(choice);
    if (step + 1 < budget) logits = session.feed_token(choice);
  }
  out.text = merged_.vocab.decode(out.ids);
  return out;
}

Generation ReportGenerator::greedy_from_tokens(const Matrix<float>& z_vis, int max_new_tokens) const {
  const auto prompt = prompt_ids(merged_.vocab);
  LmSession session(merged_.params, merged_.config.lm);
  Matrix<float> prefix(z_vis.rows() + static_cast<Eigen::Index>(prompt.size()), z_vis.cols());
  prefix << z_vis, embed_text(merged_.params, prompt);
  std::vector<double> logits = session.feed(prefix);
  Generation out;
  const int budget = std::min(max_new_tokens, merged_.config.lm.max_positions - static_cast<int>(prefix.rows()));
  for (int step = 0; step < budget; ++step) {
    const int choice = static_cast<int>(std::max_element(logits.begin(), logits.end()) - logits.begin());
    if (choice == Vocabulary::kEos) break;
    out.ids.push_back(choice);
    if (step + 1 < budget) logits = session.feed_token(choice);
  }
  out.text = merged_.vocab.decode(out.ids);
  return out;
}

std::string generate(const Volume& volume, const Model<float>& model, const DecodeConfig& cfg) {
  return ReportGenerator(model).generate(volume, cfg).text;
}

}  // namespace brain3d
