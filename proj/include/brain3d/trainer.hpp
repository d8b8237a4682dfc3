#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "brain3d/model.hpp"

namespace brain3d {

enum class Phase { k1, k2a, k2b };

std::string to_string(Phase phase);
Phase phase_from_string(const std::string& s);

struct TrainConfig {
  Phase phase = Phase::k1;
  double base_lr = 1e-3;
  int warmup_steps = 10;
  int total_steps = 200;
  int effective_batch = 128;
  int micro_batch = 8;
  int early_stop_patience = 15;
  std::uint64_t seed = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;

  void validate() const;
};

inline constexpr double kTemperatureMin = 1e-3;
inline constexpr double kTemperatureMax = 10.0;

/// Linear warmup then cosine decay to 0.
double lr_at(int step, const TrainConfig& cfg);

/// Exact set of parameter groups updated in a phase.
std::vector<std::string> trainable_groups(Phase phase);
GroupFilter trainable_filter(Phase phase);

/// Plain symmetric InfoNCE on unit vectors (rows of v and t).
double infonce_symmetric(const Matrix<double>& v, const Matrix<double>& t, double tau);

struct GlobalEmbeddings {
  RowVector<double> v;
  RowVector<double> t;
};

/// v: normalised mean of Z_vis rows; t: normalised mean of the report tokens' embedding rows.
GlobalEmbeddings global_embeddings(const Matrix<double>& z_vis, const Matrix<double>& embed_table,
                                   std::span<const int> report_tokens);

template <typename T>
ag::Var global_visual_embedding(ag::Tape<T>& tape, ag::Var z_vis) {
  return tape.l2_normalize_rows(tape.mean_rows(z_vis));
}

/// Report token ids with any trailing EOS removed.
std::vector<int> strip_eos(std::span<const int> ids);

template <typename T>
Matrix<T> global_text_embedding(const ParamStore<T>& store, std::span<const int> report) {
  const auto tokens = strip_eos(report);
  if (tokens.empty()) throw DegenerateInputError("text embedding of an empty report");
  Matrix<T> mean = embed_text(store, tokens).colwise().mean();
  const T norm = mean.norm();
  if (!(norm > T(0))) throw DegenerateInputError("text embedding has zero norm");
  return mean / norm;
}

struct TrainingExample {
  std::string subject_id;
  Volume volume;            // preprocessed to the encoder input dims
  std::vector<int> report;  // token ids followed by EOS
};

template <typename T>
class AdamW {
 public:
  explicit AdamW(const TrainConfig& cfg)
      : beta1_(cfg.beta1), beta2_(cfg.beta2), eps_(cfg.eps), weight_decay_(cfg.weight_decay) {}

  /// One decoupled-weight-decay Adam update of every parameter present in `grads`.
  void step(ParamStore<T>& store, const std::map<std::string, Matrix<T>>& grads, double lr) {
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (const auto& [name, g] : grads) {
      Matrix<T>& p = store.get(name);
      auto [it, fresh] = slots_.try_emplace(name);
      if (fresh) {
        it->second.m = Matrix<T>::Zero(p.rows(), p.cols());
        it->second.v = Matrix<T>::Zero(p.rows(), p.cols());
      }
      Matrix<T>& m = it->second.m;
      Matrix<T>& v = it->second.v;
      m = static_cast<T>(beta1_) * m + static_cast<T>(1.0 - beta1_) * g;
      v = static_cast<T>(beta2_) * v + static_cast<T>(1.0 - beta2_) * g.cwiseProduct(g);
      if (decays(p)) p *= static_cast<T>(1.0 - lr * weight_decay_);
      const auto m_hat = m.array() / static_cast<T>(c1);
      const auto v_hat = v.array() / static_cast<T>(c2);
      p.array() -= static_cast<T>(lr) * m_hat / (v_hat.sqrt() + static_cast<T>(eps_));
    }
    if (grads.count("contrastive.tau")) {
      T& tau = store.get("contrastive.tau")(0, 0);
      tau = std::clamp(tau, static_cast<T>(kTemperatureMin), static_cast<T>(kTemperatureMax));
    }
  }

 private:
  struct Slot {
    Matrix<T> m;
    Matrix<T> v;
  };
  // Only weight matrices decay; biases, gains, the gate and the temperature do not.
  static bool decays(const Matrix<T>& p) { return p.rows() > 1 && p.cols() > 1; }

  double beta1_, beta2_, eps_, weight_decay_;
  long t_ = 0;
  std::map<std::string, Slot> slots_;
};

template <typename T>
struct BatchGradient {
  double loss = 0.0;
  std::map<std::string, Matrix<T>> grads;
};

namespace detail {

template <typename T>
void require_groups(const Model<T>& model, Phase phase) {
  for (const auto& g : trainable_groups(phase)) {
    if (!model.params.has_group(g)) throw ConfigError("phase " + to_string(phase) + ": missing parameter group " + g);
  }
}

template <typename T>
ag::Var visual_for(Binder<T>& p, const Model<T>& model, const TrainingExample& ex, const Matrix<T>* pooled) {
  if (pooled) return project_tokens(p, p.tape().constant(*pooled));
  auto& cfg = model.config;
  return project_tokens(p, pooled_tokens(p, cfg, extract_patches<T>(ex.volume, cfg.encoder.patch)));
}

template <typename T>
BatchGradient<T> contrastive_gradient(const Model<T>& model, std::span<const TrainingExample* const> batch,
                                      int micro_batch, bool with_grad) {
  const auto b = static_cast<Eigen::Index>(batch.size());
  if (b < 2) throw DomainError("infonce needs a batch of at least 2");
  const GroupFilter filter = with_grad ? trainable_filter(Phase::k1) : no_groups();
  const Eigen::Index d = model.config.lm.width;
  Matrix<T> v_all(b, d), t_all(b, d);
  for (Eigen::Index i = 0; i < b; ++i) {
    t_all.row(i) = global_text_embedding(model.params, batch[static_cast<std::size_t>(i)]->report);
  }

  // Per-micro-batch tapes stay alive until the full-batch loss gradient is known.
  struct Micro {
    std::unique_ptr<ag::Tape<T>> tape;
    std::unique_ptr<Binder<T>> binder;
    std::vector<ag::Var> v;
    Eigen::Index begin = 0;
  };
  std::vector<Micro> micros;
  for (Eigen::Index start = 0; start < b; start += micro_batch) {
    Micro mc;
    mc.tape = std::make_unique<ag::Tape<T>>();
    mc.binder = std::make_unique<Binder<T>>(*mc.tape, model.params, filter);
    mc.begin = start;
    for (Eigen::Index i = start; i < std::min<Eigen::Index>(b, start + micro_batch); ++i) {
      ag::Var z = visual_for<T>(*mc.binder, model, *batch[static_cast<std::size_t>(i)], nullptr);
      ag::Var v = global_visual_embedding(*mc.tape, z);
      v_all.row(i) = mc.tape->value(v);
      mc.v.push_back(v);
    }
    if (!with_grad) mc.binder.reset(), mc.tape.reset();
    micros.push_back(std::move(mc));
  }

  ag::Tape<T> head;
  ag::Var vv = head.leaf(v_all, with_grad);
  ag::Var tt = head.constant(t_all);
  ag::Var tau = head.leaf(model.params.get("contrastive.tau"), with_grad);
  ag::Var loss = head.infonce(vv, tt, tau);
  BatchGradient<T> out;
  out.loss = static_cast<double>(head.value(loss)(0, 0));
  if (!with_grad) return out;
  head.backward(loss);
  const Matrix<T> dv = head.grad(vv);
  out.grads.emplace("contrastive.tau", head.grad(tau));
  for (auto& mc : micros) {
    for (std::size_t j = 0; j < mc.v.size(); ++j) {
      mc.tape->seed(mc.v[j], dv.row(mc.begin + static_cast<Eigen::Index>(j)));
    }
    mc.tape->backward();
    mc.binder->accumulate(out.grads);
  }
  return out;
}

template <typename T>
BatchGradient<T> generation_gradient(const Model<T>& model, Phase phase,
                                     std::span<const TrainingExample* const> batch,
                                     std::span<const Matrix<T>* const> pooled, int micro_batch, bool with_grad) {
  const std::vector<int> prompt = prompt_ids(model.vocab);
  const bool use_lora = model.has_lora();
  const GroupFilter filter = with_grad ? trainable_filter(phase) : no_groups();
  const T inv_b = T(1) / static_cast<T>(batch.size());
  BatchGradient<T> out;
  for (std::size_t start = 0; start < batch.size(); start += static_cast<std::size_t>(micro_batch)) {
    ag::Tape<T> tape;
    Binder<T> p(tape, model.params, filter);
    std::vector<ag::Var> terms;
    for (std::size_t i = start; i < std::min(batch.size(), start + static_cast<std::size_t>(micro_batch)); ++i) {
      ag::Var z = visual_for(p, model, *batch[i], pooled.empty() ? nullptr : pooled[i]);
      terms.push_back(report_loss(p, model, z, prompt, batch[i]->report, use_lora));
    }
    ag::Var sum = tape.sum_all(tape.concat_rows(std::span<const ag::Var>(terms)));
    ag::Var part = tape.scale(sum, inv_b);
    out.loss += static_cast<double>(tape.value(part)(0, 0));
    if (with_grad) {
      tape.backward(part);
      p.accumulate(out.grads);
    }
  }
  return out;
}

}  // namespace detail

/// Loss (mean over the batch) and its gradient for the trainable groups of
/// `phase`, accumulated over micro-batches of size `micro_batch`.
/// `pooled`, when non-empty, holds precomputed Z_pool per batch element.
template <typename T>
BatchGradient<T> batch_gradient(const Model<T>& model, Phase phase, std::span<const TrainingExample* const> batch,
                                int micro_batch, std::span<const Matrix<T>* const> pooled = {},
                                bool with_grad = true) {
  if (batch.empty()) throw DomainError("empty batch");
  if (micro_batch < 1) throw ConfigError("micro_batch must be >= 1");
  if (phase == Phase::k1) return detail::contrastive_gradient(model, batch, micro_batch, with_grad);
  return detail::generation_gradient(model, phase, batch, pooled, micro_batch, with_grad);
}

struct EpochMetrics {
  Phase phase = Phase::k1;
  int epoch = 0;
  int step = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double lr = 0.0;
};

nlohmann::json epoch_metrics_to_json(const EpochMetrics& m);

struct PhaseResult {
  std::vector<EpochMetrics> log;
  double best_val_loss = 0.0;
  int best_epoch = 0;
  int updates = 0;
  bool early_stopped = false;
};

/// Trains the groups of cfg.phase in place. The best-validation parameters
/// are restored at the end.
template <typename T>
PhaseResult run_phase(Model<T>& model, std::span<const TrainingExample> train, std::span<const TrainingExample> val,
                      const TrainConfig& cfg, const std::function<void(const EpochMetrics&)>& on_epoch = {}) {
  cfg.validate();
  detail::require_groups(model, cfg.phase);
  if (cfg.phase == Phase::k2b && !model.has_lora()) throw ConfigError("phase 2b: LoRA adapters not injected");
  if (train.empty()) throw ConfigError("empty training set");
  if (cfg.phase == Phase::k1 && train.size() < 2) throw ConfigError("phase 1 needs at least 2 training subjects");

  // The encoder is frozen after phase 1, so Z_pool can be computed once.
  std::vector<Matrix<T>> train_pool, val_pool;
  if (cfg.phase != Phase::k1) {
    for (const auto& ex : train) train_pool.push_back(pooled_tokens(model, ex.volume));
    for (const auto& ex : val) val_pool.push_back(pooled_tokens(model, ex.volume));
  }

  auto evaluate = [&](std::span<const TrainingExample> data, const std::vector<Matrix<T>>& pool) {
    std::vector<const TrainingExample*> ptr;
    std::vector<const Matrix<T>*> pp;
    for (std::size_t i = 0; i < data.size(); ++i) {
      ptr.push_back(&data[i]);
      if (!pool.empty()) pp.push_back(&pool[i]);
    }
    return batch_gradient<T>(model, cfg.phase, ptr, cfg.micro_batch, pp, false).loss;
  };
  const bool use_val = cfg.phase == Phase::k1 ? val.size() >= 2 : !val.empty();

  const std::set<std::string> groups = [&] {
    auto g = trainable_groups(cfg.phase);
    return std::set<std::string>(g.begin(), g.end());
  }();
  auto snapshot = [&] {
    std::map<std::string, Matrix<T>> s;
    for (const auto& e : model.params.entries()) {
      if (groups.count(e.group)) s.emplace(e.name, e.value);
    }
    return s;
  };

  AdamW<T> opt(cfg);
  std::mt19937_64 rng(cfg.seed);
  std::vector<std::size_t> order(train.size());
  PhaseResult result;
  auto best = snapshot();
  double best_val = std::numeric_limits<double>::infinity();
  int stale = 0;
  int step = 0;
  for (int epoch = 1; step < cfg.total_steps; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<std::pair<std::size_t, std::size_t>> batches;
    for (std::size_t s = 0; s < order.size(); s += static_cast<std::size_t>(cfg.effective_batch)) {
      batches.emplace_back(s, std::min(order.size(), s + static_cast<std::size_t>(cfg.effective_batch)));
    }
    // A contrastive batch of one has no negatives; fold it into its predecessor.
    if (cfg.phase == Phase::k1 && batches.size() > 1 && batches.back().second - batches.back().first == 1) {
      batches[batches.size() - 2].second = batches.back().second;
      batches.pop_back();
    }
    double loss_sum = 0.0;
    std::size_t seen = 0;
    double lr = 0.0;
    for (const auto& [lo, hi] : batches) {
      if (step >= cfg.total_steps) break;
      std::vector<const TrainingExample*> ptr;
      std::vector<const Matrix<T>*> pp;
      for (std::size_t i = lo; i < hi; ++i) {
        ptr.push_back(&train[order[i]]);
        if (!train_pool.empty()) pp.push_back(&train_pool[order[i]]);
      }
      auto bg = batch_gradient<T>(model, cfg.phase, ptr, cfg.micro_batch, pp);
      if (!std::isfinite(bg.loss)) {
        throw NumericError("phase " + to_string(cfg.phase) + ": non-finite loss at step " + std::to_string(step) +
                           ", epoch " + std::to_string(epoch));
      }
      ++step;
      lr = lr_at(step, cfg);
      opt.step(model.params, bg.grads, lr);
      loss_sum += bg.loss * static_cast<double>(hi - lo);
      seen += hi - lo;
    }
    if (seen == 0) break;
    EpochMetrics m{cfg.phase, epoch, step, loss_sum / static_cast<double>(seen), 0.0, lr};
    m.val_loss = use_val ? evaluate(val, val_pool) : m.train_loss;
    if (!std::isfinite(m.val_loss)) throw NumericError("phase " + to_string(cfg.phase) + ": non-finite validation loss");
    result.log.push_back(m);
    if (on_epoch) on_epoch(m);
    if (m.val_loss < best_val) {
      best_val = m.val_loss;
      best = snapshot();
      result.best_epoch = epoch;
      stale = 0;
    } else if (++stale >= cfg.early_stop_patience) {
      result.early_stopped = true;
      break;
    }
  }
  for (auto& [name, value] : best) model.params.get(name) = value;
  result.best_val_loss = best_val;
  result.updates = step;
  return result;
}

struct LmPretrainConfig {
  int steps = 400;
  int batch = 8;
  double lr = 3e-3;
  int warmup_steps = 20;
  double prefix_noise = 0.02;
  std::uint64_t seed = 0;
};

/// Prepares the language model before any alignment: next-token training on
/// the training reports, conditioned on a K-row soft prefix that carries the
/// embeddings of the report's distinguishing words at random slots. Only the
/// LM groups change.
template <typename T>
std::vector<double> pretrain_language_model(Model<T>& model, std::span<const std::vector<int>> reports,
                                            const LmPretrainConfig& cfg) {
  if (reports.empty()) throw ConfigError("pretraining needs at least one report");
  // Words shared by most reports carry little information about the scan.
  std::map<int, std::size_t> doc_freq;
  for (const auto& r : reports) {
    for (int id : std::set<int>(r.begin(), r.end())) ++doc_freq[id];
  }
  std::vector<std::vector<int>> keywords;
  for (const auto& r : reports) {
    std::vector<int> k;
    for (int id : std::set<int>(r.begin(), r.end())) {
      if (5 * doc_freq[id] <= 3 * reports.size() && !model.vocab.is_special(id) && model.vocab.token(id).size() > 1) {
        k.push_back(id);
      }
    }
    keywords.push_back(std::move(k));
  }

  const std::vector<std::string> lm_groups{"lm.embed", "lm.pos", "lm.blocks"};
  const GroupFilter filter = [&](const std::string& g) {
    return std::find(lm_groups.begin(), lm_groups.end(), g) != lm_groups.end();
  };
  TrainConfig tc;
  tc.base_lr = cfg.lr;
  tc.warmup_steps = cfg.warmup_steps;
  tc.total_steps = cfg.steps;
  AdamW<T> opt(tc);
  std::mt19937_64 rng(cfg.seed);
  std::normal_distribution<double> noise(0.0, cfg.prefix_noise);
  const auto k_rows = static_cast<std::size_t>(model.config.bridge.tokens);
  const Eigen::Index d = model.config.lm.width;
  const std::vector<int> prompt = prompt_ids(model.vocab);
  std::uniform_int_distribution<std::size_t> pick(0, reports.size() - 1);
  std::vector<double> losses;
  for (int step = 1; step <= cfg.steps; ++step) {
    ag::Tape<T> tape;
    Binder<T> p(tape, model.params, filter);
    std::vector<ag::Var> terms;
    for (int b = 0; b < cfg.batch; ++b) {
      const std::size_t i = pick(rng);
      std::vector<std::size_t> slots(k_rows);
      std::iota(slots.begin(), slots.end(), std::size_t{0});
      std::shuffle(slots.begin(), slots.end(), rng);
      std::vector<int> slot_word(k_rows, -1);
      for (std::size_t j = 0; j < keywords[i].size() && j < k_rows; ++j) slot_word[slots[j]] = keywords[i][j];
      std::vector<ag::Var> rows;
      for (std::size_t s = 0; s < k_rows; ++s) {
        Matrix<T> jitter(1, d);
        for (Eigen::Index c = 0; c < d; ++c) jitter(0, c) = static_cast<T>(noise(rng));
        ag::Var row = tape.constant(jitter);
        if (slot_word[s] >= 0) row = tape.add(tape.gather_rows(p("lm.embed"), {slot_word[s]}), row);
        rows.push_back(row);
      }
      ag::Var prefix = tape.concat_rows(std::span<const ag::Var>(rows));
      terms.push_back(report_loss(p, model, prefix, prompt, reports[i], false));
    }
    ag::Var loss = tape.scale(tape.sum_all(tape.concat_rows(std::span<const ag::Var>(terms))),
                              T(1) / static_cast<T>(cfg.batch));
    const double value = static_cast<double>(tape.value(loss)(0, 0));
    if (!std::isfinite(value)) throw NumericError("LM pretraining: non-finite loss at step " + std::to_string(step));
    tape.backward(loss);
    std::map<std::string, Matrix<T>> grads;
    p.accumulate(grads);
    opt.step(model.params, grads, lr_at(step, tc));
    losses.push_back(value);
  }
  return losses;
}

}  // namespace brain3d
