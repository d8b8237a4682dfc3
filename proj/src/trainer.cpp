#include "brain3d/trainer.hpp"

#include <numbers>

namespace brain3d {

std::string to_string(Phase phase) {
  switch (phase) {
    case Phase::k1: return "1";
    case Phase::k2a: return "2a";
    case Phase::k2b: return "2b";
  }
  return {};
}

Phase phase_from_string(const std::string& s) {
  if (s == "1") return Phase::k1;
  if (s == "2a") return Phase::k2a;
  if (s == "2b") return Phase::k2b;
  throw ConfigError("unknown phase: " + s);
}

void TrainConfig::validate() const {
  if (!(base_lr > 0.0)) throw ConfigError("train: base_lr must be positive");
  if (total_steps < 1) throw ConfigError("train: total_steps must be >= 1");
  if (warmup_steps < 0 || warmup_steps > total_steps) throw ConfigError("train: require 0 <= warmup_steps <= total_steps");
  if (micro_batch < 1 || effective_batch < 1) throw ConfigError("train: batch sizes must be >= 1");
  if (effective_batch % micro_batch != 0) throw ConfigError("train: effective_batch must be divisible by micro_batch");
  if (early_stop_patience < 1) throw ConfigError("train: early_stop_patience must be >= 1");
  if (weight_decay < 0.0) throw ConfigError("train: weight_decay must be >= 0");
}

double lr_at(int step, const TrainConfig& cfg) {
  if (step < 0 || step > cfg.total_steps) throw DomainError("lr_at: step out of range");
  if (step < cfg.warmup_steps) return cfg.base_lr * step / cfg.warmup_steps;
  if (cfg.total_steps == cfg.warmup_steps) return cfg.base_lr;
  const double progress =
      static_cast<double>(step - cfg.warmup_steps) / static_cast<double>(cfg.total_steps - cfg.warmup_steps);
  return std::max(0.0, cfg.base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress)));
}

std::vector<std::string> trainable_groups(Phase phase) {
  switch (phase) {
    case Phase::k1:
      return {"encoder.patch3d", "encoder.pos_depth", "bridge.proj1", "bridge.proj2", "bridge.gate",
              "contrastive.tau"};
    case Phase::k2a: return {"bridge.proj1", "bridge.proj2", "bridge.gate"};
    case Phase::k2b: return {"bridge.proj1", "bridge.proj2", "bridge.gate", "lora.adapters"};
  }
  return {};
}

GroupFilter trainable_filter(Phase phase) {
  auto groups = trainable_groups(phase);
  return [groups = std::move(groups)](const std::string& g) {
    return std::find(groups.begin(), groups.end(), g) != groups.end();
  };
}

double infonce_symmetric(const Matrix<double>& v, const Matrix<double>& t, double tau) {
  ag::Tape<double> tape;
  return tape.value(tape.infonce(tape.constant(v), tape.constant(t), tape.scalar(tau)))(0, 0);
}

std::vector<int> strip_eos(std::span<const int> ids) {
  std::vector<int> out(ids.begin(), ids.end());
  while (!out.empty() && out.back() == Vocabulary::kEos) out.pop_back();
  return out;
}

GlobalEmbeddings global_embeddings(const Matrix<double>& z_vis, const Matrix<double>& embed_table,
                                   std::span<const int> report_tokens) {
  if (z_vis.rows() == 0 || report_tokens.empty()) throw DomainError("global_embeddings: empty input");
  RowVector<double> v = z_vis.colwise().mean();
  if (!(v.norm() > 0.0)) throw DegenerateInputError("visual embedding has zero norm");
  RowVector<double> t = RowVector<double>::Zero(embed_table.cols());
  for (int id : report_tokens) {
    if (id < 0 || id >= embed_table.rows()) throw IndexError("global_embeddings: token id out of range");
    t += embed_table.row(id);
  }
  t /= static_cast<double>(report_tokens.size());
  if (!(t.norm() > 0.0)) throw DegenerateInputError("text embedding has zero norm");
  return {v / v.norm(), t / t.norm()};
}

nlohmann::json epoch_metrics_to_json(const EpochMetrics& m) {
  return {{"step", m.step},           {"phase", to_string(m.phase)}, {"epoch", m.epoch},
          {"train_loss", m.train_loss}, {"val_loss", m.val_loss},    {"lr", m.lr}};
}

}  // namespace brain3d
