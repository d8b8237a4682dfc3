#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include <json.hpp>

#include "brain3d/autograd.hpp"
#include "brain3d/bridge.hpp"
#include "brain3d/encoder3d.hpp"
#include "brain3d/langmodel.hpp"
#include "brain3d/params.hpp"
#include "brain3d/volume.hpp"

namespace brain3d {

struct ModelConfig {
  EncoderConfig encoder;
  BridgeConfig bridge;
  LmConfig lm;
  LoraConfig lora;
  double pos_spatial_std = 0.1;
  double initial_temperature = 0.07;

  void validate() const;
};

nlohmann::json model_config_to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const nlohmann::json& j);

/// All parameters of the pipeline plus the vocabulary they were built for.
template <typename T>
struct Model {
  ModelConfig config;
  Vocabulary vocab;
  ParamStore<T> params;

  bool has_lora() const { return params.has_group("lora.adapters"); }
  T lora_scaling() const { return static_cast<T>(config.lora.scaling()); }

  template <typename U>
  Model<U> cast() const {
    return Model<U>{config, vocab, params.template cast<U>()};
  }
};

/// Fresh model: random 2D patch kernel inflated to 3D, random 2D positional
/// table with zero depth term, random bridge and LM, temperature 0.07.
template <typename T>
Model<T> init_model(ModelConfig cfg, const Vocabulary& vocab, std::uint64_t seed) {
  cfg.lm.vocab_size = static_cast<int>(vocab.size());
  cfg.validate();
  std::mt19937_64 rng(seed);
  Model<T> m{cfg, vocab, {}};
  const auto k2d = random_patch_kernel_2d(static_cast<std::size_t>(cfg.encoder.width), cfg.encoder.patch.height,
                                          cfg.encoder.patch.width, rng);
  const auto k3d = inflate_patch_embed(k2d, cfg.encoder.patch.depth);
  const Dims grid = cfg.encoder.grid();
  const Matrix<double> p2d = random_normal<double>(static_cast<Eigen::Index>(grid.height * grid.width),
                                                   cfg.encoder.width, cfg.pos_spatial_std, rng);
  init_encoder(m.params, cfg.encoder, k3d, build_pos_embed(p2d, grid), rng);
  init_bridge(m.params, cfg.bridge, cfg.encoder.width, cfg.lm.width, rng);
  init_lm(m.params, cfg.lm, rng);
  Matrix<T> tau(1, 1);
  tau(0, 0) = static_cast<T>(cfg.initial_temperature);
  m.params.add("contrastive.tau", "contrastive.tau", std::move(tau));
  return m;
}

template <typename T>
ag::Var pooled_tokens(Binder<T>& p, const ModelConfig& cfg, const Matrix<T>& patches) {
  ag::Var z = encode_patches(p, cfg.encoder, patches);
  return compress_tokens(p.tape(), z, static_cast<std::size_t>(cfg.bridge.tokens));
}

/// Z_pool (K x d_v) without gradients.
template <typename T>
Matrix<T> pooled_tokens(const Model<T>& model, const Volume& volume) {
  ag::Tape<T> tape;
  Binder<T> p(tape, model.params);
  return tape.value(pooled_tokens(p, model.config, extract_patches<T>(volume, model.config.encoder.patch)));
}

/// Z_vis (K x d_llm) without gradients.
template <typename T>
Matrix<T> visual_tokens(const Model<T>& model, const Volume& volume) {
  return project_tokens(pooled_tokens(model, volume), model.params);
}

/// Masked next-token loss of one report given Z_vis.
template <typename T>
ag::Var report_loss(Binder<T>& p, const Model<T>& model, ag::Var z_vis, std::span<const int> prompt,
                    std::span<const int> report, bool use_lora) {
  auto in = assemble_input(p, z_vis, prompt, std::optional<std::span<const int>>(report));
  ag::Var logits = lm_forward(p, model.config.lm, in.u, use_lora, model.lora_scaling());
  return masked_next_token_loss(p.tape(), logits, in.mask);
}

}  // namespace brain3d
