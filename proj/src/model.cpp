#include "brain3d/model.hpp"

namespace brain3d {

namespace {

nlohmann::json dims_json(const Dims& d) { return {d.depth, d.height, d.width}; }

Dims dims_from(const nlohmann::json& j) {
  if (!j.is_array() || j.size() != 3) throw ConfigError("dims must be a 3-element array");
  return {j[0].get<std::size_t>(), j[1].get<std::size_t>(), j[2].get<std::size_t>()};
}

}  // namespace

void ModelConfig::validate() const {
  encoder.validate();
  lm.validate();
  if (bridge.tokens < 1 || static_cast<std::size_t>(bridge.tokens) > encoder.tokens()) {
    throw ConfigError("bridge: require 1 <= K <= N");
  }
  if (lora.rank < 1 || lora.rank > lm.width) throw ConfigError("lora: rank must be in [1, d_llm]");
  if (!(initial_temperature > 0.0)) throw ConfigError("temperature must be positive");
}

nlohmann::json model_config_to_json(const ModelConfig& c) {
  return {{"volume_dims", dims_json(c.encoder.volume_dims)},
          {"patch", dims_json(c.encoder.patch)},
          {"d_v", c.encoder.width},
          {"encoder_layers", c.encoder.layers},
          {"encoder_heads", c.encoder.heads},
          {"encoder_mlp_ratio", c.encoder.mlp_ratio},
          {"K", c.bridge.tokens},
          {"projector_hidden", c.bridge.hidden},
          {"initial_gate", c.bridge.initial_gate},
          {"vocab_size", c.lm.vocab_size},
          {"d_llm", c.lm.width},
          {"lm_layers", c.lm.layers},
          {"lm_heads", c.lm.heads},
          {"lm_mlp_ratio", c.lm.mlp_ratio},
          {"max_positions", c.lm.max_positions},
          {"lora_rank", c.lora.rank},
          {"lora_alpha", c.lora.alpha},
          {"pos_spatial_std", c.pos_spatial_std},
          {"initial_temperature", c.initial_temperature}};
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  if (j.contains("volume_dims")) c.encoder.volume_dims = dims_from(j["volume_dims"]);
  if (j.contains("patch")) c.encoder.patch = dims_from(j["patch"]);
  c.encoder.width = j.value("d_v", c.encoder.width);
  c.encoder.layers = j.value("encoder_layers", c.encoder.layers);
  c.encoder.heads = j.value("encoder_heads", c.encoder.heads);
  c.encoder.mlp_ratio = j.value("encoder_mlp_ratio", c.encoder.mlp_ratio);
  c.bridge.tokens = j.value("K", c.bridge.tokens);
  c.bridge.hidden = j.value("projector_hidden", c.bridge.hidden);
  c.bridge.initial_gate = j.value("initial_gate", c.bridge.initial_gate);
  c.lm.vocab_size = j.value("vocab_size", c.lm.vocab_size);
  c.lm.width = j.value("d_llm", c.lm.width);
  c.lm.layers = j.value("lm_layers", c.lm.layers);
  c.lm.heads = j.value("lm_heads", c.lm.heads);
  c.lm.mlp_ratio = j.value("lm_mlp_ratio", c.lm.mlp_ratio);
  c.lm.max_positions = j.value("max_positions", c.lm.max_positions);
  c.lora.rank = j.value("lora_rank", c.lora.rank);
  c.lora.alpha = j.value("lora_alpha", c.lora.alpha);
  c.pos_spatial_std = j.value("pos_spatial_std", c.pos_spatial_std);
  c.initial_temperature = j.value("initial_temperature", c.initial_temperature);
  return c;
}

}  // namespace brain3d
