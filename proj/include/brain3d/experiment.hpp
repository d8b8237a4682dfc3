#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>

#include <json.hpp>

#include "brain3d/decoder.hpp"
#include "brain3d/evalsuite.hpp"
#include "brain3d/interpret.hpp"
#include "brain3d/model.hpp"
#include "brain3d/synthdata.hpp"
#include "brain3d/trainer.hpp"

namespace brain3d {

struct DataConfig {
  CohortConfig cohort;
  std::array<double, 3> splits{0.7, 0.1, 0.2};
  double clip_low_percentile = 1.0;
  double clip_high_percentile = 99.0;
};

struct InterpretConfig {
  SlicConfig slic;
  LimeConfig lime;
  double mask_threshold = 0.1;
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  DataConfig data;
  ModelConfig model;
  LmPretrainConfig lm_pretrain;
  TrainConfig phase1;
  TrainConfig phase2a;
  TrainConfig phase2b;
  DecodeConfig decode;
  EvalConfig eval;
  InterpretConfig interpret;

  ExperimentConfig();
  const TrainConfig& train(Phase phase) const;
  void validate() const;
  /// Per-component seed derived from the global seed.
  std::uint64_t seed_for(const std::string& component) const;
  /// Propagates the global seed into every component config.
  void apply_seed(std::uint64_t seed);
};

nlohmann::json experiment_config_to_json(const ExperimentConfig& cfg);
/// Sections may be partial; unknown keys are rejected.
ExperimentConfig experiment_config_from_json(const nlohmann::json& j);
ExperimentConfig load_experiment_config(const std::filesystem::path& path);

nlohmann::json train_config_to_json(const TrainConfig& cfg);
TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig base);

}  // namespace brain3d
