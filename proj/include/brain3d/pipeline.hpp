#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "brain3d/checkpoint.hpp"
#include "brain3d/experiment.hpp"

namespace brain3d {

/// Exclusive lock on an experiment directory, released on destruction.
class ExperimentLock {
 public:
  explicit ExperimentLock(const std::filesystem::path& dir);
  ~ExperimentLock();
  ExperimentLock(const ExperimentLock&) = delete;
  ExperimentLock& operator=(const ExperimentLock&) = delete;

 private:
  std::filesystem::path path_;
  int fd_ = -1;
};

/// Writes `text` to a temporary sibling and renames it over `path`.
void write_file_atomic(const std::filesystem::path& path, const std::string& text);

struct CohortEntry {
  nlohmann::json record;  // manifest record
  std::filesystem::path volume_path;
  const std::string& subject_id() const;
  const std::string& report() const;
};

struct CohortIndex {
  std::filesystem::path root;
  std::vector<CohortEntry> entries;
  CohortSplit split;

  const CohortEntry& find(const std::string& subject_id) const;
  std::vector<const CohortEntry*> subset(const std::string& split_name) const;
};

CohortIndex load_cohort(const std::filesystem::path& experiment_dir);

/// Reads a subject volume and maps it to the encoder input grid.
Volume load_model_volume(const CohortEntry& entry, const ExperimentConfig& cfg);

std::vector<TrainingExample> training_examples(const CohortIndex& cohort, const std::string& split_name,
                                               const Vocabulary& vocab, const ExperimentConfig& cfg);

/// Randomly initialised model with a prepared language model ("base" stage).
Checkpoint build_base_model(const CohortIndex& cohort, const ExperimentConfig& cfg);

std::filesystem::path checkpoint_dir(const std::filesystem::path& experiment_dir, const std::string& stage);

/// Stage a phase must start from.
std::string required_parent(Phase phase);

// Commands. Each validates its inputs before writing anything.
std::filesystem::path cmd_synth(const ExperimentConfig& cfg, const std::filesystem::path& out);
std::filesystem::path cmd_train(const ExperimentConfig& cfg, Phase phase, const std::filesystem::path& out,
                                const std::optional<std::filesystem::path>& init = std::nullopt);
std::filesystem::path cmd_generate(const ExperimentConfig& cfg, const std::filesystem::path& out,
                                   const std::string& split_name,
                                   const std::optional<std::filesystem::path>& checkpoint = std::nullopt);
std::filesystem::path cmd_evaluate(const ExperimentConfig& cfg, const std::filesystem::path& out,
                                   const std::filesystem::path& predictions);
std::filesystem::path cmd_explain(const ExperimentConfig& cfg, const std::filesystem::path& out,
                                  const std::string& subject_id,
                                  const std::optional<std::filesystem::path>& checkpoint = std::nullopt);

/// Records of a JSON-lines file.
std::vector<nlohmann::json> read_jsonl(const std::filesystem::path& path);

}  // namespace brain3d
