#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "brain3d/model.hpp"

namespace brain3d {

struct DecodeConfig {
  double temperature = 0.1;
  double top_p = 0.9;
  double repetition_penalty = 1.2;
  bool trigram_blocking = true;
  int max_new_tokens = 96;
  std::uint64_t seed = 0;

  void validate() const;
};

nlohmann::json decode_config_to_json(const DecodeConfig& cfg);
DecodeConfig decode_config_from_json(const nlohmann::json& j);

/// Positive logits of history tokens are divided by theta, the rest multiplied.
void apply_repetition_penalty(std::span<double> logits, std::span<const int> history, double theta);

/// Bans every candidate that would complete a trigram already in history.
void trigram_block(std::span<double> logits, std::span<const int> history);

/// Smallest descending-probability prefix with mass >= p (ties by id), renormalised.
std::vector<double> top_p_filter(std::span<const double> probs, double p);

/// Numerically stable softmax of logits / temperature; -inf entries get 0.
std::vector<double> softmax_with_temperature(std::span<const double> logits, double temperature);

/// True when some trigram occurs twice in ids.
bool has_repeated_trigram(std::span<const int> ids);

/// Incremental causal LM evaluation with a key/value cache. Parameters must
/// already have any LoRA adapters merged.
class LmSession {
 public:
  LmSession(const ParamStore<float>& store, const LmConfig& cfg);

  /// Appends input rows and returns the logits of the last one.
  std::vector<double> feed(const Matrix<float>& rows);
  std::vector<double> feed_token(int id);
  std::size_t length() const { return length_; }

 private:
  struct Layer {
    Matrix<float> keys;
    Matrix<float> values;
  };
  RowVector<float> step(const RowVector<float>& input);

  const ParamStore<float>& store_;
  LmConfig cfg_;
  std::vector<Layer> layers_;
  std::size_t length_ = 0;
};

struct Generation {
  std::vector<int> ids;  // generated tokens, EOS excluded
  std::string text;
};

/// Holds a model with adapters merged for repeated decoding.
class ReportGenerator {
 public:
  explicit ReportGenerator(const Model<float>& model);

  Generation generate(const Volume& volume, const DecodeConfig& cfg) const;
  /// Decoding from precomputed visual tokens.
  Generation generate_from_tokens(const Matrix<float>& z_vis, const DecodeConfig& cfg) const;
  /// Argmax decoding without penalties, the reference for the low-temperature limit.
  Generation greedy_from_tokens(const Matrix<float>& z_vis, int max_new_tokens) const;

  const Model<float>& model() const { return merged_; }

 private:
  Model<float> merged_;
};

std::string generate(const Volume& volume, const Model<float>& model, const DecodeConfig& cfg);

}  // namespace brain3d
