#pragma once

#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "brain3d/autograd.hpp"
#include "brain3d/params.hpp"
#include "brain3d/transformer.hpp"

namespace brain3d {

inline constexpr std::string_view kCanonicalPrompt = "Generate a radiology report for this brain MRI FLAIR scan";

/// Lowercased words; each of . , ; : ! ? ( ) is its own token.
std::vector<std::string> split_words(std::string_view text);

/// Inverse of split_words up to normalisation: single spaces, no space before punctuation.
std::string join_words(std::span<const std::string> words);

class Vocabulary {
 public:
  static constexpr int kPad = 0;
  static constexpr int kBos = 1;
  static constexpr int kEos = 2;
  static constexpr int kUnk = 3;

  Vocabulary();
  /// Specials first, then every corpus word in lexicographic order.
  static Vocabulary build(std::span<const std::string> corpus);
  static Vocabulary from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;

  int id(std::string_view word) const;
  const std::string& token(int id) const;
  std::size_t size() const { return tokens_.size(); }
  bool is_special(int id) const { return id >= 0 && id <= kUnk; }

  std::vector<int> encode(std::string_view text) const;
  /// Drops PAD/BOS/EOS; UNK renders as "<unk>".
  std::string decode(std::span<const int> ids) const;

  bool operator==(const Vocabulary& other) const { return tokens_ == other.tokens_; }

 private:
  void add(std::string token);

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> ids_;
};

enum class TokenRole { kVisual, kPrompt, kReport };

struct TokenSequence {
  std::vector<int> ids;
  std::vector<TokenRole> roles;
};

TokenSequence tokenize(const Vocabulary& vocab, std::string_view text, TokenRole role = TokenRole::kReport);
std::string detokenize(const Vocabulary& vocab, std::span<const int> ids);

/// Report token ids followed by EOS, the form used as a training target.
std::vector<int> report_ids(const Vocabulary& vocab, std::string_view report);
std::vector<int> prompt_ids(const Vocabulary& vocab);

struct LmConfig {
  int vocab_size = 0;
  int width = 128;
  int layers = 2;
  int heads = 4;
  int mlp_ratio = 4;
  int max_positions = 256;

  void validate() const;
};

struct LoraConfig {
  int rank = 16;
  double alpha = 32.0;
  double scaling() const { return alpha / static_cast<double>(rank); }
};

/// lm.embed (|V| x width, tied output head), lm.pos, lm.blocks (+ final norm).
template <typename T>
void init_lm(ParamStore<T>& store, const LmConfig& cfg, std::mt19937_64& rng) {
  cfg.validate();
  store.add("lm.embed", "lm.embed", random_normal<T>(cfg.vocab_size, cfg.width, kInitStd, rng));
  store.add("lm.pos", "lm.pos", random_normal<T>(cfg.max_positions, cfg.width, 0.01, rng));
  for (int l = 0; l < cfg.layers; ++l) {
    init_block(store, "lm.blocks." + std::to_string(l), "lm.blocks", cfg.width, cfg.mlp_ratio, rng);
  }
  init_layer_norm(store, "lm.norm", "lm.blocks", cfg.width);
}

template <typename T>
Matrix<T> embed_text(const ParamStore<T>& store, std::span<const int> ids) {
  const Matrix<T>& table = store.get("lm.embed");
  Matrix<T> out(static_cast<Eigen::Index>(ids.size()), table.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= table.rows()) throw IndexError("embed_text: token id out of range");
    out.row(static_cast<Eigen::Index>(i)) = table.row(ids[i]);
  }
  return out;
}

template <typename T>
ag::Var embed_text(Binder<T>& p, std::span<const int> ids) {
  return p.tape().gather_rows(p("lm.embed"), std::vector<int>(ids.begin(), ids.end()));
}

/// Per-position next-token label, kIgnoreIndex on visual and prompt positions.
struct LossMask {
  std::vector<int> labels;
  std::size_t supervised() const;
};

/// Position K+S-1+j predicts report token j; the final report token is not a source.
LossMask build_loss_mask(std::size_t visual, std::size_t prompt, std::span<const int> report);

template <typename T>
struct AssembledInput {
  ag::Var u;
  LossMask mask;
};

/// U = [Z_vis; Embed(prompt); Embed(report)] and its loss mask.
template <typename T>
AssembledInput<T> assemble_input(Binder<T>& p, ag::Var z_vis, std::span<const int> prompt,
                                 std::optional<std::span<const int>> report) {
  auto& tape = p.tape();
  std::vector<ag::Var> parts{z_vis};
  if (!prompt.empty()) parts.push_back(embed_text(p, prompt));
  LossMask mask;
  const auto k = static_cast<std::size_t>(tape.value(z_vis).rows());
  if (report && !report->empty()) {
    parts.push_back(embed_text(p, *report));
    mask = build_loss_mask(k, prompt.size(), *report);
  }
  return {tape.concat_rows(std::span<const ag::Var>(parts)), std::move(mask)};
}

/// Logits (rows x |V|) of the causal LM over input rows U.
template <typename T>
ag::Var lm_forward(Binder<T>& p, const LmConfig& cfg, ag::Var u, bool use_lora = false, T lora_scaling = T(0)) {
  auto& tape = p.tape();
  const Eigen::Index rows = tape.value(u).rows();
  if (rows == 0) throw ShapeError("lm_forward: empty input");
  if (rows > cfg.max_positions) throw ShapeError("lm_forward: sequence longer than max_positions");
  std::vector<int> pos(static_cast<std::size_t>(rows));
  for (Eigen::Index i = 0; i < rows; ++i) pos[static_cast<std::size_t>(i)] = static_cast<int>(i);
  ag::Var x = tape.add(u, tape.gather_rows(p("lm.pos"), std::move(pos)));
  for (int l = 0; l < cfg.layers; ++l) {
    x = transformer_block(p, "lm.blocks." + std::to_string(l), x, cfg.heads, /*causal=*/true, use_lora, lora_scaling);
  }
  x = layer_norm(p, "lm.norm", x);
  return tape.matmul_nt(x, p("lm.embed"));
}

template <typename T>
ag::Var masked_next_token_loss(ag::Tape<T>& tape, ag::Var logits, const LossMask& mask) {
  return tape.masked_cross_entropy(logits, mask.labels);
}

inline std::vector<std::string> lora_targets(const LmConfig& cfg) {
  std::vector<std::string> out;
  for (int l = 0; l < cfg.layers; ++l) {
    for (const char* proj : kAttentionProjections) out.push_back("lm.blocks." + std::to_string(l) + ".attn." + proj);
  }
  return out;
}

/// Adds A (r x in, random) and B (out x r, zero) for every attention projection.
template <typename T>
void lora_inject(ParamStore<T>& store, const LmConfig& cfg, const LoraConfig& lora, std::mt19937_64& rng) {
  if (lora.rank < 1) throw ConfigError("lora: rank must be >= 1");
  for (const auto& target : lora_targets(cfg)) {
    const Matrix<T>& w = store.get(target + ".weight");
    if (lora.rank > std::min(w.rows(), w.cols())) throw ConfigError("lora: rank exceeds matrix dims");
    const std::string lp = lora_prefix(target);
    store.add(lp + ".a", "lora.adapters",
              random_normal<T>(lora.rank, w.cols(), 1.0 / std::sqrt(static_cast<double>(w.cols())), rng));
    store.add(lp + ".b", "lora.adapters", Matrix<T>::Zero(w.rows(), lora.rank));
  }
}

/// Folds scaling * B A into each adapted weight and drops the adapters.
template <typename T>
ParamStore<T> lora_merge(const ParamStore<T>& store, const LmConfig& cfg, const LoraConfig& lora) {
  ParamStore<T> merged = store;
  for (const auto& target : lora_targets(cfg)) {
    const std::string lp = lora_prefix(target);
    if (!store.contains(lp + ".a")) continue;
    merged.get(target + ".weight") +=
        static_cast<T>(lora.scaling()) * (store.get(lp + ".b") * store.get(lp + ".a"));
  }
  merged.remove_group("lora.adapters");
  return merged;
}

/// Gradient-free logits for a fixed input matrix.
template <typename T>
Matrix<T> lm_logits(const ParamStore<T>& store, const LmConfig& cfg, const Matrix<T>& u, bool use_lora = false,
                    T lora_scaling = T(0)) {
  ag::Tape<T> tape;
  Binder<T> p(tape, store);
  return tape.value(lm_forward(p, cfg, tape.constant(u), use_lora, lora_scaling));
}

}  // namespace brain3d
