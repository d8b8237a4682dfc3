#pragma once

// Pre-norm transformer blocks shared by the 3D encoder and the causal LM.
//
// Parameter names under a block prefix P:
//   P.ln1.{gamma,beta}  P.attn.{q,k,v,o}.{weight,bias}
//   P.ln2.{gamma,beta}  P.mlp.fc1.{weight,bias}  P.mlp.fc2.{weight,bias}
// A LoRA pair for projection P.attn.q lives at "lora." + P + ".attn.q.{a,b}".

#include <array>
#include <random>
#include <string>

#include "brain3d/autograd.hpp"
#include "brain3d/params.hpp"

namespace brain3d {

inline constexpr double kInitStd = 0.02;
inline constexpr std::array<const char*, 4> kAttentionProjections{"q", "k", "v", "o"};

inline std::string lora_prefix(const std::string& projection) { return "lora." + projection; }

template <typename T>
void init_linear(ParamStore<T>& store, const std::string& prefix, const std::string& group, Eigen::Index out,
                 Eigen::Index in, std::mt19937_64& rng, double stddev = kInitStd) {
  store.add(prefix + ".weight", group, random_normal<T>(out, in, stddev, rng));
  store.add(prefix + ".bias", group, Matrix<T>::Zero(1, out));
}

template <typename T>
void init_layer_norm(ParamStore<T>& store, const std::string& prefix, const std::string& group, Eigen::Index width) {
  store.add(prefix + ".gamma", group, Matrix<T>::Ones(1, width));
  store.add(prefix + ".beta", group, Matrix<T>::Zero(1, width));
}

template <typename T>
void init_block(ParamStore<T>& store, const std::string& prefix, const std::string& group, Eigen::Index width,
                Eigen::Index mlp_ratio, std::mt19937_64& rng) {
  init_layer_norm(store, prefix + ".ln1", group, width);
  for (const char* proj : kAttentionProjections) {
    init_linear(store, prefix + ".attn." + proj, group, width, width, rng);
  }
  init_layer_norm(store, prefix + ".ln2", group, width);
  init_linear(store, prefix + ".mlp.fc1", group, width * mlp_ratio, width, rng);
  init_linear(store, prefix + ".mlp.fc2", group, width, width * mlp_ratio, rng);
}

template <typename T>
ag::Var linear_layer(Binder<T>& p, const std::string& prefix, ag::Var x) {
  return p.tape().linear(x, p(prefix + ".weight"), p(prefix + ".bias"));
}

template <typename T>
ag::Var layer_norm(Binder<T>& p, const std::string& prefix, ag::Var x) {
  return p.tape().layer_norm(x, p(prefix + ".gamma"), p(prefix + ".beta"));
}

/// Linear projection plus, when adapters are present and enabled, the
/// low-rank update scaling * (x A^T) B^T.
template <typename T>
ag::Var adapted_linear(Binder<T>& p, const std::string& prefix, ag::Var x, bool use_lora, T lora_scaling) {
  ag::Var y = linear_layer(p, prefix, x);
  const std::string lp = lora_prefix(prefix);
  if (!use_lora || !p.contains(lp + ".a")) return y;
  auto& tape = p.tape();
  ag::Var low = tape.matmul_nt(x, p(lp + ".a"));
  ag::Var delta = tape.matmul_nt(low, p(lp + ".b"));
  return tape.add(y, tape.scale(delta, lora_scaling));
}

template <typename T>
ag::Var transformer_block(Binder<T>& p, const std::string& prefix, ag::Var x, int heads, bool causal,
                          bool use_lora = false, T lora_scaling = T(0)) {
  auto& tape = p.tape();
  ag::Var h = layer_norm(p, prefix + ".ln1", x);
  ag::Var q = adapted_linear(p, prefix + ".attn.q", h, use_lora, lora_scaling);
  ag::Var k = adapted_linear(p, prefix + ".attn.k", h, use_lora, lora_scaling);
  ag::Var v = adapted_linear(p, prefix + ".attn.v", h, use_lora, lora_scaling);
  ag::Var a = tape.attention(q, k, v, heads, causal);
  x = tape.add(x, adapted_linear(p, prefix + ".attn.o", a, use_lora, lora_scaling));
  h = layer_norm(p, prefix + ".ln2", x);
  h = tape.gelu(linear_layer(p, prefix + ".mlp.fc1", h));
  return tape.add(x, linear_layer(p, prefix + ".mlp.fc2", h));
}

}  // namespace brain3d
