#pragma once

#include <random>

#include "brain3d/autograd.hpp"
#include "brain3d/params.hpp"
#include "brain3d/transformer.hpp"

namespace brain3d {

struct BridgeConfig {
  int tokens = 32;     // K
  int hidden = 0;      // 0 selects d_llm
  double initial_gate = 0.1;
};

/// Segment [floor(i*N/K), ceil((i+1)*N/K)) of input rows averaged into output row i.
struct PoolSegment {
  std::size_t begin = 0;
  std::size_t end = 0;
};

std::vector<PoolSegment> pool_segments(std::size_t n, std::size_t k);

/// K x N averaging matrix so that Z_pool = P * Z_enc.
template <typename T>
Matrix<T> pooling_matrix(std::size_t n, std::size_t k) {
  const auto segments = pool_segments(n, k);
  Matrix<T> p = Matrix<T>::Zero(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(n));
  for (std::size_t i = 0; i < k; ++i) {
    const T w = T(1) / static_cast<T>(segments[i].end - segments[i].begin);
    for (std::size_t j = segments[i].begin; j < segments[i].end; ++j) {
      p(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = w;
    }
  }
  return p;
}

template <typename T>
Matrix<T> compress_tokens(const Matrix<T>& z_enc, std::size_t k) {
  return pooling_matrix<T>(static_cast<std::size_t>(z_enc.rows()), k) * z_enc;
}

template <typename T>
ag::Var compress_tokens(ag::Tape<T>& tape, ag::Var z_enc, std::size_t k) {
  const auto n = static_cast<std::size_t>(tape.value(z_enc).rows());
  return tape.matmul(tape.constant(pooling_matrix<T>(n, k)), z_enc);
}

/// bridge.proj1 (d_v -> hidden), bridge.proj2 (hidden -> d_llm), bridge.gate (1x1).
template <typename T>
void init_bridge(ParamStore<T>& store, const BridgeConfig& cfg, int d_v, int d_llm, std::mt19937_64& rng) {
  const int hidden = cfg.hidden > 0 ? cfg.hidden : d_llm;
  init_linear(store, "bridge.proj1", "bridge.proj1", hidden, d_v, rng, 1.0 / std::sqrt(static_cast<double>(d_v)));
  init_linear(store, "bridge.proj2", "bridge.proj2", d_llm, hidden, rng, 1.0 / std::sqrt(static_cast<double>(hidden)));
  Matrix<T> gate(1, 1);
  gate(0, 0) = static_cast<T>(cfg.initial_gate);
  store.add("bridge.gate", "bridge.gate", std::move(gate));
}

/// Z_vis = s * proj2(GELU(proj1(Z_pool))).
template <typename T>
ag::Var project_tokens(Binder<T>& p, ag::Var z_pool) {
  auto& tape = p.tape();
  ag::Var h = tape.gelu(linear_layer(p, "bridge.proj1", z_pool));
  return tape.scale_by(linear_layer(p, "bridge.proj2", h), p("bridge.gate"));
}

template <typename T>
Matrix<T> project_tokens(const Matrix<T>& z_pool, const ParamStore<T>& store) {
  ag::Tape<T> tape;
  Binder<T> p(tape, store);
  return tape.value(project_tokens(p, tape.constant(z_pool)));
}

}  // namespace brain3d
