#pragma once

#include <array>
#include <random>
#include <string>

#include "brain3d/autograd.hpp"
#include "brain3d/params.hpp"
#include "brain3d/transformer.hpp"
#include "brain3d/volume.hpp"

namespace brain3d {

struct EncoderConfig {
  Dims volume_dims{16, 32, 32};
  Dims patch{8, 8, 8};
  int width = 64;
  int layers = 2;
  int heads = 4;
  int mlp_ratio = 4;

  Dims grid() const;
  std::size_t tokens() const { return grid().count(); }
  std::size_t patch_voxels() const { return patch.count(); }
  void validate() const;
};

/// 2D patch-embedding kernel over RGB input; weights are (out_dim x 3*ph*pw)
/// with column order (channel, dy, dx), dx fastest.
struct PatchEmbedKernel2D {
  std::size_t out_dim = 0;
  std::size_t patch_h = 0;
  std::size_t patch_w = 0;
  Matrix<double> weights;
  RowVector<double> bias;
};

/// Single-channel 3D kernel; weights are (out_dim x pd*ph*pw), column order (dz, dy, dx).
struct PatchEmbedKernel3D {
  std::size_t out_dim = 0;
  std::size_t patch_d = 0;
  std::size_t patch_h = 0;
  std::size_t patch_w = 0;
  Matrix<double> weights;
  RowVector<double> bias;
};

/// P3D(z, y, x) = depth(z) + spatial(y * grid_w + x).
struct PositionalEmbedding3D {
  Dims grid;
  Matrix<double> spatial;  // (grid_h * grid_w) x width
  Matrix<double> depth;    // grid_d x width

  RowVector<double> at(std::size_t z, std::size_t y, std::size_t x) const {
    return depth.row(static_cast<Eigen::Index>(z)) +
           spatial.row(static_cast<Eigen::Index>(y * grid.width + x));
  }
};

PatchEmbedKernel2D random_patch_kernel_2d(std::size_t out_dim, std::size_t patch_h, std::size_t patch_w,
                                          std::mt19937_64& rng);

/// Collapse RGB channels by summation, replicate along depth and divide by patch_d.
PatchEmbedKernel3D inflate_patch_embed(const PatchEmbedKernel2D& k2d, std::size_t patch_d);

/// Spatial table copied from `p2d` (rows = grid_h * grid_w); depth table zero.
PositionalEmbedding3D build_pos_embed(const Matrix<double>& p2d, Dims grid);

/// Direct (non-tape) patch convolutions used to check inflation equivalence.
/// `rgb` holds three H x W channel images.
Matrix<double> patch_embed_2d(const PatchEmbedKernel2D& kernel, const std::array<Matrix<double>, 3>& rgb);
Matrix<double> patch_embed_3d(const PatchEmbedKernel3D& kernel, const Volume& volume);

/// Rows are tokens in (z, y, x) order; columns are patch voxels (dz, dy, dx).
template <typename T>
Matrix<T> extract_patches(const Volume& volume, Dims patch) {
  const Dims& d = volume.dims;
  if (patch.depth == 0 || patch.height == 0 || patch.width == 0 || d.depth % patch.depth ||
      d.height % patch.height || d.width % patch.width) {
    throw ShapeError("volume dims not divisible by patch dims");
  }
  const std::size_t gd = d.depth / patch.depth, gh = d.height / patch.height, gw = d.width / patch.width;
  Matrix<T> out(static_cast<Eigen::Index>(gd * gh * gw), static_cast<Eigen::Index>(patch.count()));
  Eigen::Index row = 0;
  for (std::size_t z = 0; z < gd; ++z)
    for (std::size_t y = 0; y < gh; ++y)
      for (std::size_t x = 0; x < gw; ++x, ++row) {
        Eigen::Index col = 0;
        for (std::size_t dz = 0; dz < patch.depth; ++dz)
          for (std::size_t dy = 0; dy < patch.height; ++dy)
            for (std::size_t dx = 0; dx < patch.width; ++dx, ++col) {
              out(row, col) = static_cast<T>(
                  volume.at(z * patch.depth + dz, y * patch.height + dy, x * patch.width + dx));
            }
      }
  return out;
}

/// Registers encoder.patch3d, encoder.pos_spatial, encoder.pos_depth and
/// encoder.blocks (transformer blocks plus the final norm).
template <typename T>
void init_encoder(ParamStore<T>& store, const EncoderConfig& cfg, const PatchEmbedKernel3D& kernel,
                  const PositionalEmbedding3D& pos, std::mt19937_64& rng) {
  cfg.validate();
  if (kernel.out_dim != static_cast<std::size_t>(cfg.width) || kernel.patch_d != cfg.patch.depth ||
      kernel.patch_h != cfg.patch.height || kernel.patch_w != cfg.patch.width) {
    throw ConfigError("encoder: kernel shape does not match config");
  }
  if (pos.grid != cfg.grid() || pos.spatial.cols() != cfg.width) throw ConfigError("encoder: positional grid mismatch");
  store.add("encoder.patch3d.weight", "encoder.patch3d", kernel.weights.cast<T>());
  store.add("encoder.patch3d.bias", "encoder.patch3d", kernel.bias.cast<T>());
  store.add("encoder.pos_spatial", "encoder.pos_spatial", pos.spatial.cast<T>());
  store.add("encoder.pos_depth", "encoder.pos_depth", pos.depth.cast<T>());
  for (int l = 0; l < cfg.layers; ++l) {
    init_block(store, "encoder.blocks." + std::to_string(l), "encoder.blocks", cfg.width, cfg.mlp_ratio, rng);
  }
  init_layer_norm(store, "encoder.norm", "encoder.blocks", cfg.width);
}

template <typename T>
PositionalEmbedding3D positional_from_store(const ParamStore<T>& store, const EncoderConfig& cfg) {
  return PositionalEmbedding3D{cfg.grid(), store.get("encoder.pos_spatial").template cast<double>(),
                               store.get("encoder.pos_depth").template cast<double>()};
}

/// Z_enc (N x width) from pre-extracted patches.
template <typename T>
ag::Var encode_patches(Binder<T>& p, const EncoderConfig& cfg, const Matrix<T>& patches) {
  auto& tape = p.tape();
  const Dims grid = cfg.grid();
  std::vector<int> depth_idx, spatial_idx;
  for (std::size_t z = 0; z < grid.depth; ++z)
    for (std::size_t yx = 0; yx < grid.height * grid.width; ++yx) {
      depth_idx.push_back(static_cast<int>(z));
      spatial_idx.push_back(static_cast<int>(yx));
    }
  ag::Var x = tape.linear(tape.constant(patches), p("encoder.patch3d.weight"), p("encoder.patch3d.bias"));
  ag::Var pos = tape.add(tape.gather_rows(p("encoder.pos_depth"), std::move(depth_idx)),
                         tape.gather_rows(p("encoder.pos_spatial"), std::move(spatial_idx)));
  x = tape.add(x, pos);
  for (int l = 0; l < cfg.layers; ++l) {
    x = transformer_block(p, "encoder.blocks." + std::to_string(l), x, cfg.heads, /*causal=*/false);
  }
  return layer_norm(p, "encoder.norm", x);
}

template <typename T>
ag::Var encode_volume(Binder<T>& p, const EncoderConfig& cfg, const Volume& volume) {
  if (volume.dims != cfg.volume_dims) throw ShapeError("encoder: volume dims differ from configured input grid");
  return encode_patches(p, cfg, extract_patches<T>(volume, cfg.patch));
}

/// Gradient-free convenience wrapper.
template <typename T>
Matrix<T> encode_volume(const Volume& volume, const ParamStore<T>& store, const EncoderConfig& cfg) {
  ag::Tape<T> tape;
  Binder<T> p(tape, store);
  return tape.value(encode_volume(p, cfg, volume));
}

}  // namespace brain3d
