#include "brain3d/encoder3d.hpp"

#include <cmath>

namespace brain3d {

Dims EncoderConfig::grid() const {
  validate();
  return Dims{volume_dims.depth / patch.depth, volume_dims.height / patch.height, volume_dims.width / patch.width};
}

void EncoderConfig::validate() const {
  if (patch.depth == 0 || patch.height == 0 || patch.width == 0) throw ConfigError("encoder: patch dims must be >= 1");
  if (volume_dims.depth % patch.depth || volume_dims.height % patch.height || volume_dims.width % patch.width) {
    throw ShapeError("encoder: volume dims not divisible by patch dims");
  }
  if (width <= 0 || heads <= 0 || width % heads != 0) throw ConfigError("encoder: width must be divisible by heads");
  if (layers < 0 || mlp_ratio <= 0) throw ConfigError("encoder: invalid depth or mlp ratio");
}

PatchEmbedKernel2D random_patch_kernel_2d(std::size_t out_dim, std::size_t patch_h, std::size_t patch_w,
                                          std::mt19937_64& rng) {
  const double fan_in = 3.0 * static_cast<double>(patch_h * patch_w);
  PatchEmbedKernel2D k;
  k.out_dim = out_dim;
  k.patch_h = patch_h;
  k.patch_w = patch_w;
  k.weights = random_normal<double>(static_cast<Eigen::Index>(out_dim), static_cast<Eigen::Index>(3 * patch_h * patch_w),
                                    1.0 / std::sqrt(fan_in), rng);
  k.bias = random_normal<double>(1, static_cast<Eigen::Index>(out_dim), 0.01, rng);
  return k;
}

PatchEmbedKernel3D inflate_patch_embed(const PatchEmbedKernel2D& k2d, std::size_t patch_d) {
  if (patch_d < 1) throw ConfigError("inflate: patch_d must be >= 1");
  const auto plane = static_cast<Eigen::Index>(k2d.patch_h * k2d.patch_w);
  const auto out = static_cast<Eigen::Index>(k2d.out_dim);
  if (k2d.weights.rows() != out || k2d.weights.cols() != 3 * plane) throw ShapeError("inflate: 2D kernel shape");

  Matrix<double> collapsed = Matrix<double>::Zero(out, plane);
  for (int c = 0; c < 3; ++c) collapsed += k2d.weights.middleCols(c * plane, plane);

  PatchEmbedKernel3D k3d;
  k3d.out_dim = k2d.out_dim;
  k3d.patch_d = patch_d;
  k3d.patch_h = k2d.patch_h;
  k3d.patch_w = k2d.patch_w;
  k3d.weights.resize(out, plane * static_cast<Eigen::Index>(patch_d));
  for (std::size_t dz = 0; dz < patch_d; ++dz) {
    k3d.weights.middleCols(static_cast<Eigen::Index>(dz) * plane, plane) = collapsed / static_cast<double>(patch_d);
  }
  k3d.bias = k2d.bias;
  return k3d;
}

PositionalEmbedding3D build_pos_embed(const Matrix<double>& p2d, Dims grid) {
  if (p2d.rows() != static_cast<Eigen::Index>(grid.height * grid.width)) {
    throw ConfigError("pos embed: 2D table does not cover grid_h x grid_w");
  }
  PositionalEmbedding3D pos;
  pos.grid = grid;
  pos.spatial = p2d;
  pos.depth = Matrix<double>::Zero(static_cast<Eigen::Index>(grid.depth), p2d.cols());
  return pos;
}

Matrix<double> patch_embed_2d(const PatchEmbedKernel2D& kernel, const std::array<Matrix<double>, 3>& rgb) {
  const Eigen::Index h = rgb[0].rows(), w = rgb[0].cols();
  const auto ph = static_cast<Eigen::Index>(kernel.patch_h), pw = static_cast<Eigen::Index>(kernel.patch_w);
  if (h % ph || w % pw) throw ShapeError("patch_embed_2d: image not divisible by patch");
  const Eigen::Index gh = h / ph, gw = w / pw;
  Matrix<double> out(gh * gw, static_cast<Eigen::Index>(kernel.out_dim));
  RowVector<double> patch(3 * ph * pw);
  for (Eigen::Index y = 0; y < gh; ++y)
    for (Eigen::Index x = 0; x < gw; ++x) {
      Eigen::Index col = 0;
      for (int c = 0; c < 3; ++c)
        for (Eigen::Index dy = 0; dy < ph; ++dy)
          for (Eigen::Index dx = 0; dx < pw; ++dx) patch(col++) = rgb[c](y * ph + dy, x * pw + dx);
      out.row(y * gw + x) = patch * kernel.weights.transpose() + kernel.bias;
    }
  return out;
}

Matrix<double> patch_embed_3d(const PatchEmbedKernel3D& kernel, const Volume& volume) {
  const Matrix<double> patches =
      extract_patches<double>(volume, Dims{kernel.patch_d, kernel.patch_h, kernel.patch_w});
  Matrix<double> out = patches * kernel.weights.transpose();
  out.rowwise() += kernel.bias;
  return out;
}

}  // namespace brain3d
