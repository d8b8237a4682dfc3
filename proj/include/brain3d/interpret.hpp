#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "brain3d/model.hpp"
#include "brain3d/volume.hpp"

namespace brain3d {

using Mask = std::vector<std::uint8_t>;

/// Voxels above fraction * (99th percentile of non-zero voxels), largest
/// 6-connected component only.
Mask brain_mask(const Volume& volume, double threshold_fraction = 0.1);

/// Component sizes are compared on 6-connectivity; ties keep the component met first in raster order.
Mask largest_component(const Mask& mask, Dims dims);

struct SupervoxelMap {
  Dims dims;
  std::vector<int> labels;                     // 0 outside the mask, 1..count inside
  int count = 0;
  std::vector<std::array<double, 4>> centroids;  // (z, y, x, intensity) per label
};

struct SlicConfig {
  int n_supervoxels = 25;
  double compactness = 0.1;
  int iterations = 10;
};

SupervoxelMap slic_supervoxels(const Volume& volume, const Mask& mask, int n_supervoxels, double compactness,
                               int iterations = 10);

/// Copy of `volume` with every voxel of the listed supervoxels set to `fill`.
Volume hide_supervoxels(const Volume& volume, const SupervoxelMap& map, const std::set<int>& hidden,
                        float fill = 0.0f);

/// Mean per-token log-likelihood of the reference report given the volume
/// with the hidden supervoxels filled with 0.
double lime_score(const Model<float>& model, const Volume& volume, const SupervoxelMap& map,
                  const std::set<int>& hidden, const std::string& reference_report);

struct LimeConfig {
  int n_samples = 200;
  double kernel_width = 0.25;
  double ridge = 1e-3;
  std::uint64_t seed = 0;
};

/// Black box over presence vectors: z[i] = 1 keeps supervoxel i + 1.
using PresenceScorer = std::function<double(const std::vector<std::uint8_t>& z)>;

struct LimeFit {
  std::vector<double> weights;  // one per supervoxel
  double intercept = 0.0;
  double r2 = 0.0;              // weighted R^2 of the surrogate
  std::vector<std::vector<std::uint8_t>> samples;
  std::vector<double> scores;
};

/// Draws presence vectors (the first keeps everything), scores them, and fits
/// a kernel-weighted ridge surrogate with an unpenalised intercept.
LimeFit lime_fit(int n_features, const PresenceScorer& scorer, const LimeConfig& cfg);

struct AttributionMap {
  std::vector<double> weights;
  double intercept = 0.0;
  double r2 = 0.0;
  Volume voxel_weights;  // per-voxel supervoxel weight, 0 outside the mask
};

Volume project_weights(const SupervoxelMap& map, const std::vector<double>& weights);

AttributionMap lime_attribute(const Model<float>& model, const Volume& volume, const SupervoxelMap& map,
                              const std::string& reference_report, const LimeConfig& cfg);

nlohmann::json attribution_sidecar(const AttributionMap& attribution, const SupervoxelMap& map,
                                   const nlohmann::json& config);

}  // namespace brain3d
