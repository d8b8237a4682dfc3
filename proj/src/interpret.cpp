#include "brain3d/interpret.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <queue>
#include <random>

#include "brain3d/trainer.hpp"

namespace brain3d {

namespace {

struct Coord {
  long z, y, x;
};

Coord coord_of(std::size_t i, Dims d) {
  const auto x = static_cast<long>(i % d.width);
  const auto y = static_cast<long>((i / d.width) % d.height);
  const auto z = static_cast<long>(i / (d.width * d.height));
  return {z, y, x};
}

}  // namespace

Mask largest_component(const Mask& mask, Dims dims) {
  if (mask.size() != dims.count()) throw ShapeError("largest_component: mask size mismatch");
  std::vector<int> comp(mask.size(), -1);
  std::vector<std::size_t> sizes;
  const std::array<std::array<long, 3>, 6> steps{{{1, 0, 0}, {-1, 0, 0}, {0, 1, 0}, {0, -1, 0}, {0, 0, 1}, {0, 0, -1}}};
  for (std::size_t seed = 0; seed < mask.size(); ++seed) {
    if (!mask[seed] || comp[seed] >= 0) continue;
    const int id = static_cast<int>(sizes.size());
    std::size_t size = 0;
    std::queue<std::size_t> queue;
    queue.push(seed);
    comp[seed] = id;
    while (!queue.empty()) {
      const std::size_t cur = queue.front();
      queue.pop();
      ++size;
      const Coord c = coord_of(cur, dims);
      for (const auto& s : steps) {
        const long z = c.z + s[0], y = c.y + s[1], x = c.x + s[2];
        if (z < 0 || y < 0 || x < 0 || z >= static_cast<long>(dims.depth) || y >= static_cast<long>(dims.height) ||
            x >= static_cast<long>(dims.width)) {
          continue;
        }
        const std::size_t n = (static_cast<std::size_t>(z) * dims.height + static_cast<std::size_t>(y)) * dims.width +
                              static_cast<std::size_t>(x);
        if (mask[n] && comp[n] < 0) {
          comp[n] = id;
          queue.push(n);
        }
      }
    }
    sizes.push_back(size);
  }
  Mask out(mask.size(), 0);
  if (sizes.empty()) return out;
  const int best = static_cast<int>(std::max_element(sizes.begin(), sizes.end()) - sizes.begin());
  for (std::size_t i = 0; i < mask.size(); ++i) out[i] = comp[i] == best ? 1 : 0;
  return out;
}

Mask brain_mask(const Volume& volume, double threshold_fraction) {
  if (volume.voxels.size() != volume.dims.count()) throw ShapeError("brain_mask: voxel count mismatch");
  std::vector<float> nonzero;
  for (float v : volume.voxels) {
    if (v != 0.0f) nonzero.push_back(v);
  }
  if (nonzero.empty()) throw DegenerateInputError("brain_mask: volume has no non-zero voxels");
  const double threshold = threshold_fraction * percentile(std::span<const float>(nonzero), 99.0);
  Mask raw(volume.voxels.size(), 0);
  for (std::size_t i = 0; i < raw.size(); ++i) raw[i] = volume.voxels[i] > threshold ? 1 : 0;
  Mask out = largest_component(raw, volume.dims);
  if (std::none_of(out.begin(), out.end(), [](std::uint8_t m) { return m != 0; })) {
    throw DegenerateInputError("brain_mask: empty mask");
  }
  return out;
}

SupervoxelMap slic_supervoxels(const Volume& volume, const Mask& mask, int n_supervoxels, double compactness,
                               int iterations) {
  const Dims d = volume.dims;
  if (mask.size() != d.count() || volume.voxels.size() != d.count()) throw ShapeError("slic: size mismatch");
  std::vector<std::size_t> inside;
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (mask[i]) inside.push_back(i);
  }
  if (inside.empty()) throw DegenerateInputError("slic: empty mask");
  if (n_supervoxels < 1) throw ConfigError("slic: need at least one supervoxel");
  if (static_cast<std::size_t>(n_supervoxels) > inside.size()) throw ConfigError("slic: more supervoxels than voxels");
  if (compactness < 0.0) throw ConfigError("slic: compactness must be >= 0");
  const auto k = static_cast<std::size_t>(n_supervoxels);
  const double step = std::cbrt(static_cast<double>(inside.size()) / static_cast<double>(k));

  // Regular grid seeds that land inside the mask.
  std::vector<std::size_t> seeds;
  for (double z = step / 2; z < static_cast<double>(d.depth); z += step) {
    for (double y = step / 2; y < static_cast<double>(d.height); y += step) {
      for (double x = step / 2; x < static_cast<double>(d.width); x += step) {
        const std::size_t i = volume.index(static_cast<std::size_t>(z), static_cast<std::size_t>(y),
                                           static_cast<std::size_t>(x));
        if (mask[i]) seeds.push_back(i);
      }
    }
  }
  if (seeds.size() > k) {
    std::vector<std::size_t> kept;
    for (std::size_t j = 0; j < k; ++j) kept.push_back(seeds[j * seeds.size() / k]);
    seeds = std::move(kept);
  }
  // Too few grid points inside the mask: add the masked voxel farthest from all seeds.
  std::vector<double> nearest(inside.size(), std::numeric_limits<double>::infinity());
  auto dist2 = [&](std::size_t a, std::size_t b) {
    const Coord p = coord_of(a, d), q = coord_of(b, d);
    return static_cast<double>((p.z - q.z) * (p.z - q.z) + (p.y - q.y) * (p.y - q.y) + (p.x - q.x) * (p.x - q.x));
  };
  for (std::size_t s : seeds) {
    for (std::size_t j = 0; j < inside.size(); ++j) nearest[j] = std::min(nearest[j], dist2(inside[j], s));
  }
  while (seeds.size() < k) {
    const std::size_t j = static_cast<std::size_t>(std::max_element(nearest.begin(), nearest.end()) - nearest.begin());
    seeds.push_back(inside[j]);
    for (std::size_t t = 0; t < inside.size(); ++t) nearest[t] = std::min(nearest[t], dist2(inside[t], inside[j]));
  }

  std::vector<std::array<double, 4>> centers;
  for (std::size_t s : seeds) {
    const Coord c = coord_of(s, d);
    centers.push_back({static_cast<double>(c.z), static_cast<double>(c.y), static_cast<double>(c.x),
                       static_cast<double>(volume.voxels[s])});
  }
  const double spatial = compactness / step;
  auto distance = [&](const std::array<double, 4>& c, std::size_t i) {
    const Coord p = coord_of(i, d);
    const double dz = p.z - c[0], dy = p.y - c[1], dx = p.x - c[2];
    const double di = volume.voxels[i] - c[3];
    return di * di + spatial * spatial * (dz * dz + dy * dy + dx * dx);
  };

  std::vector<int> assign(d.count(), -1);
  const long reach = static_cast<long>(std::ceil(step));
  for (int it = 0; it < std::max(iterations, 0); ++it) {
    std::vector<double> best(d.count(), std::numeric_limits<double>::infinity());
    std::fill(assign.begin(), assign.end(), -1);
    for (std::size_t c = 0; c < centers.size(); ++c) {
      const long cz = std::lround(centers[c][0]), cy = std::lround(centers[c][1]), cx = std::lround(centers[c][2]);
      for (long z = std::max(0L, cz - reach); z <= std::min<long>(static_cast<long>(d.depth) - 1, cz + reach); ++z) {
        for (long y = std::max(0L, cy - reach); y <= std::min<long>(static_cast<long>(d.height) - 1, cy + reach); ++y) {
          for (long x = std::max(0L, cx - reach); x <= std::min<long>(static_cast<long>(d.width) - 1, cx + reach);
               ++x) {
            const std::size_t i = volume.index(static_cast<std::size_t>(z), static_cast<std::size_t>(y),
                                               static_cast<std::size_t>(x));
            if (!mask[i]) continue;
            const double dist = distance(centers[c], i);
            if (dist < best[i]) {
              best[i] = dist;
              assign[i] = static_cast<int>(c);
            }
          }
        }
      }
    }
    std::vector<std::array<double, 4>> sums(centers.size(), {0, 0, 0, 0});
    std::vector<std::size_t> counts(centers.size(), 0);
    for (std::size_t i : inside) {
      if (assign[i] < 0) continue;
      const Coord p = coord_of(i, d);
      auto& s = sums[static_cast<std::size_t>(assign[i])];
      s[0] += p.z, s[1] += p.y, s[2] += p.x, s[3] += volume.voxels[i];
      ++counts[static_cast<std::size_t>(assign[i])];
    }
    for (std::size_t c = 0; c < centers.size(); ++c) {
      if (counts[c] == 0) continue;
      for (int a = 0; a < 4; ++a) centers[c][a] = sums[c][a] / static_cast<double>(counts[c]);
    }
  }
  for (std::size_t i : inside) {
    if (assign[i] >= 0) continue;
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < centers.size(); ++c) {
      const double dist = distance(centers[c], i);
      if (dist < best) best = dist, assign[i] = static_cast<int>(c);
    }
  }

  // Compact labels to 1..count in order of first appearance.
  SupervoxelMap out;
  out.dims = d;
  out.labels.assign(d.count(), 0);
  std::vector<int> relabel(centers.size(), 0);
  for (std::size_t i : inside) {
    int& r = relabel[static_cast<std::size_t>(assign[i])];
    if (r == 0) r = ++out.count;
    out.labels[i] = r;
  }
  out.centroids.assign(static_cast<std::size_t>(out.count), {0, 0, 0, 0});
  std::vector<std::size_t> counts(static_cast<std::size_t>(out.count), 0);
  for (std::size_t i : inside) {
    const auto l = static_cast<std::size_t>(out.labels[i] - 1);
    const Coord p = coord_of(i, d);
    auto& c = out.centroids[l];
    c[0] += p.z, c[1] += p.y, c[2] += p.x, c[3] += volume.voxels[i];
    ++counts[l];
  }
  for (std::size_t l = 0; l < counts.size(); ++l) {
    for (int a = 0; a < 4; ++a) out.centroids[l][a] /= static_cast<double>(counts[l]);
  }
  return out;
}

Volume hide_supervoxels(const Volume& volume, const SupervoxelMap& map, const std::set<int>& hidden, float fill) {
  if (map.dims != volume.dims) throw ShapeError("hide_supervoxels: map and volume dims differ");
  Volume out = volume;
  if (hidden.empty()) return out;
  for (std::size_t i = 0; i < out.voxels.size(); ++i) {
    if (map.labels[i] > 0 && hidden.count(map.labels[i])) out.voxels[i] = fill;
  }
  return out;
}

double lime_score(const Model<float>& model, const Volume& volume, const SupervoxelMap& map,
                  const std::set<int>& hidden, const std::string& reference_report) {
  const Volume perturbed = hide_supervoxels(volume, map, hidden);
  const auto report = report_ids(model.vocab, reference_report);
  const auto prompt = prompt_ids(model.vocab);
  ag::Tape<float> tape;
  Binder<float> p(tape, model.params);
  ag::Var z = tape.constant(visual_tokens(model, perturbed));
  return -static_cast<double>(tape.value(report_loss(p, model, z, prompt, report, model.has_lora()))(0, 0));
}

LimeFit lime_fit(int n_features, const PresenceScorer& scorer, const LimeConfig& cfg) {
  if (n_features < 1) throw ConfigError("lime: need at least one feature");
  if (cfg.n_samples < n_features + 1) throw ConfigError("lime: n_samples must be >= K_sv + 1");
  if (!(cfg.kernel_width > 0.0)) throw ConfigError("lime: kernel width must be positive");
  const auto k = static_cast<std::size_t>(n_features);
  std::mt19937_64 rng(cfg.seed);
  std::bernoulli_distribution keep(0.5);
  LimeFit fit;
  for (int s = 0; s < cfg.n_samples; ++s) {
    std::vector<std::uint8_t> z(k, 1);
    if (s > 0) {
      for (auto& b : z) b = keep(rng) ? 1 : 0;
    }
    fit.samples.push_back(z);
  }
  for (const auto& z : fit.samples) fit.scores.push_back(scorer(z));

  const auto n = static_cast<Eigen::Index>(fit.samples.size());
  const auto cols = static_cast<Eigen::Index>(k) + 1;
  Eigen::MatrixXd x(n, cols);
  Eigen::VectorXd y(n), w(n);
  for (Eigen::Index s = 0; s < n; ++s) {
    const auto& z = fit.samples[static_cast<std::size_t>(s)];
    x(s, 0) = 1.0;
    double kept = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      x(s, static_cast<Eigen::Index>(j) + 1) = z[j];
      kept += z[j];
    }
    const double dist = 1.0 - kept / static_cast<double>(k);
    w(s) = std::exp(-dist * dist / (cfg.kernel_width * cfg.kernel_width));
    y(s) = fit.scores[static_cast<std::size_t>(s)];
  }
  Eigen::MatrixXd gram = x.transpose() * w.asDiagonal() * x;
  gram.diagonal().tail(cols - 1).array() += cfg.ridge;
  const Eigen::VectorXd rhs = x.transpose() * (w.asDiagonal() * y);
  Eigen::LDLT<Eigen::MatrixXd> ldlt(gram);
  if (ldlt.info() != Eigen::Success || !ldlt.isPositive()) throw NumericError("lime: singular surrogate design");
  const Eigen::VectorXd theta = ldlt.solve(rhs);
  if (!theta.allFinite()) throw NumericError("lime: non-finite surrogate coefficients");
  fit.intercept = theta(0);
  fit.weights.assign(theta.data() + 1, theta.data() + cols);

  const double wsum = w.sum();
  const double ybar = w.dot(y) / wsum;
  const Eigen::VectorXd resid = y - x * theta;
  const double ss_res = w.dot(resid.cwiseProduct(resid));
  const double ss_tot = w.dot((y.array() - ybar).square().matrix());
  fit.r2 = ss_tot > 0.0 ? 1.0 - ss_res / ss_tot : 1.0;
  return fit;
}

Volume project_weights(const SupervoxelMap& map, const std::vector<double>& weights) {
  if (weights.size() != static_cast<std::size_t>(map.count)) throw ShapeError("project_weights: weight count mismatch");
  Volume out(map.dims, 0.0f);
  for (std::size_t i = 0; i < out.voxels.size(); ++i) {
    if (map.labels[i] > 0) out.voxels[i] = static_cast<float>(weights[static_cast<std::size_t>(map.labels[i] - 1)]);
  }
  return out;
}

AttributionMap lime_attribute(const Model<float>& model, const Volume& volume, const SupervoxelMap& map,
                              const std::string& reference_report, const LimeConfig& cfg) {
  const PresenceScorer scorer = [&](const std::vector<std::uint8_t>& z) {
    std::set<int> hidden;
    for (std::size_t j = 0; j < z.size(); ++j) {
      if (!z[j]) hidden.insert(static_cast<int>(j) + 1);
    }
    return lime_score(model, volume, map, hidden, reference_report);
  };
  const LimeFit fit = lime_fit(map.count, scorer, cfg);
  return AttributionMap{fit.weights, fit.intercept, fit.r2, project_weights(map, fit.weights)};
}

nlohmann::json attribution_sidecar(const AttributionMap& a, const SupervoxelMap& map, const nlohmann::json& config) {
  nlohmann::json sv = nlohmann::json::array();
  for (int l = 1; l <= map.count; ++l) {
    const auto& c = map.centroids[static_cast<std::size_t>(l - 1)];
    sv.push_back({{"label", l},
                  {"weight", a.weights[static_cast<std::size_t>(l - 1)]},
                  {"centroid", {c[0], c[1], c[2]}},
                  {"mean_intensity", c[3]}});
  }
  return {{"n_supervoxels", map.count}, {"intercept", a.intercept}, {"r2", a.r2}, {"supervoxels", sv},
          {"config", config}};
}

}  // namespace brain3d
