#include "brain3d/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <numeric>
#include <random>

#include "brain3d/errors.hpp"

namespace brain3d {

namespace {

constexpr float kBrainIntensity = 0.4f;
constexpr float kVentricleIntensity = 0.15f;
constexpr double kNoiseSigma = 0.02;

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

struct Ellipsoid {
  std::array<double, 3> center;  // z, y, x
  std::array<double, 3> radii;

  double rho2(double z, double y, double x) const {
    const double a = (z - center[0]) / radii[0];
    const double b = (y - center[1]) / radii[1];
    const double c = (x - center[2]) / radii[2];
    return a * a + b * b + c * c;
  }
};

// Fractional (z, y) lesion centres per anatomy label, and the lateral offset
// from the midline as a fraction of width.
struct Site {
  double z;
  double y;
  double x_left;
};

Site site_for(const std::string& anatomy) {
  if (anatomy == "frontal") return {0.55, 0.25, 0.27};
  if (anatomy == "parietal") return {0.70, 0.60, 0.27};
  if (anatomy == "temporal") return {0.30, 0.45, 0.25};
  if (anatomy == "occipital") return {0.50, 0.78, 0.28};
  if (anatomy == "ventricle") return {0.50, 0.50, 0.33};
  throw ConfigError("unknown anatomy label: " + anatomy);
}

std::string location_phrase(Laterality lat, const std::string& anatomy) {
  const bool ventricle = anatomy == "ventricle";
  switch (lat) {
    case Laterality::kLeft:
    case Laterality::kRight: {
      const std::string side = to_string(lat);
      return ventricle ? side + " periventricular region adjacent to the ventricle" : side + " " + anatomy + " lobe";
    }
    case Laterality::kBilateral:
      return ventricle ? "periventricular region of both hemispheres adjacent to the ventricle"
                       : anatomy + " lobes of both hemispheres";
    case Laterality::kUndefined:
    case Laterality::kNone:
      return ventricle ? "periventricular region adjacent to the ventricle" : anatomy + " region";
  }
  return {};
}

}  // namespace

std::string to_string(SubjectClass c) { return c == SubjectClass::kHealthy ? "healthy" : "pathological"; }

std::string to_string(Laterality l) {
  switch (l) {
    case Laterality::kLeft: return "left";
    case Laterality::kRight: return "right";
    case Laterality::kBilateral: return "bilateral";
    case Laterality::kUndefined: return "undefined";
    case Laterality::kNone: return "none";
  }
  return "none";
}

SubjectClass subject_class_from_string(const std::string& s) {
  if (s == "healthy") return SubjectClass::kHealthy;
  if (s == "pathological") return SubjectClass::kPathological;
  throw ConfigError("unknown subject class: " + s);
}

Laterality laterality_from_string(const std::string& s) {
  for (auto l : {Laterality::kLeft, Laterality::kRight, Laterality::kBilateral, Laterality::kUndefined,
                 Laterality::kNone}) {
    if (to_string(l) == s) return l;
  }
  throw ConfigError("unknown laterality: " + s);
}

void CohortConfig::validate() const {
  const double sum = std::accumulate(laterality_mix.begin(), laterality_mix.end(), 0.0);
  if (std::abs(sum - 1.0) > 1e-9) throw ConfigError("cohort: laterality mix must sum to 1");
  if (std::any_of(laterality_mix.begin(), laterality_mix.end(), [](double f) { return f < 0.0; })) {
    throw ConfigError("cohort: laterality fractions must be non-negative");
  }
  if (volume_dims.depth < 4 || volume_dims.height < 8 || volume_dims.width < 8) {
    throw ConfigError("cohort: volume dims too small");
  }
}

std::string render_report(SubjectClass subject_class, Laterality laterality, const std::string& anatomy,
                          const std::set<std::string>& pathology) {
  if (subject_class == SubjectClass::kHealthy) return "No abnormality detected. Normal brain MRI.";
  std::string r = "The lesion area is in the " + location_phrase(laterality, anatomy) + " with mixed signal intensity.";
  if (pathology.count("edema")) r += " Edema is observed around the lesion, indicating swelling of the surrounding tissue.";
  if (pathology.count("necrosis")) r += " Necrosis is observed in the lesion core with low signal.";
  if (pathology.count("enhancement")) r += " Enhancement is observed at the lesion margin.";
  if (pathology.count("compression")) r += " Ventricular compression is present, suggesting pressure effects of the lesion.";
  return r;
}

std::vector<std::string> template_bank_reports() {
  std::vector<std::string> out{render_report(SubjectClass::kHealthy, Laterality::kNone, "", {})};
  const std::array<const char*, 3> optional{"necrosis", "enhancement", "compression"};
  for (auto lat : {Laterality::kLeft, Laterality::kRight, Laterality::kBilateral, Laterality::kUndefined}) {
    for (const char* anatomy : kAnatomyLabels) {
      for (int mask = 0; mask < 8; ++mask) {
        std::set<std::string> path{"edema"};
        for (int b = 0; b < 3; ++b) {
          if (mask & (1 << b)) path.insert(optional[b]);
        }
        out.push_back(render_report(SubjectClass::kPathological, lat, anatomy, path));
      }
    }
  }
  return out;
}

SubjectRecord generate_subject(std::uint64_t seed, SubjectClass subject_class, Laterality laterality,
                               const CohortConfig& cfg) {
  cfg.validate();
  std::mt19937_64 rng(splitmix64(seed));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> noise(0.0, kNoiseSigma);

  const Dims dims = cfg.volume_dims;
  const double D = static_cast<double>(dims.depth), H = static_cast<double>(dims.height),
               W = static_cast<double>(dims.width);
  const double mid_x = (W - 1.0) / 2.0;

  SubjectRecord rec;
  rec.seed = seed;
  char id[32];
  std::snprintf(id, sizeof id, "sub-%016llx", static_cast<unsigned long long>(seed));
  rec.subject_id = id;
  rec.subject_class = subject_class;
  rec.laterality = subject_class == SubjectClass::kHealthy ? Laterality::kNone : laterality;
  if (subject_class == SubjectClass::kPathological && laterality == Laterality::kNone) {
    throw ConfigError("pathological subject needs a laterality");
  }

  const Ellipsoid brain{{(D - 1) / 2, (H - 1) / 2, mid_x}, {0.44 * D, 0.44 * H, 0.42 * W}};
  const double vent_dx = 0.08 * W;
  std::array<Ellipsoid, 2> ventricles{
      Ellipsoid{{0.5 * (D - 1), 0.5 * (H - 1), mid_x - vent_dx}, {0.18 * D, 0.16 * H, 0.045 * W}},   // left
      Ellipsoid{{0.5 * (D - 1), 0.5 * (H - 1), mid_x + vent_dx}, {0.18 * D, 0.16 * H, 0.045 * W}}};  // right

  std::set<std::string> pathology;
  Ellipsoid core{}, halo{};
  bool necrosis = false, enhancement = false;
  if (subject_class == SubjectClass::kPathological) {
    rec.anatomy = kAnatomyLabels[static_cast<std::size_t>(unit(rng) * kAnatomyLabels.size()) % kAnatomyLabels.size()];
    const double rc = 0.05 + 0.04 * unit(rng);
    necrosis = rc >= 0.07;
    enhancement = unit(rng) < 0.5;
    const bool compression = unit(rng) < 0.35;
    pathology.insert("edema");
    if (necrosis) pathology.insert("necrosis");
    if (enhancement) pathology.insert("enhancement");
    if (compression) pathology.insert("compression");

    const Site site = site_for(rec.anatomy);
    const double jz = (unit(rng) - 0.5) * 0.06, jy = (unit(rng) - 0.5) * 0.06, jx = (unit(rng) - 0.5) * 0.04;
    const double zc = (site.z + jz) * (D - 1), yc = (site.y + jy) * (H - 1);
    core.radii = {rc * D * 1.6, rc * H, rc * W};
    halo.radii = {core.radii[0] + 0.06 * D * 1.6, core.radii[1] + 0.06 * H, core.radii[2] + 0.06 * W};
    double xc = mid_x;
    switch (laterality) {
      case Laterality::kLeft:
      case Laterality::kRight: {
        double x_left = (site.x_left + jx) * (W - 1);
        // Every lesion voxel index must stay strictly inside its hemisphere.
        x_left = std::min(x_left, W / 2.0 - 1.0 - halo.radii[2]);
        xc = laterality == Laterality::kLeft ? x_left : (W - 1.0) - x_left;
        break;
      }
      case Laterality::kBilateral:
        core.radii[2] = 0.20 * W;
        halo.radii[2] = 0.30 * W;
        break;
      default:
        break;
    }
    core.center = halo.center = {zc, yc, xc};
    rec.lesion_center = {zc, yc, xc};

    if (compression) {
      for (int side = 0; side < 2; ++side) {
        const bool affected = (laterality == Laterality::kLeft && side == 0) ||
                              (laterality == Laterality::kRight && side == 1) ||
                              laterality == Laterality::kBilateral || laterality == Laterality::kUndefined;
        if (affected) {
          ventricles[side].radii[1] *= 0.5;
          ventricles[side].radii[2] *= 0.5;
        }
      }
    }
  }

  rec.volume = Volume(dims);
  rec.brain_mask.assign(dims.count(), 0);
  rec.lesion_mask.assign(dims.count(), 0);
  for (std::size_t z = 0; z < dims.depth; ++z)
    for (std::size_t y = 0; y < dims.height; ++y)
      for (std::size_t x = 0; x < dims.width; ++x) {
        const double fz = static_cast<double>(z), fy = static_cast<double>(y), fx = static_cast<double>(x);
        if (brain.rho2(fz, fy, fx) > 1.0) continue;
        const std::size_t i = rec.volume.index(z, y, x);
        rec.brain_mask[i] = 1;
        double v = kBrainIntensity;
        for (const auto& vent : ventricles) {
          if (vent.rho2(fz, fy, fx) <= 1.0) v = kVentricleIntensity;
        }
        if (subject_class == SubjectClass::kPathological) {
          const double h2 = halo.rho2(fz, fy, fx);
          if (h2 <= 1.0) {
            rec.lesion_mask[i] = 1;
            v = 0.55 + 0.25 * (1.0 - h2);
            const double c2 = core.rho2(fz, fy, fx);
            if (c2 <= 1.0) v = enhancement ? 0.95 : 0.7;
            if (necrosis && c2 <= 0.25) v = 0.1;
          }
        }
        rec.volume.voxels[i] = static_cast<float>(std::max(0.0, v + noise(rng)));
      }

  rec.findings.pathology = pathology;
  if (subject_class == SubjectClass::kPathological) {
    rec.findings.anatomy.insert(rec.anatomy);
    if (laterality != Laterality::kUndefined) rec.findings.laterality.insert(to_string(laterality));
  }
  rec.report = render_report(subject_class, rec.laterality, rec.anatomy, pathology);
  return rec;
}

std::array<std::size_t, 4> laterality_counts(std::size_t n, const std::array<double, 4>& mix) {
  std::array<std::size_t, 4> counts{};
  std::array<double, 4> rem{};
  std::size_t assigned = 0;
  for (std::size_t i = 0; i < 4; ++i) {
    const double exact = mix[i] * static_cast<double>(n);
    counts[i] = static_cast<std::size_t>(std::floor(exact));
    rem[i] = exact - static_cast<double>(counts[i]);
    assigned += counts[i];
  }
  std::array<std::size_t, 4> order{0, 1, 2, 3};
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return rem[a] > rem[b]; });
  for (std::size_t k = 0; assigned < n; ++k, ++assigned) ++counts[order[k % 4]];
  return counts;
}

std::vector<SubjectRecord> build_cohort(const CohortConfig& cfg) {
  cfg.validate();
  const auto counts = laterality_counts(cfg.n_pathological, cfg.laterality_mix);
  std::vector<Laterality> lats;
  const std::array<Laterality, 4> kinds{Laterality::kLeft, Laterality::kRight, Laterality::kBilateral,
                                        Laterality::kUndefined};
  for (std::size_t i = 0; i < 4; ++i) lats.insert(lats.end(), counts[i], kinds[i]);
  std::mt19937_64 rng(splitmix64(cfg.seed ^ 0xC0407ull));
  std::shuffle(lats.begin(), lats.end(), rng);

  std::vector<SubjectRecord> out;
  const std::size_t total = cfg.n_pathological + cfg.n_healthy;
  out.reserve(total);
  for (std::size_t i = 0; i < total; ++i) {
    const bool path = i < cfg.n_pathological;
    const std::uint64_t seed = splitmix64(cfg.seed * 0x100000001B3ull + i + 1);
    SubjectRecord rec = generate_subject(seed, path ? SubjectClass::kPathological : SubjectClass::kHealthy,
                                         path ? lats[i] : Laterality::kNone, cfg);
    char id[32];
    std::snprintf(id, sizeof id, "sub-%04zu", i + 1);
    rec.subject_id = id;
    out.push_back(std::move(rec));
  }
  return out;
}

CohortSplit split_cohort(const std::vector<SubjectRecord>& cohort, const std::array<double, 3>& ratios,
                         std::uint64_t seed) {
  const double sum = ratios[0] + ratios[1] + ratios[2];
  if (std::abs(sum - 1.0) > 1e-9 || std::any_of(ratios.begin(), ratios.end(), [](double r) { return r < 0.0; })) {
    throw ConfigError("split ratios must be non-negative and sum to 1");
  }
  std::map<std::pair<int, int>, std::vector<std::string>> strata;
  for (const auto& r : cohort) {
    strata[{static_cast<int>(r.subject_class), static_cast<int>(r.laterality)}].push_back(r.subject_id);
  }
  std::mt19937_64 rng(splitmix64(seed ^ 0x5B117ull));
  CohortSplit split;
  for (auto& [key, ids] : strata) {
    std::sort(ids.begin(), ids.end());
    std::shuffle(ids.begin(), ids.end(), rng);
    const auto n = ids.size();
    std::array<std::size_t, 3> counts{};
    std::array<double, 3> rem{};
    std::size_t assigned = 0;
    for (std::size_t s = 0; s < 3; ++s) {
      const double exact = ratios[s] * static_cast<double>(n);
      counts[s] = static_cast<std::size_t>(std::floor(exact));
      rem[s] = exact - static_cast<double>(counts[s]);
      assigned += counts[s];
    }
    std::array<std::size_t, 3> order{0, 1, 2};
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return rem[a] > rem[b]; });
    for (std::size_t k = 0; assigned < n; ++k, ++assigned) ++counts[order[k % 3]];

    auto it = ids.begin();
    for (std::size_t s = 0; s < 3; ++s) {
      auto& dst = s == 0 ? split.train : (s == 1 ? split.val : split.test);
      dst.insert(dst.end(), it, it + static_cast<long>(counts[s]));
      it += static_cast<long>(counts[s]);
    }
  }
  std::sort(split.train.begin(), split.train.end());
  std::sort(split.val.begin(), split.val.end());
  std::sort(split.test.begin(), split.test.end());
  return split;
}

nlohmann::json manifest_record(const SubjectRecord& r, const std::string& volume_path) {
  return {{"subject_id", r.subject_id},
          {"class", to_string(r.subject_class)},
          {"laterality", to_string(r.laterality)},
          {"anatomy", r.anatomy},
          {"pathology", std::vector<std::string>(r.findings.pathology.begin(), r.findings.pathology.end())},
          {"report", r.report},
          {"volume", volume_path},
          {"lesion_center", r.lesion_center},
          {"seed", r.seed}};
}

nlohmann::json split_to_json(const CohortSplit& s) { return {{"train", s.train}, {"val", s.val}, {"test", s.test}}; }

CohortSplit split_from_json(const nlohmann::json& j) {
  return {j.at("train").get<std::vector<std::string>>(), j.at("val").get<std::vector<std::string>>(),
          j.at("test").get<std::vector<std::string>>()};
}

}  // namespace brain3d
