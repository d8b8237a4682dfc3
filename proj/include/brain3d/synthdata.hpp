#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "brain3d/evalsuite.hpp"
#include "brain3d/volume.hpp"

namespace brain3d {

enum class SubjectClass { kPathological, kHealthy };
enum class Laterality { kLeft, kRight, kBilateral, kUndefined, kNone };

inline constexpr std::array<const char*, 5> kAnatomyLabels{"frontal", "parietal", "temporal", "occipital", "ventricle"};

std::string to_string(SubjectClass c);
std::string to_string(Laterality l);
SubjectClass subject_class_from_string(const std::string& s);
Laterality laterality_from_string(const std::string& s);

struct CohortConfig {
  std::size_t n_pathological = 369;
  std::size_t n_healthy = 99;
  // left, right, bilateral, undefined
  std::array<double, 4> laterality_mix{0.425, 0.407, 0.146, 0.022};
  std::uint64_t seed = 0;
  Dims volume_dims{16, 32, 32};

  void validate() const;
};

struct SubjectRecord {
  std::string subject_id;
  std::uint64_t seed = 0;
  SubjectClass subject_class = SubjectClass::kHealthy;
  Laterality laterality = Laterality::kNone;
  std::string anatomy;  // empty for healthy subjects
  Volume volume;
  std::string report;
  ClinicalFindings findings;
  std::vector<std::uint8_t> brain_mask;   // ground-truth tissue ellipsoid
  std::vector<std::uint8_t> lesion_mask;  // halo plus core
  std::array<double, 3> lesion_center{0.0, 0.0, 0.0};  // (z, y, x) voxel coordinates
};

/// Deterministic in (seed, class, laterality, cfg). For healthy subjects the
/// laterality argument is ignored.
SubjectRecord generate_subject(std::uint64_t seed, SubjectClass subject_class, Laterality laterality,
                               const CohortConfig& cfg);

/// Report text from the template bank for the given findings.
std::string render_report(SubjectClass subject_class, Laterality laterality, const std::string& anatomy,
                          const std::set<std::string>& pathology);

/// Every report the template bank can emit (for vocabulary and roundtrip checks).
std::vector<std::string> template_bank_reports();

/// Largest-remainder rounding of `mix` over n.
std::array<std::size_t, 4> laterality_counts(std::size_t n, const std::array<double, 4>& mix);

std::vector<SubjectRecord> build_cohort(const CohortConfig& cfg);

struct CohortSplit {
  std::vector<std::string> train;
  std::vector<std::string> val;
  std::vector<std::string> test;
};

/// Subject-level split stratified by (class, laterality).
CohortSplit split_cohort(const std::vector<SubjectRecord>& cohort, const std::array<double, 3>& ratios,
                         std::uint64_t seed);

nlohmann::json manifest_record(const SubjectRecord& record, const std::string& volume_path);
nlohmann::json split_to_json(const CohortSplit& split);
CohortSplit split_from_json(const nlohmann::json& j);

}  // namespace brain3d
