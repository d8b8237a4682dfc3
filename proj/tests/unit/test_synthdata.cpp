#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <set>

#include "brain3d/decoder.hpp"
#include "brain3d/evalsuite.hpp"
#include "brain3d/synthdata.hpp"

using namespace brain3d;

namespace {

// Independent largest-remainder rounding (ties: lower index first).
std::vector<std::size_t> largest_remainder(std::size_t n, const std::vector<double>& frac) {
  std::vector<std::size_t> out(frac.size());
  std::vector<std::pair<double, std::size_t>> rem;
  std::size_t sum = 0;
  for (std::size_t i = 0; i < frac.size(); ++i) {
    const double exact = frac[i] * double(n);
    out[i] = static_cast<std::size_t>(exact);
    sum += out[i];
    rem.push_back({-(exact - double(out[i])), i});
  }
  std::sort(rem.begin(), rem.end());
  for (std::size_t k = 0; sum < n; ++k, ++sum) ++out[rem[k % rem.size()].second];
  return out;
}

CohortConfig small_cohort(std::size_t path, std::size_t healthy, std::uint64_t seed) {
  CohortConfig c;
  c.n_pathological = path;
  c.n_healthy = healthy;
  c.seed = seed;
  return c;
}

}  // namespace

TEST_CASE("subject generation is deterministic") {
  CohortConfig cfg;
  const auto a = generate_subject(42, SubjectClass::kPathological, Laterality::kLeft, cfg);
  const auto b = generate_subject(42, SubjectClass::kPathological, Laterality::kLeft, cfg);
  CHECK(a.volume == b.volume);
  CHECK(a.report == b.report);
  const auto c = generate_subject(43, SubjectClass::kPathological, Laterality::kLeft, cfg);
  CHECK_FALSE(a.volume == c.volume);
}

TEST_CASE("healthy subjects have the normal report and no findings") {
  CohortConfig cfg;
  for (std::uint64_t s = 0; s < 10; ++s) {
    const auto r = generate_subject(s, SubjectClass::kHealthy, Laterality::kLeft, cfg);
    CHECK(r.report == "No abnormality detected. Normal brain MRI.");
    CHECK(r.findings.empty());
    CHECK(r.laterality == Laterality::kNone);
    CHECK(std::all_of(r.lesion_mask.begin(), r.lesion_mask.end(), [](auto m) { return m == 0; }));
  }
}

TEST_CASE("lesion geometry follows laterality") {
  CohortConfig cfg;
  const double half = double(cfg.volume_dims.width) / 2.0;
  for (std::uint64_t s = 0; s < 40; ++s) {
    for (auto lat : {Laterality::kLeft, Laterality::kRight, Laterality::kBilateral}) {
      const auto r = generate_subject(s, SubjectClass::kPathological, lat, cfg);
      double sx = 0.0;
      std::size_t n = 0, left = 0, right = 0;
      for (std::size_t i = 0; i < r.lesion_mask.size(); ++i) {
        if (!r.lesion_mask[i]) continue;
        const std::size_t x = i % cfg.volume_dims.width;
        sx += double(x);
        ++n;
        (double(x) < half ? left : right) += 1;
      }
      REQUIRE(n > 0);
      const double cx = sx / double(n);
      if (lat == Laterality::kLeft) {
        CHECK(cx < half);
        CHECK(right == 0);
      } else if (lat == Laterality::kRight) {
        CHECK(cx > half);
        CHECK(left == 0);
      } else {
        CHECK(left > 0);
        CHECK(right > 0);
      }
      CHECK_FALSE(r.findings.laterality.empty());
      CHECK_FALSE(r.findings.pathology.empty());
    }
  }
}

TEST_CASE("undefined laterality omits side words") {
  CohortConfig cfg;
  for (std::uint64_t s = 0; s < 10; ++s) {
    const auto r = generate_subject(s, SubjectClass::kPathological, Laterality::kUndefined, cfg);
    CHECK(r.findings.laterality.empty());
    CHECK(extract_findings(r.report).laterality.empty());
    CHECK_FALSE(r.findings.pathology.empty());
  }
}

TEST_CASE("laterality counts use largest remainder") {
  const std::array<double, 4> mix{0.425, 0.407, 0.146, 0.022};
  const auto c = laterality_counts(369, mix);
  CHECK(c == std::array<std::size_t, 4>{157, 150, 54, 8});
  for (std::size_t n : {0u, 1u, 7u, 25u, 100u, 369u, 1001u}) {
    const auto got = laterality_counts(n, mix);
    const auto want = largest_remainder(n, {mix.begin(), mix.end()});
    CHECK(std::vector<std::size_t>(got.begin(), got.end()) == want);
  }
}

TEST_CASE("full-sized cohort") {
  const auto cohort = build_cohort(small_cohort(369, 99, 0));
  REQUIRE(cohort.size() == 468);
  std::map<Laterality, std::size_t> lat;
  std::size_t healthy = 0;
  for (const auto& r : cohort) {
    if (r.subject_class == SubjectClass::kHealthy) {
      ++healthy;
    } else {
      ++lat[r.laterality];
    }
  }
  CHECK(healthy == 99);
  CHECK(lat[Laterality::kLeft] == 157);
  CHECK(lat[Laterality::kRight] == 150);
  CHECK(lat[Laterality::kBilateral] == 54);
  CHECK(lat[Laterality::kUndefined] == 8);

  const auto split = split_cohort(cohort, {0.7, 0.1, 0.2}, 0);
  CHECK(split.train.size() + split.val.size() + split.test.size() == 468);
  CHECK(std::abs(int(split.train.size()) - 328) <= 2);
  CHECK(std::abs(int(split.val.size()) - 46) <= 2);
  CHECK(std::abs(int(split.test.size()) - 94) <= 2);

  std::set<std::string> all;
  for (const auto* part : {&split.train, &split.val, &split.test}) {
    for (const auto& id : *part) CHECK(all.insert(id).second);
  }
  CHECK(all.size() == 468);

  std::map<std::pair<int, int>, std::array<std::size_t, 4>> strata;  // train, val, test, total
  std::map<std::string, std::pair<int, int>> key;
  for (const auto& r : cohort) key[r.subject_id] = {int(r.subject_class), int(r.laterality)};
  for (const auto& id : split.train) ++strata[key[id]][0];
  for (const auto& id : split.val) ++strata[key[id]][1];
  for (const auto& id : split.test) ++strata[key[id]][2];
  for (const auto& r : cohort) ++strata[key[r.subject_id]][3];
  for (const auto& [k, c] : strata) {
    CHECK(std::abs(double(c[0]) - 0.7 * double(c[3])) <= 1.0);
    CHECK(std::abs(double(c[1]) - 0.1 * double(c[3])) <= 1.0);
    CHECK(std::abs(double(c[2]) - 0.2 * double(c[3])) <= 1.0);
  }
}

TEST_CASE("cohort edge cases and determinism") {
  const auto healthy = build_cohort(small_cohort(0, 5, 1));
  CHECK(healthy.size() == 5);
  CHECK(std::all_of(healthy.begin(), healthy.end(),
                    [](const SubjectRecord& r) { return r.subject_class == SubjectClass::kHealthy; }));

  const auto a = build_cohort(small_cohort(12, 3, 9));
  const auto b = build_cohort(small_cohort(12, 3, 9));
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].volume == b[i].volume);
    CHECK(a[i].report == b[i].report);
  }
  CHECK(split_to_json(split_cohort(a, {0.7, 0.1, 0.2}, 4)) == split_to_json(split_cohort(b, {0.7, 0.1, 0.2}, 4)));
  CHECK_THROWS_AS(split_cohort(a, {0.7, 0.2, 0.2}, 4), ConfigError);

  CohortConfig bad;
  bad.laterality_mix = {0.5, 0.5, 0.1, 0.0};
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("extraction inverts every generated report") {
  const auto cohort = build_cohort(small_cohort(60, 10, 3));
  for (const auto& r : cohort) CHECK(extract_findings(r.report) == r.findings);
}

TEST_CASE("template bank has no repeated trigram") {
  const Vocabulary vocab = Vocabulary::build(template_bank_reports());
  for (const auto& report : template_bank_reports()) {
    const auto ids = vocab.encode(report);
    CHECK_FALSE(has_repeated_trigram(ids));
  }
}
