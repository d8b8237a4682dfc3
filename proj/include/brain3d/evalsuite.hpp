#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

namespace brain3d {

struct ClinicalFindings {
  std::set<std::string> laterality;  // left, right, bilateral
  std::set<std::string> anatomy;     // frontal, parietal, temporal, occipital, ventricle
  std::set<std::string> pathology;   // edema, necrosis, enhancement, compression

  bool empty() const { return laterality.empty() && anatomy.empty() && pathology.empty(); }
  bool operator==(const ClinicalFindings&) const = default;
};

enum class FindingCategory { kLaterality, kAnatomy, kPathology };

const std::set<std::string>& category_labels(FindingCategory category);
const std::set<std::string>& findings_in(const ClinicalFindings& f, FindingCategory category);
std::string category_name(FindingCategory category);

/// Rule-based keyword extraction with a 3-token negation window.
ClinicalFindings extract_findings(std::string_view report);

/// Words used by the n-gram metrics: split_words() minus punctuation tokens.
std::vector<std::string> metric_tokens(std::string_view text);

double bleu_n(std::string_view hypothesis, std::span<const std::string> references, int n);
double rouge_n(std::string_view hypothesis, std::string_view reference, int n);
double rouge_l(std::string_view hypothesis, std::string_view reference);

/// Per-sample CIDEr (x10 scale, n = 1..4) with idf over the reference corpus.
std::vector<double> cider_scores(std::span<const std::string> hypotheses,
                                 std::span<const std::vector<std::string>> references);
double cider(std::span<const std::string> hypotheses, std::span<const std::vector<std::string>> references);

/// Micro-averaged F1 over label occurrences of one category.
double clinical_f1(std::span<const ClinicalFindings> pred, std::span<const ClinicalFindings> gold,
                   FindingCategory category);

struct MicroCounts {
  std::size_t tp = 0;
  std::size_t fp = 0;
  std::size_t fn = 0;
  double precision() const;
  double recall() const;
  double f1() const;
};

MicroCounts clinical_counts(std::span<const ClinicalFindings> pred, std::span<const ClinicalFindings> gold,
                            FindingCategory category);

/// Fraction of samples whose predicted pathology set is empty.
double pathology_specificity(std::span<const ClinicalFindings> pred_on_healthy);

struct ConfidenceInterval {
  double low = 0.0;
  double high = 0.0;
};

/// Percentile bootstrap (2.5 / 97.5) over resampled means.
ConfidenceInterval bootstrap_ci(std::span<const double> scores, int n_boot, std::uint64_t seed);

struct MetricSummary {
  double mean = 0.0;
  double low = 0.0;
  double high = 0.0;
};

using MetricReport = std::map<std::string, MetricSummary>;

struct EvalConfig {
  int n_boot = 1000;
  std::uint64_t seed = 0;
};

/// All NLG and clinical metrics for aligned prediction / gold report lists.
MetricReport evaluate_reports(std::span<const std::string> predictions, std::span<const std::string> gold,
                              const EvalConfig& cfg);

nlohmann::json metric_report_to_json(const MetricReport& report);

}  // namespace brain3d
