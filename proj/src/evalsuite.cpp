#include "brain3d/evalsuite.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <random>
#include <unordered_map>
#include <unordered_set>

#include "brain3d/errors.hpp"
#include "brain3d/langmodel.hpp"
#include "brain3d/volume.hpp"

namespace brain3d {

namespace {

using NgramCounts = std::map<std::vector<std::string>, int>;

NgramCounts ngrams(const std::vector<std::string>& words, int n) {
  NgramCounts out;
  if (n <= 0 || words.size() < static_cast<std::size_t>(n)) return out;
  for (std::size_t i = 0; i + static_cast<std::size_t>(n) <= words.size(); ++i) {
    ++out[std::vector<std::string>(words.begin() + static_cast<long>(i), words.begin() + static_cast<long>(i) + n)];
  }
  return out;
}

int total(const NgramCounts& c) {
  int t = 0;
  for (const auto& [g, k] : c) t += k;
  return t;
}

int clipped_overlap(const NgramCounts& hyp, const NgramCounts& ref) {
  int o = 0;
  for (const auto& [g, k] : hyp) {
    auto it = ref.find(g);
    if (it != ref.end()) o += std::min(k, it->second);
  }
  return o;
}

double f1_of(double p, double r) { return (p + r) > 0.0 ? 2.0 * p * r / (p + r) : 0.0; }

struct Term {
  std::vector<std::string> words;
  FindingCategory category;
  std::string label;
};

const std::vector<Term>& lexicon() {
  static const std::vector<Term> terms = {
      {{"both", "hemispheres"}, FindingCategory::kLaterality, "bilateral"},
      {{"bilateral"}, FindingCategory::kLaterality, "bilateral"},
      {{"bilaterally"}, FindingCategory::kLaterality, "bilateral"},
      {{"left"}, FindingCategory::kLaterality, "left"},
      {{"right"}, FindingCategory::kLaterality, "right"},
      {{"frontal"}, FindingCategory::kAnatomy, "frontal"},
      {{"parietal"}, FindingCategory::kAnatomy, "parietal"},
      {{"temporal"}, FindingCategory::kAnatomy, "temporal"},
      {{"occipital"}, FindingCategory::kAnatomy, "occipital"},
      {{"ventricle"}, FindingCategory::kAnatomy, "ventricle"},
      {{"edema"}, FindingCategory::kPathology, "edema"},
      {{"oedema"}, FindingCategory::kPathology, "edema"},
      {{"edematous"}, FindingCategory::kPathology, "edema"},
      {{"necrosis"}, FindingCategory::kPathology, "necrosis"},
      {{"necrotic"}, FindingCategory::kPathology, "necrosis"},
      {{"enhancement"}, FindingCategory::kPathology, "enhancement"},
      {{"enhancing"}, FindingCategory::kPathology, "enhancement"},
      {{"compression"}, FindingCategory::kPathology, "compression"},
      {{"compressed"}, FindingCategory::kPathology, "compression"},
      {{"mass", "effect"}, FindingCategory::kPathology, "compression"},
  };
  return terms;
}

constexpr std::size_t kNegationWindow = 3;

// Index of the last token of every negator phrase.
std::vector<std::size_t> negator_positions(const std::vector<std::string>& w) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < w.size(); ++i) {
    if (w[i] == "no" || w[i] == "without") out.push_back(i);
    if (w[i] == "of" && i > 0 && w[i - 1] == "absence") out.push_back(i);
  }
  return out;
}

std::set<std::string>& mutable_findings(ClinicalFindings& f, FindingCategory c) {
  switch (c) {
    case FindingCategory::kLaterality: return f.laterality;
    case FindingCategory::kAnatomy: return f.anatomy;
    case FindingCategory::kPathology: return f.pathology;
  }
  return f.pathology;
}

ConfidenceInterval bootstrap_statistic(std::size_t n, int n_boot, std::uint64_t seed,
                                       const std::function<double(const std::vector<std::size_t>&)>& stat) {
  if (n == 0) throw DomainError("bootstrap: no samples");
  if (n_boot < 1) throw DomainError("bootstrap: n_boot must be >= 1");
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, n - 1);
  std::vector<double> stats(static_cast<std::size_t>(n_boot));
  std::vector<std::size_t> idx(n);
  for (auto& s : stats) {
    for (auto& i : idx) i = pick(rng);
    s = stat(idx);
  }
  return {percentile(std::span<const double>(stats), 2.5), percentile(std::span<const double>(stats), 97.5)};
}

MetricSummary summarise(double mean, ConfidenceInterval ci) {
  return {mean, std::min(ci.low, mean), std::max(ci.high, mean)};
}

}  // namespace

const std::set<std::string>& category_labels(FindingCategory category) {
  static const std::set<std::string> lat{"left", "right", "bilateral"};
  static const std::set<std::string> anat{"frontal", "parietal", "temporal", "occipital", "ventricle"};
  static const std::set<std::string> path{"edema", "necrosis", "enhancement", "compression"};
  switch (category) {
    case FindingCategory::kLaterality: return lat;
    case FindingCategory::kAnatomy: return anat;
    case FindingCategory::kPathology: return path;
  }
  return path;
}

const std::set<std::string>& findings_in(const ClinicalFindings& f, FindingCategory category) {
  switch (category) {
    case FindingCategory::kLaterality: return f.laterality;
    case FindingCategory::kAnatomy: return f.anatomy;
    case FindingCategory::kPathology: return f.pathology;
  }
  return f.pathology;
}

std::string category_name(FindingCategory category) {
  switch (category) {
    case FindingCategory::kLaterality: return "laterality";
    case FindingCategory::kAnatomy: return "anatomy";
    case FindingCategory::kPathology: return "pathology";
  }
  return "pathology";
}

ClinicalFindings extract_findings(std::string_view report) {
  const auto words = split_words(report);
  const auto negators = negator_positions(words);
  auto negated = [&](std::size_t start) {
    return std::any_of(negators.begin(), negators.end(),
                       [&](std::size_t j) { return j < start && start - j <= kNegationWindow; });
  };
  ClinicalFindings f;
  for (std::size_t i = 0; i < words.size(); ++i) {
    for (const auto& term : lexicon()) {
      if (i + term.words.size() > words.size()) continue;
      if (!std::equal(term.words.begin(), term.words.end(), words.begin() + static_cast<long>(i))) continue;
      if (!negated(i)) mutable_findings(f, term.category).insert(term.label);
    }
  }
  return f;
}

std::vector<std::string> metric_tokens(std::string_view text) {
  auto words = split_words(text);
  std::erase_if(words, [](const std::string& w) { return w.size() == 1 && std::ispunct(static_cast<unsigned char>(w[0])); });
  return words;
}

double bleu_n(std::string_view hypothesis, std::span<const std::string> references, int n) {
  if (n < 1 || n > 4) throw DomainError("bleu: n must be in 1..4");
  if (references.empty()) throw DomainError("bleu: no references");
  const auto hyp = metric_tokens(hypothesis);
  if (hyp.empty()) return 0.0;
  std::vector<std::vector<std::string>> refs;
  for (const auto& r : references) refs.push_back(metric_tokens(r));

  double log_sum = 0.0;
  for (int i = 1; i <= n; ++i) {
    const NgramCounts h = ngrams(hyp, i);
    const int denom = total(h);
    if (denom == 0) return 0.0;
    NgramCounts max_ref;
    for (const auto& r : refs) {
      for (const auto& [g, k] : ngrams(r, i)) max_ref[g] = std::max(max_ref[g], k);
    }
    const int num = clipped_overlap(h, max_ref);
    if (num == 0) return 0.0;
    log_sum += std::log(static_cast<double>(num) / denom);
  }
  const double c = static_cast<double>(hyp.size());
  // Closest reference length, ties to the shorter one.
  double r = static_cast<double>(refs[0].size());
  for (const auto& ref : refs) {
    const double len = static_cast<double>(ref.size());
    if (std::abs(len - c) < std::abs(r - c) || (std::abs(len - c) == std::abs(r - c) && len < r)) r = len;
  }
  const double bp = c < r ? std::exp(1.0 - r / c) : 1.0;
  return bp * std::exp(log_sum / n);
}

double rouge_n(std::string_view hypothesis, std::string_view reference, int n) {
  if (n < 1 || n > 2) throw DomainError("rouge_n: n must be 1 or 2");
  const NgramCounts h = ngrams(metric_tokens(hypothesis), n);
  const NgramCounts r = ngrams(metric_tokens(reference), n);
  const int th = total(h), tr = total(r);
  if (th == 0 && tr == 0) return 1.0;
  if (th == 0 || tr == 0) return 0.0;
  const double overlap = clipped_overlap(h, r);
  return f1_of(overlap / th, overlap / tr);
}

double rouge_l(std::string_view hypothesis, std::string_view reference) {
  const auto h = metric_tokens(hypothesis);
  const auto r = metric_tokens(reference);
  if (h.empty() && r.empty()) return 1.0;
  if (h.empty() || r.empty()) return 0.0;
  std::vector<std::vector<int>> dp(h.size() + 1, std::vector<int>(r.size() + 1, 0));
  for (std::size_t i = 1; i <= h.size(); ++i)
    for (std::size_t j = 1; j <= r.size(); ++j)
      dp[i][j] = h[i - 1] == r[j - 1] ? dp[i - 1][j - 1] + 1 : std::max(dp[i - 1][j], dp[i][j - 1]);
  const double lcs = dp[h.size()][r.size()];
  return f1_of(lcs / static_cast<double>(h.size()), lcs / static_cast<double>(r.size()));
}

std::vector<double> cider_scores(std::span<const std::string> hypotheses,
                                 std::span<const std::vector<std::string>> references) {
  if (hypotheses.size() != references.size()) throw UsageError("cider: hypotheses and references differ in length");
  if (references.empty()) throw DomainError("cider: empty corpus");
  constexpr int kMaxN = 4;
  const double n_docs = static_cast<double>(references.size());

  std::array<std::map<std::vector<std::string>, int>, kMaxN> df;
  std::vector<std::vector<std::array<NgramCounts, kMaxN>>> ref_counts(references.size());
  for (std::size_t s = 0; s < references.size(); ++s) {
    std::array<std::set<std::vector<std::string>>, kMaxN> seen;
    for (const auto& ref : references[s]) {
      const auto words = metric_tokens(ref);
      std::array<NgramCounts, kMaxN> counts;
      for (int n = 1; n <= kMaxN; ++n) {
        counts[n - 1] = ngrams(words, n);
        for (const auto& [g, k] : counts[n - 1]) seen[n - 1].insert(g);
      }
      ref_counts[s].push_back(std::move(counts));
    }
    for (int n = 0; n < kMaxN; ++n)
      for (const auto& g : seen[n]) ++df[n][g];
  }

  auto idf = [&](int n, const std::vector<std::string>& g) {
    auto it = df[n].find(g);
    const double d = it == df[n].end() ? 0.0 : static_cast<double>(it->second);
    return std::log(std::max(1.0, n_docs)) - std::log(std::max(1.0, d));
  };
  auto cosine = [&](int n, const NgramCounts& a, const NgramCounts& b) {
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (const auto& [g, k] : a) {
      const double w = k * idf(n, g);
      na += w * w;
      auto it = b.find(g);
      if (it != b.end()) dot += w * it->second * idf(n, g);
    }
    for (const auto& [g, k] : b) {
      const double w = k * idf(n, g);
      nb += w * w;
    }
    return (na > 0.0 && nb > 0.0) ? dot / (std::sqrt(na) * std::sqrt(nb)) : 0.0;
  };

  std::vector<double> out(hypotheses.size(), 0.0);
  for (std::size_t s = 0; s < hypotheses.size(); ++s) {
    if (ref_counts[s].empty()) continue;
    const auto words = metric_tokens(hypotheses[s]);
    double score = 0.0;
    for (int n = 1; n <= kMaxN; ++n) {
      const NgramCounts h = ngrams(words, n);
      double acc = 0.0;
      for (const auto& rc : ref_counts[s]) acc += cosine(n - 1, h, rc[n - 1]);
      score += acc / static_cast<double>(ref_counts[s].size());
    }
    out[s] = 10.0 * score / kMaxN;
  }
  return out;
}

double cider(std::span<const std::string> hypotheses, std::span<const std::vector<std::string>> references) {
  const auto s = cider_scores(hypotheses, references);
  return std::accumulate(s.begin(), s.end(), 0.0) / static_cast<double>(s.size());
}

double MicroCounts::precision() const { return tp + fp == 0 ? 1.0 : static_cast<double>(tp) / static_cast<double>(tp + fp); }
double MicroCounts::recall() const { return tp + fn == 0 ? 1.0 : static_cast<double>(tp) / static_cast<double>(tp + fn); }
double MicroCounts::f1() const {
  const std::size_t denom = 2 * tp + fp + fn;
  return denom == 0 ? 1.0 : 2.0 * static_cast<double>(tp) / static_cast<double>(denom);
}

MicroCounts clinical_counts(std::span<const ClinicalFindings> pred, std::span<const ClinicalFindings> gold,
                            FindingCategory category) {
  if (pred.size() != gold.size()) throw UsageError("clinical_f1: prediction and gold lists differ in length");
  MicroCounts c;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const auto& p = findings_in(pred[i], category);
    const auto& g = findings_in(gold[i], category);
    for (const auto& l : p) (g.count(l) ? c.tp : c.fp) += 1;
    for (const auto& l : g) c.fn += p.count(l) ? 0 : 1;
  }
  return c;
}

double clinical_f1(std::span<const ClinicalFindings> pred, std::span<const ClinicalFindings> gold,
                   FindingCategory category) {
  return clinical_counts(pred, gold, category).f1();
}

double pathology_specificity(std::span<const ClinicalFindings> pred_on_healthy) {
  if (pred_on_healthy.empty()) throw DomainError("specificity: no healthy samples");
  const auto clean = std::count_if(pred_on_healthy.begin(), pred_on_healthy.end(),
                                   [](const ClinicalFindings& f) { return f.pathology.empty(); });
  return static_cast<double>(clean) / static_cast<double>(pred_on_healthy.size());
}

ConfidenceInterval bootstrap_ci(std::span<const double> scores, int n_boot, std::uint64_t seed) {
  return bootstrap_statistic(scores.size(), n_boot, seed, [&](const std::vector<std::size_t>& idx) {
    double s = 0.0;
    for (std::size_t i : idx) s += scores[i];
    return s / static_cast<double>(idx.size());
  });
}

MetricReport evaluate_reports(std::span<const std::string> predictions, std::span<const std::string> gold,
                              const EvalConfig& cfg) {
  if (predictions.size() != gold.size()) throw UsageError("evaluate: prediction and gold counts differ");
  if (predictions.empty()) throw DomainError("evaluate: no samples");
  const std::size_t n = predictions.size();

  std::map<std::string, std::vector<double>> per_sample;
  std::vector<std::vector<std::string>> refs(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::vector<std::string> ref{gold[i]};
    per_sample["bleu1"].push_back(bleu_n(predictions[i], ref, 1));
    per_sample["bleu4"].push_back(bleu_n(predictions[i], ref, 4));
    per_sample["rouge1"].push_back(rouge_n(predictions[i], gold[i], 1));
    per_sample["rouge2"].push_back(rouge_n(predictions[i], gold[i], 2));
    per_sample["rougeL"].push_back(rouge_l(predictions[i], gold[i]));
    refs[i] = ref;
  }
  per_sample["cider"] = cider_scores(predictions, refs);

  MetricReport report;
  std::uint64_t salt = 0;
  for (const auto& [name, scores] : per_sample) {
    const double mean = std::accumulate(scores.begin(), scores.end(), 0.0) / static_cast<double>(n);
    report[name] = summarise(mean, bootstrap_ci(scores, cfg.n_boot, cfg.seed + salt++));
  }

  std::vector<ClinicalFindings> pred_f, gold_f;
  for (std::size_t i = 0; i < n; ++i) {
    pred_f.push_back(extract_findings(predictions[i]));
    gold_f.push_back(extract_findings(gold[i]));
  }
  for (auto cat : {FindingCategory::kLaterality, FindingCategory::kAnatomy, FindingCategory::kPathology}) {
    const double f1 = clinical_f1(pred_f, gold_f, cat);
    const auto ci = bootstrap_statistic(n, cfg.n_boot, cfg.seed + salt++, [&](const std::vector<std::size_t>& idx) {
      std::vector<ClinicalFindings> p, g;
      for (std::size_t i : idx) {
        p.push_back(pred_f[i]);
        g.push_back(gold_f[i]);
      }
      return clinical_f1(p, g, cat);
    });
    report["clinical_" + category_name(cat) + "_f1"] = summarise(f1, ci);
  }

  std::vector<std::size_t> healthy;
  for (std::size_t i = 0; i < n; ++i) {
    if (gold_f[i].empty()) healthy.push_back(i);
  }
  if (!healthy.empty()) {
    std::vector<double> clean;
    for (std::size_t i : healthy) clean.push_back(pred_f[i].pathology.empty() ? 1.0 : 0.0);
    const double mean = std::accumulate(clean.begin(), clean.end(), 0.0) / static_cast<double>(clean.size());
    report["healthy_specificity"] = summarise(mean, bootstrap_ci(clean, cfg.n_boot, cfg.seed + salt++));
  }
  return report;
}

nlohmann::json metric_report_to_json(const MetricReport& report) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [name, m] : report) j[name] = {{"mean", m.mean}, {"ci_low", m.low}, {"ci_high", m.high}};
  return j;
}

}  // namespace brain3d
