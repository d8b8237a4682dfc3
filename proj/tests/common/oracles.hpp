#pragma once

// Straightforward reference implementations and fixtures shared by the unit
// and acceptance tests. Written independently of the library code paths.

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "brain3d/evalsuite.hpp"

namespace brain3d::oracle {

inline std::vector<std::string> words(const std::string& text) {
  std::istringstream in(text);
  std::vector<std::string> out;
  for (std::string w; in >> w;) out.push_back(w);
  return out;
}

inline std::map<std::string, int> grams(const std::vector<std::string>& w, int n) {
  std::map<std::string, int> out;
  for (int i = 0; i + n <= int(w.size()); ++i) {
    std::string key;
    for (int j = 0; j < n; ++j) key += w[std::size_t(i + j)] + "\x1f";
    ++out[key];
  }
  return out;
}

inline double bleu(const std::string& hyp, const std::string& ref, int n) {
  const auto h = words(hyp), r = words(ref);
  if (h.empty()) return 0.0;
  double logp = 0.0;
  for (int k = 1; k <= n; ++k) {
    const auto hg = grams(h, k), rg = grams(r, k);
    int match = 0, count = 0;
    for (const auto& [g, c] : hg) {
      count += c;
      const auto it = rg.find(g);
      match += std::min(c, it == rg.end() ? 0 : it->second);
    }
    if (match == 0) return 0.0;
    logp += std::log(double(match) / double(count)) / n;
  }
  const double c = double(h.size()), rl = double(r.size());
  return (c < rl ? std::exp(1.0 - rl / c) : 1.0) * std::exp(logp);
}

inline double rouge_n(const std::string& hyp, const std::string& ref, int n) {
  const auto hg = grams(words(hyp), n), rg = grams(words(ref), n);
  int match = 0, nh = 0, nr = 0;
  for (const auto& [g, c] : hg) {
    nh += c;
    if (rg.count(g)) match += std::min(c, rg.at(g));
  }
  for (const auto& [g, c] : rg) nr += c;
  if (nh == 0 && nr == 0) return 1.0;
  if (match == 0) return 0.0;
  const double p = double(match) / nh, r = double(match) / nr;
  return 2 * p * r / (p + r);
}

inline double rouge_l(const std::string& hyp, const std::string& ref) {
  const auto h = words(hyp), r = words(ref);
  std::map<std::pair<std::size_t, std::size_t>, int> memo;
  std::function<int(std::size_t, std::size_t)> lcs = [&](std::size_t i, std::size_t j) -> int {
    if (i == h.size() || j == r.size()) return 0;
    auto key = std::make_pair(i, j);
    if (auto it = memo.find(key); it != memo.end()) return it->second;
    const int v = h[i] == r[j] ? 1 + lcs(i + 1, j + 1) : std::max(lcs(i + 1, j), lcs(i, j + 1));
    return memo[key] = v;
  };
  if (h.empty() && r.empty()) return 1.0;
  const double l = lcs(0, 0);
  if (l == 0) return 0.0;
  const double p = l / double(h.size()), rr = l / double(r.size());
  return 2 * p * rr / (p + rr);
}

/// Per-sample tf-idf cosine over n = 1..4, times 10; one reference per sample.
inline std::vector<double> cider(const std::vector<std::string>& hyps, const std::vector<std::string>& refs) {
  const double docs = double(refs.size());
  std::vector<std::map<std::string, double>> df(5);
  for (const auto& r : refs)
    for (int n = 1; n <= 4; ++n)
      for (const auto& [g, c] : grams(words(r), n)) df[std::size_t(n)][g] += 1.0;
  std::vector<double> out;
  for (std::size_t s = 0; s < hyps.size(); ++s) {
    double total = 0.0;
    for (int n = 1; n <= 4; ++n) {
      auto vec = [&](const std::string& text) {
        std::map<std::string, double> v;
        for (const auto& [g, c] : grams(words(text), n)) {
          const double d = df[std::size_t(n)].count(g) ? df[std::size_t(n)][g] : 1.0;
          v[g] = c * (std::log(docs) - std::log(d));
        }
        return v;
      };
      const auto a = vec(hyps[s]), b = vec(refs[s]);
      double dot = 0, na = 0, nb = 0;
      for (const auto& [g, x] : a) {
        na += x * x;
        if (b.count(g)) dot += x * b.at(g);
      }
      for (const auto& [g, x] : b) nb += x * x;
      total += (na > 0 && nb > 0) ? dot / std::sqrt(na * nb) : 0.0;
    }
    out.push_back(10.0 * total / 4.0);
  }
  return out;
}

struct TextPair {
  std::string hyp;
  std::string ref;
};

inline const std::vector<TextPair>& crafted_corpus() {
  static const std::vector<TextPair> pairs{
      {"the cat sat on the mat", "the cat sat on the mat"},
      {"the the the the", "the cat the"},
      {"a b", "a b c"},
      {"a b c", "a c"},
      {"left frontal edema is present", "edema is present in the left frontal lobe"},
      {"no abnormality detected", "normal brain mri"},
      {"right temporal necrosis with edema", "necrosis with edema in the right temporal lobe"},
      {"bilateral lesion with compression of the ventricle", "bilateral lesion with ventricular compression"},
      {"the lesion area is in the left parietal lobe", "the lesion area is in the right parietal lobe"},
      {"enhancement at the margin", "enhancement is observed at the lesion margin"},
  };
  return pairs;
}

struct LabeledReport {
  std::string text;
  ClinicalFindings labels;
};

/// Reports labelled by hand against the extraction rules.
inline const std::vector<LabeledReport>& labeled_reports() {
  static const std::vector<LabeledReport> corpus{
      {"Edema around left frontal lobe.", {{"left"}, {"frontal"}, {"edema"}}},
      {"No abnormality detected. Normal brain MRI.", {}},
      {"No edema, but necrosis in the right temporal lobe.", {{"right"}, {"temporal"}, {"necrosis"}}},
      {"Bilateral parietal oedema with mass effect on the ventricle.",
       {{"bilateral"}, {"parietal", "ventricle"}, {"edema", "compression"}}},
      {"Necrotic core in the left occipital region without enhancement.", {{"left"}, {"occipital"}, {"necrosis"}}},
      {"Lesion spanning both hemispheres with enhancing margins.", {{"bilateral"}, {}, {"enhancement"}}},
      {"The right ventricle is compressed.", {{"right"}, {"ventricle"}, {"compression"}}},
      {"Absence of edema in the frontal lobe.", {{}, {"frontal"}, {}}},
      {"Right temporal lesion with surrounding edematous tissue and ventricular compression.",
       {{"right"}, {"temporal"}, {"edema", "compression"}}},
      {"No left or right lesion identified.", {}},
      {"Left parietal mass without necrosis, with enhancement.", {{"left"}, {"parietal"}, {"enhancement"}}},
      {"Occipital necrosis and oedema bilaterally.", {{"bilateral"}, {"occipital"}, {"necrosis", "edema"}}},
      {"Mild mass effect without midline shift.", {{}, {}, {"compression"}}},
      {"Enhancement of the left frontal and left parietal cortex.", {{"left"}, {"frontal", "parietal"}, {"enhancement"}}},
      {"Normal study.", {}},
      {"Right frontal edema. No necrosis. No compression.", {{"right"}, {"frontal"}, {"edema"}}},
      {"The lesion area is in the left temporal lobe with mixed signal intensity. Edema is observed around the "
       "lesion, indicating swelling of the surrounding tissue.",
       {{"left"}, {"temporal"}, {"edema"}}},
      {"Necrosis is observed in the lesion core with low signal.", {{}, {}, {"necrosis"}}},
      {"Without edema or necrosis, the right occipital lobe appears normal.", {{"right"}, {"occipital"}, {}}},
      {"Ventricular compression is present, suggesting pressure effects of the lesion in both hemispheres.",
       {{"bilateral"}, {}, {"compression"}}},
  };
  return corpus;
}

/// Micro F1 from explicit (sample, label) pair sets.
inline double micro_f1(const std::vector<std::set<std::string>>& pred, const std::vector<std::set<std::string>>& gold) {
  std::set<std::pair<std::size_t, std::string>> p, g;
  for (std::size_t i = 0; i < pred.size(); ++i)
    for (const auto& l : pred[i]) p.insert({i, l});
  for (std::size_t i = 0; i < gold.size(); ++i)
    for (const auto& l : gold[i]) g.insert({i, l});
  std::size_t tp = 0;
  for (const auto& x : p) tp += g.count(x);
  if (p.empty() && g.empty()) return 1.0;
  return 2.0 * double(tp) / double(p.size() + g.size());
}

}  // namespace brain3d::oracle
