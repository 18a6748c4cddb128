#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "idpt/error.hpp"

#include <json.hpp>

namespace idpt {

using TokenSeq = std::vector<std::string>;

namespace detail {

inline std::map<std::string, int> ngram_counts(const TokenSeq& toks, int n) {
  std::map<std::string, int> counts;
  if (static_cast<int>(toks.size()) < n) return counts;
  for (std::size_t i = 0; i + n <= toks.size(); ++i) {
    std::string key;
    for (int j = 0; j < n; ++j) {
      if (j) key += '\x1f';
      key += toks[i + j];
    }
    ++counts[key];
  }
  return counts;
}

inline int lcs_length(const TokenSeq& a, const TokenSeq& b) {
  const std::size_t m = a.size(), n = b.size();
  std::vector<int> prev(n + 1, 0), cur(n + 1, 0);
  for (std::size_t i = 1; i <= m; ++i) {
    for (std::size_t j = 1; j <= n; ++j) {
      if (a[i - 1] == b[j - 1])
        cur[j] = prev[j - 1] + 1;
      else
        cur[j] = std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  return prev[n];
}

}  // namespace detail

/// Sentence-level BLEU with brevity penalty. Orders whose match count is
/// zero are smoothed add-one in both numerator and denominator; an empty
/// candidate scores 0 by definition.
inline double bleu(const TokenSeq& cand, const TokenSeq& ref, int max_n) {
  if (max_n != 1 && max_n != 4) throw ConfigError("bleu: max_n must be 1 or 4");
  if (ref.empty()) throw DataError("bleu: empty reference");
  if (cand.empty()) return 0.0;
  double log_sum = 0.0;
  for (int n = 1; n <= max_n; ++n) {
    auto cg = detail::ngram_counts(cand, n);
    auto rg = detail::ngram_counts(ref, n);
    long matched = 0, total = 0;
    for (const auto& [key, count] : cg) {
      total += count;
      auto it = rg.find(key);
      if (it != rg.end()) matched += std::min(count, it->second);
    }
    double p = (matched == 0) ? (matched + 1.0) / (total + 1.0)
                              : static_cast<double>(matched) / static_cast<double>(total);
    log_sum += std::log(p);
  }
  double precision = std::exp(log_sum / max_n);
  double c = static_cast<double>(cand.size());
  double r = static_cast<double>(ref.size());
  double bp = (c >= r) ? 1.0 : std::exp(1.0 - r / c);
  return bp * precision;
}

/// Unigram-overlap F1.
inline double rouge1(const TokenSeq& cand, const TokenSeq& ref) {
  if (ref.empty()) throw DataError("rouge1: empty reference");
  if (cand.empty()) return 0.0;
  auto cg = detail::ngram_counts(cand, 1);
  auto rg = detail::ngram_counts(ref, 1);
  long matched = 0;
  for (const auto& [key, count] : cg) {
    auto it = rg.find(key);
    if (it != rg.end()) matched += std::min(count, it->second);
  }
  double p = static_cast<double>(matched) / cand.size();
  double r = static_cast<double>(matched) / ref.size();
  return (p + r == 0) ? 0.0 : 2 * p * r / (p + r);
}

/// LCS-based F1 (beta = 1).
inline double rougeL(const TokenSeq& cand, const TokenSeq& ref) {
  if (ref.empty()) throw DataError("rougeL: empty reference");
  if (cand.empty()) return 0.0;
  double lcs = detail::lcs_length(cand, ref);
  double p = lcs / cand.size();
  double r = lcs / ref.size();
  return (p + r == 0) ? 0.0 : 2 * p * r / (p + r);
}

inline double accuracy(const std::vector<int>& predicted, const std::vector<int>& gold) {
  if (predicted.size() != gold.size() || predicted.empty())
    throw DataError("accuracy: label vectors must be nonempty and equal length");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < gold.size(); ++i)
    if (predicted[i] == gold[i]) ++hits;
  return static_cast<double>(hits) / gold.size();
}

/// Accuracy after relabeling predicted clusters with the best permutation of
/// the n_classes x n_classes confusion matrix (optimal assignment; exhaustive
/// search, which is exact at this class count). Returns the score and the
/// permutation (cluster -> label) used.
inline std::pair<double, std::vector<int>> permutation_matched_accuracy(const std::vector<int>& predicted,
                                                                        const std::vector<int>& gold,
                                                                        int n_classes) {
  if (predicted.size() != gold.size() || predicted.empty())
    throw DataError("accuracy: label vectors must be nonempty and equal length");
  std::vector<std::vector<long>> confusion(n_classes, std::vector<long>(n_classes, 0));
  for (std::size_t i = 0; i < gold.size(); ++i) {
    if (predicted[i] < 0 || predicted[i] >= n_classes || gold[i] < 0 || gold[i] >= n_classes)
      throw IndexError("accuracy: label out of range");
    ++confusion[predicted[i]][gold[i]];
  }
  std::vector<int> perm(n_classes);
  for (int i = 0; i < n_classes; ++i) perm[i] = i;
  std::vector<int> best = perm;
  long best_hits = -1;
  do {
    long hits = 0;
    for (int c = 0; c < n_classes; ++c) hits += confusion[c][perm[c]];
    if (hits > best_hits) {
      best_hits = hits;
      best = perm;
    }
  } while (std::next_permutation(perm.begin(), perm.end()));
  return {static_cast<double>(best_hits) / gold.size(), best};
}

/// Sample Pearson correlation.
inline double pearson(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2) throw DataError("pearson: need two equal-length series");
  const double n = static_cast<double>(x.size());
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx == 0 || syy == 0) throw NumericError("pearson: zero variance");
  return sxy / std::sqrt(sxx * syy);
}

/// Fraction of an N-way initiative sweep whose responses satisfy their own
/// label's template predicate.
using TemplateMatcher = std::function<bool(int label, const TokenSeq& response)>;

inline double controllability(const std::vector<TokenSeq>& sweep_responses, int n_labels,
                              const TemplateMatcher& matches) {
  if (static_cast<int>(sweep_responses.size()) != n_labels)
    throw ShapeError("controllability: expected " + std::to_string(n_labels) + " responses, got " +
                     std::to_string(sweep_responses.size()));
  int hits = 0;
  for (int label = 0; label < n_labels; ++label)
    if (matches(label, sweep_responses[static_cast<std::size_t>(label)])) ++hits;
  return static_cast<double>(hits) / n_labels;
}

// ---- evaluation report ----

struct ExampleRecord {
  std::string id;
  int gold_label = -1;      // -1 when unlabeled
  int predicted_label = -1; // raw classifier output (cluster id in SA mode)
  std::string generated;
  double bleu1 = 0, bleu4 = 0, rouge1_f = 0, rougeL_f = 0;
  double controllability = 0;
};

struct EvalReport {
  std::optional<double> accuracy;  // permutation-matched in SA mode
  double bleu1 = 0, bleu4 = 0, rouge1_f = 0, rougeL_f = 0;
  std::optional<double> pearson_len_init;
  double controllability = 0;
  std::vector<ExampleRecord> per_example;

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["accuracy"] = accuracy ? nlohmann::ordered_json(*accuracy) : nlohmann::ordered_json(nullptr);
    j["bleu1"] = bleu1;
    j["bleu4"] = bleu4;
    j["rouge1_f"] = rouge1_f;
    j["rougeL_f"] = rougeL_f;
    j["pearson_len_init"] =
        pearson_len_init ? nlohmann::ordered_json(*pearson_len_init) : nlohmann::ordered_json(nullptr);
    j["controllability"] = controllability;
    nlohmann::ordered_json records = nlohmann::ordered_json::array();
    for (const auto& r : per_example) {
      nlohmann::ordered_json e;
      e["id"] = r.id;
      e["gold_label"] = r.gold_label;
      e["predicted_label"] = r.predicted_label;
      e["generated"] = r.generated;
      e["bleu1"] = r.bleu1;
      e["bleu4"] = r.bleu4;
      e["rouge1_f"] = r.rouge1_f;
      e["rougeL_f"] = r.rougeL_f;
      e["controllability"] = r.controllability;
      records.push_back(std::move(e));
    }
    j["per_example"] = std::move(records);
    return j;
  }
};

}  // namespace idpt
