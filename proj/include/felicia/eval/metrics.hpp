#pragma once

#include "felicia/core.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <string>
#include <vector>

namespace felicia::eval {

// Mann-Whitney AUC from average ranks: P(score_pos > score_neg) + P(tie) / 2.
inline double auc_roc(std::span<const double> scores, std::span<const int> truth) {
  FELICIA_REQUIRE(scores.size() == truth.size(), "auc_roc: scores and truth differ in length");
  std::size_t n_pos = 0;
  for (int t : truth) {
    FELICIA_REQUIRE(t == 0 || t == 1, "auc_roc: truth must be binary");
    n_pos += static_cast<std::size_t>(t);
  }
  const std::size_t n_neg = truth.size() - n_pos;
  FELICIA_REQUIRE(n_pos > 0 && n_neg > 0, "auc_roc: both classes must be present in truth");
  for (double s : scores) FELICIA_REQUIRE(!std::isnan(s), "auc_roc: NaN score");

  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double pos_rank_sum = 0.0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
    const double rank = 0.5 * static_cast<double>(i + 1 + j);  // mean of ranks i+1 .. j
    for (std::size_t k = i; k < j; ++k)
      if (truth[order[k]] == 1) pos_rank_sum += rank;
    i = j;
  }
  const double np = static_cast<double>(n_pos);
  const double nn = static_cast<double>(n_neg);
  return (pos_rank_sum - np * (np + 1.0) / 2.0) / (np * nn);
}

inline double accuracy(std::span<const int> predicted, std::span<const int> truth) {
  FELICIA_REQUIRE(predicted.size() == truth.size() && !truth.empty(), "accuracy: empty or mismatched inputs");
  std::size_t hit = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) hit += predicted[i] == truth[i] ? 1 : 0;
  return static_cast<double>(hit) / static_cast<double>(truth.size());
}

// Accuracy over the samples tagged `subgroup` only.
inline double subgroup_accuracy(std::span<const int> predicted, std::span<const int> truth,
                                std::span<const std::string> tags, const std::string& subgroup) {
  FELICIA_REQUIRE(predicted.size() == truth.size() && tags.size() == truth.size(),
                  "subgroup_accuracy: mismatched inputs");
  std::size_t n = 0;
  std::size_t hit = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (tags[i] != subgroup) continue;
    ++n;
    hit += predicted[i] == truth[i] ? 1 : 0;
  }
  FELICIA_REQUIRE(n > 0, "subgroup_accuracy: subgroup '" + subgroup + "' is empty");
  return static_cast<double>(hit) / static_cast<double>(n);
}

// Quantile with linear interpolation between order statistics (q in [0, 1]).
inline double quantile(std::vector<double> values, double q) {
  FELICIA_REQUIRE(!values.empty(), "quantile: empty input");
  FELICIA_REQUIRE(q >= 0.0 && q <= 1.0, "quantile: q must lie in [0, 1]");
  std::sort(values.begin(), values.end());
  const double pos = q * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  return values[lo] + (pos - static_cast<double>(lo)) * (values[hi] - values[lo]);
}

inline double median(std::vector<double> values) { return quantile(std::move(values), 0.5); }

struct RunAggregate {
  std::size_t count = 0;
  double median = 0.0;
  double lower_quartile = 0.0;
  double upper_quartile = 0.0;
  double whisker_low = 0.0;   // minimum
  double whisker_high = 0.0;  // maximum
};

inline RunAggregate aggregate_runs(const std::vector<double>& values) {
  FELICIA_REQUIRE(!values.empty(), "aggregate_runs: empty group");
  RunAggregate a;
  a.count = values.size();
  a.median = quantile(values, 0.5);
  a.lower_quartile = quantile(values, 0.25);
  a.upper_quartile = quantile(values, 0.75);
  a.whisker_low = *std::min_element(values.begin(), values.end());
  a.whisker_high = *std::max_element(values.begin(), values.end());
  return a;
}

template <typename Key>
std::map<Key, RunAggregate> aggregate_runs(const std::map<Key, std::vector<double>>& groups) {
  std::map<Key, RunAggregate> out;
  for (const auto& [k, v] : groups) out.emplace(k, aggregate_runs(v));
  return out;
}

}  // namespace felicia::eval
