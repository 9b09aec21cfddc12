#include "xmmp/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

namespace xmmp::metrics {

namespace {

void check_inputs(std::span<const int> labels, std::span<const double> scores) {
  if (labels.size() != scores.size()) {
    throw MetricError("labels and scores differ in length (" + std::to_string(labels.size()) + " vs " +
                      std::to_string(scores.size()) + ")");
  }
  for (int y : labels) {
    if (y != 0 && y != 1) throw MetricError("labels must be 0 or 1");
  }
  for (double s : scores) {
    if (!std::isfinite(s)) throw MetricError("scores must be finite");
  }
}

// Indices by score descending, index ascending.
std::vector<std::size_t> descending_order(std::span<const double> scores) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  return order;
}

}  // namespace

double auc_roc(std::span<const int> labels, std::span<const double> scores) {
  check_inputs(labels, scores);
  const auto pos = static_cast<std::size_t>(std::count(labels.begin(), labels.end(), 1));
  const std::size_t neg = labels.size() - pos;
  if (pos == 0 || neg == 0) throw MetricError("auc_roc needs both classes present");

  // Walk tie groups from the highest score down. Each positive beats every
  // negative below its group and half of the negatives inside it.
  const auto order = descending_order(scores);
  double concordant = 0.0;
  std::size_t neg_below = neg;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    std::size_t p = 0, n = 0;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) {
      (labels[order[j]] == 1 ? p : n) += 1;
      ++j;
    }
    neg_below -= n;
    concordant += static_cast<double>(p) * (static_cast<double>(neg_below) + 0.5 * static_cast<double>(n));
    i = j;
  }
  return concordant / (static_cast<double>(pos) * static_cast<double>(neg));
}

double auc_pr(std::span<const int> labels, std::span<const double> scores) {
  check_inputs(labels, scores);
  const auto pos = static_cast<std::size_t>(std::count(labels.begin(), labels.end(), 1));
  if (pos == 0) throw MetricError("auc_pr needs at least one positive");

  const auto order = descending_order(scores);
  double ap = 0.0;
  std::size_t tp = 0, seen = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i, group_tp = 0;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) {
      group_tp += static_cast<std::size_t>(labels[order[j]]);
      ++j;
    }
    tp += group_tp;
    seen += j - i;
    if (group_tp > 0) {
      ap += (static_cast<double>(group_tp) / static_cast<double>(pos)) *
            (static_cast<double>(tp) / static_cast<double>(seen));
    }
    i = j;
  }
  return ap;
}

Summary summarize(std::span<const double> values) {
  if (values.empty()) throw MetricError("cannot summarise an empty sample");
  Summary s;
  const auto n = static_cast<double>(values.size());
  s.mean = std::accumulate(values.begin(), values.end(), 0.0) / n;
  if (values.size() > 1) {
    double ss = 0.0;
    for (double v : values) ss += (v - s.mean) * (v - s.mean);
    s.sd = std::sqrt(ss / (n - 1.0));
  }
  const double half = 1.96 * s.sd / std::sqrt(n);
  s.ci_low = s.mean - half;
  s.ci_high = s.mean + half;
  return s;
}

}  // namespace xmmp::metrics
