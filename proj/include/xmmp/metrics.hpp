#pragma once

#include <span>
#include <stdexcept>
#include <vector>

namespace xmmp::metrics {

class MetricError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Normalised Mann-Whitney U; tied scores count one half. Labels are 0/1.
double auc_roc(std::span<const int> labels, std::span<const double> scores);

// Average precision, sum over thresholds of (R_k - R_{k-1}) * P_k. Tied
// scores form a single threshold, so all-equal scores give the prevalence.
double auc_pr(std::span<const int> labels, std::span<const double> scores);

struct Summary {
  double mean = 0.0;
  double sd = 0.0;
  // mean +/- 1.96 sd / sqrt(n)
  double ci_low = 0.0;
  double ci_high = 0.0;
};

Summary summarize(std::span<const double> values);

}  // namespace xmmp::metrics
