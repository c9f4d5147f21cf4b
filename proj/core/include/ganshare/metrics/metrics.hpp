#pragma once

#include <json.hpp>

#include <cstdint>
#include <string>
#include <vector>

#include "ganshare/common/error.hpp"

namespace ganshare::metrics {

using nlohmann::json;

struct EvalResult {
  double accuracy = 0, f1 = 0, auroc = 0, auprc = 0;
  int n_pos = 0, n_neg = 0;
  double threshold = 0.5;

  json to_json() const;
  static EvalResult from_json(const json& j);
};

// Positive class is non_healthy (label 1). Scores are P(non_healthy).
// accuracy/F1 at `threshold` (score >= threshold predicts positive);
// AUROC via trapezoidal rule with tied scores grouped into single steps
// (equivalent to the pairwise statistic with half credit for ties);
// AUPRC via the step-wise rule: sum over distinct-score groups of
// (recall_k - recall_{k-1}) * precision_k.
EvalResult binary_metrics(const std::vector<double>& scores, const std::vector<int>& labels,
                          double threshold = 0.5);

struct AggregateResult {
  std::vector<uint64_t> seeds;
  double mean_accuracy = 0, std_accuracy = 0;
  double mean_f1 = 0, std_f1 = 0;
  double mean_auroc = 0, std_auroc = 0;
  double mean_auprc = 0, std_auprc = 0;

  std::string accuracy_str() const;
  std::string f1_str() const;
  std::string auroc_str() const;
  std::string auprc_str() const;

  json to_json() const;
};

// mean and population standard deviation (denominator n) over per-seed runs.
AggregateResult aggregate(const std::vector<EvalResult>& results,
                          const std::vector<uint64_t>& seeds = {});

// Table formatting used in reports: mean to 3 decimals, std in parentheses
// with the leading zero dropped, e.g. "0.942(.005)".
std::string mean_std_string(double mean, double stddev);

}  // namespace ganshare::metrics
