#include "ganshare/metrics/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

namespace ganshare::metrics {

EvalResult binary_metrics(const std::vector<double>& scores, const std::vector<int>& labels,
                          double threshold) {
  if (scores.empty()) throw DataError("binary_metrics: empty input");
  if (scores.size() != labels.size())
    throw DataError("binary_metrics: scores and labels differ in length");

  int n_pos = 0, n_neg = 0;
  for (int l : labels) {
    if (l == 1)
      n_pos++;
    else if (l == 0)
      n_neg++;
    else
      throw DataError("binary_metrics: labels must be 0 or 1");
  }

  // confusion counts at the threshold
  int64_t tp = 0, tn = 0, fp = 0, fn = 0;
  for (size_t i = 0; i < scores.size(); ++i) {
    const bool pred = scores[i] >= threshold;
    if (pred && labels[i] == 1) tp++;
    else if (pred && labels[i] == 0) fp++;
    else if (!pred && labels[i] == 1) fn++;
    else tn++;
  }
  EvalResult r;
  r.n_pos = n_pos;
  r.n_neg = n_neg;
  r.threshold = threshold;
  r.accuracy = static_cast<double>(tp + tn) / static_cast<double>(scores.size());
  r.f1 = (2 * tp + fp + fn) == 0 ? 0.0
                                 : 2.0 * static_cast<double>(tp) /
                                       static_cast<double>(2 * tp + fp + fn);

  if (n_pos == 0 || n_neg == 0)
    throw DataError("binary_metrics: AUROC/AUPRC need both classes present (n_pos=" +
                    std::to_string(n_pos) + ", n_neg=" + std::to_string(n_neg) + ")");

  // sweep distinct scores descending, grouping ties
  std::vector<size_t> order(scores.size());
  std::iota(order.begin(), order.end(), size_t{0});
  std::sort(order.begin(), order.end(), [&](size_t a, size_t b) {
    return scores[a] > scores[b];
  });

  double auroc = 0, auprc = 0;
  int64_t cum_tp = 0, cum_fp = 0;
  double prev_tpr = 0, prev_fpr = 0, prev_recall = 0;
  size_t i = 0;
  while (i < order.size()) {
    size_t j = i;
    int64_t grp_tp = 0, grp_fp = 0;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) {
      if (labels[order[j]] == 1)
        grp_tp++;
      else
        grp_fp++;
      j++;
    }
    cum_tp += grp_tp;
    cum_fp += grp_fp;
    const double tpr = static_cast<double>(cum_tp) / n_pos;
    const double fpr = static_cast<double>(cum_fp) / n_neg;
    auroc += (fpr - prev_fpr) * (tpr + prev_tpr) / 2.0;
    const double recall = tpr;
    const double precision = static_cast<double>(cum_tp) / static_cast<double>(cum_tp + cum_fp);
    auprc += (recall - prev_recall) * precision;
    prev_tpr = tpr;
    prev_fpr = fpr;
    prev_recall = recall;
    i = j;
  }
  r.auroc = auroc;
  r.auprc = auprc;
  return r;
}

namespace {
std::pair<double, double> mean_std(const std::vector<double>& xs) {
  const double n = static_cast<double>(xs.size());
  double mean = 0;
  for (double x : xs) mean += x;
  mean /= n;
  double var = 0;
  for (double x : xs) var += (x - mean) * (x - mean);
  var /= n;  // population
  return {mean, std::sqrt(var)};
}
}  // namespace

AggregateResult aggregate(const std::vector<EvalResult>& results,
                          const std::vector<uint64_t>& seeds) {
  if (results.empty()) throw DataError("aggregate: no results");
  AggregateResult a;
  a.seeds = seeds;
  std::vector<double> acc, f1, roc, prc;
  for (const auto& r : results) {
    acc.push_back(r.accuracy);
    f1.push_back(r.f1);
    roc.push_back(r.auroc);
    prc.push_back(r.auprc);
  }
  std::tie(a.mean_accuracy, a.std_accuracy) = mean_std(acc);
  std::tie(a.mean_f1, a.std_f1) = mean_std(f1);
  std::tie(a.mean_auroc, a.std_auroc) = mean_std(roc);
  std::tie(a.mean_auprc, a.std_auprc) = mean_std(prc);
  return a;
}

std::string mean_std_string(double mean, double stddev) {
  char m[32], s[32];
  std::snprintf(m, sizeof m, "%.3f", mean);
  std::snprintf(s, sizeof s, "%.3f", stddev);
  std::string sd(s);
  if (sd.size() > 1 && sd[0] == '0') sd.erase(0, 1);  // "0.005" -> ".005"
  return std::string(m) + "(" + sd + ")";
}

std::string AggregateResult::accuracy_str() const {
  return mean_std_string(mean_accuracy, std_accuracy);
}
std::string AggregateResult::f1_str() const { return mean_std_string(mean_f1, std_f1); }
std::string AggregateResult::auroc_str() const { return mean_std_string(mean_auroc, std_auroc); }
std::string AggregateResult::auprc_str() const { return mean_std_string(mean_auprc, std_auprc); }

json EvalResult::to_json() const {
  return json{{"accuracy", accuracy}, {"f1", f1},        {"auroc", auroc},
              {"auprc", auprc},       {"n_pos", n_pos},  {"n_neg", n_neg},
              {"threshold", threshold}};
}

EvalResult EvalResult::from_json(const json& j) {
  EvalResult r;
  r.accuracy = j.at("accuracy");
  r.f1 = j.at("f1");
  r.auroc = j.at("auroc");
  r.auprc = j.at("auprc");
  r.n_pos = j.at("n_pos");
  r.n_neg = j.at("n_neg");
  r.threshold = j.at("threshold");
  return r;
}

json AggregateResult::to_json() const {
  return json{{"seeds", seeds},
              {"accuracy", {{"mean", mean_accuracy}, {"std", std_accuracy}}},
              {"f1", {{"mean", mean_f1}, {"std", std_f1}}},
              {"auroc", {{"mean", mean_auroc}, {"std", std_auroc}}},
              {"auprc", {{"mean", mean_auprc}, {"std", std_auprc}}},
              {"formatted",
               {{"accuracy", accuracy_str()},
                {"f1", f1_str()},
                {"auroc", auroc_str()},
                {"auprc", auprc_str()}}}};
}

}  // namespace ganshare::metrics
