// SPDX-License-Identifier: Apache-2.0
#include "tokd/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace tokd {

void ScoredPredictions::validate(bool need_both_classes) const {
  if (scores.empty() || scores.size() != labels.size()) {
    throw MetricError("predictions: empty or mismatched scores/labels");
  }
  bool has_pos = false, has_neg = false;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (!(scores[i] >= 0.0 && scores[i] <= 1.0)) {
      throw MetricError("predictions: score outside [0,1]");
    }
    if (labels[i] == 1) {
      has_pos = true;
    } else if (labels[i] == 0) {
      has_neg = true;
    } else {
      throw MetricError("predictions: label outside {0,1}");
    }
  }
  if (need_both_classes && !(has_pos && has_neg)) {
    throw MetricError("predictions: both classes required");
  }
}

double accuracy(const ScoredPredictions& p, double threshold) {
  p.validate(false);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < p.scores.size(); ++i) {
    const int pred = p.scores[i] >= threshold ? 1 : 0;
    if (pred == p.labels[i]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(p.scores.size());
}

double roc_auc(const ScoredPredictions& p) {
  p.validate(true);
  const std::size_t n = p.scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return p.scores[a] < p.scores[b];
  });
  // Average ranks over tie groups; rank sum of positives gives the
  // Mann-Whitney statistic.
  std::vector<double> rank(n);
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j + 1 < n && p.scores[order[j + 1]] == p.scores[order[i]]) ++j;
    const double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (std::size_t k = i; k <= j; ++k) rank[order[k]] = avg;
    i = j + 1;
  }
  double rank_sum_pos = 0.0;
  std::size_t n_pos = 0;
  for (std::size_t k = 0; k < n; ++k) {
    if (p.labels[k] == 1) {
      rank_sum_pos += rank[k];
      ++n_pos;
    }
  }
  const std::size_t n_neg = n - n_pos;
  const double u = rank_sum_pos -
                   static_cast<double>(n_pos) * (static_cast<double>(n_pos) + 1.0) / 2.0;
  return u / (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

double eer(const ScoredPredictions& p) {
  p.validate(true);
  std::vector<double> thresholds = p.scores;
  std::sort(thresholds.begin(), thresholds.end());
  thresholds.erase(std::unique(thresholds.begin(), thresholds.end()),
                   thresholds.end());
  // One threshold above every score so the sweep ends at FPR=0, FNR=1.
  thresholds.push_back(thresholds.back() + 1.0);
  std::size_t n_pos = 0, n_neg = 0;
  for (int l : p.labels) (l == 1 ? n_pos : n_neg)++;
  auto rates = [&](double t) {
    std::size_t fp = 0, fn = 0;
    for (std::size_t i = 0; i < p.scores.size(); ++i) {
      const bool predicted_pos = p.scores[i] >= t;
      if (predicted_pos && p.labels[i] == 0) ++fp;
      if (!predicted_pos && p.labels[i] == 1) ++fn;
    }
    return std::pair<double, double>(
        static_cast<double>(fp) / static_cast<double>(n_neg),
        static_cast<double>(fn) / static_cast<double>(n_pos));
  };
  auto [prev_fpr, prev_fnr] = rates(thresholds.front());
  if (prev_fpr == prev_fnr) return prev_fpr;
  for (std::size_t k = 1; k < thresholds.size(); ++k) {
    auto [fpr, fnr] = rates(thresholds[k]);
    const double prev_diff = prev_fpr - prev_fnr;
    const double diff = fpr - fnr;
    if (diff == 0.0) return fpr;
    if ((prev_diff > 0.0) != (diff > 0.0)) {
      const double alpha = prev_diff / (prev_diff - diff);
      return prev_fpr + alpha * (fpr - prev_fpr);
    }
    prev_fpr = fpr;
    prev_fnr = fnr;
  }
  // FPR-FNR never changes sign only in degenerate single-class cases,
  // which validate() excludes.
  throw MetricError("eer: no crossing found");
}

double grad_cosine(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size() || a.empty()) {
    throw MetricError("grad_cosine: size mismatch");
  }
  double na = 0.0, nb = 0.0, d = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    na += a[i] * a[i];
    nb += b[i] * b[i];
    d += a[i] * b[i];
  }
  if (na == 0.0 || nb == 0.0) throw MetricError("grad_cosine: zero vector");
  return d / (std::sqrt(na) * std::sqrt(nb));
}

}  // namespace tokd
