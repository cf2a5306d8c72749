// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <vector>

#include "tokd/error.hpp"
#include "tokd/tensor.hpp"

namespace tokd {

/// Frame-level scored predictions: scores[i] is the probability of the
/// "fake" class for sample i.
struct ScoredPredictions {
  std::vector<double> scores;
  std::vector<int> labels;

  void validate(bool need_both_classes) const;
};

/// Fraction of samples with (score >= threshold) == label.
double accuracy(const ScoredPredictions& p, double threshold = 0.5);

/// Mann-Whitney AUC: P(score_pos > score_neg) + 0.5 P(tie), via ranks.
double roc_auc(const ScoredPredictions& p);

/// Equal error rate: FPR at the FPR = FNR crossing, linearly interpolated
/// between adjacent thresholds.
double eer(const ScoredPredictions& p);

/// Cosine similarity of two same-length vectors; throws MetricError on a
/// zero vector.
double grad_cosine(const std::vector<double>& a, const std::vector<double>& b);

}  // namespace tokd
