// SPDX-License-Identifier: Apache-2.0
#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

#include "doctest.h"
#include "tokd/metrics.hpp"

using namespace tokd;

namespace {

// O(P*N) all-pairs AUC oracle with half credit for ties.
double auc_all_pairs(const ScoredPredictions& p) {
  double wins = 0.0;
  std::size_t pairs = 0;
  for (std::size_t i = 0; i < p.labels.size(); ++i) {
    if (p.labels[i] != 1) continue;
    for (std::size_t j = 0; j < p.labels.size(); ++j) {
      if (p.labels[j] != 0) continue;
      ++pairs;
      if (p.scores[i] > p.scores[j])
        wins += 1.0;
      else if (p.scores[i] == p.scores[j])
        wins += 0.5;
    }
  }
  return wins / static_cast<double>(pairs);
}

// Dense-grid EER oracle: scan thresholds, find the FPR/FNR crossing by
// linear interpolation between adjacent grid points.
double eer_grid_oracle(const ScoredPredictions& p, std::size_t grid = 2000001) {
  const double lo = *std::min_element(p.scores.begin(), p.scores.end()) - 1e-6;
  const double hi = *std::max_element(p.scores.begin(), p.scores.end()) + 1e-6;
  auto rates = [&](double thr) {
    std::size_t fp = 0, fn = 0, neg = 0, pos = 0;
    for (std::size_t i = 0; i < p.labels.size(); ++i) {
      if (p.labels[i] == 1) {
        ++pos;
        if (p.scores[i] < thr) ++fn;
      } else {
        ++neg;
        if (p.scores[i] >= thr) ++fp;
      }
    }
    return std::pair<double, double>(static_cast<double>(fp) / neg,
                                     static_cast<double>(fn) / pos);
  };
  double prev_thr = lo;
  auto [pfpr, pfnr] = rates(lo);
  for (std::size_t k = 1; k < grid; ++k) {
    const double thr = lo + (hi - lo) * k / (grid - 1);
    auto [fpr, fnr] = rates(thr);
    const double prev_diff = pfpr - pfnr, diff = fpr - fnr;
    if (prev_diff >= 0.0 && diff <= 0.0) {
      if (prev_diff == diff) return 0.5 * (pfpr + pfnr);
      const double t = prev_diff / (prev_diff - diff);
      return 0.5 * ((pfpr + t * (fpr - pfpr)) + (pfnr + t * (fnr - pfnr)));
    }
    prev_thr = thr;
    pfpr = fpr;
    pfnr = fnr;
  }
  (void)prev_thr;
  return 0.5 * (pfpr + pfnr);
}

ScoredPredictions random_predictions(std::size_t n, std::uint64_t seed,
                                     double separation) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> noise(0.0, 1.0);
  ScoredPredictions p;
  for (std::size_t i = 0; i < n; ++i) {
    const int label = static_cast<int>(i % 2);
    p.labels.push_back(label);
    double s = 1.0 / (1.0 + std::exp(-(noise(rng) + separation * label)));
    p.scores.push_back(s);
  }
  return p;
}

}  // namespace

TEST_CASE("accuracy counting oracle with >= threshold convention") {
  ScoredPredictions p{{0.9, 0.4, 0.5, 0.1, 0.6}, {1, 0, 1, 0, 0}};
  // predictions at 0.5: 1, 0, 1, 0, 1 -> 4 correct of 5.
  CHECK(accuracy(p) == doctest::Approx(0.8));
  CHECK(accuracy(p, 0.95) == doctest::Approx(0.6));  // all predicted 0
}

TEST_CASE("perfect and inverted separations") {
  ScoredPredictions perfect{{0.1, 0.9, 0.2, 0.8}, {0, 1, 0, 1}};
  CHECK(roc_auc(perfect) == 1.0);
  CHECK(eer(perfect) == doctest::Approx(0.0));
  ScoredPredictions inverted{{0.9, 0.1, 0.8, 0.2}, {0, 1, 0, 1}};
  CHECK(roc_auc(inverted) == 0.0);
  CHECK(eer(inverted) == doctest::Approx(1.0));
}

TEST_CASE("rank-based AUC equals all-pairs oracle exactly") {
  for (std::uint64_t seed : {11u, 12u, 13u, 14u, 15u}) {
    ScoredPredictions p = random_predictions(200, seed, 1.0);
    CHECK(roc_auc(p) == auc_all_pairs(p));
  }
}

TEST_CASE("AUC tie handling gives half credit") {
  ScoredPredictions p{{0.5, 0.5, 0.5, 0.5}, {0, 1, 0, 1}};
  CHECK(roc_auc(p) == 0.5);
  ScoredPredictions mixed{{0.3, 0.3, 0.7}, {0, 1, 1}};
  CHECK(roc_auc(mixed) == auc_all_pairs(mixed));
}

TEST_CASE("AUC is invariant under strictly monotone score transforms") {
  ScoredPredictions p = random_predictions(150, 21, 0.8);
  const double base = roc_auc(p);
  ScoredPredictions q = p;
  for (double& s : q.scores) s = s * s * s;  // strictly increasing on [0,1]
  CHECK(roc_auc(q) == doctest::Approx(base).epsilon(1e-15));
}

TEST_CASE("EER matches dense-grid oracle within 1e-6") {
  for (std::uint64_t seed : {31u, 32u, 33u}) {
    ScoredPredictions p = random_predictions(120, seed, 1.2);
    CHECK(std::abs(eer(p) - eer_grid_oracle(p)) < 1e-6);
  }
}

TEST_CASE("EER of symmetric chance-level scores is one half") {
  // Scores identical across classes: FPR = FNR = 0.5 at the crossing.
  ScoredPredictions p;
  for (std::size_t i = 0; i < 50; ++i) {
    p.scores.push_back(0.01 * static_cast<double>(i));
    p.scores.push_back(0.01 * static_cast<double>(i));
    p.labels.push_back(0);
    p.labels.push_back(1);
  }
  CHECK(eer(p) == doctest::Approx(0.5).epsilon(1e-9));
}

TEST_CASE("validation rejects malformed predictions") {
  CHECK_THROWS_AS(roc_auc(ScoredPredictions{{0.5}, {1, 0}}), MetricError);
  CHECK_THROWS_AS(roc_auc(ScoredPredictions{{}, {}}), MetricError);
  CHECK_THROWS_AS(roc_auc(ScoredPredictions{{0.1, 0.2}, {1, 1}}), MetricError);
  CHECK_THROWS_AS(eer(ScoredPredictions{{0.1, 0.2}, {0, 0}}), MetricError);
  CHECK_THROWS_AS(roc_auc(ScoredPredictions{{0.1, 0.2}, {0, 2}}), MetricError);
  // accuracy does not require both classes.
  CHECK(accuracy(ScoredPredictions{{0.9, 0.8}, {1, 1}}) == 1.0);
}

TEST_CASE("grad_cosine closed forms and zero-vector error") {
  CHECK(grad_cosine({1, 0, 0}, {2, 0, 0}) == doctest::Approx(1.0));
  CHECK(grad_cosine({1, 0}, {0, 3}) == doctest::Approx(0.0));
  CHECK(grad_cosine({1, 1}, {-2, -2}) == doctest::Approx(-1.0));
  CHECK_THROWS_AS(grad_cosine({0, 0}, {1, 2}), MetricError);
  CHECK_THROWS_AS(grad_cosine({1, 2}, {1, 2, 3}), MetricError);
}
