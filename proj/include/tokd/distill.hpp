// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "tokd/datagen.hpp"
#include "tokd/metrics.hpp"
#include "tokd/student.hpp"
#include "tokd/teacher.hpp"

namespace tokd {

enum class DistillMode { kVanilla, kRgbOnly, kFreOnly, kNaiveBoth, kTokd };

std::string mode_name(DistillMode m);
DistillMode mode_from_name(const std::string& name);

inline bool mode_uses_rgb(DistillMode m) {
  return m == DistillMode::kRgbOnly || m == DistillMode::kNaiveBoth ||
         m == DistillMode::kTokd;
}
inline bool mode_uses_fre(DistillMode m) {
  return m == DistillMode::kFreOnly || m == DistillMode::kNaiveBoth ||
         m == DistillMode::kTokd;
}

struct DistillConfig {
  DistillMode mode = DistillMode::kTokd;
  double alpha1 = 10.0;
  double alpha2 = 10.0;
  std::size_t d = 64;
  StepLrSchedule eta_s{1e-4, 5, 0.1};
  // Leader schedule: same base, same step, smaller gamma, so the ratio
  // eta_r/eta_s is non-increasing and the leader decays strictly faster.
  StepLrSchedule eta_r{1e-4, 5, 0.01};
  int epochs = 15;
  std::size_t batch_size = 32;
  HighPassSpec highpass;
  std::uint64_t seed = 0;
  std::string distance_metric = "mse";
  bool normalize_grads = false;
  // Learning-rate multiplier for the teacher-side projectors G_Tr/G_Tf.
  // They train under the same losses as the student, but a scale < 1 keeps
  // the distillation targets from chasing the student features too quickly.
  double teacher_proj_lr_scale = 1.0;
  StudentConfig student;

  void validate() const;
  /// FNV-1a hash of the canonical serialized config (reproducibility tag).
  std::uint64_t config_hash() const;
  std::string to_json() const;
};

/// Distance between per-sample globally L2-normalized features: for each
/// sample, ||F_S/|F_S| − F_T/|F_T|||² / dim, averaged over the batch.
/// Returns the loss and its gradient w.r.t. F_S (normalization Jacobian
/// included). Throws NumericError naming the sample on a zero-norm feature.
std::pair<double, Tensor> kd_loss(const Tensor& f_s, const Tensor& f_t);

/// L_S = L_Cls + α₁·L_KD_RGB + α₂·L_KD_Fre with mode-gated terms.
double total_loss(double cls, double kd_rgb, double kd_fre,
                  const DistillConfig& cfg);

struct Batch {
  Tensor x, x_f;
  std::vector<int> labels;
  // Frozen teacher branch features for these samples (empty in vanilla).
  Tensor t_feat_rgb, t_feat_fre;
};

struct StepReport {
  double loss_cls = 0.0;
  double loss_kd_rgb = 0.0;
  double loss_kd_fre = 0.0;
  double loss_rot_rgb = 0.0;
  double loss_rot_fre = 0.0;
  double total = 0.0;
  double cos_raw = std::numeric_limits<double>::quiet_NaN();
  double cos_rotated = std::numeric_limits<double>::quiet_NaN();
};

/// One alternating update: follower (student + all projectors, Adam at
/// η_S(epoch)), then leader (rotation pair via Cayley steps at η_R(epoch),
/// tokd mode only). naive_both still records gradient cosines for the
/// diagnostics without touching the rotations.
StepReport distill_step(StudentNet& s, TeacherNet* teacher, const Batch& batch,
                        const DistillConfig& cfg, AdamState& adam, int epoch);

struct EpochRow {
  int epoch = 0;
  double lr_s = 0.0, lr_r = 0.0;
  double l_cls = 0.0, l_kd_rgb = 0.0, l_kd_fre = 0.0;
  double l_rr = 0.0, l_rf = 0.0;
  double cos_raw = std::numeric_limits<double>::quiet_NaN();
  double cos_rotated = std::numeric_limits<double>::quiet_NaN();
  double val_acc = 0.0, val_auc = 0.0;
};

struct ExperimentResult {
  std::vector<EpochRow> epochs;
  std::vector<StepReport> steps;
  int best_epoch = -1;  // -1 when epochs == 0
  double best_val_acc = 0.0;
  double test_acc = 0.0, test_auc = 0.0, test_eer = 0.0;
  std::uint64_t config_hash = 0;
  StudentNet student;  // weights restored to the best validation epoch
};

/// Scores (probability of class 1) for one split of the dataset.
ScoredPredictions evaluate_student(StudentNet& s, const LabeledDataset& data,
                                   Split split, std::size_t batch_size);

/// Full training loop: teacher branch features are computed once (frozen
/// backbone), epochs iterate seeded shuffles of distill_step, the best
/// model is picked by validation accuracy (earliest epoch on ties). When
/// out_dir is nonempty, writes metrics.csv, steps.csv, summary.json and the
/// full + inference checkpoints there. teacher may be null in vanilla mode.
ExperimentResult run_distillation(const DistillConfig& cfg, TeacherNet* teacher,
                                  const LabeledDataset& data,
                                  const std::string& out_dir = "");

/// Plain supervised reference trainer: same student construction, shuffle
/// streams, and Adam sequence as vanilla-mode distillation, but written as
/// an independent loop (backbone + classifier + cross-entropy only).
StudentNet train_supervised(const DistillConfig& cfg,
                            const LabeledDataset& data);

}  // namespace tokd
