// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "tokd/datagen.hpp"
#include "tokd/nn.hpp"
#include "tokd/tensor.hpp"

namespace tokd {

/// Concatenates two N×C_i×H×W tensors along the channel axis.
Tensor concat_channels(const Tensor& a, const Tensor& b);
/// Splits an N×C×H×W tensor (C even) into two N×C/2×H×W halves.
std::pair<Tensor, Tensor> split_channels(const Tensor& x);

struct TeacherConfig {
  std::size_t in_channels = 3;
  std::vector<std::size_t> stage_channels = {16, 32, 64};
  std::size_t rfam_blocks = 3;   // cross-attention sites; 0 disables
  std::size_t proj_channels = 0; // distillation width C_d; 0 = last stage
  std::uint64_t seed = 0;

  std::size_t distill_channels() const {
    return proj_channels != 0 ? proj_channels : stage_channels.back();
  }
  void validate() const;
};

/// Cross-branch attention: concat(f_rgb, f_fre) runs through two conv
/// modules and a sigmoid; the 2C output splits into per-branch attention
/// maps that scale each branch multiplicatively.
struct RfamBlock {
  std::size_t channels = 0;
  NetworkGraph attn;  // conv3x3(2C->2C)+BN+ReLU, twice, then sigmoid

  // Caches from the last training forward, consumed by rfam_backward.
  Tensor in_rgb_cache, in_fre_cache, attn_rgb_cache, attn_fre_cache;
  bool has_cache = false;
};

/// Dual-branch teacher: spatial branch on x, high-pass branch on x^F,
/// cross-attention after the leading stages, and a fused classifier head.
/// proj_rgb / proj_fre map the final branch features into the shared
/// distillation space.
struct TeacherNet {
  TeacherConfig config;
  std::vector<NetworkGraph> rgb_stages, fre_stages;
  std::vector<RfamBlock> rfam;
  NetworkGraph fusion_head;          // global_avg_pool + linear(2)
  NetworkGraph proj_rgb, proj_fre;   // G_Tr (3 convs), G_Tf (5 convs)

  /// Backbone + attention + head parameters (frozen during distillation).
  std::vector<ParamRef> backbone_params();
  /// Projector parameters (trained by the distillation losses).
  std::vector<ParamRef> projector_params();
  std::vector<std::pair<std::string, Tensor*>> state();
  void zero_grad();
};

TeacherNet make_teacher(const TeacherConfig& cfg);

std::pair<Tensor, Tensor> rfam_forward(RfamBlock& block, const Tensor& f_rgb,
                                       const Tensor& f_fre, Mode mode);
/// Gradients w.r.t. both RFAM inputs; accumulates attention parameter grads.
std::pair<Tensor, Tensor> rfam_backward(RfamBlock& block,
                                        const Tensor& up_rgb,
                                        const Tensor& up_fre);

struct TeacherForward {
  Tensor logits;    // N×2
  Tensor feat_rgb;  // final spatial-branch feature
  Tensor feat_fre;  // final high-pass-branch feature
};

TeacherForward teacher_forward(TeacherNet& t, const Tensor& x,
                               const Tensor& x_f, Mode mode);
/// Backward through head, attention, and both branches from d logits;
/// returns gradients w.r.t. (x, x_f). Requires a cached training forward.
std::pair<Tensor, Tensor> teacher_backward(TeacherNet& t,
                                           const Tensor& d_logits);

/// (F_Tr, F_Tf) = (G_Tr(feat_rgb), G_Tf(feat_fre)).
std::pair<Tensor, Tensor> teacher_project(TeacherNet& t, const Tensor& feat_rgb,
                                          const Tensor& feat_fre, Mode mode);

struct TeacherTrainConfig {
  int epochs = 10;
  std::size_t batch_size = 32;
  StepLrSchedule lr_schedule;
  std::uint64_t seed = 0;
};

struct TeacherTrainReport {
  std::vector<double> train_loss;  // per epoch, mean over steps
  std::vector<double> train_acc;
  std::vector<double> val_acc;
};

/// Supervised training of branches + attention + head with cross-entropy.
/// Projectors are left untouched (they train during distillation).
TeacherTrainReport train_teacher(TeacherNet& t, const LabeledDataset& data,
                                 const TeacherTrainConfig& cfg);

void save_teacher(TeacherNet& t, const std::string& path);
TeacherNet load_teacher(const std::string& path);

}  // namespace tokd
