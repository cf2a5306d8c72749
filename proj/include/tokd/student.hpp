// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "tokd/nn.hpp"
#include "tokd/rotation.hpp"
#include "tokd/tensor.hpp"

namespace tokd {

struct StudentConfig {
  std::size_t in_channels = 3;
  std::vector<std::size_t> stage_channels = {16, 32, 64};
  std::size_t proj_channels = 0;  // distillation width C_d; 0 = last stage
  std::size_t rotation_d = 64;
  StepLrSchedule rotation_lr;
  std::uint64_t seed = 0;

  std::size_t distill_channels() const {
    return proj_channels != 0 ? proj_channels : stage_channels.back();
  }
  void validate() const;
};

/// Single-branch student: backbone S_B, rotation pair on the flattened
/// backbone feature, projectors G_Sr (2 convs) / G_Sf (3 convs) into the
/// shared distillation space, and classifier G_Sc on the unrotated feature.
struct StudentNet {
  StudentConfig config;
  NetworkGraph backbone;
  NetworkGraph proj_rgb, proj_fre;
  NetworkGraph classifier;  // global_avg_pool + linear(2)
  RotationPair rotation;
  std::uint64_t rotation_eval_count = 0;

  // Shape of the backbone output feature (C×H×W) for a given image size;
  // cached at construction-time validation.
  std::vector<std::size_t> feature_shape;  // {C_s, H, W}
  std::size_t image_size = 0;
  std::size_t flat_features() const {
    return feature_shape[0] * feature_shape[1] * feature_shape[2];
  }

  std::vector<ParamRef> backbone_params();
  std::vector<ParamRef> classifier_params();
  std::vector<ParamRef> projector_rgb_params();
  std::vector<ParamRef> projector_fre_params();
  std::vector<std::pair<std::string, Tensor*>> state();
  /// Backbone + classifier state only (the deployable artifact).
  std::vector<std::pair<std::string, Tensor*>> inference_state();
  void zero_grad();
};

/// Builds the student and validates that rotation_d fits the flattened
/// backbone feature for the given input image size.
StudentNet make_student(const StudentConfig& cfg, std::size_t image_size);

struct StudentForward {
  Tensor z;       // N×C_s×H×W backbone feature
  Tensor m_rgb;   // N×M rotated flat feature (empty when branch disabled)
  Tensor m_fre;
  Tensor f_sr;    // projector outputs (empty when branch disabled)
  Tensor f_sf;
  Tensor logits;  // N×2
};

/// Training path: z = S_B(x); m_k = rotate(flat z, R_k); F_Sk = G_Sk(m_k
/// reshaped to C_s×H×W); logits = G_Sc(z) from the unrotated feature.
/// use_rgb / use_fre gate the projector branches (mode ablations).
StudentForward student_forward_train(StudentNet& s, const Tensor& x, Mode mode,
                                     bool use_rgb, bool use_fre);

/// Accumulates gradients for the training path. d_f_sr / d_f_sf may be null
/// when the corresponding branch was disabled in the forward. Returns dL/dx.
Tensor student_backward(StudentNet& s, const Tensor& d_logits,
                        const Tensor* d_f_sr, const Tensor* d_f_sf);

/// Deployment path: softmax(G_Sc(S_B(x))). Projectors and rotations are
/// never evaluated (counter-checked in tests).
Tensor student_predict(StudentNet& s, const Tensor& x);

/// inference_only drops projectors and rotation matrices from the artifact.
void save_student(StudentNet& s, const std::string& path, bool inference_only);
StudentNet load_student(const std::string& path);

}  // namespace tokd
