// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <vector>

#include "tokd/nn.hpp"
#include "tokd/tensor.hpp"

namespace tokd {

/// Two d×d special-orthogonal matrices applied to the leading d components
/// of the flattened student backbone feature.
struct RotationPair {
  std::size_t d = 0;
  Tensor r_rgb, r_fre;
  StepLrSchedule lr_schedule;

  RotationPair() = default;
  RotationPair(std::size_t dim, StepLrSchedule schedule)
      : d(dim),
        r_rgb(Tensor::identity(dim)),
        r_fre(Tensor::identity(dim)),
        lr_schedule(schedule) {
    if (dim == 0) throw ConfigError("RotationPair: d must be positive");
  }

  /// Throws NumericError when either matrix drifted off SO(d).
  void check_invariants(double tol = 1e-6) const;
};

/// Frobenius distance of R^T R from the identity.
double orthogonality_error(const Tensor& r);

/// Determinant via LU decomposition.
double determinant(const Tensor& r);

/// Rotates the first d components of each row of z [N×M] by R [d×d];
/// the remaining M-d components pass through unchanged.
Tensor rotate(const Tensor& z, const Tensor& r);

/// Gradient of rotate w.r.t. z: applies R^T to the leading block.
Tensor rotate_backward(const Tensor& upstream, const Tensor& r);

/// Per-sample distillation gradients restricted to the rotated subspace.
/// raw_* live in the rotated feature space (one d-vector per sample);
/// v_* = R_k^T raw_* live in the shared space; g = (v_rgb + v_fre) / 2.
struct GradientRecord {
  std::vector<Tensor> raw_rgb, raw_fre;
  std::vector<Tensor> v_rgb, v_fre;
  std::vector<Tensor> g;
  // Cosine between batch-mean gradients; NaN when a mean is zero.
  double mean_cos_raw = 0.0;
  double mean_cos_rotated = 0.0;
};

/// Builds the record from full per-sample gradients w.r.t. the rotated
/// features m_r, m_f (each [N×M]; only the leading d components are used).
/// When normalize_grads is set, per-sample vectors are unit-normalized
/// before averaging into g.
GradientRecord make_gradient_record(const Tensor& grads_m_rgb,
                                    const Tensor& grads_m_fre,
                                    const RotationPair& rot,
                                    bool normalize_grads = false);

enum class BranchKind { kRgb, kFre };

/// L_Rk = -sum_n cos(R_k^T u_n, g_n) with u_n and g_n treated as constants.
/// Returns the loss and its Euclidean gradient w.r.t. R_k. Samples with a
/// zero-norm gradient or target contribute zero (logged once per call).
std::pair<double, Tensor> rotation_loss(const GradientRecord& rec,
                                        const Tensor& r_k, BranchKind k);

/// Riemannian step on SO(d): tangent projection via the skew part
/// A = (G R^T - R G^T)/2 followed by the Cayley retraction
/// R <- (I + (lr/2)A)^{-1} (I - (lr/2)A) R. On a singular Cayley system the
/// step is retried with halved lr up to 5 times, then throws NumericError.
Tensor manifold_update(const Tensor& r, const Tensor& grad, double lr);

}  // namespace tokd
