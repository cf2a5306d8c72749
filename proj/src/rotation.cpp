// SPDX-License-Identifier: Apache-2.0
#include "tokd/rotation.hpp"

#include <cmath>
#include <iostream>
#include <limits>

namespace tokd {

double orthogonality_error(const Tensor& r) {
  Tensor gram = matmul(transpose2d(r), r);
  const std::size_t n = r.dim(0);
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      const double d = gram.at(i, j) - (i == j ? 1.0 : 0.0);
      acc += d * d;
    }
  }
  return std::sqrt(acc);
}

double determinant(const Tensor& r) {
  if (r.rank() != 2 || r.dim(0) != r.dim(1)) {
    throw ShapeError("determinant: expected square matrix");
  }
  const std::size_t n = r.dim(0);
  Tensor lu = r;
  double det = 1.0;
  for (std::size_t col = 0; col < n; ++col) {
    std::size_t best = col;
    double best_abs = std::abs(lu.at(col, col));
    for (std::size_t row = col + 1; row < n; ++row) {
      if (std::abs(lu.at(row, col)) > best_abs) {
        best = row;
        best_abs = std::abs(lu.at(row, col));
      }
    }
    if (best_abs == 0.0) return 0.0;
    if (best != col) {
      for (std::size_t j = 0; j < n; ++j) std::swap(lu.at(col, j), lu.at(best, j));
      det = -det;
    }
    det *= lu.at(col, col);
    for (std::size_t row = col + 1; row < n; ++row) {
      const double f = lu.at(row, col) / lu.at(col, col);
      if (f == 0.0) continue;
      for (std::size_t j = col; j < n; ++j) lu.at(row, j) -= f * lu.at(col, j);
    }
  }
  return det;
}

void RotationPair::check_invariants(double tol) const {
  for (const Tensor* r : {&r_rgb, &r_fre}) {
    const double ortho = orthogonality_error(*r);
    if (ortho >= tol) {
      throw NumericError("RotationPair: orthogonality drift " +
                         std::to_string(ortho));
    }
    const double det = determinant(*r);
    if (std::abs(det - 1.0) >= tol) {
      throw NumericError("RotationPair: determinant drift " +
                         std::to_string(det));
    }
  }
}

Tensor rotate(const Tensor& z, const Tensor& r) {
  if (z.rank() != 2) throw ShapeError("rotate: expected N×M input");
  const std::size_t d = r.dim(0);
  const std::size_t m = z.dim(1);
  if (d > m) {
    throw ConfigError("rotate: rotation dimension " + std::to_string(d) +
                      " exceeds feature length " + std::to_string(m));
  }
  Tensor out = z;
  for (std::size_t n = 0; n < z.dim(0); ++n) {
    const double* zn = z.data() + n * m;
    double* on = out.data() + n * m;
    for (std::size_t i = 0; i < d; ++i) {
      const double* ri = r.data() + i * d;
      double acc = 0.0;
      for (std::size_t j = 0; j < d; ++j) acc += ri[j] * zn[j];
      on[i] = acc;
    }
  }
  return out;
}

Tensor rotate_backward(const Tensor& upstream, const Tensor& r) {
  const std::size_t d = r.dim(0);
  const std::size_t m = upstream.dim(1);
  Tensor out = upstream;
  for (std::size_t n = 0; n < upstream.dim(0); ++n) {
    const double* un = upstream.data() + n * m;
    double* on = out.data() + n * m;
    for (std::size_t j = 0; j < d; ++j) {
      double acc = 0.0;
      for (std::size_t i = 0; i < d; ++i) acc += r.at(i, j) * un[i];
      on[j] = acc;
    }
  }
  return out;
}

namespace {

Tensor head(const Tensor& row_matrix, std::size_t n, std::size_t d) {
  Tensor v({d});
  const double* p = row_matrix.data() + n * row_matrix.dim(1);
  for (std::size_t i = 0; i < d; ++i) v[i] = p[i];
  return v;
}

Tensor apply_transpose(const Tensor& r, const Tensor& v) {
  const std::size_t d = r.dim(0);
  Tensor out({d});
  for (std::size_t j = 0; j < d; ++j) {
    double acc = 0.0;
    for (std::size_t i = 0; i < d; ++i) acc += r.at(i, j) * v[i];
    out[j] = acc;
  }
  return out;
}

double guarded_cosine(const Tensor& a, const Tensor& b) {
  const double na = l2_norm(a), nb = l2_norm(b);
  if (na == 0.0 || nb == 0.0) return std::numeric_limits<double>::quiet_NaN();
  return dot(a, b) / (na * nb);
}

}  // namespace

GradientRecord make_gradient_record(const Tensor& grads_m_rgb,
                                    const Tensor& grads_m_fre,
                                    const RotationPair& rot,
                                    bool normalize_grads) {
  if (!grads_m_rgb.same_shape(grads_m_fre)) {
    throw ShapeError("gradient record: branch gradient shapes differ");
  }
  const std::size_t n_samples = grads_m_rgb.dim(0);
  const std::size_t d = rot.d;
  GradientRecord rec;
  rec.raw_rgb.reserve(n_samples);
  rec.raw_fre.reserve(n_samples);
  Tensor mean_raw_rgb({d}), mean_raw_fre({d}), mean_v_rgb({d}), mean_v_fre({d});
  for (std::size_t n = 0; n < n_samples; ++n) {
    Tensor u_r = head(grads_m_rgb, n, d);
    Tensor u_f = head(grads_m_fre, n, d);
    Tensor v_r = apply_transpose(rot.r_rgb, u_r);
    Tensor v_f = apply_transpose(rot.r_fre, u_f);
    Tensor vr_avg = v_r, vf_avg = v_f;
    if (normalize_grads) {
      const double nr = l2_norm(vr_avg), nf = l2_norm(vf_avg);
      if (nr > 0.0) vr_avg = scale(vr_avg, 1.0 / nr);
      if (nf > 0.0) vf_avg = scale(vf_avg, 1.0 / nf);
    }
    Tensor g({d});
    for (std::size_t i = 0; i < d; ++i) g[i] = 0.5 * (vr_avg[i] + vf_avg[i]);
    axpy(mean_raw_rgb, 1.0 / static_cast<double>(n_samples), u_r);
    axpy(mean_raw_fre, 1.0 / static_cast<double>(n_samples), u_f);
    axpy(mean_v_rgb, 1.0 / static_cast<double>(n_samples), v_r);
    axpy(mean_v_fre, 1.0 / static_cast<double>(n_samples), v_f);
    rec.raw_rgb.push_back(std::move(u_r));
    rec.raw_fre.push_back(std::move(u_f));
    rec.v_rgb.push_back(std::move(v_r));
    rec.v_fre.push_back(std::move(v_f));
    rec.g.push_back(std::move(g));
  }
  rec.mean_cos_raw = guarded_cosine(mean_raw_rgb, mean_raw_fre);
  rec.mean_cos_rotated = guarded_cosine(mean_v_rgb, mean_v_fre);
  return rec;
}

std::pair<double, Tensor> rotation_loss(const GradientRecord& rec,
                                        const Tensor& r_k, BranchKind k) {
  const auto& raw = k == BranchKind::kRgb ? rec.raw_rgb : rec.raw_fre;
  if (raw.size() != rec.g.size()) {
    throw StateError("rotation_loss: record size mismatch");
  }
  const std::size_t d = r_k.dim(0);
  double loss = 0.0;
  Tensor grad({d, d});
  std::size_t skipped = 0;
  for (std::size_t n = 0; n < raw.size(); ++n) {
    const Tensor& u = raw[n];
    const Tensor& g = rec.g[n];
    const Tensor w = apply_transpose(r_k, u);
    const double nw = l2_norm(w), ng = l2_norm(g);
    if (nw == 0.0 || ng == 0.0) {
      ++skipped;
      continue;
    }
    const double c = dot(w, g) / (nw * ng);
    loss -= c;
    // d cos / d w, then d w_i / d R_ab = delta_{ib} u_a.
    for (std::size_t a = 0; a < d; ++a) {
      for (std::size_t b = 0; b < d; ++b) {
        const double dcdw = g[b] / (nw * ng) - c * w[b] / (nw * nw);
        grad.at(a, b) -= u[a] * dcdw;
      }
    }
  }
  if (skipped > 0) {
    std::cerr << "rotation_loss: skipped " << skipped << "/" << raw.size()
              << " samples with zero-norm gradient or target\n";
  }
  return {loss, grad};
}

Tensor manifold_update(const Tensor& r, const Tensor& grad, double lr) {
  if (!r.same_shape(grad)) {
    throw ShapeError("manifold_update: gradient shape mismatch");
  }
  const std::size_t d = r.dim(0);
  // Skew tangent projection A = (G R^T - R G^T) / 2.
  Tensor grt = matmul(grad, transpose2d(r));
  Tensor a({d, d});
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = 0; j < d; ++j)
      a.at(i, j) = 0.5 * (grt.at(i, j) - grt.at(j, i));
  double step = lr;
  for (int attempt = 0; attempt < 6; ++attempt) {
    Tensor lhs = Tensor::identity(d);
    Tensor rhs_mat = Tensor::identity(d);
    for (std::size_t i = 0; i < d * d; ++i) {
      lhs[i] += 0.5 * step * a[i];
      rhs_mat[i] -= 0.5 * step * a[i];
    }
    try {
      return solve_linear(lhs, matmul(rhs_mat, r));
    } catch (const NumericError&) {
      step *= 0.5;
    }
  }
  throw NumericError("manifold_update: Cayley system singular after retries");
}

}  // namespace tokd
