// SPDX-License-Identifier: Apache-2.0
#include "tokd/frequency.hpp"

#include <cmath>
#include <map>
#include <mutex>

namespace tokd {

namespace {

// Orthonormal DCT-II basis: B[k][n] = s_k * cos(pi*(n+0.5)*k/N),
// s_0 = sqrt(1/N), s_k = sqrt(2/N). Rows are orthonormal, so the
// inverse transform is the transpose and Parseval holds exactly.
Tensor dct_basis(std::size_t n) {
  static std::mutex mu;
  static std::map<std::size_t, Tensor> cache;
  std::lock_guard<std::mutex> lock(mu);
  auto it = cache.find(n);
  if (it != cache.end()) return it->second;
  Tensor b({n, n});
  const double pi = std::acos(-1.0);
  for (std::size_t k = 0; k < n; ++k) {
    const double s = k == 0 ? std::sqrt(1.0 / static_cast<double>(n))
                            : std::sqrt(2.0 / static_cast<double>(n));
    for (std::size_t j = 0; j < n; ++j) {
      b.at(k, j) = s * std::cos(pi * (static_cast<double>(j) + 0.5) *
                                static_cast<double>(k) /
                                static_cast<double>(n));
    }
  }
  cache.emplace(n, b);
  return b;
}

}  // namespace

Tensor dct2(const Tensor& x) {
  if (x.rank() != 2) throw ShapeError("dct2: expected H×W, got " +
                                      shape_str(x.shape()));
  const Tensor bh = dct_basis(x.dim(0));
  const Tensor bw = dct_basis(x.dim(1));
  return matmul(matmul(bh, x), transpose2d(bw));
}

Tensor idct2(const Tensor& X) {
  if (X.rank() != 2) throw ShapeError("idct2: expected H×W, got " +
                                      shape_str(X.shape()));
  const Tensor bh = dct_basis(X.dim(0));
  const Tensor bw = dct_basis(X.dim(1));
  return matmul(matmul(transpose2d(bh), X), bw);
}

Tensor frequency_transform(const Tensor& x, const HighPassSpec& spec) {
  spec.validate();
  if (x.rank() != 3) {
    throw ShapeError("frequency_transform: expected C×H×W, got " +
                     shape_str(x.shape()));
  }
  const std::size_t C = x.dim(0), H = x.dim(1), W = x.dim(2);
  Tensor out({C, H, W});
  for (std::size_t c = 0; c < C; ++c) {
    Tensor plane({H, W});
    for (std::size_t i = 0; i < H * W; ++i) plane[i] = x[c * H * W + i];
    Tensor spec_plane = dct2(plane);
    for (std::size_t u = 0; u < H; ++u) {
      for (std::size_t v = 0; v < W; ++v) {
        const double f = static_cast<double>(u) / static_cast<double>(H) +
                         static_cast<double>(v) / static_cast<double>(W);
        if (f < spec.cutoff_fraction) spec_plane.at(u, v) = 0.0;
      }
    }
    Tensor filtered = idct2(spec_plane);
    for (std::size_t i = 0; i < H * W; ++i) out[c * H * W + i] = filtered[i];
  }
  return out;
}

}  // namespace tokd
