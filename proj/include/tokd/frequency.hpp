// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "tokd/tensor.hpp"

namespace tokd {

/// Triangular high-pass mask: DCT coefficient (u,v) is zeroed iff
/// u/H + v/W < cutoff_fraction (zero-based indices).
struct HighPassSpec {
  double cutoff_fraction = 1.0 / 3.0;

  void validate() const {
    if (!(cutoff_fraction > 0.0 && cutoff_fraction < 1.0)) {
      throw ConfigError("HighPassSpec: cutoff_fraction must be in (0,1)");
    }
  }
};

/// Orthonormal 2D DCT-II of an H×W image (rows then columns).
Tensor dct2(const Tensor& x);

/// Exact inverse of dct2.
Tensor idct2(const Tensor& X);

/// Per-channel high-pass transform of a C×H×W image:
/// dct2 -> zero the low-frequency triangle -> idct2.
Tensor frequency_transform(const Tensor& x, const HighPassSpec& spec);

}  // namespace tokd
