// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <numeric>
#include <string>
#include <vector>

#include "tokd/error.hpp"

namespace tokd {

/// Dense row-major tensor of doubles. The single numeric carrier for
/// images, feature maps, parameters and gradients.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<std::size_t> shape, double fill = 0.0)
      : shape_(std::move(shape)), data_(checked_size(shape_), fill) {}

  Tensor(std::vector<std::size_t> shape, std::vector<double> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (checked_size(shape_) != data_.size()) {
      throw ShapeError("Tensor: data length " + std::to_string(data_.size()) +
                       " does not match shape product " +
                       std::to_string(checked_size(shape_)));
    }
  }

  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  // Flat offsets for common ranks; no bounds check in release builds.
  double& at(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
  double at(std::size_t i, std::size_t j) const {
    return data_[i * shape_[1] + j];
  }
  double& at(std::size_t i, std::size_t j, std::size_t k) {
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }
  double at(std::size_t i, std::size_t j, std::size_t k) const {
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }
  double& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) {
    return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }
  double at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
    return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }

  /// Same data, new shape (sizes must agree).
  Tensor reshaped(std::vector<std::size_t> new_shape) const {
    if (checked_size(new_shape) != data_.size()) {
      throw ShapeError("reshape: size mismatch");
    }
    return Tensor(std::move(new_shape), data_);
  }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  static Tensor identity(std::size_t n) {
    Tensor t({n, n});
    for (std::size_t i = 0; i < n; ++i) t.at(i, i) = 1.0;
    return t;
  }

  static std::size_t checked_size(const std::vector<std::size_t>& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) {
      if (d == 0) throw ShapeError("Tensor: zero dimension");
      n *= d;
    }
    return n;
  }

 private:
  std::vector<std::size_t> shape_;
  std::vector<double> data_;
};

std::string shape_str(const std::vector<std::size_t>& s);

/// Standard matrix product a[m×k] * b[k×n]; deterministic accumulation order.
Tensor matmul(const Tensor& a, const Tensor& b);

/// 2D cross-correlation (deep-learning convention, no kernel flip).
/// input [N×Cin×H×W], kernel [Cout×Cin×kH×kW].
Tensor conv2d(const Tensor& input, const Tensor& kernel, long stride,
              long padding);

/// Gradient of conv2d w.r.t. its input given upstream [N×Cout×H'×W'].
Tensor conv2d_backward_input(const Tensor& upstream, const Tensor& kernel,
                             const std::vector<std::size_t>& input_shape,
                             long stride, long padding);

/// Gradient of conv2d w.r.t. the kernel.
Tensor conv2d_backward_kernel(const Tensor& upstream, const Tensor& input,
                              const std::vector<std::size_t>& kernel_shape,
                              long stride, long padding);

/// Euclidean norm over all elements.
double l2_norm(const Tensor& x);

double dot(const Tensor& a, const Tensor& b);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor hadamard(const Tensor& a, const Tensor& b);
/// y += s * x
void axpy(Tensor& y, double s, const Tensor& x);

Tensor transpose2d(const Tensor& a);

/// Solves A x = b for square A via partial-pivot Gaussian elimination.
/// b may have multiple columns. Throws NumericError when singular.
Tensor solve_linear(const Tensor& a, const Tensor& b);

/// Throws NumericError if any element is NaN or infinite.
void check_finite(const Tensor& t, const std::string& what);

// Binary serialization: magic "TOKD", u32 rank, u64 dims, f64 payload,
// all little-endian.
void write_tensor(std::ostream& out, const Tensor& t);
Tensor read_tensor(std::istream& in);

}  // namespace tokd
