// SPDX-License-Identifier: Apache-2.0
#include "tokd/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <istream>
#include <ostream>
#include <sstream>

namespace tokd {

std::string shape_str(const std::vector<std::size_t>& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << "x";
    os << s[i];
  }
  os << "]";
  return os.str();
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2) {
    throw ShapeError("matmul: expected rank-2 operands, got " +
                     shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1);
  if (b.dim(0) != k) {
    throw ShapeError("matmul: inner dimensions disagree: " +
                     shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  const std::size_t n = b.dim(1);
  Tensor c({m, n});
  const double* pa = a.data();
  const double* pb = b.data();
  double* pc = c.data();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = pa[i * k + p];
      const double* brow = pb + p * n;
      double* crow = pc + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
    }
  }
  return c;
}

static void check_conv_args(const Tensor& input, const Tensor& kernel,
                            long stride, long padding) {
  if (input.rank() != 4 || kernel.rank() != 4) {
    throw ShapeError("conv2d: expected 4D input and kernel, got " +
                     shape_str(input.shape()) + " and " +
                     shape_str(kernel.shape()));
  }
  if (stride < 1) throw ConfigError("conv2d: stride must be >= 1");
  if (padding < 0) throw ConfigError("conv2d: padding must be >= 0");
  if (kernel.dim(1) != input.dim(1)) {
    throw ShapeError("conv2d: channel mismatch, input " +
                     shape_str(input.shape()) + " kernel " +
                     shape_str(kernel.shape()));
  }
  const long h = static_cast<long>(input.dim(2)) + 2 * padding;
  const long w = static_cast<long>(input.dim(3)) + 2 * padding;
  if (static_cast<long>(kernel.dim(2)) > h ||
      static_cast<long>(kernel.dim(3)) > w) {
    throw ConfigError("conv2d: kernel larger than padded input");
  }
}

Tensor conv2d(const Tensor& input, const Tensor& kernel, long stride,
              long padding) {
  check_conv_args(input, kernel, stride, padding);
  const std::size_t N = input.dim(0), Cin = input.dim(1), H = input.dim(2),
                    W = input.dim(3);
  const std::size_t Cout = kernel.dim(0), kH = kernel.dim(2),
                    kW = kernel.dim(3);
  const std::size_t Ho =
      static_cast<std::size_t>((static_cast<long>(H) + 2 * padding -
                                static_cast<long>(kH)) /
                                   stride +
                               1);
  const std::size_t Wo =
      static_cast<std::size_t>((static_cast<long>(W) + 2 * padding -
                                static_cast<long>(kW)) /
                                   stride +
                               1);
  Tensor out({N, Cout, Ho, Wo});
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t co = 0; co < Cout; ++co) {
      for (std::size_t oh = 0; oh < Ho; ++oh) {
        const long ih0 = static_cast<long>(oh) * stride - padding;
        for (std::size_t ow = 0; ow < Wo; ++ow) {
          const long iw0 = static_cast<long>(ow) * stride - padding;
          double acc = 0.0;
          for (std::size_t ci = 0; ci < Cin; ++ci) {
            for (std::size_t kh = 0; kh < kH; ++kh) {
              const long ih = ih0 + static_cast<long>(kh);
              if (ih < 0 || ih >= static_cast<long>(H)) continue;
              const double* irow =
                  input.data() +
                  ((n * Cin + ci) * H + static_cast<std::size_t>(ih)) * W;
              const double* krow =
                  kernel.data() + ((co * Cin + ci) * kH + kh) * kW;
              for (std::size_t kw = 0; kw < kW; ++kw) {
                const long iw = iw0 + static_cast<long>(kw);
                if (iw < 0 || iw >= static_cast<long>(W)) continue;
                acc += irow[static_cast<std::size_t>(iw)] * krow[kw];
              }
            }
          }
          out.at(n, co, oh, ow) = acc;
        }
      }
    }
  }
  return out;
}

Tensor conv2d_backward_input(const Tensor& upstream, const Tensor& kernel,
                             const std::vector<std::size_t>& input_shape,
                             long stride, long padding) {
  const std::size_t N = input_shape[0], Cin = input_shape[1],
                    H = input_shape[2], W = input_shape[3];
  const std::size_t Cout = kernel.dim(0), kH = kernel.dim(2),
                    kW = kernel.dim(3);
  const std::size_t Ho = upstream.dim(2), Wo = upstream.dim(3);
  Tensor grad(input_shape);
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t co = 0; co < Cout; ++co) {
      for (std::size_t oh = 0; oh < Ho; ++oh) {
        const long ih0 = static_cast<long>(oh) * stride - padding;
        for (std::size_t ow = 0; ow < Wo; ++ow) {
          const long iw0 = static_cast<long>(ow) * stride - padding;
          const double up = upstream.at(n, co, oh, ow);
          if (up == 0.0) continue;
          for (std::size_t ci = 0; ci < Cin; ++ci) {
            for (std::size_t kh = 0; kh < kH; ++kh) {
              const long ih = ih0 + static_cast<long>(kh);
              if (ih < 0 || ih >= static_cast<long>(H)) continue;
              double* grow =
                  grad.data() +
                  ((n * Cin + ci) * H + static_cast<std::size_t>(ih)) * W;
              const double* krow =
                  kernel.data() + ((co * Cin + ci) * kH + kh) * kW;
              for (std::size_t kw = 0; kw < kW; ++kw) {
                const long iw = iw0 + static_cast<long>(kw);
                if (iw < 0 || iw >= static_cast<long>(W)) continue;
                grow[static_cast<std::size_t>(iw)] += up * krow[kw];
              }
            }
          }
        }
      }
    }
  }
  return grad;
}

Tensor conv2d_backward_kernel(const Tensor& upstream, const Tensor& input,
                              const std::vector<std::size_t>& kernel_shape,
                              long stride, long padding) {
  const std::size_t N = input.dim(0), Cin = input.dim(1), H = input.dim(2),
                    W = input.dim(3);
  const std::size_t Cout = kernel_shape[0], kH = kernel_shape[2],
                    kW = kernel_shape[3];
  const std::size_t Ho = upstream.dim(2), Wo = upstream.dim(3);
  Tensor grad(kernel_shape);
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t co = 0; co < Cout; ++co) {
      for (std::size_t oh = 0; oh < Ho; ++oh) {
        const long ih0 = static_cast<long>(oh) * stride - padding;
        for (std::size_t ow = 0; ow < Wo; ++ow) {
          const long iw0 = static_cast<long>(ow) * stride - padding;
          const double up = upstream.at(n, co, oh, ow);
          if (up == 0.0) continue;
          for (std::size_t ci = 0; ci < Cin; ++ci) {
            for (std::size_t kh = 0; kh < kH; ++kh) {
              const long ih = ih0 + static_cast<long>(kh);
              if (ih < 0 || ih >= static_cast<long>(H)) continue;
              const double* irow =
                  input.data() +
                  ((n * Cin + ci) * H + static_cast<std::size_t>(ih)) * W;
              double* grow = grad.data() + ((co * Cin + ci) * kH + kh) * kW;
              for (std::size_t kw = 0; kw < kW; ++kw) {
                const long iw = iw0 + static_cast<long>(kw);
                if (iw < 0 || iw >= static_cast<long>(W)) continue;
                grow[kw] += up * irow[static_cast<std::size_t>(iw)];
              }
            }
          }
        }
      }
    }
  }
  return grad;
}

double l2_norm(const Tensor& x) {
  double acc = 0.0;
  const double* p = x.data();
  for (std::size_t i = 0; i < x.size(); ++i) acc += p[i] * p[i];
  return std::sqrt(acc);
}

double dot(const Tensor& a, const Tensor& b) {
  if (a.size() != b.size()) throw ShapeError("dot: size mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

static void require_same_shape(const Tensor& a, const Tensor& b,
                               const char* op) {
  if (!a.same_shape(b)) {
    throw ShapeError(std::string(op) + ": shape mismatch " +
                     shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  Tensor c = a;
  for (std::size_t i = 0; i < c.size(); ++i) c[i] += b[i];
  return c;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  Tensor c = a;
  for (std::size_t i = 0; i < c.size(); ++i) c[i] -= b[i];
  return c;
}

Tensor scale(const Tensor& a, double s) {
  Tensor c = a;
  for (std::size_t i = 0; i < c.size(); ++i) c[i] *= s;
  return c;
}

Tensor hadamard(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "hadamard");
  Tensor c = a;
  for (std::size_t i = 0; i < c.size(); ++i) c[i] *= b[i];
  return c;
}

void axpy(Tensor& y, double s, const Tensor& x) {
  require_same_shape(y, x, "axpy");
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += s * x[i];
}

Tensor transpose2d(const Tensor& a) {
  if (a.rank() != 2) throw ShapeError("transpose2d: expected rank 2");
  Tensor t({a.dim(1), a.dim(0)});
  for (std::size_t i = 0; i < a.dim(0); ++i)
    for (std::size_t j = 0; j < a.dim(1); ++j) t.at(j, i) = a.at(i, j);
  return t;
}

Tensor solve_linear(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || a.dim(0) != a.dim(1)) {
    throw ShapeError("solve_linear: A must be square");
  }
  const std::size_t n = a.dim(0);
  if (b.dim(0) != n) throw ShapeError("solve_linear: rhs rows mismatch");
  const std::size_t m = b.rank() == 2 ? b.dim(1) : 1;
  Tensor lu = a;
  Tensor x = b.rank() == 2 ? b : b.reshaped({n, 1});
  std::vector<std::size_t> piv(n);
  for (std::size_t i = 0; i < n; ++i) piv[i] = i;
  for (std::size_t col = 0; col < n; ++col) {
    std::size_t best = col;
    double best_abs = std::abs(lu.at(col, col));
    for (std::size_t r = col + 1; r < n; ++r) {
      const double v = std::abs(lu.at(r, col));
      if (v > best_abs) {
        best = r;
        best_abs = v;
      }
    }
    if (best_abs < 1e-300) throw NumericError("solve_linear: singular matrix");
    if (best != col) {
      for (std::size_t j = 0; j < n; ++j)
        std::swap(lu.at(col, j), lu.at(best, j));
      for (std::size_t j = 0; j < m; ++j) std::swap(x.at(col, j), x.at(best, j));
    }
    const double pivot = lu.at(col, col);
    for (std::size_t r = col + 1; r < n; ++r) {
      const double f = lu.at(r, col) / pivot;
      if (f == 0.0) continue;
      for (std::size_t j = col; j < n; ++j) lu.at(r, j) -= f * lu.at(col, j);
      for (std::size_t j = 0; j < m; ++j) x.at(r, j) -= f * x.at(col, j);
    }
  }
  for (std::size_t ri = n; ri-- > 0;) {
    for (std::size_t j = 0; j < m; ++j) {
      double acc = x.at(ri, j);
      for (std::size_t c = ri + 1; c < n; ++c) acc -= lu.at(ri, c) * x.at(c, j);
      x.at(ri, j) = acc / lu.at(ri, ri);
    }
  }
  return b.rank() == 2 ? x : x.reshaped({n});
}

void check_finite(const Tensor& t, const std::string& what) {
  for (std::size_t i = 0; i < t.size(); ++i) {
    if (!std::isfinite(t[i])) {
      throw NumericError(what + ": non-finite value at flat index " +
                         std::to_string(i));
    }
  }
}

namespace {
constexpr char kMagic[4] = {'T', 'O', 'K', 'D'};

template <typename T>
void write_le(std::ostream& out, T v) {
  unsigned char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.write(reinterpret_cast<const char*>(buf), sizeof(T));
}

template <typename T>
T read_le(std::istream& in) {
  unsigned char buf[sizeof(T)];
  in.read(reinterpret_cast<char*>(buf), sizeof(T));
  if (!in) throw DataError("tensor read: truncated stream");
  T v;
  std::memcpy(&v, buf, sizeof(T));
  return v;
}
}  // namespace

void write_tensor(std::ostream& out, const Tensor& t) {
  out.write(kMagic, 4);
  write_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
  for (std::size_t d : t.shape()) write_le<std::uint64_t>(out, d);
  for (std::size_t i = 0; i < t.size(); ++i) write_le<double>(out, t[i]);
}

Tensor read_tensor(std::istream& in) {
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kMagic, 4) != 0) {
    throw DataError("tensor read: bad magic");
  }
  const std::uint32_t rank = read_le<std::uint32_t>(in);
  if (rank > 8) throw DataError("tensor read: implausible rank");
  std::vector<std::size_t> shape(rank);
  for (auto& d : shape) d = static_cast<std::size_t>(read_le<std::uint64_t>(in));
  Tensor t(shape);
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = read_le<double>(in);
  return t;
}

}  // namespace tokd
