// SPDX-License-Identifier: Apache-2.0
#include "tokd/nn.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

namespace tokd {

namespace {

Tensor uniform_init(const std::vector<std::size_t>& shape, double bound,
                    Rng& rng) {
  Tensor t(shape);
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = dist(rng);
  return t;
}

}  // namespace

// ---------------------------------------------------------------------------
// Conv2dLayer

Conv2dLayer::Conv2dLayer(std::size_t c_in, std::size_t c_out, std::size_t ksize,
                         long stride, long padding, Rng& rng)
    : stride_(stride), padding_(padding) {
  if (stride < 1) throw ConfigError("conv: stride must be >= 1");
  const double bound =
      1.0 / std::sqrt(static_cast<double>(c_in * ksize * ksize));
  weight = uniform_init({c_out, c_in, ksize, ksize}, bound, rng);
  bias = uniform_init({c_out}, bound, rng);
  weight_grad = Tensor(weight.shape());
  bias_grad = Tensor(bias.shape());
}

std::vector<std::size_t> Conv2dLayer::output_shape(
    const std::vector<std::size_t>& in) const {
  if (in.size() != 4) throw ShapeError("conv: expected 4D input");
  if (in[1] != weight.dim(1)) {
    throw ShapeError("conv: input channels " + std::to_string(in[1]) +
                     " != " + std::to_string(weight.dim(1)));
  }
  const long ho = (static_cast<long>(in[2]) + 2 * padding_ -
                   static_cast<long>(weight.dim(2))) /
                      stride_ +
                  1;
  const long wo = (static_cast<long>(in[3]) + 2 * padding_ -
                   static_cast<long>(weight.dim(3))) /
                      stride_ +
                  1;
  if (ho < 1 || wo < 1) throw ConfigError("conv: kernel larger than padded input");
  return {in[0], weight.dim(0), static_cast<std::size_t>(ho),
          static_cast<std::size_t>(wo)};
}

Tensor Conv2dLayer::forward(const Tensor& x, Mode mode) {
  output_shape(x.shape());
  Tensor out = conv2d(x, weight, stride_, padding_);
  const std::size_t per_channel = out.dim(2) * out.dim(3);
  for (std::size_t n = 0; n < out.dim(0); ++n) {
    for (std::size_t c = 0; c < out.dim(1); ++c) {
      double* p = out.data() + (n * out.dim(1) + c) * per_channel;
      const double b = bias[c];
      for (std::size_t i = 0; i < per_channel; ++i) p[i] += b;
    }
  }
  if (mode != Mode::kInfer) {
    input_cache_ = x;
    has_cache_ = true;
  }
  return out;
}

Tensor Conv2dLayer::backward(const Tensor& upstream) {
  require_cache("conv");
  axpy(weight_grad, 1.0,
       conv2d_backward_kernel(upstream, input_cache_, weight.shape(), stride_,
                              padding_));
  const std::size_t per_channel = upstream.dim(2) * upstream.dim(3);
  for (std::size_t n = 0; n < upstream.dim(0); ++n) {
    for (std::size_t c = 0; c < upstream.dim(1); ++c) {
      const double* p = upstream.data() + (n * upstream.dim(1) + c) * per_channel;
      double acc = 0.0;
      for (std::size_t i = 0; i < per_channel; ++i) acc += p[i];
      bias_grad[c] += acc;
    }
  }
  return conv2d_backward_input(upstream, weight, input_cache_.shape(), stride_,
                               padding_);
}

void Conv2dLayer::collect_params(const std::string& prefix,
                                 std::vector<ParamRef>& out) {
  out.push_back({prefix + ".weight", &weight, &weight_grad});
  out.push_back({prefix + ".bias", &bias, &bias_grad});
}

void Conv2dLayer::collect_state(
    const std::string& prefix,
    std::vector<std::pair<std::string, Tensor*>>& out) {
  out.emplace_back(prefix + ".weight", &weight);
  out.emplace_back(prefix + ".bias", &bias);
}

void Conv2dLayer::zero_grad() {
  weight_grad.fill(0.0);
  bias_grad.fill(0.0);
}

// ---------------------------------------------------------------------------
// LinearLayer

LinearLayer::LinearLayer(std::size_t in_features, std::size_t out_features,
                         Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in_features));
  weight = uniform_init({out_features, in_features}, bound, rng);
  bias = uniform_init({out_features}, bound, rng);
  weight_grad = Tensor(weight.shape());
  bias_grad = Tensor(bias.shape());
}

std::vector<std::size_t> LinearLayer::output_shape(
    const std::vector<std::size_t>& in) const {
  if (in.size() != 2 || in[1] != weight.dim(1)) {
    throw ShapeError("linear: expected N×" + std::to_string(weight.dim(1)) +
                     ", got " + shape_str(in));
  }
  return {in[0], weight.dim(0)};
}

Tensor LinearLayer::forward(const Tensor& x, Mode mode) {
  output_shape(x.shape());
  Tensor out = matmul(x, transpose2d(weight));
  for (std::size_t n = 0; n < out.dim(0); ++n)
    for (std::size_t o = 0; o < out.dim(1); ++o) out.at(n, o) += bias[o];
  if (mode != Mode::kInfer) {
    input_cache_ = x;
    has_cache_ = true;
  }
  return out;
}

Tensor LinearLayer::backward(const Tensor& upstream) {
  require_cache("linear");
  // dW = upstream^T X, summed over batch.
  axpy(weight_grad, 1.0, matmul(transpose2d(upstream), input_cache_));
  for (std::size_t n = 0; n < upstream.dim(0); ++n)
    for (std::size_t o = 0; o < upstream.dim(1); ++o)
      bias_grad[o] += upstream.at(n, o);
  return matmul(upstream, weight);
}

void LinearLayer::collect_params(const std::string& prefix,
                                 std::vector<ParamRef>& out) {
  out.push_back({prefix + ".weight", &weight, &weight_grad});
  out.push_back({prefix + ".bias", &bias, &bias_grad});
}

void LinearLayer::collect_state(
    const std::string& prefix,
    std::vector<std::pair<std::string, Tensor*>>& out) {
  out.emplace_back(prefix + ".weight", &weight);
  out.emplace_back(prefix + ".bias", &bias);
}

void LinearLayer::zero_grad() {
  weight_grad.fill(0.0);
  bias_grad.fill(0.0);
}

// ---------------------------------------------------------------------------
// BatchNormLayer

BatchNormLayer::BatchNormLayer(std::size_t channels, double momentum,
                               double eps)
    : gamma({channels}, 1.0),
      beta({channels}),
      gamma_grad({channels}),
      beta_grad({channels}),
      running_mean({channels}),
      running_var({channels}, 1.0),
      momentum_(momentum),
      eps_(eps) {}

std::vector<std::size_t> BatchNormLayer::output_shape(
    const std::vector<std::size_t>& in) const {
  const std::size_t c = in.size() == 4 ? in[1] : (in.size() == 2 ? in[1] : 0);
  if (c != gamma.dim(0)) {
    throw ShapeError("batch_norm: expected channel dim " +
                     std::to_string(gamma.dim(0)) + ", got " + shape_str(in));
  }
  return in;
}

Tensor BatchNormLayer::forward(const Tensor& x, Mode mode) {
  output_shape(x.shape());
  const bool four_d = x.rank() == 4;
  const std::size_t N = x.dim(0), C = x.dim(1);
  const std::size_t S = four_d ? x.dim(2) * x.dim(3) : 1;
  const double m = static_cast<double>(N * S);
  Tensor out(x.shape());
  Tensor mean({C}), var({C});
  if (mode == Mode::kInfer) {
    mean = running_mean;
    var = running_var;
  } else {
    for (std::size_t c = 0; c < C; ++c) {
      double acc = 0.0;
      for (std::size_t n = 0; n < N; ++n) {
        const double* p = x.data() + (n * C + c) * S;
        for (std::size_t i = 0; i < S; ++i) acc += p[i];
      }
      mean[c] = acc / m;
      double v = 0.0;
      for (std::size_t n = 0; n < N; ++n) {
        const double* p = x.data() + (n * C + c) * S;
        for (std::size_t i = 0; i < S; ++i) {
          const double d = p[i] - mean[c];
          v += d * d;
        }
      }
      var[c] = v / m;
    }
    if (mode == Mode::kTrain) {
      for (std::size_t c = 0; c < C; ++c) {
        running_mean[c] = (1.0 - momentum_) * running_mean[c] + momentum_ * mean[c];
        running_var[c] = (1.0 - momentum_) * running_var[c] + momentum_ * var[c];
      }
    }
  }
  Tensor inv_std({C});
  for (std::size_t c = 0; c < C; ++c) inv_std[c] = 1.0 / std::sqrt(var[c] + eps_);
  Tensor xhat(x.shape());
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t c = 0; c < C; ++c) {
      const double* p = x.data() + (n * C + c) * S;
      double* ph = xhat.data() + (n * C + c) * S;
      double* po = out.data() + (n * C + c) * S;
      for (std::size_t i = 0; i < S; ++i) {
        ph[i] = (p[i] - mean[c]) * inv_std[c];
        po[i] = gamma[c] * ph[i] + beta[c];
      }
    }
  }
  if (mode != Mode::kInfer) {
    xhat_cache_ = xhat;
    inv_std_cache_ = inv_std;
    frozen_stats_ = mode == Mode::kTrainFrozenStats;
    has_cache_ = true;
  }
  return out;
}

Tensor BatchNormLayer::backward(const Tensor& upstream) {
  require_cache("batch_norm");
  const bool four_d = upstream.rank() == 4;
  const std::size_t N = upstream.dim(0), C = upstream.dim(1);
  const std::size_t S = four_d ? upstream.dim(2) * upstream.dim(3) : 1;
  const double m = static_cast<double>(N * S);
  Tensor dx(upstream.shape());
  for (std::size_t c = 0; c < C; ++c) {
    double sum_dy = 0.0, sum_dy_xhat = 0.0;
    for (std::size_t n = 0; n < N; ++n) {
      const double* pu = upstream.data() + (n * C + c) * S;
      const double* ph = xhat_cache_.data() + (n * C + c) * S;
      for (std::size_t i = 0; i < S; ++i) {
        sum_dy += pu[i];
        sum_dy_xhat += pu[i] * ph[i];
      }
    }
    gamma_grad[c] += sum_dy_xhat;
    beta_grad[c] += sum_dy;
    const double g = gamma[c] * inv_std_cache_[c];
    for (std::size_t n = 0; n < N; ++n) {
      const double* pu = upstream.data() + (n * C + c) * S;
      const double* ph = xhat_cache_.data() + (n * C + c) * S;
      double* pd = dx.data() + (n * C + c) * S;
      if (frozen_stats_) {
        for (std::size_t i = 0; i < S; ++i) pd[i] = g * pu[i];
      } else {
        for (std::size_t i = 0; i < S; ++i) {
          pd[i] = g * (pu[i] - sum_dy / m - ph[i] * sum_dy_xhat / m);
        }
      }
    }
  }
  return dx;
}

void BatchNormLayer::collect_params(const std::string& prefix,
                                    std::vector<ParamRef>& out) {
  out.push_back({prefix + ".gamma", &gamma, &gamma_grad});
  out.push_back({prefix + ".beta", &beta, &beta_grad});
}

void BatchNormLayer::collect_state(
    const std::string& prefix,
    std::vector<std::pair<std::string, Tensor*>>& out) {
  out.emplace_back(prefix + ".gamma", &gamma);
  out.emplace_back(prefix + ".beta", &beta);
  out.emplace_back(prefix + ".running_mean", &running_mean);
  out.emplace_back(prefix + ".running_var", &running_var);
}

void BatchNormLayer::zero_grad() {
  gamma_grad.fill(0.0);
  beta_grad.fill(0.0);
}

// ---------------------------------------------------------------------------
// Activations / pooling / flatten

Tensor ReluLayer::forward(const Tensor& x, Mode mode) {
  Tensor out = x;
  Tensor mask(x.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (out[i] > 0.0) {
      mask[i] = 1.0;
    } else {
      out[i] = 0.0;
    }
  }
  if (mode != Mode::kInfer) {
    mask_cache_ = mask;
    has_cache_ = true;
  }
  return out;
}

Tensor ReluLayer::backward(const Tensor& upstream) {
  require_cache("relu");
  return hadamard(upstream, mask_cache_);
}

Tensor SigmoidLayer::forward(const Tensor& x, Mode mode) {
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = 1.0 / (1.0 + std::exp(-x[i]));
  if (mode != Mode::kInfer) {
    out_cache_ = out;
    has_cache_ = true;
  }
  return out;
}

Tensor SigmoidLayer::backward(const Tensor& upstream) {
  require_cache("sigmoid");
  Tensor dx(upstream.shape());
  for (std::size_t i = 0; i < dx.size(); ++i) {
    const double s = out_cache_[i];
    dx[i] = upstream[i] * s * (1.0 - s);
  }
  return dx;
}

std::vector<std::size_t> GlobalAvgPoolLayer::output_shape(
    const std::vector<std::size_t>& in) const {
  if (in.size() != 4) throw ShapeError("global_avg_pool: expected 4D input");
  return {in[0], in[1]};
}

Tensor GlobalAvgPoolLayer::forward(const Tensor& x, Mode mode) {
  output_shape(x.shape());
  const std::size_t N = x.dim(0), C = x.dim(1), S = x.dim(2) * x.dim(3);
  Tensor out({N, C});
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t c = 0; c < C; ++c) {
      const double* p = x.data() + (n * C + c) * S;
      double acc = 0.0;
      for (std::size_t i = 0; i < S; ++i) acc += p[i];
      out.at(n, c) = acc / static_cast<double>(S);
    }
  }
  if (mode != Mode::kInfer) {
    in_shape_ = x.shape();
    has_cache_ = true;
  }
  return out;
}

Tensor GlobalAvgPoolLayer::backward(const Tensor& upstream) {
  require_cache("global_avg_pool");
  const std::size_t N = in_shape_[0], C = in_shape_[1],
                    S = in_shape_[2] * in_shape_[3];
  Tensor dx(in_shape_);
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t c = 0; c < C; ++c) {
      const double g = upstream.at(n, c) / static_cast<double>(S);
      double* p = dx.data() + (n * C + c) * S;
      for (std::size_t i = 0; i < S; ++i) p[i] = g;
    }
  }
  return dx;
}

std::vector<std::size_t> FlattenLayer::output_shape(
    const std::vector<std::size_t>& in) const {
  if (in.size() < 2) throw ShapeError("flatten: expected batched input");
  std::size_t f = 1;
  for (std::size_t i = 1; i < in.size(); ++i) f *= in[i];
  return {in[0], f};
}

Tensor FlattenLayer::forward(const Tensor& x, Mode mode) {
  if (mode != Mode::kInfer) {
    in_shape_ = x.shape();
    has_cache_ = true;
  }
  return x.reshaped(output_shape(x.shape()));
}

Tensor FlattenLayer::backward(const Tensor& upstream) {
  require_cache("flatten");
  return upstream.reshaped(in_shape_);
}

// ---------------------------------------------------------------------------
// NetworkGraph

void NetworkGraph::add(std::string name, std::unique_ptr<Layer> layer) {
  layers_.push_back({std::move(name), std::move(layer)});
}

Tensor NetworkGraph::forward(const Tensor& x, Mode mode) {
  ++forward_count_;
  Tensor cur = x;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    try {
      cur = layers_[i].layer->forward(cur, mode);
    } catch (const ShapeError& e) {
      throw ShapeError("layer " + std::to_string(i) + " (" +
                       layers_[i].layer->kind() + "): " + e.what());
    }
  }
  has_cache_ = mode != Mode::kInfer;
  return cur;
}

Tensor NetworkGraph::backward(const Tensor& upstream) {
  if (!has_cache_) {
    throw StateError("NetworkGraph: backward without prior train-mode forward");
  }
  Tensor cur = upstream;
  for (std::size_t i = layers_.size(); i-- > 0;) {
    cur = layers_[i].layer->backward(cur);
  }
  return cur;
}

std::vector<ParamRef> NetworkGraph::parameters(const std::string& prefix) {
  std::vector<ParamRef> out;
  for (auto& nl : layers_) {
    nl.layer->collect_params(prefix.empty() ? nl.name : prefix + "." + nl.name,
                             out);
  }
  return out;
}

std::vector<std::pair<std::string, Tensor*>> NetworkGraph::state(
    const std::string& prefix) {
  std::vector<std::pair<std::string, Tensor*>> out;
  for (auto& nl : layers_) {
    nl.layer->collect_state(prefix.empty() ? nl.name : prefix + "." + nl.name,
                            out);
  }
  return out;
}

void NetworkGraph::zero_grad() {
  for (auto& nl : layers_) nl.layer->zero_grad();
}

std::vector<std::size_t> NetworkGraph::validate(
    std::vector<std::size_t> input_shape) const {
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    try {
      input_shape = layers_[i].layer->output_shape(input_shape);
    } catch (const std::exception& e) {
      throw ShapeError("layer " + std::to_string(i) + " (" +
                       layers_[i].layer->kind() + "): " + e.what());
    }
  }
  return input_shape;
}

// ---------------------------------------------------------------------------
// Losses / optimizer

Tensor softmax_rows(const Tensor& logits) {
  if (logits.rank() != 2) throw ShapeError("softmax: expected N×K logits");
  const std::size_t N = logits.dim(0), K = logits.dim(1);
  Tensor out(logits.shape());
  for (std::size_t n = 0; n < N; ++n) {
    double mx = logits.at(n, 0);
    for (std::size_t k = 1; k < K; ++k) mx = std::max(mx, logits.at(n, k));
    double z = 0.0;
    for (std::size_t k = 0; k < K; ++k) z += std::exp(logits.at(n, k) - mx);
    for (std::size_t k = 0; k < K; ++k)
      out.at(n, k) = std::exp(logits.at(n, k) - mx) / z;
  }
  return out;
}

std::pair<double, Tensor> cross_entropy(const Tensor& logits,
                                        const std::vector<int>& labels) {
  if (logits.rank() != 2) throw ShapeError("cross_entropy: expected N×K logits");
  const std::size_t N = logits.dim(0), K = logits.dim(1);
  if (labels.size() != N) throw DataError("cross_entropy: label count mismatch");
  double loss = 0.0;
  Tensor grad(logits.shape());
  for (std::size_t n = 0; n < N; ++n) {
    const int y = labels[n];
    if (y < 0 || static_cast<std::size_t>(y) >= K) {
      throw DataError("cross_entropy: label out of range at sample " +
                      std::to_string(n));
    }
    double mx = logits.at(n, 0);
    for (std::size_t k = 1; k < K; ++k) mx = std::max(mx, logits.at(n, k));
    double z = 0.0;
    for (std::size_t k = 0; k < K; ++k) z += std::exp(logits.at(n, k) - mx);
    const double logz = std::log(z) + mx;
    loss += logz - logits.at(n, static_cast<std::size_t>(y));
    for (std::size_t k = 0; k < K; ++k) {
      const double p = std::exp(logits.at(n, k) - logz);
      grad.at(n, k) =
          (p - (static_cast<std::size_t>(y) == k ? 1.0 : 0.0)) /
          static_cast<double>(N);
    }
  }
  return {loss / static_cast<double>(N), grad};
}

void adam_step(AdamState& state, const std::vector<ParamRef>& params) {
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(state.beta1, t);
  const double bc2 = 1.0 - std::pow(state.beta2, t);
  for (const auto& p : params) {
    if (p.value == nullptr || p.grad == nullptr) {
      throw StateError("adam_step: missing gradient for parameter " + p.name);
    }
    if (!p.value->same_shape(*p.grad)) {
      throw StateError("adam_step: gradient shape mismatch for " + p.name);
    }
    auto it = state.moments.find(p.name);
    if (it == state.moments.end()) {
      it = state.moments
               .emplace(p.name, std::make_pair(Tensor(p.value->shape()),
                                               Tensor(p.value->shape())))
               .first;
    }
    Tensor& m = it->second.first;
    Tensor& v = it->second.second;
    if (!m.same_shape(*p.value)) {
      throw StateError("adam_step: moment shape mismatch for " + p.name);
    }
    for (std::size_t i = 0; i < m.size(); ++i) {
      const double g = (*p.grad)[i];
      m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g;
      v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g * g;
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      (*p.value)[i] -= state.lr * mhat / (std::sqrt(vhat) + state.eps);
    }
  }
}

// ---------------------------------------------------------------------------
// Checkpointing

namespace {
constexpr char kCkptMagic[8] = {'T', 'O', 'K', 'D', 'C', 'K', 'P', '1'};

void write_u32(std::ostream& out, std::uint32_t v) {
  out.write(reinterpret_cast<const char*>(&v), 4);
}
void write_u64(std::ostream& out, std::uint64_t v) {
  out.write(reinterpret_cast<const char*>(&v), 8);
}
std::uint32_t read_u32(std::istream& in) {
  std::uint32_t v = 0;
  in.read(reinterpret_cast<char*>(&v), 4);
  if (!in) throw DataError("checkpoint: truncated");
  return v;
}
std::uint64_t read_u64(std::istream& in) {
  std::uint64_t v = 0;
  in.read(reinterpret_cast<char*>(&v), 8);
  if (!in) throw DataError("checkpoint: truncated");
  return v;
}
}  // namespace

void save_checkpoint(const std::string& path, const std::string& meta,
                     const std::vector<std::pair<std::string, Tensor*>>& entries) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("checkpoint: cannot open for write: " + path);
  out.write(kCkptMagic, 8);
  write_u32(out, static_cast<std::uint32_t>(meta.size()));
  out.write(meta.data(), static_cast<std::streamsize>(meta.size()));
  write_u64(out, entries.size());
  for (const auto& [name, tensor] : entries) {
    write_u32(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_tensor(out, *tensor);
  }
  if (!out) throw DataError("checkpoint: write failed: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("checkpoint: cannot open: " + path);
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kCkptMagic, 8) != 0) {
    throw DataError("checkpoint: bad magic in " + path);
  }
  Checkpoint ckpt;
  const std::uint32_t meta_len = read_u32(in);
  ckpt.meta.resize(meta_len);
  in.read(ckpt.meta.data(), meta_len);
  const std::uint64_t count = read_u64(in);
  for (std::uint64_t i = 0; i < count; ++i) {
    const std::uint32_t name_len = read_u32(in);
    std::string name(name_len, '\0');
    in.read(name.data(), name_len);
    if (!in) throw DataError("checkpoint: truncated entry name");
    ckpt.tensors.emplace(std::move(name), read_tensor(in));
  }
  return ckpt;
}

void restore_state(const Checkpoint& ckpt,
                   const std::vector<std::pair<std::string, Tensor*>>& slots) {
  for (const auto& [name, slot] : slots) {
    auto it = ckpt.tensors.find(name);
    if (it == ckpt.tensors.end()) {
      throw DataError("checkpoint: missing tensor " + name);
    }
    if (!it->second.same_shape(*slot)) {
      throw DataError("checkpoint: shape mismatch for " + name + ": file " +
                      shape_str(it->second.shape()) + " vs slot " +
                      shape_str(slot->shape()));
    }
    *slot = it->second;
  }
}

}  // namespace tokd
