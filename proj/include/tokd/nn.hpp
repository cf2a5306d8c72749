// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "tokd/rng.hpp"
#include "tokd/tensor.hpp"

namespace tokd {

enum class Mode {
  kTrain,
  kInfer,
  // Like kTrain but batch-norm statistics are computed from the batch and
  // then treated as constants in backward; running stats are not touched.
  // Makes the loss decompose over samples (per-sample gradient extraction).
  kTrainFrozenStats,
};

struct ParamRef {
  std::string name;
  Tensor* value = nullptr;
  Tensor* grad = nullptr;
};

class Layer {
 public:
  virtual ~Layer() = default;
  virtual std::string kind() const = 0;
  virtual std::vector<std::size_t> output_shape(
      const std::vector<std::size_t>& in) const = 0;
  virtual Tensor forward(const Tensor& x, Mode mode) = 0;
  /// Reverse-mode gradient of the cached forward; accumulates parameter
  /// gradients and returns the input gradient.
  virtual Tensor backward(const Tensor& upstream) = 0;
  virtual void collect_params(const std::string& prefix,
                              std::vector<ParamRef>& out) {}
  /// All persistable tensors (trainable params plus e.g. BN running stats).
  virtual void collect_state(const std::string& prefix,
                             std::vector<std::pair<std::string, Tensor*>>& out) {
  }
  virtual void zero_grad() {}

 protected:
  bool has_cache_ = false;
  void require_cache(const char* who) const {
    if (!has_cache_) {
      throw StateError(std::string(who) +
                       ": backward called without cached forward");
    }
  }
};

class Conv2dLayer : public Layer {
 public:
  Conv2dLayer(std::size_t c_in, std::size_t c_out, std::size_t ksize,
              long stride, long padding, Rng& rng);
  std::string kind() const override { return "conv"; }
  std::vector<std::size_t> output_shape(
      const std::vector<std::size_t>& in) const override;
  Tensor forward(const Tensor& x, Mode mode) override;
  Tensor backward(const Tensor& upstream) override;
  void collect_params(const std::string& prefix,
                      std::vector<ParamRef>& out) override;
  void collect_state(const std::string& prefix,
                     std::vector<std::pair<std::string, Tensor*>>& out) override;
  void zero_grad() override;

  Tensor weight, bias, weight_grad, bias_grad;

 private:
  long stride_, padding_;
  Tensor input_cache_;
};

class LinearLayer : public Layer {
 public:
  LinearLayer(std::size_t in_features, std::size_t out_features, Rng& rng);
  std::string kind() const override { return "linear"; }
  std::vector<std::size_t> output_shape(
      const std::vector<std::size_t>& in) const override;
  Tensor forward(const Tensor& x, Mode mode) override;
  Tensor backward(const Tensor& upstream) override;
  void collect_params(const std::string& prefix,
                      std::vector<ParamRef>& out) override;
  void collect_state(const std::string& prefix,
                     std::vector<std::pair<std::string, Tensor*>>& out) override;
  void zero_grad() override;

  Tensor weight, bias, weight_grad, bias_grad;  // weight is [out×in]

 private:
  Tensor input_cache_;
};

/// Per-channel batch normalization over (N,H,W) for 4D inputs, per-feature
/// for 2D inputs. Running statistics via EMA with momentum 0.1.
class BatchNormLayer : public Layer {
 public:
  explicit BatchNormLayer(std::size_t channels, double momentum = 0.1,
                          double eps = 1e-5);
  std::string kind() const override { return "batch_norm"; }
  std::vector<std::size_t> output_shape(
      const std::vector<std::size_t>& in) const override;
  Tensor forward(const Tensor& x, Mode mode) override;
  Tensor backward(const Tensor& upstream) override;
  void collect_params(const std::string& prefix,
                      std::vector<ParamRef>& out) override;
  void collect_state(const std::string& prefix,
                     std::vector<std::pair<std::string, Tensor*>>& out) override;
  void zero_grad() override;

  Tensor gamma, beta, gamma_grad, beta_grad;
  Tensor running_mean, running_var;

 private:
  double momentum_, eps_;
  bool frozen_stats_ = false;
  Tensor xhat_cache_, inv_std_cache_;
};

class ReluLayer : public Layer {
 public:
  std::string kind() const override { return "relu"; }
  std::vector<std::size_t> output_shape(
      const std::vector<std::size_t>& in) const override {
    return in;
  }
  Tensor forward(const Tensor& x, Mode mode) override;
  Tensor backward(const Tensor& upstream) override;

 private:
  Tensor mask_cache_;
};

class SigmoidLayer : public Layer {
 public:
  std::string kind() const override { return "sigmoid"; }
  std::vector<std::size_t> output_shape(
      const std::vector<std::size_t>& in) const override {
    return in;
  }
  Tensor forward(const Tensor& x, Mode mode) override;
  Tensor backward(const Tensor& upstream) override;

 private:
  Tensor out_cache_;
};

class GlobalAvgPoolLayer : public Layer {
 public:
  std::string kind() const override { return "global_avg_pool"; }
  std::vector<std::size_t> output_shape(
      const std::vector<std::size_t>& in) const override;
  Tensor forward(const Tensor& x, Mode mode) override;
  Tensor backward(const Tensor& upstream) override;

 private:
  std::vector<std::size_t> in_shape_;
};

class FlattenLayer : public Layer {
 public:
  std::string kind() const override { return "flatten"; }
  std::vector<std::size_t> output_shape(
      const std::vector<std::size_t>& in) const override;
  Tensor forward(const Tensor& x, Mode mode) override;
  Tensor backward(const Tensor& upstream) override;

 private:
  std::vector<std::size_t> in_shape_;
};

/// Ordered layer stack with named parameter slots. Forward in train mode
/// caches activations layer by layer for the subsequent backward.
class NetworkGraph {
 public:
  NetworkGraph() = default;
  NetworkGraph(NetworkGraph&&) = default;
  NetworkGraph& operator=(NetworkGraph&&) = default;

  void add(std::string name, std::unique_ptr<Layer> layer);
  Tensor forward(const Tensor& x, Mode mode);
  Tensor backward(const Tensor& upstream);
  std::vector<ParamRef> parameters(const std::string& prefix = "");
  std::vector<std::pair<std::string, Tensor*>> state(
      const std::string& prefix = "");
  void zero_grad();
  /// Propagates shapes through the stack; throws a layer-indexed error on
  /// the first incompatibility. Returns the output shape.
  std::vector<std::size_t> validate(std::vector<std::size_t> input_shape) const;
  std::size_t layer_count() const { return layers_.size(); }
  std::uint64_t forward_count() const { return forward_count_; }
  Layer& layer(std::size_t i) { return *layers_[i].layer; }

 private:
  struct Named {
    std::string name;
    std::unique_ptr<Layer> layer;
  };
  std::vector<Named> layers_;
  bool has_cache_ = false;
  std::uint64_t forward_count_ = 0;
};

/// Mean softmax cross-entropy over the batch with log-sum-exp stabilization.
/// grad = (softmax - onehot) / N.
std::pair<double, Tensor> cross_entropy(const Tensor& logits,
                                        const std::vector<int>& labels);

/// Row-wise softmax of N×K logits.
Tensor softmax_rows(const Tensor& logits);

struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double lr = 1e-4;
  std::uint64_t step = 0;
  std::map<std::string, std::pair<Tensor, Tensor>> moments;
};

/// Bias-corrected Adam update of every referenced parameter in place.
void adam_step(AdamState& state, const std::vector<ParamRef>& params);

struct StepLrSchedule {
  double base_lr = 1e-4;
  int step_epochs = 5;
  double gamma = 0.1;

  double lr(int epoch) const {
    if (step_epochs < 1) throw ConfigError("StepLrSchedule: step_epochs >= 1");
    return base_lr * std::pow(gamma, static_cast<double>(epoch / step_epochs));
  }
};

// Checkpoint format: magic "TOKDCKP1", u32 meta length + UTF-8 meta blob,
// u64 entry count, then (u32 name length, name, tensor) records.
void save_checkpoint(
    const std::string& path, const std::string& meta,
    const std::vector<std::pair<std::string, Tensor*>>& entries);

struct Checkpoint {
  std::string meta;
  std::map<std::string, Tensor> tensors;
};

Checkpoint load_checkpoint(const std::string& path);

/// Copies checkpoint tensors into the named slots; throws DataError when a
/// slot is missing or shaped differently.
void restore_state(const Checkpoint& ckpt,
                   const std::vector<std::pair<std::string, Tensor*>>& slots);

}  // namespace tokd
