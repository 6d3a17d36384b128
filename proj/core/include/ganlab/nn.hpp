#pragma once

#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "ganlab/rng.hpp"
#include "ganlab/tensor.hpp"

namespace ganlab {

enum class Mode { Train, Eval };

// Named trainable array. `node` is the leaf id on the tape of the most recent
// FwdCtx::use call; the trainer reads gradients through it after backward.
struct Param {
  std::string name;
  Shape shape;
  std::vector<double> value;
  int node = -1;
};

// Per-step forward state: the tape (null for pure evaluation), the mode, and
// the noise stream for stochastic layers. A param used twice on one tape is
// registered as a single leaf.
class FwdCtx {
 public:
  FwdCtx(Tape* tape, Mode mode, Rng* rng = nullptr) : tape_(tape), mode_(mode), rng_(rng) {}

  Tensor use(Param& p);
  Tape* tape() const { return tape_; }
  Mode mode() const { return mode_; }
  Rng* rng() const { return rng_; }

 private:
  Tape* tape_;
  Mode mode_;
  Rng* rng_;
  std::unordered_map<const Param*, Tensor> cache_;
};

class Layer {
 public:
  virtual ~Layer() = default;
  virtual Tensor forward(FwdCtx& ctx, const Tensor& x) = 0;
  virtual std::vector<Param*> params() { return {}; }
  virtual std::vector<Param*> buffers() { return {}; }  // non-trained state to persist
  virtual std::string kind() const = 0;
};

// Fully connected layer, optionally weight-normalized: effective weight
// column j is g_j * V_j / ||V_j||.
class Dense : public Layer {
 public:
  Dense(std::string name, int64_t in, int64_t out, bool weight_norm, Rng& init_rng);

  Tensor forward(FwdCtx& ctx, const Tensor& x) override;
  std::vector<Param*> params() override;
  std::string kind() const override { return "dense"; }

  int64_t in_width() const { return in_; }
  int64_t out_width() const { return out_; }
  bool weight_normalized() const { return weight_norm_; }

  // Effective weight matrix (weight norm applied), untracked.
  Tensor effective_weight() const;

  Param V, g, b;

 private:
  int64_t in_, out_;
  bool weight_norm_;
};

enum class ActKind { LeakyRelu, Tanh, Sigmoid, Tanh01 };

class Activation : public Layer {
 public:
  explicit Activation(ActKind kind, double slope = 0.2) : kind_(kind), slope_(slope) {}
  Tensor forward(FwdCtx& ctx, const Tensor& x) override;
  std::string kind() const override;

 private:
  ActKind kind_;
  double slope_;
};

// Adds N(0, sigma^2) noise in train mode, identity in eval mode.
class GaussianNoise : public Layer {
 public:
  explicit GaussianNoise(double sigma) : sigma_(sigma) {}
  Tensor forward(FwdCtx& ctx, const Tensor& x) override;
  std::string kind() const override { return "gaussian_noise"; }
  double sigma() const { return sigma_; }

 private:
  double sigma_;
};

// Inverted dropout; identity in eval mode.
class Dropout : public Layer {
 public:
  explicit Dropout(double p);
  Tensor forward(FwdCtx& ctx, const Tensor& x) override;
  std::string kind() const override { return "dropout"; }

 private:
  double p_;
};

class BatchNorm : public Layer {
 public:
  BatchNorm(std::string name, int64_t width, double eps = 1e-5, double momentum = 0.9);
  Tensor forward(FwdCtx& ctx, const Tensor& x) override;
  std::vector<Param*> params() override;
  std::vector<Param*> buffers() override;
  std::string kind() const override { return "batch_norm"; }

  Param gamma, beta;
  Param running_mean, running_var;

 private:
  int64_t width_;
  double eps_, momentum_;
};

// Normalizes each example with the statistics of a fixed reference batch
// augmented by the example itself (weight 1/(N_ref+1)); the reference batch
// is normalized using only its own statistics.
class VirtualBatchNorm : public Layer {
 public:
  VirtualBatchNorm(std::string name, int64_t width, double eps = 1e-5);

  // Normalizes the reference activations with their own statistics and
  // stores those statistics for subsequent forward() calls.
  Tensor forward_reference(FwdCtx& ctx, const Tensor& ref);
  Tensor forward(FwdCtx& ctx, const Tensor& x) override;

  std::vector<Param*> params() override;
  std::string kind() const override { return "virtual_batch_norm"; }
  bool reference_ready() const { return ref_n_ > 0; }

  Param gamma, beta;

 private:
  int64_t width_;
  double eps_;
  Tensor ref_mean_, ref_sqmean_;  // {1,width}, possibly tape-tracked
  int64_t ref_n_ = 0;
};

// Cross-sample closeness features: projects each row through a learned
// A x B x C tensor and sums negative-exponential L1 distances over the batch.
// Output is the input concatenated with the B side features.
class MinibatchDiscrimination : public Layer {
 public:
  MinibatchDiscrimination(std::string name, int64_t in_width, int64_t kernels, int64_t kernel_dim,
                          Rng& init_rng, bool include_self = true);

  Tensor forward(FwdCtx& ctx, const Tensor& x) override;
  std::vector<Param*> params() override;
  std::string kind() const override { return "minibatch_discrimination"; }

  int64_t out_width() const { return a_ + b_; }

  Param T;

 private:
  int64_t a_, b_, c_;
  bool include_self_;
};

// Side features o(x_i)_b = sum_j exp(-||M_{i,b} - M_{j,b}||_1) with
// M_i = F_i * T. F: {n,A}, T: {A,B,C} -> {n,B}.
Tensor minibatch_features(const Tensor& F, const Tensor& T, bool include_self = true);

// Applies the minibatch layer to the two source batches independently and
// concatenates side features onto the inputs.
std::pair<Tensor, Tensor> minibatch_layer_forward(const Tensor& F_real, const Tensor& F_fake,
                                                  const Tensor& T, bool include_self = true);

struct NetworkOutput {
  Tensor output;
  Tensor features;  // activations at the feature tap
};

// Ordered layer stack with a feature tap (the intermediate activations used
// by feature matching and as minibatch-layer input).
class Network {
 public:
  Network() = default;
  Network(Network&&) = default;
  Network& operator=(Network&&) = default;

  Layer& add(std::unique_ptr<Layer> layer);
  void set_feature_tap(int index);
  int feature_tap() const { return feature_tap_; }
  size_t depth() const { return layers_.size(); }
  Layer& layer(size_t i) { return *layers_[i]; }
  const Layer& layer(size_t i) const { return *layers_[i]; }

  NetworkOutput forward(FwdCtx& ctx, const Tensor& batch);

  // Pushes the fixed reference batch through the stack, refreshing each
  // VirtualBatchNorm layer's statistics on the way.
  void reference_pass(FwdCtx& ctx, const Tensor& ref_batch);
  bool has_vbn() const;

  std::vector<Param*> params();
  std::vector<Param*> buffers();

 private:
  std::vector<std::unique_ptr<Layer>> layers_;
  int feature_tap_ = -1;
};

}  // namespace ganlab
