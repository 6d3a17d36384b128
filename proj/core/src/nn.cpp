#include "ganlab/nn.hpp"

#include <cmath>
#include <stdexcept>
#include <utility>

namespace ganlab {

namespace {

std::vector<double> normal_init(int64_t n, double stddev, Rng& rng) {
  std::vector<double> v(static_cast<size_t>(n));
  for (double& x : v) x = rng.normal(0.0, stddev);
  return v;
}

}  // namespace

Tensor FwdCtx::use(Param& p) {
  if (!tape_) return Tensor(p.shape, p.value);
  auto it = cache_.find(&p);
  if (it != cache_.end()) return it->second;
  Tensor leaf = tape_->leaf(p.shape, p.value);
  p.node = leaf.node();
  cache_.emplace(&p, leaf);
  return leaf;
}

// ---- Dense -------------------------------------------------------------

Dense::Dense(std::string name, int64_t in, int64_t out, bool weight_norm, Rng& init_rng)
    : in_(in), out_(out), weight_norm_(weight_norm) {
  V = Param{name + ".V", {in, out}, normal_init(in * out, 0.05, init_rng)};
  if (weight_norm_) g = Param{name + ".g", {out}, std::vector<double>(static_cast<size_t>(out), 1.0)};
  b = Param{name + ".b", {out}, std::vector<double>(static_cast<size_t>(out), 0.0)};
}

Tensor Dense::forward(FwdCtx& ctx, const Tensor& x) {
  Tensor vt = ctx.use(V);
  Tensor w = vt;
  if (weight_norm_) {
    // column norms: sqrt(sum_i V_ij^2); guard against a zero column
    Tensor col_sq = mul_scalar(mean_rows(mul(vt, vt)), static_cast<double>(in_));
    for (double v : col_sq.data())
      if (v <= 0.0) throw std::invalid_argument("Dense: weight-normalized column has zero norm");
    Tensor norms = sqrt(col_sq);
    w = mul(vt, div(ctx.use(g), norms));
  }
  return add(matmul(x, w), ctx.use(b));
}

std::vector<Param*> Dense::params() {
  if (weight_norm_) return {&V, &g, &b};
  return {&V, &b};
}

Tensor Dense::effective_weight() const {
  Tensor vt(V.shape, V.value);
  if (!weight_norm_) return vt;
  std::vector<double> w(vt.data());
  for (int64_t j = 0; j < out_; ++j) {
    double nsq = 0.0;
    for (int64_t i = 0; i < in_; ++i) nsq += w[static_cast<size_t>(i * out_ + j)] * w[static_cast<size_t>(i * out_ + j)];
    const double scale = g.value[static_cast<size_t>(j)] / std::sqrt(nsq);
    for (int64_t i = 0; i < in_; ++i) w[static_cast<size_t>(i * out_ + j)] *= scale;
  }
  return Tensor(V.shape, std::move(w));
}

// ---- Activation ----------------------------------------------------------

Tensor Activation::forward(FwdCtx&, const Tensor& x) {
  switch (kind_) {
    case ActKind::LeakyRelu: return leaky_relu(x, slope_);
    case ActKind::Tanh: return tanh(x);
    case ActKind::Sigmoid: return sigmoid(x);
    case ActKind::Tanh01: return mul_scalar(add_scalar(tanh(x), 1.0), 0.5);
  }
  throw std::logic_error("Activation: unknown kind");
}

std::string Activation::kind() const {
  switch (kind_) {
    case ActKind::LeakyRelu: return "leaky_relu";
    case ActKind::Tanh: return "tanh";
    case ActKind::Sigmoid: return "sigmoid";
    case ActKind::Tanh01: return "tanh01";
  }
  return "activation";
}

// ---- GaussianNoise ---------------------------------------------------------

Tensor GaussianNoise::forward(FwdCtx& ctx, const Tensor& x) {
  if (ctx.mode() != Mode::Train || sigma_ == 0.0) return x;
  if (!ctx.rng()) throw std::invalid_argument("GaussianNoise: train mode requires an Rng");
  std::vector<double> noise(static_cast<size_t>(x.size()));
  for (double& v : noise) v = ctx.rng()->normal(0.0, sigma_);
  return add(x, Tensor(x.shape(), std::move(noise)));
}

// ---- Dropout ---------------------------------------------------------------

Dropout::Dropout(double p) : p_(p) {
  if (p < 0.0 || p >= 1.0) throw std::invalid_argument("Dropout: p must be in [0,1)");
}

Tensor Dropout::forward(FwdCtx& ctx, const Tensor& x) {
  if (ctx.mode() != Mode::Train || p_ == 0.0) return x;
  if (!ctx.rng()) throw std::invalid_argument("Dropout: train mode requires an Rng");
  const double keep = 1.0 - p_;
  std::vector<double> mask(static_cast<size_t>(x.size()));
  for (double& v : mask) v = ctx.rng()->uniform() < keep ? 1.0 / keep : 0.0;
  return mul(x, Tensor(x.shape(), std::move(mask)));
}

// ---- BatchNorm --------------------------------------------------------------

BatchNorm::BatchNorm(std::string name, int64_t width, double eps, double momentum)
    : width_(width), eps_(eps), momentum_(momentum) {
  gamma = Param{name + ".gamma", {width}, std::vector<double>(static_cast<size_t>(width), 1.0)};
  beta = Param{name + ".beta", {width}, std::vector<double>(static_cast<size_t>(width), 0.0)};
  running_mean = Param{name + ".running_mean", {width}, std::vector<double>(static_cast<size_t>(width), 0.0)};
  running_var = Param{name + ".running_var", {width}, std::vector<double>(static_cast<size_t>(width), 1.0)};
}

Tensor BatchNorm::forward(FwdCtx& ctx, const Tensor& x) {
  if (ctx.mode() == Mode::Train) {
    Tensor m = mean_rows(x);
    Tensor centered = sub(x, m);
    Tensor var = mean_rows(mul(centered, centered));
    Tensor out = add(mul(ctx.use(gamma), div(centered, sqrt(add_scalar(var, eps_)))), ctx.use(beta));
    for (int64_t j = 0; j < width_; ++j) {
      running_mean.value[static_cast<size_t>(j)] =
          momentum_ * running_mean.value[static_cast<size_t>(j)] + (1.0 - momentum_) * m[j];
      running_var.value[static_cast<size_t>(j)] =
          momentum_ * running_var.value[static_cast<size_t>(j)] + (1.0 - momentum_) * var[j];
    }
    return out;
  }
  Tensor m(Shape{1, width_}, running_mean.value);
  Tensor v(Shape{1, width_}, running_var.value);
  return add(mul(ctx.use(gamma), div(sub(x, m), sqrt(add_scalar(v, eps_)))), ctx.use(beta));
}

std::vector<Param*> BatchNorm::params() { return {&gamma, &beta}; }
std::vector<Param*> BatchNorm::buffers() { return {&running_mean, &running_var}; }

// ---- VirtualBatchNorm --------------------------------------------------------

VirtualBatchNorm::VirtualBatchNorm(std::string name, int64_t width, double eps)
    : width_(width), eps_(eps) {
  gamma = Param{name + ".gamma", {width}, std::vector<double>(static_cast<size_t>(width), 1.0)};
  beta = Param{name + ".beta", {width}, std::vector<double>(static_cast<size_t>(width), 0.0)};
}

Tensor VirtualBatchNorm::forward_reference(FwdCtx& ctx, const Tensor& ref) {
  if (ref.rank() != 2 || ref.cols() != width_)
    throw std::invalid_argument("VirtualBatchNorm: reference batch shape " + shape_str(ref.shape()) +
                                " does not match width " + std::to_string(width_));
  if (ref.rows() < 2)
    throw std::invalid_argument("VirtualBatchNorm: reference batch smaller than 2, variance undefined");
  ref_mean_ = mean_rows(ref);
  ref_sqmean_ = mean_rows(mul(ref, ref));
  ref_n_ = ref.rows();
  Tensor centered = sub(ref, ref_mean_);
  Tensor var = sub(ref_sqmean_, mul(ref_mean_, ref_mean_));
  return add(mul(ctx.use(gamma), div(centered, sqrt(add_scalar(var, eps_)))), ctx.use(beta));
}

Tensor VirtualBatchNorm::forward(FwdCtx& ctx, const Tensor& x) {
  if (ref_n_ == 0)
    throw std::invalid_argument("VirtualBatchNorm: reference statistics not initialized");
  const double n = static_cast<double>(ref_n_);
  const double inv = 1.0 / (n + 1.0);
  // statistics of reference batch + the example itself, weight 1/(N_ref+1)
  Tensor m_aug = mul_scalar(add(mul_scalar(ref_mean_, n), x), inv);
  Tensor sq_aug = mul_scalar(add(mul_scalar(ref_sqmean_, n), mul(x, x)), inv);
  Tensor var_aug = sub(sq_aug, mul(m_aug, m_aug));
  return add(mul(ctx.use(gamma), div(sub(x, m_aug), sqrt(add_scalar(var_aug, eps_)))), ctx.use(beta));
}

std::vector<Param*> VirtualBatchNorm::params() { return {&gamma, &beta}; }

// ---- minibatch discrimination ------------------------------------------------

namespace {

// Side-feature distance kernel over projected rows M {n, B*C} -> {n, B}.
Tensor mbd_side(const Tensor& M, int64_t B, int64_t C, bool include_self) {
  const int64_t n = M.rows();
  const auto& m = M.data();
  std::vector<double> out(static_cast<size_t>(n * B), include_self ? 1.0 : 0.0);
  // c[i][j][b] for i<j is needed again in backward; recomputing there keeps
  // the closure small, so only o is materialized here.
  for (int64_t i = 0; i < n; ++i) {
    for (int64_t j = i + 1; j < n; ++j) {
      for (int64_t b = 0; b < B; ++b) {
        double d = 0.0;
        const double* mi = m.data() + (i * B + b) * C;
        const double* mj = m.data() + (j * B + b) * C;
        for (int64_t c = 0; c < C; ++c) d += std::fabs(mi[c] - mj[c]);
        const double cb = std::exp(-d);
        out[static_cast<size_t>(i * B + b)] += cb;
        out[static_cast<size_t>(j * B + b)] += cb;
      }
    }
  }
  if (!M.tracked()) return Tensor({n, B}, std::move(out));
  const int mn = M.node();
  auto back = [mn, n, B, C, mv = M.data()](const std::vector<double>& g,
                                           std::vector<std::vector<double>>& adj) {
    auto& dm = adj[static_cast<size_t>(mn)];
    for (int64_t i = 0; i < n; ++i) {
      for (int64_t j = i + 1; j < n; ++j) {
        for (int64_t b = 0; b < B; ++b) {
          const double* mi = mv.data() + (i * B + b) * C;
          const double* mj = mv.data() + (j * B + b) * C;
          double d = 0.0;
          for (int64_t c = 0; c < C; ++c) d += std::fabs(mi[c] - mj[c]);
          const double cb = std::exp(-d);
          const double w = cb * (g[static_cast<size_t>(i * B + b)] + g[static_cast<size_t>(j * B + b)]);
          double* di = dm.data() + (i * B + b) * C;
          double* dj = dm.data() + (j * B + b) * C;
          for (int64_t c = 0; c < C; ++c) {
            const double s = mi[c] > mj[c] ? 1.0 : (mi[c] < mj[c] ? -1.0 : 0.0);
            di[c] -= w * s;
            dj[c] += w * s;
          }
        }
      }
    }
  };
  return M.tape()->emit({n, B}, std::move(out), {mn}, std::move(back));
}

}  // namespace

Tensor minibatch_features(const Tensor& F, const Tensor& T, bool include_self) {
  if (F.rank() != 2) throw std::invalid_argument("minibatch_features: F must be a matrix, got " + shape_str(F.shape()));
  if (T.rank() != 3) throw std::invalid_argument("minibatch_features: T must be rank 3, got " + shape_str(T.shape()));
  if (F.cols() != T.shape()[0])
    throw std::invalid_argument("minibatch_features: feature width " + shape_str(F.shape()) +
                                " does not match T " + shape_str(T.shape()));
  const int64_t A = T.shape()[0], B = T.shape()[1], C = T.shape()[2];
  Tensor M = matmul(F, reshape(T, {A, B * C}));
  return mbd_side(M, B, C, include_self);
}

std::pair<Tensor, Tensor> minibatch_layer_forward(const Tensor& F_real, const Tensor& F_fake,
                                                  const Tensor& T, bool include_self) {
  Tensor o_real = minibatch_features(F_real, T, include_self);
  Tensor o_fake = minibatch_features(F_fake, T, include_self);
  return {concat_cols(F_real, o_real), concat_cols(F_fake, o_fake)};
}

MinibatchDiscrimination::MinibatchDiscrimination(std::string name, int64_t in_width, int64_t kernels,
                                                 int64_t kernel_dim, Rng& init_rng, bool include_self)
    : a_(in_width), b_(kernels), c_(kernel_dim), include_self_(include_self) {
  T = Param{name + ".T", {a_, b_, c_}, normal_init(a_ * b_ * c_, 0.1, init_rng)};
}

Tensor MinibatchDiscrimination::forward(FwdCtx& ctx, const Tensor& x) {
  Tensor side = minibatch_features(x, ctx.use(T), include_self_);
  return concat_cols(x, side);
}

std::vector<Param*> MinibatchDiscrimination::params() { return {&T}; }

// ---- Network -----------------------------------------------------------------

Layer& Network::add(std::unique_ptr<Layer> layer) {
  layers_.push_back(std::move(layer));
  return *layers_.back();
}

void Network::set_feature_tap(int index) {
  if (index < 0 || index + 1 >= static_cast<int>(layers_.size()))
    throw std::invalid_argument("Network: feature tap " + std::to_string(index) +
                                " must name an intermediate layer (depth " +
                                std::to_string(layers_.size()) + ")");
  feature_tap_ = index;
}

NetworkOutput Network::forward(FwdCtx& ctx, const Tensor& batch) {
  Tensor h = batch;
  Tensor features = batch;
  for (size_t i = 0; i < layers_.size(); ++i) {
    h = layers_[i]->forward(ctx, h);
    if (static_cast<int>(i) == feature_tap_) features = h;
  }
  return {h, features};
}

void Network::reference_pass(FwdCtx& ctx, const Tensor& ref_batch) {
  Tensor h = ref_batch;
  for (auto& layer : layers_) {
    if (auto* vbn = dynamic_cast<VirtualBatchNorm*>(layer.get()))
      h = vbn->forward_reference(ctx, h);
    else
      h = layer->forward(ctx, h);
  }
}

bool Network::has_vbn() const {
  for (const auto& layer : layers_)
    if (dynamic_cast<const VirtualBatchNorm*>(layer.get())) return true;
  return false;
}

std::vector<Param*> Network::params() {
  std::vector<Param*> out;
  for (auto& layer : layers_)
    for (Param* p : layer->params()) out.push_back(p);
  return out;
}

std::vector<Param*> Network::buffers() {
  std::vector<Param*> out;
  for (auto& layer : layers_)
    for (Param* p : layer->buffers()) out.push_back(p);
  return out;
}

}  // namespace ganlab
