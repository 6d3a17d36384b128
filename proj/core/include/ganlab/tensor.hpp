#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <unordered_map>
#include <vector>

namespace ganlab {

class Tape;

using Shape = std::vector<int64_t>;

std::string shape_str(const Shape& s);
int64_t shape_size(const Shape& s);

// Dense row-major tensor of doubles. Rank 0 is a scalar, rank 1 a vector,
// rank 2 a matrix. A tensor optionally references a node on a Tape; untracked
// tensors are constants for differentiation purposes.
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> data);

  static Tensor scalar(double v);
  static Tensor vector(std::vector<double> v);
  static Tensor matrix(int64_t rows, int64_t cols, std::vector<double> data);
  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, double v);

  const Shape& shape() const { return shape_; }
  int64_t rank() const { return static_cast<int64_t>(shape_.size()); }
  int64_t size() const { return static_cast<int64_t>(data_.size()); }
  int64_t rows() const;  // rank-2 only
  int64_t cols() const;  // rank-2 only

  const std::vector<double>& data() const { return data_; }
  std::vector<double>& mutable_data() { return data_; }
  double operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }
  double at(int64_t r, int64_t c) const;  // rank-2 only
  double value() const;                   // scalar only

  bool tracked() const { return tape_ != nullptr; }
  int node() const { return node_; }
  Tape* tape() const { return tape_; }

  // Constant copy: same values, no tape reference.
  Tensor detached() const { return Tensor(shape_, data_); }

  bool all_finite() const;

 private:
  friend class Tape;
  Shape shape_;
  std::vector<double> data_;
  Tape* tape_ = nullptr;
  int node_ = -1;
};

// Gradient map returned by Tape::backward: leaf node id -> gradient tensor.
using GradientMap = std::unordered_map<int, Tensor>;

// Append-only record of operations for reverse-mode differentiation. Rebuilt
// for every training step (define-by-run). Single-threaded.
class Tape {
 public:
  // The backward callback receives the node's output adjoint and the adjoint
  // buffers of the whole tape; it accumulates into its parents' entries.
  using BackwardFn =
      std::function<void(const std::vector<double>& out_adj, std::vector<std::vector<double>>& adj)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Registers a differentiable leaf holding the given values.
  Tensor leaf(const Tensor& value);
  Tensor leaf(Shape shape, std::vector<double> data);

  // Records an op node and returns the tracked result tensor.
  Tensor emit(Shape shape, std::vector<double> data, std::vector<int> parents, BackwardFn back);

  // Reverse sweep from a scalar loss. Returns gradients for every leaf
  // (zero tensors for leaves the loss does not depend on).
  GradientMap backward(const Tensor& loss) const;

  size_t size() const { return nodes_.size(); }
  const Shape& node_shape(int id) const { return nodes_[static_cast<size_t>(id)].shape; }

 private:
  struct Node {
    Shape shape;
    std::vector<int> parents;
    BackwardFn back;  // null for leaves
    bool is_leaf = false;
  };
  std::vector<Node> nodes_;
};

// ---- primitive ops -------------------------------------------------------
//
// Binary elementwise ops broadcast a row vector ({n} or {1,n}) over the
// leading batch dimension of a {m,n} operand, and a scalar over anything.
// The broadcast operand's gradient sums over the broadcast dimension.

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

Tensor neg(const Tensor& t);
Tensor add_scalar(const Tensor& t, double c);
Tensor mul_scalar(const Tensor& t, double c);

Tensor exp(const Tensor& t);
Tensor log(const Tensor& t);  // rejects non-positive entries
Tensor sqrt(const Tensor& t); // rejects negative entries
Tensor tanh(const Tensor& t);
Tensor sigmoid(const Tensor& t);
Tensor softplus(const Tensor& t);  // log(1 + e^x), overflow-safe
Tensor leaky_relu(const Tensor& t, double slope = 0.2);
Tensor clamp(const Tensor& t, double lo, double hi);

Tensor softmax_rows(const Tensor& t);     // max-subtracted, rank 1 or 2
Tensor logsumexp_rows(const Tensor& t);   // {m,n} -> {m}, stable

Tensor reduce_sum(const Tensor& t);   // -> scalar
Tensor reduce_mean(const Tensor& t);  // -> scalar
Tensor mean_rows(const Tensor& t);    // {m,n} -> {1,n}, column means
Tensor sum_sq(const Tensor& t);       // squared L2 norm -> scalar
Tensor l1_norm(const Tensor& t);      // -> scalar

Tensor concat_cols(const Tensor& a, const Tensor& b);  // along last axis
Tensor reshape(const Tensor& t, Shape shape);
Tensor gather_rows(const Tensor& t, const std::vector<int64_t>& rows);
Tensor take_per_row(const Tensor& t, const std::vector<int64_t>& cols);  // {m,n} -> {m}

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator-(const Tensor& t) { return neg(t); }
inline Tensor operator+(const Tensor& t, double c) { return add_scalar(t, c); }
inline Tensor operator+(double c, const Tensor& t) { return add_scalar(t, c); }
inline Tensor operator-(const Tensor& t, double c) { return add_scalar(t, -c); }
inline Tensor operator-(double c, const Tensor& t) { return add_scalar(neg(t), c); }
inline Tensor operator*(const Tensor& t, double c) { return mul_scalar(t, c); }
inline Tensor operator*(double c, const Tensor& t) { return mul_scalar(t, c); }

// Max relative error between analytic gradients and central finite
// differences of a scalar-valued function, per coordinate:
//   |analytic - numeric| / max(1e-8, |analytic| + |numeric|).
double grad_check(const std::function<Tensor(Tape&, const Tensor&)>& f, const Tensor& x,
                  double eps = 1e-5);

}  // namespace ganlab
