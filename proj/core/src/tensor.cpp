#include "ganlab/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

namespace ganlab {

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) os << ',';
    os << s[i];
  }
  os << ']';
  return os.str();
}

int64_t shape_size(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

namespace {

[[noreturn]] void fail(const std::string& op, const std::string& msg) {
  throw std::invalid_argument(op + ": " + msg);
}

void check_shape_positive(const std::string& op, const Shape& s) {
  for (int64_t d : s)
    if (d <= 0) fail(op, "non-positive dimension in shape " + shape_str(s));
}

}  // namespace

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
  if (shape_size(shape_) != static_cast<int64_t>(data_.size()))
    fail("Tensor", "shape " + shape_str(shape_) + " does not match data length " +
                       std::to_string(data_.size()));
  check_shape_positive("Tensor", shape_);
}

Tensor Tensor::scalar(double v) { return Tensor({}, {v}); }
Tensor Tensor::vector(std::vector<double> v) {
  Shape s{static_cast<int64_t>(v.size())};
  return Tensor(std::move(s), std::move(v));
}
Tensor Tensor::matrix(int64_t rows, int64_t cols, std::vector<double> data) {
  return Tensor({rows, cols}, std::move(data));
}
Tensor Tensor::zeros(Shape shape) {
  std::vector<double> d(static_cast<size_t>(shape_size(shape)), 0.0);
  return Tensor(std::move(shape), std::move(d));
}
Tensor Tensor::full(Shape shape, double v) {
  std::vector<double> d(static_cast<size_t>(shape_size(shape)), v);
  return Tensor(std::move(shape), std::move(d));
}

int64_t Tensor::rows() const {
  if (rank() != 2) fail("rows", "tensor of shape " + shape_str(shape_) + " is not a matrix");
  return shape_[0];
}
int64_t Tensor::cols() const {
  if (rank() != 2) fail("cols", "tensor of shape " + shape_str(shape_) + " is not a matrix");
  return shape_[1];
}
double Tensor::at(int64_t r, int64_t c) const { return data_[static_cast<size_t>(r * cols() + c)]; }
double Tensor::value() const {
  if (size() != 1) fail("value", "tensor of shape " + shape_str(shape_) + " is not a scalar");
  return data_[0];
}
bool Tensor::all_finite() const {
  for (double v : data_)
    if (!std::isfinite(v)) return false;
  return true;
}

// ---- Tape ------------------------------------------------------------------

Tensor Tape::leaf(const Tensor& value) { return leaf(value.shape(), value.data()); }

Tensor Tape::leaf(Shape shape, std::vector<double> data) {
  Tensor t(std::move(shape), std::move(data));
  Node n;
  n.shape = t.shape();
  n.is_leaf = true;
  nodes_.push_back(std::move(n));
  t.tape_ = this;
  t.node_ = static_cast<int>(nodes_.size()) - 1;
  return t;
}

Tensor Tape::emit(Shape shape, std::vector<double> data, std::vector<int> parents, BackwardFn back) {
  Tensor t(std::move(shape), std::move(data));
  Node n;
  n.shape = t.shape();
  n.parents = std::move(parents);
  n.back = std::move(back);
  for (int p : n.parents)
    if (p < 0 || p >= static_cast<int>(nodes_.size())) fail("Tape::emit", "parent id out of range");
  nodes_.push_back(std::move(n));
  t.tape_ = this;
  t.node_ = static_cast<int>(nodes_.size()) - 1;
  return t;
}

GradientMap Tape::backward(const Tensor& loss) const {
  if (!loss.tracked() || loss.tape() != this)
    fail("backward", "loss is not tracked on this tape");
  if (loss.size() != 1)
    fail("backward", "loss of shape " + shape_str(loss.shape()) + " is not a scalar");

  const int root = loss.node();
  std::vector<char> reached(nodes_.size(), 0);
  std::vector<int> stack{root};
  reached[static_cast<size_t>(root)] = 1;
  while (!stack.empty()) {
    int id = stack.back();
    stack.pop_back();
    for (int p : nodes_[static_cast<size_t>(id)].parents) {
      if (!reached[static_cast<size_t>(p)]) {
        reached[static_cast<size_t>(p)] = 1;
        stack.push_back(p);
      }
    }
  }

  std::vector<std::vector<double>> adj(nodes_.size());
  for (size_t i = 0; i < nodes_.size(); ++i)
    if (reached[i]) adj[i].assign(static_cast<size_t>(shape_size(nodes_[i].shape)), 0.0);
  adj[static_cast<size_t>(root)][0] = 1.0;

  for (int id = root; id >= 0; --id) {
    const Node& n = nodes_[static_cast<size_t>(id)];
    if (!reached[static_cast<size_t>(id)] || !n.back) continue;
    n.back(adj[static_cast<size_t>(id)], adj);
  }

  GradientMap grads;
  for (size_t i = 0; i < nodes_.size(); ++i) {
    if (!nodes_[i].is_leaf) continue;
    if (reached[i])
      grads.emplace(static_cast<int>(i), Tensor(nodes_[i].shape, adj[i]));
    else
      grads.emplace(static_cast<int>(i), Tensor::zeros(nodes_[i].shape));
  }
  return grads;
}

// ---- op machinery ----------------------------------------------------------

namespace {

Tape* common_tape(const std::string& op, const Tensor& a, const Tensor& b) {
  if (a.tracked() && b.tracked() && a.tape() != b.tape())
    throw std::logic_error(op + ": operands tracked on different tapes");
  return a.tracked() ? a.tape() : (b.tracked() ? b.tape() : nullptr);
}

// Broadcast classification for binary elementwise ops.
struct Broadcast {
  Shape out_shape;
  int64_t n = 0;        // elements of output
  int64_t inner = 0;    // row length when row-broadcasting, else 0
  int mode_a = 0;       // 0: full, 1: scalar, 2: row vector over rows
  int mode_b = 0;
};

bool is_row_of(const Shape& row, const Shape& mat) {
  if (mat.size() != 2) return false;
  if (row.size() == 1) return row[0] == mat[1];
  if (row.size() == 2) return row[0] == 1 && row[1] == mat[1];
  return false;
}

Broadcast classify(const std::string& op, const Tensor& a, const Tensor& b) {
  Broadcast bc;
  if (a.shape() == b.shape()) {
    bc.out_shape = a.shape();
  } else if (b.size() == 1 && b.rank() == 0) {
    bc.out_shape = a.shape();
    bc.mode_b = 1;
  } else if (a.size() == 1 && a.rank() == 0) {
    bc.out_shape = b.shape();
    bc.mode_a = 1;
  } else if (is_row_of(b.shape(), a.shape())) {
    bc.out_shape = a.shape();
    bc.mode_b = 2;
    bc.inner = a.shape()[1];
  } else if (is_row_of(a.shape(), b.shape())) {
    bc.out_shape = b.shape();
    bc.mode_a = 2;
    bc.inner = b.shape()[1];
  } else {
    fail(op, "shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) +
                 " are not compatible");
  }
  bc.n = shape_size(bc.out_shape);
  return bc;
}

inline int64_t src_index(int mode, int64_t i, int64_t inner) {
  switch (mode) {
    case 1: return 0;
    case 2: return i % inner;
    default: return i;
  }
}

// f(a,b) with partials dfa, dfb as plain function pointers.
template <typename F, typename DA, typename DB>
Tensor binary_ew(const std::string& op, const Tensor& a, const Tensor& b, F f, DA dfa, DB dfb) {
  Broadcast bc = classify(op, a, b);
  std::vector<double> out(static_cast<size_t>(bc.n));
  const auto& av = a.data();
  const auto& bv = b.data();
  for (int64_t i = 0; i < bc.n; ++i) {
    out[static_cast<size_t>(i)] = f(av[static_cast<size_t>(src_index(bc.mode_a, i, bc.inner))],
                                    bv[static_cast<size_t>(src_index(bc.mode_b, i, bc.inner))]);
  }
  Tape* tape = common_tape(op, a, b);
  if (!tape) return Tensor(bc.out_shape, std::move(out));

  const int an = a.tracked() ? a.node() : -1;
  const int bn = b.tracked() ? b.node() : -1;
  std::vector<int> parents;
  if (an >= 0) parents.push_back(an);
  if (bn >= 0) parents.push_back(bn);
  auto back = [an, bn, bc, av = a.data(), bv = b.data(), dfa, dfb](
                  const std::vector<double>& g, std::vector<std::vector<double>>& adj) {
    for (int64_t i = 0; i < bc.n; ++i) {
      const int64_t ia = src_index(bc.mode_a, i, bc.inner);
      const int64_t ib = src_index(bc.mode_b, i, bc.inner);
      const double x = av[static_cast<size_t>(ia)];
      const double y = bv[static_cast<size_t>(ib)];
      const double gi = g[static_cast<size_t>(i)];
      if (an >= 0) adj[static_cast<size_t>(an)][static_cast<size_t>(ia)] += dfa(x, y) * gi;
      if (bn >= 0) adj[static_cast<size_t>(bn)][static_cast<size_t>(ib)] += dfb(x, y) * gi;
    }
  };
  return tape->emit(bc.out_shape, std::move(out), std::move(parents), std::move(back));
}

// Unary elementwise; derivative may be expressed in terms of input x and output y.
template <typename F, typename D>
Tensor unary_ew(const std::string&, const Tensor& t, F f, D dfdxy) {
  std::vector<double> out(t.data().size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = f(t.data()[i]);
  if (!t.tracked()) return Tensor(t.shape(), std::move(out));
  const int tn = t.node();
  auto back = [tn, xv = t.data(), yv = out, dfdxy](const std::vector<double>& g,
                                                   std::vector<std::vector<double>>& adj) {
    auto& a = adj[static_cast<size_t>(tn)];
    for (size_t i = 0; i < g.size(); ++i) a[i] += dfdxy(xv[i], yv[i]) * g[i];
  };
  return t.tape()->emit(t.shape(), std::move(out), {tn}, std::move(back));
}

void require_matrix(const std::string& op, const Tensor& t) {
  if (t.rank() != 2) fail(op, "expected a matrix, got shape " + shape_str(t.shape()));
}

// Accepts {n} as a single row; returns (rows, cols).
std::pair<int64_t, int64_t> rows_cols(const std::string& op, const Tensor& t) {
  if (t.rank() == 1) return {1, t.shape()[0]};
  if (t.rank() == 2) return {t.shape()[0], t.shape()[1]};
  fail(op, "expected rank 1 or 2, got shape " + shape_str(t.shape()));
}

}  // namespace

// ---- arithmetic ------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_ew(
      "add", a, b, [](double x, double y) { return x + y; },
      [](double, double) { return 1.0; }, [](double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_ew(
      "sub", a, b, [](double x, double y) { return x - y; },
      [](double, double) { return 1.0; }, [](double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_ew(
      "mul", a, b, [](double x, double y) { return x * y; },
      [](double, double y) { return y; }, [](double x, double) { return x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
  for (double v : b.data())
    if (v == 0.0) fail("div", "zero denominator entry");
  return binary_ew(
      "div", a, b, [](double x, double y) { return x / y; },
      [](double, double y) { return 1.0 / y; },
      [](double x, double y) { return -x / (y * y); });
}

Tensor neg(const Tensor& t) {
  return unary_ew(
      "neg", t, [](double x) { return -x; }, [](double, double) { return -1.0; });
}

Tensor add_scalar(const Tensor& t, double c) {
  return unary_ew(
      "add_scalar", t, [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}

Tensor mul_scalar(const Tensor& t, double c) {
  return unary_ew(
      "mul_scalar", t, [c](double x) { return x * c; }, [c](double, double) { return c; });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_matrix("matmul", a);
  require_matrix("matmul", b);
  if (a.cols() != b.rows())
    fail("matmul", "inner dimensions of " + shape_str(a.shape()) + " and " +
                       shape_str(b.shape()) + " do not agree");
  const int64_t m = a.rows(), k = a.cols(), n = b.cols();
  std::vector<double> out(static_cast<size_t>(m * n), 0.0);
  const auto& av = a.data();
  const auto& bv = b.data();
  for (int64_t i = 0; i < m; ++i) {
    for (int64_t p = 0; p < k; ++p) {
      const double aip = av[static_cast<size_t>(i * k + p)];
      if (aip == 0.0) continue;
      const double* brow = bv.data() + p * n;
      double* orow = out.data() + i * n;
      for (int64_t j = 0; j < n; ++j) orow[j] += aip * brow[j];
    }
  }
  Tape* tape = common_tape("matmul", a, b);
  if (!tape) return Tensor({m, n}, std::move(out));
  const int an = a.tracked() ? a.node() : -1;
  const int bn = b.tracked() ? b.node() : -1;
  std::vector<int> parents;
  if (an >= 0) parents.push_back(an);
  if (bn >= 0) parents.push_back(bn);
  auto back = [an, bn, m, k, n, av = a.data(), bv = b.data()](
                  const std::vector<double>& g, std::vector<std::vector<double>>& adj) {
    if (an >= 0) {
      auto& da = adj[static_cast<size_t>(an)];
      // dA = G * B^T
      for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < n; ++j) {
          const double gij = g[static_cast<size_t>(i * n + j)];
          if (gij == 0.0) continue;
          for (int64_t p = 0; p < k; ++p)
            da[static_cast<size_t>(i * k + p)] += gij * bv[static_cast<size_t>(p * n + j)];
        }
    }
    if (bn >= 0) {
      auto& db = adj[static_cast<size_t>(bn)];
      // dB = A^T * G
      for (int64_t i = 0; i < m; ++i)
        for (int64_t p = 0; p < k; ++p) {
          const double aip = av[static_cast<size_t>(i * k + p)];
          if (aip == 0.0) continue;
          const double* grow = g.data() + i * n;
          double* drow = db.data() + p * n;
          for (int64_t j = 0; j < n; ++j) drow[j] += aip * grow[j];
        }
    }
  };
  return tape->emit({m, n}, std::move(out), std::move(parents), std::move(back));
}

// ---- transcendental --------------------------------------------------------

Tensor exp(const Tensor& t) {
  return unary_ew(
      "exp", t, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& t) {
  for (double v : t.data())
    if (v <= 0.0) fail("log", "non-positive entry " + std::to_string(v));
  return unary_ew(
      "log", t, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Tensor sqrt(const Tensor& t) {
  for (double v : t.data())
    if (v < 0.0) fail("sqrt", "negative entry " + std::to_string(v));
  return unary_ew(
      "sqrt", t, [](double x) { return std::sqrt(x); },
      [](double, double y) { return y > 0.0 ? 0.5 / y : 0.0; });
}

Tensor tanh(const Tensor& t) {
  return unary_ew(
      "tanh", t, [](double x) { return std::tanh(x); },
      [](double, double y) { return 1.0 - y * y; });
}

Tensor sigmoid(const Tensor& t) {
  auto sg = [](double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
  };
  return unary_ew(
      "sigmoid", t, sg, [](double, double y) { return y * (1.0 - y); });
}

Tensor softplus(const Tensor& t) {
  auto sp = [](double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::fabs(x))); };
  auto sg = [](double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
  };
  return unary_ew(
      "softplus", t, sp, [sg](double x, double) { return sg(x); });
}

Tensor leaky_relu(const Tensor& t, double slope) {
  return unary_ew(
      "leaky_relu", t, [slope](double x) { return x >= 0.0 ? x : slope * x; },
      [slope](double x, double) { return x >= 0.0 ? 1.0 : slope; });
}

Tensor clamp(const Tensor& t, double lo, double hi) {
  if (!(lo < hi)) fail("clamp", "lo must be < hi");
  return unary_ew(
      "clamp", t, [lo, hi](double x) { return std::min(std::max(x, lo), hi); },
      [lo, hi](double x, double) { return (x > lo && x < hi) ? 1.0 : 0.0; });
}

// ---- row-wise ops ----------------------------------------------------------

Tensor softmax_rows(const Tensor& t) {
  auto [m, n] = rows_cols("softmax_rows", t);
  std::vector<double> out(t.data().size());
  const auto& x = t.data();
  for (int64_t r = 0; r < m; ++r) {
    const double* row = x.data() + r * n;
    double mx = row[0];
    for (int64_t c = 1; c < n; ++c) mx = std::max(mx, row[c]);
    double z = 0.0;
    for (int64_t c = 0; c < n; ++c) z += std::exp(row[c] - mx);
    for (int64_t c = 0; c < n; ++c) out[static_cast<size_t>(r * n + c)] = std::exp(row[c] - mx) / z;
  }
  if (!t.tracked()) return Tensor(t.shape(), std::move(out));
  const int tn = t.node();
  auto back = [tn, m, n, s = out](const std::vector<double>& g,
                                  std::vector<std::vector<double>>& adj) {
    auto& dx = adj[static_cast<size_t>(tn)];
    for (int64_t r = 0; r < m; ++r) {
      double dot = 0.0;
      for (int64_t c = 0; c < n; ++c)
        dot += g[static_cast<size_t>(r * n + c)] * s[static_cast<size_t>(r * n + c)];
      for (int64_t c = 0; c < n; ++c) {
        const size_t i = static_cast<size_t>(r * n + c);
        dx[i] += s[i] * (g[i] - dot);
      }
    }
  };
  return t.tape()->emit(t.shape(), std::move(out), {tn}, std::move(back));
}

Tensor logsumexp_rows(const Tensor& t) {
  auto [m, n] = rows_cols("logsumexp_rows", t);
  std::vector<double> out(static_cast<size_t>(m));
  std::vector<double> probs(t.data().size());
  const auto& x = t.data();
  for (int64_t r = 0; r < m; ++r) {
    const double* row = x.data() + r * n;
    double mx = row[0];
    for (int64_t c = 1; c < n; ++c) mx = std::max(mx, row[c]);
    double z = 0.0;
    for (int64_t c = 0; c < n; ++c) z += std::exp(row[c] - mx);
    out[static_cast<size_t>(r)] = mx + std::log(z);
    for (int64_t c = 0; c < n; ++c)
      probs[static_cast<size_t>(r * n + c)] = std::exp(row[c] - mx) / z;
  }
  if (!t.tracked()) return Tensor({m}, std::move(out));
  const int tn = t.node();
  auto back = [tn, m, n, probs](const std::vector<double>& g,
                                std::vector<std::vector<double>>& adj) {
    auto& dx = adj[static_cast<size_t>(tn)];
    for (int64_t r = 0; r < m; ++r)
      for (int64_t c = 0; c < n; ++c)
        dx[static_cast<size_t>(r * n + c)] += g[static_cast<size_t>(r)] * probs[static_cast<size_t>(r * n + c)];
  };
  return t.tape()->emit({m}, std::move(out), {tn}, std::move(back));
}

// ---- reductions ------------------------------------------------------------

Tensor reduce_sum(const Tensor& t) {
  double s = 0.0;
  for (double v : t.data()) s += v;
  if (!t.tracked()) return Tensor::scalar(s);
  const int tn = t.node();
  auto back = [tn](const std::vector<double>& g, std::vector<std::vector<double>>& adj) {
    for (double& a : adj[static_cast<size_t>(tn)]) a += g[0];
  };
  return t.tape()->emit({}, {s}, {tn}, std::move(back));
}

Tensor reduce_mean(const Tensor& t) {
  double s = 0.0;
  for (double v : t.data()) s += v;
  const double inv = 1.0 / static_cast<double>(t.size());
  if (!t.tracked()) return Tensor::scalar(s * inv);
  const int tn = t.node();
  auto back = [tn, inv](const std::vector<double>& g, std::vector<std::vector<double>>& adj) {
    for (double& a : adj[static_cast<size_t>(tn)]) a += g[0] * inv;
  };
  return t.tape()->emit({}, {s * inv}, {tn}, std::move(back));
}

Tensor mean_rows(const Tensor& t) {
  auto [m, n] = rows_cols("mean_rows", t);
  std::vector<double> out(static_cast<size_t>(n), 0.0);
  const auto& x = t.data();
  for (int64_t r = 0; r < m; ++r)
    for (int64_t c = 0; c < n; ++c) out[static_cast<size_t>(c)] += x[static_cast<size_t>(r * n + c)];
  const double inv = 1.0 / static_cast<double>(m);
  for (double& v : out) v *= inv;
  if (!t.tracked()) return Tensor({1, n}, std::move(out));
  const int tn = t.node();
  auto back = [tn, m, n, inv](const std::vector<double>& g, std::vector<std::vector<double>>& adj) {
    auto& dx = adj[static_cast<size_t>(tn)];
    for (int64_t r = 0; r < m; ++r)
      for (int64_t c = 0; c < n; ++c) dx[static_cast<size_t>(r * n + c)] += g[static_cast<size_t>(c)] * inv;
  };
  return t.tape()->emit({1, n}, std::move(out), {tn}, std::move(back));
}

Tensor sum_sq(const Tensor& t) {
  double s = 0.0;
  for (double v : t.data()) s += v * v;
  if (!t.tracked()) return Tensor::scalar(s);
  const int tn = t.node();
  auto back = [tn, xv = t.data()](const std::vector<double>& g,
                                  std::vector<std::vector<double>>& adj) {
    auto& dx = adj[static_cast<size_t>(tn)];
    for (size_t i = 0; i < xv.size(); ++i) dx[i] += 2.0 * xv[i] * g[0];
  };
  return t.tape()->emit({}, {s}, {tn}, std::move(back));
}

Tensor l1_norm(const Tensor& t) {
  double s = 0.0;
  for (double v : t.data()) s += std::fabs(v);
  if (!t.tracked()) return Tensor::scalar(s);
  const int tn = t.node();
  auto back = [tn, xv = t.data()](const std::vector<double>& g,
                                  std::vector<std::vector<double>>& adj) {
    auto& dx = adj[static_cast<size_t>(tn)];
    for (size_t i = 0; i < xv.size(); ++i)
      dx[i] += (xv[i] > 0.0 ? 1.0 : (xv[i] < 0.0 ? -1.0 : 0.0)) * g[0];
  };
  return t.tape()->emit({}, {s}, {tn}, std::move(back));
}

// ---- structural ------------------------------------------------------------

Tensor concat_cols(const Tensor& a, const Tensor& b) {
  if (a.rank() != b.rank() || (a.rank() != 1 && a.rank() != 2))
    fail("concat_cols", "shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) +
                            " are not concatenable");
  int64_t m, ca, cb;
  if (a.rank() == 1) {
    m = 1;
    ca = a.shape()[0];
    cb = b.shape()[0];
  } else {
    if (a.rows() != b.rows())
      fail("concat_cols", "row counts of " + shape_str(a.shape()) + " and " +
                              shape_str(b.shape()) + " differ");
    m = a.rows();
    ca = a.cols();
    cb = b.cols();
  }
  std::vector<double> out(static_cast<size_t>(m * (ca + cb)));
  for (int64_t r = 0; r < m; ++r) {
    std::copy_n(a.data().data() + r * ca, ca, out.data() + r * (ca + cb));
    std::copy_n(b.data().data() + r * cb, cb, out.data() + r * (ca + cb) + ca);
  }
  Shape shp = a.rank() == 1 ? Shape{ca + cb} : Shape{m, ca + cb};
  Tape* tape = common_tape("concat_cols", a, b);
  if (!tape) return Tensor(std::move(shp), std::move(out));
  const int an = a.tracked() ? a.node() : -1;
  const int bn = b.tracked() ? b.node() : -1;
  std::vector<int> parents;
  if (an >= 0) parents.push_back(an);
  if (bn >= 0) parents.push_back(bn);
  auto back = [an, bn, m, ca, cb](const std::vector<double>& g,
                                  std::vector<std::vector<double>>& adj) {
    for (int64_t r = 0; r < m; ++r) {
      if (an >= 0)
        for (int64_t c = 0; c < ca; ++c)
          adj[static_cast<size_t>(an)][static_cast<size_t>(r * ca + c)] +=
              g[static_cast<size_t>(r * (ca + cb) + c)];
      if (bn >= 0)
        for (int64_t c = 0; c < cb; ++c)
          adj[static_cast<size_t>(bn)][static_cast<size_t>(r * cb + c)] +=
              g[static_cast<size_t>(r * (ca + cb) + ca + c)];
    }
  };
  return tape->emit(std::move(shp), std::move(out), std::move(parents), std::move(back));
}

Tensor reshape(const Tensor& t, Shape shape) {
  if (shape_size(shape) != t.size())
    fail("reshape", "cannot reshape " + shape_str(t.shape()) + " to " + shape_str(shape));
  if (!t.tracked()) return Tensor(std::move(shape), t.data());
  const int tn = t.node();
  auto back = [tn](const std::vector<double>& g, std::vector<std::vector<double>>& adj) {
    auto& dx = adj[static_cast<size_t>(tn)];
    for (size_t i = 0; i < g.size(); ++i) dx[i] += g[i];
  };
  return t.tape()->emit(std::move(shape), t.data(), {tn}, std::move(back));
}

Tensor gather_rows(const Tensor& t, const std::vector<int64_t>& rows) {
  require_matrix("gather_rows", t);
  const int64_t n = t.cols();
  for (int64_t r : rows)
    if (r < 0 || r >= t.rows())
      fail("gather_rows", "row index " + std::to_string(r) + " out of range for shape " +
                              shape_str(t.shape()));
  std::vector<double> out(rows.size() * static_cast<size_t>(n));
  for (size_t i = 0; i < rows.size(); ++i)
    std::copy_n(t.data().data() + rows[i] * n, n, out.data() + static_cast<int64_t>(i) * n);
  Shape shp{static_cast<int64_t>(rows.size()), n};
  if (!t.tracked()) return Tensor(std::move(shp), std::move(out));
  const int tn = t.node();
  auto back = [tn, rows, n](const std::vector<double>& g, std::vector<std::vector<double>>& adj) {
    auto& dx = adj[static_cast<size_t>(tn)];
    for (size_t i = 0; i < rows.size(); ++i)
      for (int64_t c = 0; c < n; ++c)
        dx[static_cast<size_t>(rows[i] * n + c)] += g[i * static_cast<size_t>(n) + static_cast<size_t>(c)];
  };
  return t.tape()->emit(std::move(shp), std::move(out), {tn}, std::move(back));
}

Tensor take_per_row(const Tensor& t, const std::vector<int64_t>& cols) {
  require_matrix("take_per_row", t);
  if (static_cast<int64_t>(cols.size()) != t.rows())
    fail("take_per_row", "need one column index per row of " + shape_str(t.shape()));
  const int64_t n = t.cols();
  std::vector<double> out(cols.size());
  for (size_t r = 0; r < cols.size(); ++r) {
    if (cols[r] < 0 || cols[r] >= n)
      fail("take_per_row", "column index " + std::to_string(cols[r]) + " out of range");
    out[r] = t.data()[r * static_cast<size_t>(n) + static_cast<size_t>(cols[r])];
  }
  Shape shp{static_cast<int64_t>(cols.size())};
  if (!t.tracked()) return Tensor(std::move(shp), std::move(out));
  const int tn = t.node();
  auto back = [tn, cols, n](const std::vector<double>& g, std::vector<std::vector<double>>& adj) {
    auto& dx = adj[static_cast<size_t>(tn)];
    for (size_t r = 0; r < cols.size(); ++r)
      dx[r * static_cast<size_t>(n) + static_cast<size_t>(cols[r])] += g[r];
  };
  return t.tape()->emit(std::move(shp), std::move(out), {tn}, std::move(back));
}

// ---- gradient checking -----------------------------------------------------

double grad_check(const std::function<Tensor(Tape&, const Tensor&)>& f, const Tensor& x,
                  double eps) {
  Tape tape;
  Tensor xl = tape.leaf(x);
  Tensor y = f(tape, xl);
  if (y.size() != 1) fail("grad_check", "function is not scalar-valued");
  GradientMap grads = tape.backward(y);
  const Tensor& g = grads.at(xl.node());

  auto eval = [&f](const Tensor& xv) {
    Tape t;
    Tensor xt = t.leaf(xv);
    return f(t, xt).value();
  };

  double worst = 0.0;
  std::vector<double> xd = x.data();
  for (size_t i = 0; i < xd.size(); ++i) {
    const double save = xd[i];
    xd[i] = save + eps;
    const double fp = eval(Tensor(x.shape(), xd));
    xd[i] = save - eps;
    const double fm = eval(Tensor(x.shape(), xd));
    xd[i] = save;
    const double numeric = (fp - fm) / (2.0 * eps);
    const double analytic = g[static_cast<int64_t>(i)];
    const double err =
        std::fabs(analytic - numeric) / std::max(1e-8, std::fabs(analytic) + std::fabs(numeric));
    worst = std::max(worst, err);
  }
  return worst;
}

}  // namespace ganlab
