#pragma once

// Define-by-run reverse-mode differentiation over rank-2 tensors.
//
// A Tape records every operation applied to its variables. Calling
// backward() on a scalar variable walks the records in reverse creation
// order, which is a valid reverse topological order because inputs are
// always created before the nodes that consume them.

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "refdistill/error.hpp"
#include "refdistill/tensor.hpp"

namespace refdistill {

class Tape;

/// Handle to a node on a Tape.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
};

class Tape {
 public:
  using BackwardFn = std::function<void(Tape&)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Leaf that never receives a gradient.
  Var constant(Tensor value) { return push(std::move(value), false, {}); }

  /// Leaf whose gradient is accumulated by backward().
  Var parameter(Tensor value) { return push(std::move(value), true, {}); }

  Var leaf(Tensor value, bool requires_grad) { return push(std::move(value), requires_grad, {}); }

  /// Records an operation result. The backward closure is dropped when no
  /// input requires a gradient.
  Var record(Tensor value, std::initializer_list<Var> inputs, BackwardFn backward) {
    return record(std::move(value), std::span<const Var>(inputs.begin(), inputs.size()), std::move(backward));
  }

  Var record(Tensor value, std::span<const Var> inputs, BackwardFn backward) {
    bool needs = false;
    for (const Var& in : inputs) {
      check_owner(in);
      needs = needs || nodes_[in.id].requires_grad;
    }
    return push(std::move(value), needs, needs ? std::move(backward) : BackwardFn{});
  }

  const Tensor& value(Var v) const { return nodes_.at(v.id).value; }
  bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }
  bool has_grad(Var v) const { return nodes_.at(v.id).grad.has_value(); }

  /// Accumulated gradient; zeros if the node was never reached.
  Tensor grad(Var v) const {
    const Node& n = nodes_.at(v.id);
    return n.grad ? *n.grad : Tensor(n.value.shape());
  }

  /// Gradient buffer used by backward closures; allocated on first use.
  Tensor& grad_buffer(std::size_t id) {
    Node& n = nodes_[id];
    if (!n.grad) n.grad.emplace(n.value.shape());
    return *n.grad;
  }

  bool wants_grad(std::size_t id) const { return nodes_[id].requires_grad; }

  std::size_t size() const { return nodes_.size(); }

  void backward(Var root) {
    check_owner(root);
    if (consumed_) throw Error("backward called twice on the same tape");
    if (nodes_[root.id].value.size() != 1) {
      throw ShapeError("backward requires a scalar root, got " + shape_string(nodes_[root.id].value.shape()));
    }
    consumed_ = true;
    if (!nodes_[root.id].requires_grad) return;
    grad_buffer(root.id)[0] = 1.0;
    for (std::size_t i = root.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.backward && n.grad) n.backward(*this);
    }
    for (Node& n : nodes_) n.backward = nullptr;
  }

 private:
  struct Node {
    Tensor value;
    std::optional<Tensor> grad;
    bool requires_grad = false;
    BackwardFn backward;
  };

  Var push(Tensor value, bool requires_grad, BackwardFn backward) {
    if (consumed_) throw Error("tape already consumed by backward");
    nodes_.push_back(Node{std::move(value), std::nullopt, requires_grad, std::move(backward)});
    return Var{this, nodes_.size() - 1};
  }

  void check_owner(Var v) const {
    if (v.tape != this || v.id >= nodes_.size()) throw Error("variable does not belong to this tape");
  }

  std::vector<Node> nodes_;
  bool consumed_ = false;
};

inline const Tensor& Var::value() const { return tape->value(*this); }

namespace detail {

inline void require_matrix(const Tensor& t, const char* op) {
  if (t.rank() != 2) throw ShapeError(std::string(op) + ": expected a matrix, got " + shape_string(t.shape()));
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                     shape_string(b.shape()));
  }
}

// out += a * b  (a: m x k, b: k x n)
inline void gemm_nn(const Tensor& a, const Tensor& b, Tensor& out) {
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  for (std::size_t i = 0; i < m; ++i) {
    double* o = &out(i, 0);
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a(i, p);
      const double* br = b.values().data() + p * n;
      for (std::size_t j = 0; j < n; ++j) o[j] += av * br[j];
    }
  }
}

// out += a * b^T  (a: m x k, b: n x k)
inline void gemm_nt(const Tensor& a, const Tensor& b, Tensor& out) {
  const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += a(i, p) * b(j, p);
      out(i, j) += s;
    }
  }
}

// out += a^T * b  (a: k x m, b: k x n)
inline void gemm_tn(const Tensor& a, const Tensor& b, Tensor& out) {
  const std::size_t k = a.rows(), m = a.cols(), n = b.cols();
  for (std::size_t p = 0; p < k; ++p) {
    for (std::size_t i = 0; i < m; ++i) {
      const double av = a(p, i);
      double* o = &out(i, 0);
      const double* br = b.values().data() + p * n;
      for (std::size_t j = 0; j < n; ++j) o[j] += av * br[j];
    }
  }
}

inline constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
inline constexpr double kGeluA = 0.044715;

}  // namespace detail

/// Plain (non-differentiable) matrix product.
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::require_matrix(a, "matmul");
  detail::require_matrix(b, "matmul");
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: inner dimensions differ, " + shape_string(a.shape()) + " x " + shape_string(b.shape()));
  }
  Tensor out = Tensor::zeros(a.rows(), b.cols());
  detail::gemm_nn(a, b, out);
  return out;
}

inline double gelu_value(double x) {
  return 0.5 * x * (1.0 + std::tanh(detail::kGeluC * (x + detail::kGeluA * x * x * x)));
}

inline double gelu_derivative(double x) {
  const double u = detail::kGeluC * (x + detail::kGeluA * x * x * x);
  const double t = std::tanh(u);
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * detail::kGeluC * (1.0 + 3.0 * detail::kGeluA * x * x);
}

/// Row-wise softmax with the row maximum subtracted first.
inline Tensor softmax_rows(const Tensor& s) {
  detail::require_matrix(s, "softmax_rows");
  Tensor out = s;
  for (std::size_t r = 0; r < out.rows(); ++r) {
    auto row = out.row(r);
    if (row.empty()) continue;
    const double mx = *std::max_element(row.begin(), row.end());
    double z = 0.0;
    for (double& v : row) {
      v = std::exp(v - mx);
      z += v;
    }
    for (double& v : row) v /= z;
  }
  return out;
}

/// Attention weights softmax(S) - delta over unmasked keys; masked keys get
/// exactly zero weight. An empty mask means every key is visible.
inline Tensor shifted_softmax_rows(const Tensor& s, double delta, std::span<const bool> key_mask) {
  detail::require_matrix(s, "shifted_softmax_rows");
  const std::size_t n = s.cols();
  if (!key_mask.empty() && key_mask.size() != n) {
    throw ShapeError("shifted_softmax_rows: key mask has " + std::to_string(key_mask.size()) + " entries for " +
                     std::to_string(n) + " keys");
  }
  auto visible = [&](std::size_t c) { return key_mask.empty() || !key_mask[c]; };
  std::size_t open = 0;
  for (std::size_t c = 0; c < n; ++c) open += visible(c) ? 1 : 0;
  if (open == 0 && s.rows() > 0) throw ValidationError("shifted_softmax_rows: every key is masked");

  Tensor out = Tensor::zeros(s.rows(), n);
  for (std::size_t r = 0; r < s.rows(); ++r) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < n; ++c)
      if (visible(c)) mx = std::max(mx, s(r, c));
    double z = 0.0;
    for (std::size_t c = 0; c < n; ++c) {
      if (!visible(c)) continue;
      out(r, c) = std::exp(s(r, c) - mx);
      z += out(r, c);
    }
    for (std::size_t c = 0; c < n; ++c)
      if (visible(c)) out(r, c) = out(r, c) / z - delta;
  }
  return out;
}

namespace ad {

inline Var matmul(Var a, Var b) {
  Tape& tape = *a.tape;
  Tensor out = refdistill::matmul(a.value(), b.value());
  return tape.record(std::move(out), {a, b}, [a, b, self = tape.size()](Tape& t) {
    const Tensor& g = t.grad_buffer(self);
    if (t.wants_grad(a.id)) detail::gemm_nt(g, t.value(b), t.grad_buffer(a.id));
    if (t.wants_grad(b.id)) detail::gemm_tn(t.value(a), g, t.grad_buffer(b.id));
  });
}

/// a * b^T without materializing the transpose.
inline Var matmul_transposed(Var a, Var b) {
  Tape& tape = *a.tape;
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  detail::require_matrix(av, "matmul_transposed");
  detail::require_matrix(bv, "matmul_transposed");
  if (av.cols() != bv.cols()) {
    throw ShapeError("matmul_transposed: " + shape_string(av.shape()) + " x " + shape_string(bv.shape()) + "^T");
  }
  Tensor out = Tensor::zeros(av.rows(), bv.rows());
  detail::gemm_nt(av, bv, out);
  return tape.record(std::move(out), {a, b}, [a, b, self = tape.size()](Tape& t) {
    const Tensor& g = t.grad_buffer(self);
    if (t.wants_grad(a.id)) detail::gemm_nn(g, t.value(b), t.grad_buffer(a.id));
    if (t.wants_grad(b.id)) detail::gemm_tn(g, t.value(a), t.grad_buffer(b.id));
  });
}

inline Var add(Var a, Var b) {
  Tape& tape = *a.tape;
  detail::require_same_shape(a.value(), b.value(), "add");
  Tensor out = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  return tape.record(std::move(out), {a, b}, [a, b, self = tape.size()](Tape& t) {
    const Tensor& g = t.grad_buffer(self);
    for (Var in : {a, b}) {
      if (!t.wants_grad(in.id)) continue;
      Tensor& gi = t.grad_buffer(in.id);
      for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i];
    }
  });
}

inline Var sub(Var a, Var b) {
  Tape& tape = *a.tape;
  detail::require_same_shape(a.value(), b.value(), "sub");
  Tensor out = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  return tape.record(std::move(out), {a, b}, [a, b, self = tape.size()](Tape& t) {
    const Tensor& g = t.grad_buffer(self);
    if (t.wants_grad(a.id)) {
      Tensor& ga = t.grad_buffer(a.id);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (t.wants_grad(b.id)) {
      Tensor& gb = t.grad_buffer(b.id);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
}

/// Adds a 1 x n bias row to every row of an m x n matrix.
inline Var add_row(Var a, Var bias) {
  Tape& tape = *a.tape;
  const Tensor& av = a.value();
  const Tensor& bv = bias.value();
  detail::require_matrix(av, "add_row");
  if (bv.size() != av.cols()) {
    throw ShapeError("add_row: bias " + shape_string(bv.shape()) + " does not fit " + shape_string(av.shape()));
  }
  Tensor out = av;
  for (std::size_t r = 0; r < out.rows(); ++r)
    for (std::size_t c = 0; c < out.cols(); ++c) out(r, c) += bv[c];
  return tape.record(std::move(out), {a, bias}, [a, bias, self = tape.size()](Tape& t) {
    const Tensor& g = t.grad_buffer(self);
    if (t.wants_grad(a.id)) {
      Tensor& ga = t.grad_buffer(a.id);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (t.wants_grad(bias.id)) {
      Tensor& gb = t.grad_buffer(bias.id);
      for (std::size_t r = 0; r < g.rows(); ++r)
        for (std::size_t c = 0; c < g.cols(); ++c) gb[c] += g(r, c);
    }
  });
}

inline Var scale(Var a, double s) {
  Tape& tape = *a.tape;
  Tensor out = a.value();
  for (double& v : out.values()) v *= s;
  return tape.record(std::move(out), {a}, [a, s, self = tape.size()](Tape& t) {
    const Tensor& g = t.grad_buffer(self);
    Tensor& ga = t.grad_buffer(a.id);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += s * g[i];
  });
}

inline Var sum(Var a) {
  Tape& tape = *a.tape;
  double s = 0.0;
  for (double v : a.value().values()) s += v;
  return tape.record(Tensor::scalar(s), {a}, [a, self = tape.size()](Tape& t) {
    const double g = t.grad_buffer(self)[0];
    for (double& v : t.grad_buffer(a.id).values()) v += g;
  });
}

/// Σ weight_i * term_i over scalar terms, accumulated left to right.
inline Var weighted_sum(std::span<const std::pair<double, Var>> terms, Tape& tape) {
  Var acc = tape.constant(Tensor::scalar(0.0));
  for (const auto& [w, v] : terms) {
    if (v.value().size() != 1) throw ShapeError("weighted_sum expects scalar terms");
    acc = add(acc, scale(v, w));
  }
  return acc;
}

inline Var gelu(Var a) {
  Tape& tape = *a.tape;
  Tensor out = a.value();
  for (double& v : out.values()) v = gelu_value(v);
  return tape.record(std::move(out), {a}, [a, self = tape.size()](Tape& t) {
    const Tensor& g = t.grad_buffer(self);
    const Tensor& x = t.value(a);
    Tensor& ga = t.grad_buffer(a.id);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * gelu_derivative(x[i]);
  });
}

inline Var relu(Var a) {
  Tape& tape = *a.tape;
  Tensor out = a.value();
  for (double& v : out.values()) v = v > 0.0 ? v : 0.0;
  return tape.record(std::move(out), {a}, [a, self = tape.size()](Tape& t) {
    const Tensor& g = t.grad_buffer(self);
    const Tensor& x = t.value(a);
    Tensor& ga = t.grad_buffer(a.id);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += x[i] > 0.0 ? g[i] : 0.0;
  });
}

inline Var softmax_rows(Var s) {
  Tape& tape = *s.tape;
  Tensor out = refdistill::softmax_rows(s.value());
  return tape.record(std::move(out), {s}, [s, self = tape.size()](Tape& t) {
    const Tensor& g = t.grad_buffer(self);
    const Tensor& p = t.value(Var{&t, self});
    Tensor& gs = t.grad_buffer(s.id);
    for (std::size_t r = 0; r < p.rows(); ++r) {
      double dot = 0.0;
      for (std::size_t c = 0; c < p.cols(); ++c) dot += p(r, c) * g(r, c);
      for (std::size_t c = 0; c < p.cols(); ++c) gs(r, c) += p(r, c) * (g(r, c) - dot);
    }
  });
}

inline Var shifted_softmax_rows(Var s, double delta, std::span<const bool> key_mask = {}) {
  Tape& tape = *s.tape;
  Tensor out = refdistill::shifted_softmax_rows(s.value(), delta, key_mask);
  std::vector<bool> mask(key_mask.begin(), key_mask.end());
  return tape.record(std::move(out), {s}, [s, delta, mask = std::move(mask), self = tape.size()](Tape& t) {
    const Tensor& g = t.grad_buffer(self);
    const Tensor& w = t.value(Var{&t, self});
    Tensor& gs = t.grad_buffer(s.id);
    auto visible = [&](std::size_t c) { return mask.empty() || !mask[c]; };
    for (std::size_t r = 0; r < w.rows(); ++r) {
      double dot = 0.0;
      for (std::size_t c = 0; c < w.cols(); ++c)
        if (visible(c)) dot += (w(r, c) + delta) * g(r, c);
      for (std::size_t c = 0; c < w.cols(); ++c)
        if (visible(c)) gs(r, c) += (w(r, c) + delta) * (g(r, c) - dot);
    }
  });
}

/// Normalizes each row to zero mean and unit variance (biased estimator),
/// then applies gamma * x + beta with 1 x d affine parameters.
inline Var layer_norm(Var x, Var gamma, Var beta, double eps) {
  Tape& tape = *x.tape;
  const Tensor& xv = x.value();
  detail::require_matrix(xv, "layer_norm");
  const std::size_t d = xv.cols();
  if (d == 0) throw ShapeError("layer_norm: empty feature axis");
  if (gamma.value().size() != d || beta.value().size() != d) {
    throw ShapeError("layer_norm: affine parameters " + shape_string(gamma.value().shape()) + "/" +
                     shape_string(beta.value().shape()) + " do not fit " + shape_string(xv.shape()));
  }
  if (!(eps > 0.0)) throw ValidationError("layer_norm: eps must be positive");
  const Tensor& gv = gamma.value();
  const Tensor& bv = beta.value();
  Tensor normalized = Tensor::zeros(xv.rows(), d);
  std::vector<double> inv_std(xv.rows());
  Tensor out = Tensor::zeros(xv.rows(), d);
  for (std::size_t r = 0; r < xv.rows(); ++r) {
    double mean = 0.0;
    for (std::size_t c = 0; c < d; ++c) mean += xv(r, c);
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t c = 0; c < d; ++c) var += (xv(r, c) - mean) * (xv(r, c) - mean);
    var /= static_cast<double>(d);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t c = 0; c < d; ++c) {
      normalized(r, c) = (xv(r, c) - mean) * inv_std[r];
      out(r, c) = gv[c] * normalized(r, c) + bv[c];
    }
  }
  return tape.record(
      std::move(out), {x, gamma, beta},
      [x, gamma, beta, normalized = std::move(normalized), inv_std = std::move(inv_std), self = tape.size()](Tape& t) {
        const Tensor& g = t.grad_buffer(self);
        const Tensor& gv = t.value(gamma);
        const std::size_t d = g.cols();
        if (t.wants_grad(gamma.id)) {
          Tensor& gg = t.grad_buffer(gamma.id);
          for (std::size_t r = 0; r < g.rows(); ++r)
            for (std::size_t c = 0; c < d; ++c) gg[c] += g(r, c) * normalized(r, c);
        }
        if (t.wants_grad(beta.id)) {
          Tensor& gb = t.grad_buffer(beta.id);
          for (std::size_t r = 0; r < g.rows(); ++r)
            for (std::size_t c = 0; c < d; ++c) gb[c] += g(r, c);
        }
        if (t.wants_grad(x.id)) {
          Tensor& gx = t.grad_buffer(x.id);
          for (std::size_t r = 0; r < g.rows(); ++r) {
            double mean_g = 0.0, mean_gn = 0.0;
            for (std::size_t c = 0; c < d; ++c) {
              const double gn = g(r, c) * gv[c];
              mean_g += gn;
              mean_gn += gn * normalized(r, c);
            }
            mean_g /= static_cast<double>(d);
            mean_gn /= static_cast<double>(d);
            for (std::size_t c = 0; c < d; ++c) {
              const double gn = g(r, c) * gv[c];
              gx(r, c) += inv_std[r] * (gn - mean_g - normalized(r, c) * mean_gn);
            }
          }
        }
      });
}

/// Stacks b below a (sequence axis).
inline Var concat_rows(Var a, Var b) {
  Tape& tape = *a.tape;
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.cols() != bv.cols()) {
    throw ShapeError("concat_rows: " + shape_string(av.shape()) + " and " + shape_string(bv.shape()));
  }
  Tensor out = Tensor::zeros(av.rows() + bv.rows(), av.cols());
  std::copy(av.values().begin(), av.values().end(), out.values().begin());
  std::copy(bv.values().begin(), bv.values().end(), out.values().begin() + static_cast<std::ptrdiff_t>(av.size()));
  return tape.record(std::move(out), {a, b}, [a, b, self = tape.size()](Tape& t) {
    const Tensor& g = t.grad_buffer(self);
    const std::size_t na = t.value(a).size();
    if (t.wants_grad(a.id)) {
      Tensor& ga = t.grad_buffer(a.id);
      for (std::size_t i = 0; i < na; ++i) ga[i] += g[i];
    }
    if (t.wants_grad(b.id)) {
      Tensor& gb = t.grad_buffer(b.id);
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g[na + i];
    }
  });
}

/// Columns [begin, end) of a matrix.
inline Var slice_cols(Var a, std::size_t begin, std::size_t end) {
  Tape& tape = *a.tape;
  const Tensor& av = a.value();
  if (begin > end || end > av.cols()) {
    throw ShapeError("slice_cols: range [" + std::to_string(begin) + "," + std::to_string(end) + ") outside " +
                     shape_string(av.shape()));
  }
  Tensor out = Tensor::zeros(av.rows(), end - begin);
  for (std::size_t r = 0; r < av.rows(); ++r)
    for (std::size_t c = begin; c < end; ++c) out(r, c - begin) = av(r, c);
  return tape.record(std::move(out), {a}, [a, begin, self = tape.size()](Tape& t) {
    const Tensor& g = t.grad_buffer(self);
    Tensor& ga = t.grad_buffer(a.id);
    for (std::size_t r = 0; r < g.rows(); ++r)
      for (std::size_t c = 0; c < g.cols(); ++c) ga(r, c + begin) += g(r, c);
  });
}

/// Concatenates equally tall matrices side by side.
inline Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  Tape& tape = *parts[0].tape;
  const std::size_t rows = parts[0].rows();
  std::size_t cols = 0;
  for (const Var& p : parts) {
    if (p.rows() != rows) throw ShapeError("concat_cols: row counts differ");
    cols += p.cols();
  }
  Tensor out = Tensor::zeros(rows, cols);
  std::size_t offset = 0;
  for (const Var& p : parts) {
    const Tensor& pv = p.value();
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < pv.cols(); ++c) out(r, offset + c) = pv(r, c);
    offset += pv.cols();
  }
  std::vector<Var> inputs(parts.begin(), parts.end());
  return tape.record(std::move(out), std::span<const Var>(inputs), [inputs, self = tape.size()](Tape& t) {
    const Tensor& g = t.grad_buffer(self);
    std::size_t off = 0;
    for (const Var& p : inputs) {
      const std::size_t w = t.value(p).cols();
      if (t.wants_grad(p.id)) {
        Tensor& gp = t.grad_buffer(p.id);
        for (std::size_t r = 0; r < g.rows(); ++r)
          for (std::size_t c = 0; c < w; ++c) gp(r, c) += g(r, off + c);
      }
      off += w;
    }
  });
}

/// Gathers rows of a table by index.
inline Var gather_rows(Var table, std::span<const std::size_t> ids) {
  Tape& tape = *table.tape;
  const Tensor& tv = table.value();
  Tensor out = Tensor::zeros(ids.size(), tv.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= tv.rows()) {
      throw ValidationError("gather_rows: index " + std::to_string(ids[i]) + " outside table of " +
                            std::to_string(tv.rows()) + " rows");
    }
    for (std::size_t c = 0; c < tv.cols(); ++c) out(i, c) = tv(ids[i], c);
  }
  std::vector<std::size_t> idx(ids.begin(), ids.end());
  return tape.record(std::move(out), {table}, [table, idx = std::move(idx), self = tape.size()](Tape& t) {
    const Tensor& g = t.grad_buffer(self);
    Tensor& gt = t.grad_buffer(table.id);
    for (std::size_t i = 0; i < idx.size(); ++i)
      for (std::size_t c = 0; c < g.cols(); ++c) gt(idx[i], c) += g(i, c);
  });
}

/// Mean over all elements of (a - b)^2.
inline Var mse(Var a, Var b) {
  Tape& tape = *a.tape;
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  detail::require_same_shape(av, bv, "mse");
  const double n = static_cast<double>(av.size());
  double s = 0.0;
  for (std::size_t i = 0; i < av.size(); ++i) s += (av[i] - bv[i]) * (av[i] - bv[i]);
  const double value = av.size() ? s / n : 0.0;
  return tape.record(Tensor::scalar(value), {a, b}, [a, b, n, self = tape.size()](Tape& t) {
    const double g = t.grad_buffer(self)[0];
    const Tensor& av = t.value(a);
    const Tensor& bv = t.value(b);
    if (t.wants_grad(a.id)) {
      Tensor& ga = t.grad_buffer(a.id);
      for (std::size_t i = 0; i < av.size(); ++i) ga[i] += g * 2.0 * (av[i] - bv[i]) / n;
    }
    if (t.wants_grad(b.id)) {
      Tensor& gb = t.grad_buffer(b.id);
      for (std::size_t i = 0; i < av.size(); ++i) gb[i] -= g * 2.0 * (av[i] - bv[i]) / n;
    }
  });
}

/// Mean over the selected rows of -softmax(teacher_row) . log_softmax(student_row / t).
/// The teacher logits are a constant. An empty row selection means all rows.
inline Var soft_cross_entropy_rows(const Tensor& teacher_logits, Var student_logits, double temperature,
                                   std::span<const std::size_t> rows = {}) {
  Tape& tape = *student_logits.tape;
  const Tensor& sv = student_logits.value();
  detail::require_same_shape(teacher_logits, sv, "soft_cross_entropy");
  if (sv.cols() < 2) throw ShapeError("soft_cross_entropy: need at least two classes");
  if (!(temperature > 0.0)) throw ValidationError("soft_cross_entropy: temperature must be positive");
  std::vector<std::size_t> selected(rows.begin(), rows.end());
  if (selected.empty()) {
    selected.resize(sv.rows());
    std::iota(selected.begin(), selected.end(), std::size_t{0});
  }
  for (std::size_t r : selected) {
    if (r >= sv.rows()) throw ValidationError("soft_cross_entropy: row index outside logits");
  }
  const std::size_t k = sv.cols();
  Tensor target = Tensor::zeros(selected.size(), k);
  Tensor student_prob = Tensor::zeros(selected.size(), k);
  double total = 0.0;
  for (std::size_t i = 0; i < selected.size(); ++i) {
    const std::size_t r = selected[i];
    double tmax = -std::numeric_limits<double>::infinity(), smax = tmax;
    for (std::size_t c = 0; c < k; ++c) {
      tmax = std::max(tmax, teacher_logits(r, c));
      smax = std::max(smax, sv(r, c) / temperature);
    }
    double tz = 0.0, sz = 0.0;
    for (std::size_t c = 0; c < k; ++c) {
      tz += std::exp(teacher_logits(r, c) - tmax);
      sz += std::exp(sv(r, c) / temperature - smax);
    }
    const double log_sz = std::log(sz);
    for (std::size_t c = 0; c < k; ++c) {
      const double p = std::exp(teacher_logits(r, c) - tmax) / tz;
      const double log_q = sv(r, c) / temperature - smax - log_sz;
      target(i, c) = p;
      student_prob(i, c) = std::exp(log_q);
      total -= p * log_q;
    }
  }
  const double count = static_cast<double>(selected.size());
  const double value = selected.empty() ? 0.0 : total / count;
  return tape.record(
      Tensor::scalar(value), {student_logits},
      [student_logits, temperature, count, selected = std::move(selected), target = std::move(target),
       student_prob = std::move(student_prob), self = tape.size()](Tape& t) {
        const double g = t.grad_buffer(self)[0];
        Tensor& gs = t.grad_buffer(student_logits.id);
        for (std::size_t i = 0; i < selected.size(); ++i)
          for (std::size_t c = 0; c < gs.cols(); ++c)
            gs(selected[i], c) += g * (student_prob(i, c) - target(i, c)) / (temperature * count);
      });
}

/// Mean over rows[i] of -log softmax(logits[rows[i]])[labels[i]].
inline Var cross_entropy_rows(Var logits, std::span<const std::size_t> rows, std::span<const std::size_t> labels) {
  Tape& tape = *logits.tape;
  const Tensor& lv = logits.value();
  if (rows.size() != labels.size() || rows.empty()) throw ShapeError("cross_entropy: need one label per selected row");
  const std::size_t k = lv.cols();
  Tensor prob = Tensor::zeros(rows.size(), k);
  double total = 0.0;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= lv.rows() || labels[i] >= k) throw ValidationError("cross_entropy: row or label out of range");
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < k; ++c) mx = std::max(mx, lv(rows[i], c));
    double z = 0.0;
    for (std::size_t c = 0; c < k; ++c) z += std::exp(lv(rows[i], c) - mx);
    for (std::size_t c = 0; c < k; ++c) prob(i, c) = std::exp(lv(rows[i], c) - mx) / z;
    total -= lv(rows[i], labels[i]) - mx - std::log(z);
  }
  const double count = static_cast<double>(rows.size());
  return tape.record(Tensor::scalar(total / count), {logits},
                     [logits, count, prob = std::move(prob), rows = std::vector<std::size_t>(rows.begin(), rows.end()),
                      labels = std::vector<std::size_t>(labels.begin(), labels.end()), self = tape.size()](Tape& t) {
                       const double g = t.grad_buffer(self)[0] / count;
                       Tensor& gl = t.grad_buffer(logits.id);
                       for (std::size_t i = 0; i < rows.size(); ++i) {
                         for (std::size_t c = 0; c < gl.cols(); ++c) gl(rows[i], c) += g * prob(i, c);
                         gl(rows[i], labels[i]) -= g;
                       }
                     });
}

}  // namespace ad
}  // namespace refdistill
