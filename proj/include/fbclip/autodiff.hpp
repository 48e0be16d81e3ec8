#pragma once

// Reverse-mode automatic differentiation over dense matrices.
//
// The trainable half of the pipeline (token selector, FB gates, the two MHSA
// streams, LayerNorm, the visual projection and the prompt contexts) runs on
// this tape so that analytic gradients exist for the finite-difference checks
// and for the Adam loop. Graphs are define-by-run: every op allocates a node
// holding its value, its parents and a backward closure. Dropping the root
// frees the graph; leaves (parameters) survive because the caller holds them.

#include "fbclip/linalg.hpp"

#include <cmath>
#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

namespace fbclip::ad {

struct Node {
  Mat val;
  Mat grad;  // lazily sized on first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backprop;  // reads this node's grad, accumulates into parents

  void accumulate(const Mat& g) {
    if (grad.size() == 0) grad = Mat::Zero(val.rows(), val.cols());
    grad += g;
  }
};

// Value-semantics handle to a graph node.
class Var {
 public:
  Var() = default;
  explicit Var(Mat value, bool requires_grad = false) : node_(std::make_shared<Node>()) {
    node_->val = std::move(value);
    node_->requires_grad = requires_grad;
  }

  bool valid() const { return node_ != nullptr; }
  const Mat& value() const { return node_->val; }
  Mat& mutable_value() { return node_->val; }
  const Mat& grad() const { return node_->grad; }
  bool requires_grad() const { return node_->requires_grad; }
  void zero_grad() { node_->grad.setZero(node_->val.rows(), node_->val.cols()); }
  Eigen::Index rows() const { return node_->val.rows(); }
  Eigen::Index cols() const { return node_->val.cols(); }
  double scalar() const { return node_->val(0, 0); }
  std::shared_ptr<Node> node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

inline Var constant(Mat value) { return Var(std::move(value), false); }
inline Var scalar_const(double v) { return Var(Mat::Constant(1, 1, v), false); }

namespace detail {

inline Var make(Mat value, std::vector<Var> parents, std::function<void(Node&)> backprop) {
  bool needs = false;
  for (const auto& p : parents) needs = needs || p.requires_grad();
  Var out(std::move(value), needs);
  if (needs) {
    auto n = out.node();
    n->parents.reserve(parents.size());
    for (auto& p : parents) n->parents.push_back(p.node());
    n->backprop = std::move(backprop);
  }
  return out;
}

}  // namespace detail

// ---- elementwise / scalar ----

inline Var add(const Var& a, const Var& b) {
  require(a.rows() == b.rows() && a.cols() == b.cols(), "add: shape mismatch");
  auto an = a.node(), bn = b.node();
  return detail::make(a.value() + b.value(), {a, b}, [an, bn](Node& n) {
    if (an->requires_grad) an->accumulate(n.grad);
    if (bn->requires_grad) bn->accumulate(n.grad);
  });
}

inline Var sub(const Var& a, const Var& b) {
  require(a.rows() == b.rows() && a.cols() == b.cols(), "sub: shape mismatch");
  auto an = a.node(), bn = b.node();
  return detail::make(a.value() - b.value(), {a, b}, [an, bn](Node& n) {
    if (an->requires_grad) an->accumulate(n.grad);
    if (bn->requires_grad) bn->accumulate(-n.grad);
  });
}

inline Var mul(const Var& a, const Var& b) {
  require(a.rows() == b.rows() && a.cols() == b.cols(), "mul: shape mismatch");
  auto an = a.node(), bn = b.node();
  return detail::make(a.value().cwiseProduct(b.value()), {a, b}, [an, bn](Node& n) {
    if (an->requires_grad) an->accumulate(n.grad.cwiseProduct(bn->val));
    if (bn->requires_grad) bn->accumulate(n.grad.cwiseProduct(an->val));
  });
}

inline Var div(const Var& a, const Var& b) {
  require(a.rows() == b.rows() && a.cols() == b.cols(), "div: shape mismatch");
  auto an = a.node(), bn = b.node();
  return detail::make(a.value().cwiseQuotient(b.value()), {a, b}, [an, bn](Node& n) {
    if (an->requires_grad) an->accumulate(n.grad.cwiseQuotient(bn->val));
    if (bn->requires_grad)
      bn->accumulate(-n.grad.cwiseProduct(an->val).cwiseQuotient(bn->val.cwiseProduct(bn->val)));
  });
}

inline Var neg(const Var& a) {
  auto an = a.node();
  return detail::make(-a.value(), {a}, [an](Node& n) { an->accumulate(-n.grad); });
}

inline Var add_scalar(const Var& a, double s) {
  auto an = a.node();
  return detail::make((a.value().array() + s).matrix(), {a}, [an](Node& n) { an->accumulate(n.grad); });
}

inline Var mul_scalar(const Var& a, double s) {
  auto an = a.node();
  return detail::make(a.value() * s, {a}, [an, s](Node& n) { an->accumulate(s * n.grad); });
}

// out = X * s with s a 1x1 variable.
inline Var scale_by_scalar(const Var& x, const Var& s) {
  require(s.rows() == 1 && s.cols() == 1, "scale_by_scalar: scalar expected");
  auto xn = x.node(), sn = s.node();
  return detail::make(x.value() * s.scalar(), {x, s}, [xn, sn](Node& n) {
    if (xn->requires_grad) xn->accumulate(n.grad * sn->val(0, 0));
    if (sn->requires_grad)
      sn->accumulate(Mat::Constant(1, 1, (n.grad.cwiseProduct(xn->val)).sum()));
  });
}

// out = X + s with s a 1x1 variable broadcast over all entries.
inline Var add_scalar_var(const Var& x, const Var& s) {
  require(s.rows() == 1 && s.cols() == 1, "add_scalar_var: scalar expected");
  auto xn = x.node(), sn = s.node();
  return detail::make((x.value().array() + s.scalar()).matrix(), {x, s}, [xn, sn](Node& n) {
    if (xn->requires_grad) xn->accumulate(n.grad);
    if (sn->requires_grad) sn->accumulate(Mat::Constant(1, 1, n.grad.sum()));
  });
}

// ---- nonlinearities ----

inline Var sigmoid(const Var& a) {
  Mat y = (1.0 / (1.0 + (-a.value().array()).exp())).matrix();
  auto an = a.node();
  return detail::make(std::move(y), {a}, [an](Node& n) {
    an->accumulate(n.grad.cwiseProduct((n.val.array() * (1.0 - n.val.array())).matrix()));
  });
}

inline Var tanh_(const Var& a) {
  Mat y = a.value().array().tanh().matrix();
  auto an = a.node();
  return detail::make(std::move(y), {a}, [an](Node& n) {
    an->accumulate(n.grad.cwiseProduct((1.0 - n.val.array().square()).matrix()));
  });
}

inline Var relu(const Var& a) {
  Mat y = a.value().cwiseMax(0.0);
  auto an = a.node();
  return detail::make(std::move(y), {a}, [an](Node& n) {
    an->accumulate(n.grad.cwiseProduct((an->val.array() > 0.0).cast<double>().matrix()));
  });
}

inline Var exp_(const Var& a) {
  Mat y = a.value().array().exp().matrix();
  auto an = a.node();
  return detail::make(std::move(y), {a},
                      [an](Node& n) { an->accumulate(n.grad.cwiseProduct(n.val)); });
}

inline Var log_(const Var& a) {
  Mat y = a.value().array().log().matrix();
  auto an = a.node();
  return detail::make(std::move(y), {a},
                      [an](Node& n) { an->accumulate(n.grad.cwiseQuotient(an->val)); });
}

inline Var sqrt_(const Var& a) {
  Mat y = a.value().array().sqrt().matrix();
  auto an = a.node();
  return detail::make(std::move(y), {a},
                      [an](Node& n) { an->accumulate((n.grad.array() / (2.0 * n.val.array())).matrix()); });
}

// Subgradient 0 inside the clamped region.
inline Var clamp_min(const Var& a, double lo) {
  Mat y = a.value().cwiseMax(lo);
  auto an = a.node();
  return detail::make(std::move(y), {a}, [an, lo](Node& n) {
    an->accumulate(n.grad.cwiseProduct((an->val.array() > lo).cast<double>().matrix()));
  });
}

// Subgradient 0 at the kink.
inline Var abs_(const Var& a) {
  Mat y = a.value().cwiseAbs();
  auto an = a.node();
  return detail::make(std::move(y), {a}, [an](Node& n) {
    an->accumulate(n.grad.cwiseProduct(an->val.unaryExpr(
        [](double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); })));
  });
}

// ---- linear algebra ----

inline Var matmul(const Var& a, const Var& b) {
  require(a.cols() == b.rows(), "matmul: inner dimension mismatch");
  auto an = a.node(), bn = b.node();
  return detail::make(a.value() * b.value(), {a, b}, [an, bn](Node& n) {
    if (an->requires_grad) an->accumulate(n.grad * bn->val.transpose());
    if (bn->requires_grad) bn->accumulate(an->val.transpose() * n.grad);
  });
}

inline Var transpose(const Var& a) {
  auto an = a.node();
  return detail::make(a.value().transpose(), {a},
                      [an](Node& n) { an->accumulate(n.grad.transpose()); });
}

// out[i,j] = X[i,j] * v[i], v an (m x 1) column.
inline Var scale_rows(const Var& x, const Var& v) {
  require(v.cols() == 1 && v.rows() == x.rows(), "scale_rows: column vector expected");
  Mat y = (x.value().array().colwise() * v.value().col(0).array()).matrix();
  auto xn = x.node(), vn = v.node();
  return detail::make(std::move(y), {x, v}, [xn, vn](Node& n) {
    if (xn->requires_grad)
      xn->accumulate((n.grad.array().colwise() * vn->val.col(0).array()).matrix());
    if (vn->requires_grad)
      vn->accumulate(n.grad.cwiseProduct(xn->val).rowwise().sum());
  });
}

// out[i,j] = X[i,j] + b[j], b a (1 x n) row (bias broadcast).
inline Var add_row_broadcast(const Var& x, const Var& b) {
  require(b.rows() == 1 && b.cols() == x.cols(), "add_row_broadcast: row vector expected");
  Mat y = x.value();
  y.rowwise() += b.value().row(0);
  auto xn = x.node(), bn = b.node();
  return detail::make(std::move(y), {x, b}, [xn, bn](Node& n) {
    if (xn->requires_grad) xn->accumulate(n.grad);
    if (bn->requires_grad) bn->accumulate(n.grad.colwise().sum());
  });
}

// Row-by-row inner products: out (m x 1), out[i] = <A[i,:], B[i,:]>.
inline Var rows_dot(const Var& a, const Var& b) {
  require(a.rows() == b.rows() && a.cols() == b.cols(), "rows_dot: shape mismatch");
  Mat y = a.value().cwiseProduct(b.value()).rowwise().sum();
  auto an = a.node(), bn = b.node();
  return detail::make(std::move(y), {a, b}, [an, bn](Node& n) {
    if (an->requires_grad)
      an->accumulate((bn->val.array().colwise() * n.grad.col(0).array()).matrix());
    if (bn->requires_grad)
      bn->accumulate((an->val.array().colwise() * n.grad.col(0).array()).matrix());
  });
}

// ---- reductions ----

inline Var sum_all(const Var& a) {
  auto an = a.node();
  return detail::make(Mat::Constant(1, 1, a.value().sum()), {a}, [an](Node& n) {
    an->accumulate(Mat::Constant(an->val.rows(), an->val.cols(), n.grad(0, 0)));
  });
}

inline Var mean_all(const Var& a) {
  const double inv = 1.0 / static_cast<double>(a.value().size());
  auto an = a.node();
  return detail::make(Mat::Constant(1, 1, a.value().mean()), {a}, [an, inv](Node& n) {
    an->accumulate(Mat::Constant(an->val.rows(), an->val.cols(), n.grad(0, 0) * inv));
  });
}

inline Var rowwise_sum(const Var& a) {
  auto an = a.node();
  return detail::make(a.value().rowwise().sum(), {a}, [an](Node& n) {
    an->accumulate(n.grad.col(0).replicate(1, an->val.cols()));
  });
}

inline Var colwise_mean(const Var& a) {
  const double inv = 1.0 / static_cast<double>(a.rows());
  auto an = a.node();
  return detail::make(a.value().colwise().mean(), {a}, [an, inv](Node& n) {
    an->accumulate(inv * n.grad.row(0).replicate(an->val.rows(), 1));
  });
}

// Columnwise max over rows; gradient routes to the first argmax per column.
inline Var colwise_max(const Var& a) {
  Mat y(1, a.cols());
  std::vector<Eigen::Index> arg(static_cast<std::size_t>(a.cols()));
  for (Eigen::Index j = 0; j < a.cols(); ++j) {
    Eigen::Index r;
    y(0, j) = a.value().col(j).maxCoeff(&r);
    arg[static_cast<std::size_t>(j)] = r;
  }
  auto an = a.node();
  return detail::make(std::move(y), {a}, [an, arg](Node& n) {
    Mat g = Mat::Zero(an->val.rows(), an->val.cols());
    for (Eigen::Index j = 0; j < an->val.cols(); ++j)
      g(arg[static_cast<std::size_t>(j)], j) = n.grad(0, j);
    an->accumulate(g);
  });
}

// ---- structure ----

inline Var slice_rows(const Var& a, Eigen::Index r0, Eigen::Index count) {
  require(r0 >= 0 && r0 + count <= a.rows(), "slice_rows: out of range");
  auto an = a.node();
  return detail::make(a.value().middleRows(r0, count), {a}, [an, r0, count](Node& n) {
    Mat g = Mat::Zero(an->val.rows(), an->val.cols());
    g.middleRows(r0, count) = n.grad;
    an->accumulate(g);
  });
}

inline Var slice_cols(const Var& a, Eigen::Index c0, Eigen::Index count) {
  require(c0 >= 0 && c0 + count <= a.cols(), "slice_cols: out of range");
  auto an = a.node();
  return detail::make(a.value().middleCols(c0, count), {a}, [an, c0, count](Node& n) {
    Mat g = Mat::Zero(an->val.rows(), an->val.cols());
    g.middleCols(c0, count) = n.grad;
    an->accumulate(g);
  });
}

inline Var concat_rows(const std::vector<Var>& parts) {
  require(!parts.empty(), "concat_rows: empty input");
  Eigen::Index rows = 0;
  const Eigen::Index cols = parts.front().cols();
  for (const auto& p : parts) {
    require(p.cols() == cols, "concat_rows: column mismatch");
    rows += p.rows();
  }
  Mat y(rows, cols);
  Eigen::Index at = 0;
  for (const auto& p : parts) {
    y.middleRows(at, p.rows()) = p.value();
    at += p.rows();
  }
  std::vector<std::shared_ptr<Node>> nodes;
  nodes.reserve(parts.size());
  for (const auto& p : parts) nodes.push_back(p.node());
  return detail::make(std::move(y), parts, [nodes](Node& n) {
    Eigen::Index at = 0;
    for (const auto& pn : nodes) {
      if (pn->requires_grad) pn->accumulate(n.grad.middleRows(at, pn->val.rows()));
      at += pn->val.rows();
    }
  });
}

inline Var concat_cols(const std::vector<Var>& parts) {
  require(!parts.empty(), "concat_cols: empty input");
  Eigen::Index cols = 0;
  const Eigen::Index rows = parts.front().rows();
  for (const auto& p : parts) {
    require(p.rows() == rows, "concat_cols: row mismatch");
    cols += p.cols();
  }
  Mat y(rows, cols);
  Eigen::Index at = 0;
  for (const auto& p : parts) {
    y.middleCols(at, p.cols()) = p.value();
    at += p.cols();
  }
  std::vector<std::shared_ptr<Node>> nodes;
  nodes.reserve(parts.size());
  for (const auto& p : parts) nodes.push_back(p.node());
  return detail::make(std::move(y), parts, [nodes](Node& n) {
    Eigen::Index at = 0;
    for (const auto& pn : nodes) {
      if (pn->requires_grad) pn->accumulate(n.grad.middleCols(at, pn->val.cols()));
      at += pn->val.cols();
    }
  });
}

// ---- normalizing ops ----

inline Var softmax_rows(const Var& a) {
  Mat y(a.rows(), a.cols());
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    const double m = a.value().row(i).maxCoeff();
    Eigen::ArrayXd e = (a.value().row(i).array() - m).exp();
    y.row(i) = (e / e.sum()).matrix();
  }
  auto an = a.node();
  return detail::make(std::move(y), {a}, [an](Node& n) {
    Mat g(n.val.rows(), n.val.cols());
    for (Eigen::Index i = 0; i < n.val.rows(); ++i) {
      const double dot = n.grad.row(i).dot(n.val.row(i));
      g.row(i) = (n.val.row(i).array() * (n.grad.row(i).array() - dot)).matrix();
    }
    an->accumulate(g);
  });
}

// Row-wise layer normalization with learnable gain/shift (1 x C each).
inline Var layer_norm_rows(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5) {
  require(gamma.rows() == 1 && gamma.cols() == x.cols(), "layer_norm: gamma shape");
  require(beta.rows() == 1 && beta.cols() == x.cols(), "layer_norm: beta shape");
  const Eigen::Index C = x.cols();
  Mat xhat(x.rows(), C);
  Vec inv_std(x.rows());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const double mu = x.value().row(i).mean();
    const double var = (x.value().row(i).array() - mu).square().mean();
    inv_std(i) = 1.0 / std::sqrt(var + eps);
    xhat.row(i) = ((x.value().row(i).array() - mu) * inv_std(i)).matrix();
  }
  Mat y = (xhat.array().rowwise() * gamma.value().row(0).array()).matrix();
  y.rowwise() += beta.value().row(0);
  auto xn = x.node(), gn = gamma.node(), bn = beta.node();
  return detail::make(std::move(y), {x, gamma, beta}, [xn, gn, bn, xhat, inv_std, C](Node& n) {
    if (gn->requires_grad) gn->accumulate(n.grad.cwiseProduct(xhat).colwise().sum());
    if (bn->requires_grad) bn->accumulate(n.grad.colwise().sum());
    if (xn->requires_grad) {
      Mat gx(n.val.rows(), C);
      for (Eigen::Index i = 0; i < n.val.rows(); ++i) {
        RowVec gh = n.grad.row(i).cwiseProduct(gn->val.row(0));
        const double m1 = gh.mean();
        const double m2 = gh.cwiseProduct(xhat.row(i)).mean();
        gx.row(i) =
            inv_std(i) * (gh.array() - m1 - xhat.row(i).array() * m2).matrix();
      }
      xn->accumulate(gx);
    }
  });
}

// ---- composites ----

inline Var ones_like(const Var& a) { return constant(Mat::Ones(a.rows(), a.cols())); }

// Per-row L2 norms as an (m x 1) column: sqrt(sum x^2 + eps^2-free).
inline Var rowwise_norm(const Var& x) { return sqrt_(rowwise_sum(mul(x, x))); }

// Rows scaled to unit L2 norm with an eps guard in the denominator.
inline Var l2_normalize_rows(const Var& x, double eps = kEps) {
  Var inv = div(constant(Mat::Ones(x.rows(), 1)), add_scalar(rowwise_norm(x), eps));
  return scale_rows(x, inv);
}

// cos(X[i,:], p) per row against a (1 x C) vector; zero norms guarded by eps,
// so a zero-norm side yields similarity 0.
inline Var cosine_rows_vs_vec(const Var& x, const Var& p, double eps = kEps) {
  Var num = matmul(x, transpose(p));  // m x 1
  Var p_norm = add_scalar(sqrt_(sum_all(mul(p, p))), eps);
  Var den = scale_by_scalar(add_scalar(rowwise_norm(x), eps), p_norm);
  return div(num, den);
}

// ---- backward pass ----

inline void backward(const Var& root) {
  require(root.rows() == 1 && root.cols() == 1, "backward: scalar root expected");
  if (!root.requires_grad()) return;
  // Iterative post-order DFS, then reverse sweep.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(root.node().get(), 0);
  seen.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    if (idx < node->parents.size()) {
      Node* parent = node->parents[idx++].get();
      if (parent->requires_grad && seen.insert(parent).second)
        stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  root.node()->accumulate(Mat::Ones(1, 1));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backprop && n->grad.size() != 0) n->backprop(*n);
  }
}

}  // namespace fbclip::ad
