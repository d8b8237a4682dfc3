#pragma once

// Reverse-mode tape over row-major Eigen matrices. Nodes are appended in
// evaluation order, so a reverse sweep over the node list is a valid
// topological order for backpropagation.

#include <Eigen/Dense>

#include <cmath>
#include <functional>
#include <numbers>
#include <span>
#include <utility>
#include <vector>

#include "brain3d/errors.hpp"

namespace brain3d {

template <typename T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename T>
using RowVector = Eigen::Matrix<T, 1, Eigen::Dynamic, Eigen::RowMajor>;

inline constexpr int kIgnoreIndex = -100;

namespace ag {

struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

template <typename T>
T gelu(T x) {
  return T(0.5) * x * (T(1) + std::erf(x / std::numbers::sqrt2_v<T>));
}

template <typename T>
T gelu_grad(T x) {
  const T cdf = T(0.5) * (T(1) + std::erf(x / std::numbers::sqrt2_v<T>));
  const T pdf = std::exp(T(-0.5) * x * x) / std::sqrt(T(2) * std::numbers::pi_v<T>);
  return cdf + x * pdf;
}

/// Row-wise softmax with an optional causal mask (entries j > i excluded).
template <typename T>
Matrix<T> softmax_rows(const Matrix<T>& logits, bool causal = false) {
  Matrix<T> out(logits.rows(), logits.cols());
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const Eigen::Index limit = causal ? std::min<Eigen::Index>(i + 1, logits.cols()) : logits.cols();
    const T m = logits.row(i).head(limit).maxCoeff();
    T sum = 0;
    for (Eigen::Index j = 0; j < limit; ++j) {
      out(i, j) = std::exp(logits(i, j) - m);
      sum += out(i, j);
    }
    for (Eigen::Index j = 0; j < limit; ++j) out(i, j) /= sum;
    for (Eigen::Index j = limit; j < logits.cols(); ++j) out(i, j) = 0;
  }
  return out;
}

template <typename T>
class Tape {
 public:
  using Mat = Matrix<T>;

  Tape() { nodes_.reserve(256); }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  // Backward closures capture `this`.
  Tape(Tape&&) = delete;
  Tape& operator=(Tape&&) = delete;

  Var constant(Mat v) { return push(std::move(v), false); }
  Var leaf(Mat v, bool requires_grad = true) { return push(std::move(v), requires_grad); }
  Var scalar(T v, bool requires_grad = false) {
    Mat m(1, 1);
    m(0, 0) = v;
    return push(std::move(m), requires_grad);
  }

  const Mat& value(Var v) const { return nodes_[v.id].value; }
  bool requires_grad(Var v) const { return nodes_[v.id].needs_grad; }
  std::size_t size() const { return nodes_.size(); }

  /// Gradient accumulated at v (zeros if nothing flowed there).
  Mat grad(Var v) const {
    const Node& n = nodes_[v.id];
    if (n.grad.size() == 0) return Mat::Zero(n.value.rows(), n.value.cols());
    return n.grad;
  }

  /// Adds `g` to the output gradient of v; call backward() afterwards.
  void seed(Var v, const Mat& g) {
    if (g.rows() != value(v).rows() || g.cols() != value(v).cols()) throw ShapeError("tape: seed shape mismatch");
    grad_ref(v.id) += g;
  }

  void backward(Var out) {
    if (value(out).size() != 1) throw ShapeError("tape: backward() needs a scalar output");
    seed(out, Mat::Ones(1, 1));
    backward();
  }

  void backward() {
    for (int i = static_cast<int>(nodes_.size()) - 1; i >= 0; --i) {
      Node& n = nodes_[i];
      if (n.backward && n.grad.size() != 0) n.backward();
    }
  }

  // ---- ops -------------------------------------------------------------

  Var add(Var a, Var b) {
    check_same(a, b, "add");
    Var out = push(value(a) + value(b), needs(a) || needs(b));
    on_backward(out, [this, a, b, out] {
      if (needs(a)) grad_ref(a.id) += g(out);
      if (needs(b)) grad_ref(b.id) += g(out);
    });
    return out;
  }

  Var sub(Var a, Var b) {
    check_same(a, b, "sub");
    Var out = push(value(a) - value(b), needs(a) || needs(b));
    on_backward(out, [this, a, b, out] {
      if (needs(a)) grad_ref(a.id) += g(out);
      if (needs(b)) grad_ref(b.id) -= g(out);
    });
    return out;
  }

  /// a + row, with `row` (1 x cols) broadcast over the rows of a.
  Var add_row(Var a, Var row) {
    if (value(row).rows() != 1 || value(row).cols() != value(a).cols()) throw ShapeError("add_row: shape mismatch");
    Mat v = value(a);
    v.rowwise() += value(row).row(0);
    Var out = push(std::move(v), needs(a) || needs(row));
    on_backward(out, [this, a, row, out] {
      if (needs(a)) grad_ref(a.id) += g(out);
      if (needs(row)) grad_ref(row.id) += g(out).colwise().sum();
    });
    return out;
  }

  Var scale(Var a, T s) {
    Var out = push(value(a) * s, needs(a));
    on_backward(out, [this, a, s, out] { grad_ref(a.id) += s * g(out); });
    return out;
  }

  /// s * a where s is a 1x1 variable.
  Var scale_by(Var a, Var s) {
    if (value(s).size() != 1) throw ShapeError("scale_by: gate must be 1x1");
    Var out = push(value(a) * value(s)(0, 0), needs(a) || needs(s));
    on_backward(out, [this, a, s, out] {
      if (needs(a)) grad_ref(a.id) += value(s)(0, 0) * g(out);
      if (needs(s)) grad_ref(s.id)(0, 0) += (g(out).array() * value(a).array()).sum();
    });
    return out;
  }

  Var matmul(Var a, Var b) {
    if (value(a).cols() != value(b).rows()) throw ShapeError("matmul: inner dims differ");
    Mat v;
    v.noalias() = value(a) * value(b);
    Var out = push(std::move(v), needs(a) || needs(b));
    on_backward(out, [this, a, b, out] {
      if (needs(a)) grad_ref(a.id).noalias() += g(out) * value(b).transpose();
      if (needs(b)) grad_ref(b.id).noalias() += value(a).transpose() * g(out);
    });
    return out;
  }

  /// a * b^T
  Var matmul_nt(Var a, Var b) {
    if (value(a).cols() != value(b).cols()) throw ShapeError("matmul_nt: inner dims differ");
    Mat v;
    v.noalias() = value(a) * value(b).transpose();
    Var out = push(std::move(v), needs(a) || needs(b));
    on_backward(out, [this, a, b, out] {
      if (needs(a)) grad_ref(a.id).noalias() += g(out) * value(b);
      if (needs(b)) grad_ref(b.id).noalias() += g(out).transpose() * value(a);
    });
    return out;
  }

  /// x * W^T + bias; W is (out x in), bias (1 x out) optional.
  Var linear(Var x, Var w, Var bias = {}) {
    Var y = matmul_nt(x, w);
    return bias.valid() ? add_row(y, bias) : y;
  }

  Var gelu(Var a) {
    Var out = push(value(a).unaryExpr([](T x) { return ag::gelu(x); }), needs(a));
    on_backward(out, [this, a, out] {
      grad_ref(a.id).array() += g(out).array() * value(a).unaryExpr([](T x) { return gelu_grad(x); }).array();
    });
    return out;
  }

  Var layer_norm(Var x, Var gamma, Var beta, T eps = T(1e-5)) {
    const Mat& xv = value(x);
    const Eigen::Index n = xv.cols();
    Mat xhat(xv.rows(), n);
    std::vector<T> inv_std(xv.rows());
    for (Eigen::Index i = 0; i < xv.rows(); ++i) {
      const T mu = xv.row(i).mean();
      const T var = (xv.row(i).array() - mu).square().mean();
      inv_std[i] = T(1) / std::sqrt(var + eps);
      xhat.row(i) = (xv.row(i).array() - mu) * inv_std[i];
    }
    Mat v = xhat;
    v.array().rowwise() *= value(gamma).row(0).array();
    v.rowwise() += value(beta).row(0);
    Var out = push(std::move(v), needs(x) || needs(gamma) || needs(beta));
    on_backward(out, [this, x, gamma, beta, out, xhat = std::move(xhat), inv_std = std::move(inv_std)] {
      const Mat& go = g(out);
      if (needs(gamma)) grad_ref(gamma.id) += (go.array() * xhat.array()).colwise().sum().matrix();
      if (needs(beta)) grad_ref(beta.id) += go.colwise().sum();
      if (needs(x)) {
        Mat dxhat = go;
        dxhat.array().rowwise() *= value(gamma).row(0).array();
        Mat& gx = grad_ref(x.id);
        for (Eigen::Index i = 0; i < go.rows(); ++i) {
          const T m1 = dxhat.row(i).mean();
          const T m2 = (dxhat.row(i).array() * xhat.row(i).array()).mean();
          gx.row(i).array() += inv_std[i] * (dxhat.row(i).array() - m1 - xhat.row(i).array() * m2);
        }
      }
    });
    return out;
  }

  /// Multi-head scaled dot-product attention over (rows x d) q, k, v.
  /// `probs_out`, when given, receives the per-head attention matrices.
  Var attention(Var q, Var k, Var v, int heads, bool causal, std::vector<Mat>* probs_out = nullptr) {
    const Mat& qv = value(q);
    const Mat& kv = value(k);
    const Mat& vv = value(v);
    const Eigen::Index d = qv.cols();
    if (kv.cols() != d || vv.cols() != d || kv.rows() != vv.rows()) throw ShapeError("attention: shape mismatch");
    if (heads <= 0 || d % heads != 0) throw ShapeError("attention: width not divisible by heads");
    const Eigen::Index dh = d / heads;
    const T scale = T(1) / std::sqrt(static_cast<T>(dh));
    std::vector<Mat> probs(heads);
    Mat o(qv.rows(), d);
    for (int h = 0; h < heads; ++h) {
      Mat scores;
      scores.noalias() = qv.middleCols(h * dh, dh) * kv.middleCols(h * dh, dh).transpose();
      scores *= scale;
      probs[h] = softmax_rows<T>(scores, causal);
      o.middleCols(h * dh, dh).noalias() = probs[h] * vv.middleCols(h * dh, dh);
    }
    if (probs_out) *probs_out = probs;
    Var out = push(std::move(o), needs(q) || needs(k) || needs(v));
    on_backward(out, [this, q, k, v, out, heads, dh, scale, probs = std::move(probs)] {
      const Mat& go = g(out);
      for (int h = 0; h < heads; ++h) {
        const auto goh = go.middleCols(h * dh, dh);
        const Mat& p = probs[h];
        if (needs(v)) grad_ref(v.id).middleCols(h * dh, dh).noalias() += p.transpose() * goh;
        if (!needs(q) && !needs(k)) continue;
        Mat dp;
        dp.noalias() = goh * value(v).middleCols(h * dh, dh).transpose();
        Mat ds = p.cwiseProduct(dp);
        const Eigen::Matrix<T, Eigen::Dynamic, 1> rowdot = ds.rowwise().sum();
        ds.noalias() -= p.cwiseProduct(rowdot.replicate(1, p.cols()));
        ds *= scale;
        if (needs(q)) grad_ref(q.id).middleCols(h * dh, dh).noalias() += ds * value(k).middleCols(h * dh, dh);
        if (needs(k)) grad_ref(k.id).middleCols(h * dh, dh).noalias() += ds.transpose() * value(q).middleCols(h * dh, dh);
      }
    });
    return out;
  }

  Var concat_rows(std::span<const Var> parts) {
    if (parts.empty()) throw ShapeError("concat_rows: no inputs");
    const Eigen::Index cols = value(parts[0]).cols();
    Eigen::Index rows = 0;
    bool any = false;
    for (Var p : parts) {
      if (value(p).cols() != cols) throw ShapeError("concat_rows: width mismatch");
      rows += value(p).rows();
      any = any || needs(p);
    }
    Mat v(rows, cols);
    Eigen::Index r = 0;
    for (Var p : parts) {
      v.middleRows(r, value(p).rows()) = value(p);
      r += value(p).rows();
    }
    Var out = push(std::move(v), any);
    std::vector<Var> copy(parts.begin(), parts.end());
    on_backward(out, [this, out, copy = std::move(copy)] {
      Eigen::Index r0 = 0;
      for (Var p : copy) {
        const Eigen::Index n = value(p).rows();
        if (needs(p)) grad_ref(p.id) += g(out).middleRows(r0, n);
        r0 += n;
      }
    });
    return out;
  }

  Var concat_rows(std::initializer_list<Var> parts) {
    return concat_rows(std::span<const Var>(parts.begin(), parts.size()));
  }

  Var gather_rows(Var table, std::vector<int> idx) {
    const Mat& tv = value(table);
    Mat v(static_cast<Eigen::Index>(idx.size()), tv.cols());
    for (std::size_t i = 0; i < idx.size(); ++i) {
      if (idx[i] < 0 || idx[i] >= tv.rows()) throw IndexError("gather_rows: index out of range");
      v.row(static_cast<Eigen::Index>(i)) = tv.row(idx[i]);
    }
    Var out = push(std::move(v), needs(table));
    on_backward(out, [this, table, out, idx = std::move(idx)] {
      Mat& gt = grad_ref(table.id);
      const Mat& go = g(out);
      for (std::size_t i = 0; i < idx.size(); ++i) gt.row(idx[i]) += go.row(static_cast<Eigen::Index>(i));
    });
    return out;
  }

  Var mean_rows(Var a) {
    const T n = static_cast<T>(value(a).rows());
    Var out = push(value(a).colwise().mean(), needs(a));
    on_backward(out, [this, a, out, n] { grad_ref(a.id).rowwise() += g(out).row(0) / n; });
    return out;
  }

  Var sum_all(Var a) {
    Var out = scalar_node(value(a).sum(), needs(a));
    on_backward(out, [this, a, out] { grad_ref(a.id).array() += g(out)(0, 0); });
    return out;
  }

  /// Row-wise L2 normalisation. Zero rows are rejected.
  Var l2_normalize_rows(Var a) {
    const Mat& av = value(a);
    Eigen::Matrix<T, Eigen::Dynamic, 1> norms = av.rowwise().norm();
    for (Eigen::Index i = 0; i < norms.size(); ++i) {
      if (!(norms(i) > T(0))) throw DegenerateInputError("l2 normalisation of a zero vector");
    }
    Mat y = av.array().colwise() / norms.array();
    Var out = push(y, needs(a));
    on_backward(out, [this, a, out, y = std::move(y), norms = std::move(norms)] {
      const Mat& go = g(out);
      const Eigen::Matrix<T, Eigen::Dynamic, 1> dots = (go.array() * y.array()).rowwise().sum();
      Mat d = go - (y.array().colwise() * dots.array()).matrix();
      grad_ref(a.id).array() += d.array().colwise() / norms.array();
    });
    return out;
  }

  /// Mean cross-entropy over rows whose label is not kIgnoreIndex.
  Var masked_cross_entropy(Var logits, std::vector<int> labels) {
    const Mat& lv = value(logits);
    if (static_cast<Eigen::Index>(labels.size()) != lv.rows()) throw ShapeError("cross_entropy: label count != rows");
    std::size_t supervised = 0;
    for (int y : labels) {
      if (y == kIgnoreIndex) continue;
      if (y < 0 || y >= lv.cols()) throw IndexError("cross_entropy: label out of range");
      ++supervised;
    }
    if (supervised == 0) throw DomainError("cross_entropy: no supervised positions");
    Mat probs = Mat::Zero(lv.rows(), lv.cols());
    T loss = 0;
    for (Eigen::Index i = 0; i < lv.rows(); ++i) {
      if (labels[i] == kIgnoreIndex) continue;
      const T m = lv.row(i).maxCoeff();
      const T lse = m + std::log((lv.row(i).array() - m).exp().sum());
      loss += lse - lv(i, labels[i]);
      probs.row(i) = (lv.row(i).array() - lse).exp();
    }
    const T n = static_cast<T>(supervised);
    Var out = scalar_node(loss / n, needs(logits));
    on_backward(out, [this, logits, out, n, labels = std::move(labels), probs = std::move(probs)] {
      const T go = g(out)(0, 0);
      Mat& gl = grad_ref(logits.id);
      for (Eigen::Index i = 0; i < probs.rows(); ++i) {
        if (labels[i] == kIgnoreIndex) continue;
        Mat row = probs.row(i);
        row(0, labels[i]) -= T(1);
        gl.row(i) += (go / n) * row;
      }
    });
    return out;
  }

  /// Symmetric InfoNCE over matched rows of v and t (B x d each) with a
  /// 1x1 temperature variable: 0.5 * (CE(rows of S/tau) + CE(cols of S/tau)).
  Var infonce(Var v, Var t, Var tau) {
    const Mat& vv = value(v);
    const Mat& tv = value(t);
    const Eigen::Index b = vv.rows();
    if (b < 2) throw DomainError("infonce: batch size must be >= 2");
    if (tv.rows() != b || tv.cols() != vv.cols()) throw ShapeError("infonce: shape mismatch");
    const T temp = value(tau)(0, 0);
    if (!(temp > T(0))) throw DomainError("infonce: temperature must be positive");
    Mat s;
    s.noalias() = vv * tv.transpose();
    const Mat logits = s / temp;
    const Mat pr = softmax_rows<T>(logits);
    const Mat pc = softmax_rows<T>(Mat(logits.transpose())).transpose();
    T loss_rows = 0;
    T loss_cols = 0;
    for (Eigen::Index i = 0; i < b; ++i) {
      loss_rows -= std::log(pr(i, i));
      loss_cols -= std::log(pc(i, i));
    }
    const T bn = static_cast<T>(b);
    Var out = scalar_node(T(0.5) * (loss_rows + loss_cols) / bn, needs(v) || needs(t) || needs(tau));
    on_backward(out, [this, v, t, tau, out, s, pr, pc, temp, bn] {
      const T go = g(out)(0, 0);
      Mat dl = (pr + pc);
      dl.diagonal().array() -= T(2);
      dl *= go * T(0.5) / bn;
      const Mat ds = dl / temp;
      if (needs(v)) grad_ref(v.id).noalias() += ds * value(t);
      if (needs(t)) grad_ref(t.id).noalias() += ds.transpose() * value(v);
      if (needs(tau)) grad_ref(tau.id)(0, 0) += -(dl.array() * s.array()).sum() / (temp * temp);
    });
    return out;
  }

 private:
  struct Node {
    Mat value;
    Mat grad;
    bool needs_grad = false;
    std::function<void()> backward;
  };

  Var push(Mat v, bool needs_grad) {
    nodes_.push_back(Node{std::move(v), Mat(), needs_grad, nullptr});
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  Var scalar_node(T v, bool needs_grad) {
    Mat m(1, 1);
    m(0, 0) = v;
    return push(std::move(m), needs_grad);
  }

  template <typename F>
  void on_backward(Var out, F&& fn) {
    if (nodes_[out.id].needs_grad) nodes_[out.id].backward = std::forward<F>(fn);
  }

  bool needs(Var v) const { return nodes_[v.id].needs_grad; }
  const Mat& g(Var v) const { return nodes_[v.id].grad; }

  Mat& grad_ref(int id) {
    Node& n = nodes_[id];
    if (n.grad.size() == 0) n.grad = Mat::Zero(n.value.rows(), n.value.cols());
    return n.grad;
  }

  void check_same(Var a, Var b, const char* op) const {
    if (value(a).rows() != value(b).rows() || value(a).cols() != value(b).cols()) {
      throw ShapeError(std::string(op) + ": shape mismatch");
    }
  }

  std::vector<Node> nodes_;
};

}  // namespace ag
}  // namespace brain3d
