#pragma once

// Reverse-mode automatic differentiation over dense Eigen matrices.
//
// A Tape is a growing arena of Nodes created in forward order; backward()
// walks it in reverse, each node pushing its gradient into its parents.
// Model parameters live outside the tape (Param / ParamStore) and receive
// gradients through leaf nodes, so one optimizer step can follow many
// forward passes on the same tape (a mini-batch builds one tape).
//
// Every operation below carries its own backward closure; the op-level
// finite-difference tests in tests/unit/test_tape.cpp pin each formula.

#include <cmath>
#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "egopose/common.hpp"
#include "egopose/rng.hpp"

namespace egopose::ad {

template <class S>
struct Param {
  std::string name;
  Mat<S> value;
  Mat<S> grad;

  void zero_grad() { grad.setZero(value.rows(), value.cols()); }
};

/// Ordered, uniquely named parameter registry. Registration order is the
/// checkpoint and iteration order, so construction must be deterministic.
template <class S>
class ParamStore {
 public:
  Param<S>& add(const std::string& name, int rows, int cols) {
    if (index_.count(name))
      throw InvalidInput("duplicate parameter name: " + name);
    params_.push_back(Param<S>{name, Mat<S>::Zero(rows, cols),
                               Mat<S>::Zero(rows, cols)});
    index_[name] = params_.size() - 1;
    order_.push_back(&params_.back());
    return params_.back();
  }

  Param<S>& add_normal(const std::string& name, int rows, int cols, Rng& rng,
                       double stddev) {
    Param<S>& p = add(name, rows, cols);
    for (int c = 0; c < cols; ++c)
      for (int r = 0; r < rows; ++r)
        p.value(r, c) = static_cast<S>(rng.normal(0.0, stddev));
    return p;
  }

  Param<S>& add_constant(const std::string& name, int rows, int cols, S fill) {
    Param<S>& p = add(name, rows, cols);
    p.value.setConstant(fill);
    return p;
  }

  const std::vector<Param<S>*>& all() { return order_; }
  const std::vector<Param<S>*>& all() const { return order_; }

  Param<S>* find(const std::string& name) {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : order_[it->second];
  }

  size_t count() const { return order_.size(); }

  size_t total_scalars() const {
    size_t n = 0;
    for (const auto* p : order_) n += static_cast<size_t>(p->value.size());
    return n;
  }

  void zero_grads() {
    for (auto* p : order_) p->zero_grad();
  }

 private:
  std::deque<Param<S>> params_;
  std::vector<Param<S>*> order_;
  std::map<std::string, size_t> index_;
};

template <class S>
class Tape {
 public:
  struct Node {
    Mat<S> value;
    Mat<S> grad;  // empty until the backward sweep touches it
    std::function<void()> backprop;
    bool needs_grad = false;
  };
  using Var = Node*;

  Var make(Mat<S> value, bool needs_grad = false) {
    nodes_.push_back(Node{std::move(value), Mat<S>(), nullptr, needs_grad});
    return &nodes_.back();
  }

  Var constant(Mat<S> value) { return make(std::move(value), false); }

  /// Leaf carrying a parameter's current value; backward accumulates into
  /// the parameter's grad. Cached so a batch touches each param once.
  Var leaf(Param<S>& p) {
    auto it = leaves_.find(&p);
    if (it != leaves_.end()) return it->second;
    Var node = make(p.value, true);
    Param<S>* pp = &p;
    node->backprop = [node, pp]() {
      if (pp->grad.size() == 0)
        pp->grad = Mat<S>::Zero(pp->value.rows(), pp->value.cols());
      pp->grad += node->grad;
    };
    leaves_[&p] = node;
    return node;
  }

  /// Reverse sweep from a 1x1 root node.
  void backward(Var root) {
    if (root->value.rows() != 1 || root->value.cols() != 1)
      throw ShapeError("backward root must be 1x1");
    root->grad = Mat<S>::Ones(1, 1);
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      if (it->grad.size() != 0 && it->backprop) it->backprop();
    }
  }

  size_t size() const { return nodes_.size(); }

  /// Adds g into n's grad, allocating on first touch.
  static void accum(Var n, const Mat<S>& g) {
    if (!n->needs_grad) return;
    if (n->grad.size() == 0)
      n->grad = Mat<S>::Zero(n->value.rows(), n->value.cols());
    n->grad += g;
  }

 private:
  std::deque<Node> nodes_;
  std::map<Param<S>*, Var> leaves_;
};

template <class S>
using Var = typename Tape<S>::Node*;

// ---------------------------------------------------------------------------
// Elementwise and structural operations
// ---------------------------------------------------------------------------

namespace detail {

template <class S>
Var<S> unary(Tape<S>& t, Var<S> a, Mat<S> value,
             std::function<Mat<S>(const Mat<S>&)> pull) {
  Var<S> out = t.make(std::move(value), a->needs_grad);
  if (a->needs_grad)
    out->backprop = [out, a, pull = std::move(pull)]() {
      Tape<S>::accum(a, pull(out->grad));
    };
  return out;
}

}  // namespace detail

template <class S>
Var<S> add(Tape<S>& t, Var<S> a, Var<S> b) {
  if (a->value.rows() != b->value.rows() || a->value.cols() != b->value.cols())
    throw ShapeError("add: shape mismatch");
  Var<S> out = t.make(a->value + b->value, a->needs_grad || b->needs_grad);
  out->backprop = [out, a, b]() {
    Tape<S>::accum(a, out->grad);
    Tape<S>::accum(b, out->grad);
  };
  return out;
}

template <class S>
Var<S> sub(Tape<S>& t, Var<S> a, Var<S> b) {
  Var<S> out = t.make(a->value - b->value, a->needs_grad || b->needs_grad);
  out->backprop = [out, a, b]() {
    Tape<S>::accum(a, out->grad);
    Tape<S>::accum(b, Mat<S>(-out->grad));
  };
  return out;
}

template <class S>
Var<S> matmul(Tape<S>& t, Var<S> a, Var<S> b) {
  if (a->value.cols() != b->value.rows()) throw ShapeError("matmul: inner dims");
  Var<S> out = t.make(a->value * b->value, a->needs_grad || b->needs_grad);
  out->backprop = [out, a, b]() {
    if (a->needs_grad) Tape<S>::accum(a, out->grad * b->value.transpose());
    if (b->needs_grad) Tape<S>::accum(b, a->value.transpose() * out->grad);
  };
  return out;
}

template <class S>
Var<S> hadamard(Tape<S>& t, Var<S> a, Var<S> b) {
  Var<S> out = t.make(a->value.cwiseProduct(b->value),
                      a->needs_grad || b->needs_grad);
  out->backprop = [out, a, b]() {
    if (a->needs_grad) Tape<S>::accum(a, out->grad.cwiseProduct(b->value));
    if (b->needs_grad) Tape<S>::accum(b, out->grad.cwiseProduct(a->value));
  };
  return out;
}

template <class S>
Var<S> scale(Tape<S>& t, Var<S> a, S c) {
  return detail::unary<S>(t, a, a->value * c,
                          [c](const Mat<S>& g) { return Mat<S>(g * c); });
}

template <class S>
Var<S> transpose(Tape<S>& t, Var<S> a) {
  return detail::unary<S>(t, a, a->value.transpose(),
                          [](const Mat<S>& g) { return Mat<S>(g.transpose()); });
}

/// Broadcast-add a 1xC row vector onto every row of an NxC matrix.
template <class S>
Var<S> add_rowvec(Tape<S>& t, Var<S> x, Var<S> row) {
  if (row->value.rows() != 1 || row->value.cols() != x->value.cols())
    throw ShapeError("add_rowvec: wrong broadcast shape");
  Mat<S> v = x->value;
  v.rowwise() += row->value.row(0);
  Var<S> out = t.make(std::move(v), x->needs_grad || row->needs_grad);
  out->backprop = [out, x, row]() {
    if (x->needs_grad) Tape<S>::accum(x, out->grad);
    if (row->needs_grad) Tape<S>::accum(row, Mat<S>(out->grad.colwise().sum()));
  };
  return out;
}

template <class S>
Var<S> relu(Tape<S>& t, Var<S> a) {
  Mat<S> mask = (a->value.array() > S(0)).template cast<S>();
  return detail::unary<S>(
      t, a, a->value.cwiseProduct(mask),
      [mask](const Mat<S>& g) { return Mat<S>(g.cwiseProduct(mask)); });
}

template <class S>
Var<S> sigmoid(Tape<S>& t, Var<S> a) {
  Mat<S> y = (S(1) / (S(1) + (-a->value.array()).exp())).matrix();
  return detail::unary<S>(t, a, y, [y](const Mat<S>& g) {
    return Mat<S>(g.array() * y.array() * (S(1) - y.array()));
  });
}

/// Exact (erf-based) GELU.
template <class S>
Var<S> gelu(Tape<S>& t, Var<S> a) {
  const S inv_sqrt2 = S(0.7071067811865475244);
  const S inv_sqrt2pi = S(0.3989422804014326779);
  Mat<S> x = a->value;
  Mat<S> cdf = x.unaryExpr([inv_sqrt2](S v) {
    return S(0.5) * (S(1) + S(std::erf(v * inv_sqrt2)));
  });
  Mat<S> y = x.cwiseProduct(cdf);
  return detail::unary<S>(t, a, y, [x, cdf, inv_sqrt2pi](const Mat<S>& g) {
    Mat<S> pdf = ((-S(0.5) * x.array().square()).exp() * inv_sqrt2pi).matrix();
    return Mat<S>(g.array() * (cdf.array() + x.array() * pdf.array()));
  });
}

/// Row-wise softmax with max subtraction.
template <class S>
Var<S> softmax_rows(Tape<S>& t, Var<S> a) {
  Mat<S> y = a->value;
  for (int r = 0; r < y.rows(); ++r) {
    y.row(r).array() -= y.row(r).maxCoeff();
    y.row(r) = y.row(r).array().exp();
    y.row(r) /= y.row(r).sum();
  }
  return detail::unary<S>(t, a, y, [y](const Mat<S>& g) {
    Mat<S> dx(y.rows(), y.cols());
    for (int r = 0; r < y.rows(); ++r) {
      const S dot = g.row(r).dot(y.row(r));
      dx.row(r) = (y.row(r).array() * (g.row(r).array() - dot)).matrix();
    }
    return dx;
  });
}

/// Per-row layer normalization with learned gain/bias (1xC each).
template <class S>
Var<S> layernorm_rows(Tape<S>& t, Var<S> x, Var<S> gamma, Var<S> beta,
                      S eps = S(1e-5)) {
  const int n = static_cast<int>(x->value.rows());
  const int c = static_cast<int>(x->value.cols());
  if (gamma->value.cols() != c || beta->value.cols() != c)
    throw ShapeError("layernorm_rows: gain/bias must be 1xC");
  Mat<S> xhat(n, c);
  Vec<S> inv_std(n);
  for (int r = 0; r < n; ++r) {
    const S mu = x->value.row(r).mean();
    const S var = (x->value.row(r).array() - mu).square().mean();
    inv_std(r) = S(1) / std::sqrt(var + eps);
    xhat.row(r) = (x->value.row(r).array() - mu) * inv_std(r);
  }
  Mat<S> y = (xhat.array().rowwise() * gamma->value.row(0).array())
                 .rowwise() +
             beta->value.row(0).array();
  Var<S> out = t.make(std::move(y),
                      x->needs_grad || gamma->needs_grad || beta->needs_grad);
  out->backprop = [out, x, gamma, beta, xhat, inv_std]() {
    const Mat<S>& g = out->grad;
    if (gamma->needs_grad)
      Tape<S>::accum(gamma, Mat<S>(g.cwiseProduct(xhat).colwise().sum()));
    if (beta->needs_grad) Tape<S>::accum(beta, Mat<S>(g.colwise().sum()));
    if (x->needs_grad) {
      Mat<S> dx(g.rows(), g.cols());
      for (int r = 0; r < g.rows(); ++r) {
        Eigen::Array<S, 1, Eigen::Dynamic> h =
            g.row(r).array() * gamma->value.row(0).array();
        const S mean_h = h.mean();
        const S mean_hx = (h * xhat.row(r).array()).mean();
        dx.row(r) =
            ((h - mean_h - xhat.row(r).array() * mean_hx) * inv_std(r))
                .matrix();
      }
      Tape<S>::accum(x, dx);
    }
  };
  return out;
}

template <class S>
Var<S> concat_cols(Tape<S>& t, const std::vector<Var<S>>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: empty");
  const int rows = static_cast<int>(parts[0]->value.rows());
  int cols = 0;
  bool needs = false;
  for (auto* p : parts) {
    if (p->value.rows() != rows) throw ShapeError("concat_cols: row mismatch");
    cols += static_cast<int>(p->value.cols());
    needs = needs || p->needs_grad;
  }
  Mat<S> v(rows, cols);
  int at = 0;
  for (auto* p : parts) {
    v.middleCols(at, p->value.cols()) = p->value;
    at += static_cast<int>(p->value.cols());
  }
  Var<S> out = t.make(std::move(v), needs);
  out->backprop = [out, parts]() {
    int at = 0;
    for (auto* p : parts) {
      Tape<S>::accum(p, Mat<S>(out->grad.middleCols(at, p->value.cols())));
      at += static_cast<int>(p->value.cols());
    }
  };
  return out;
}

template <class S>
Var<S> concat_rows(Tape<S>& t, const std::vector<Var<S>>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: empty");
  const int cols = static_cast<int>(parts[0]->value.cols());
  int rows = 0;
  bool needs = false;
  for (auto* p : parts) {
    if (p->value.cols() != cols) throw ShapeError("concat_rows: col mismatch");
    rows += static_cast<int>(p->value.rows());
    needs = needs || p->needs_grad;
  }
  Mat<S> v(rows, cols);
  int at = 0;
  for (auto* p : parts) {
    v.middleRows(at, p->value.rows()) = p->value;
    at += static_cast<int>(p->value.rows());
  }
  Var<S> out = t.make(std::move(v), needs);
  out->backprop = [out, parts]() {
    int at = 0;
    for (auto* p : parts) {
      Tape<S>::accum(p, Mat<S>(out->grad.middleRows(at, p->value.rows())));
      at += static_cast<int>(p->value.rows());
    }
  };
  return out;
}

template <class S>
Var<S> slice_cols(Tape<S>& t, Var<S> a, int c0, int n) {
  Var<S> out = t.make(a->value.middleCols(c0, n), a->needs_grad);
  if (a->needs_grad)
    out->backprop = [out, a, c0, n]() {
      Mat<S> g = Mat<S>::Zero(a->value.rows(), a->value.cols());
      g.middleCols(c0, n) = out->grad;
      Tape<S>::accum(a, g);
    };
  return out;
}

template <class S>
Var<S> slice_rows(Tape<S>& t, Var<S> a, int r0, int n) {
  Var<S> out = t.make(a->value.middleRows(r0, n), a->needs_grad);
  if (a->needs_grad)
    out->backprop = [out, a, r0, n]() {
      Mat<S> g = Mat<S>::Zero(a->value.rows(), a->value.cols());
      g.middleRows(r0, n) = out->grad;
      Tape<S>::accum(a, g);
    };
  return out;
}

/// Mean over rows: NxC -> 1xC (token pooling).
template <class S>
Var<S> mean_rows(Tape<S>& t, Var<S> a) {
  const S inv_n = S(1) / S(a->value.rows());
  const int n = static_cast<int>(a->value.rows());
  return detail::unary<S>(t, a, Mat<S>(a->value.colwise().mean()),
                          [inv_n, n](const Mat<S>& g) {
                            return Mat<S>((g * inv_n).replicate(n, 1));
                          });
}

template <class S>
Var<S> sum_all(Tape<S>& t, Var<S> a) {
  Mat<S> v(1, 1);
  v(0, 0) = a->value.sum();
  const int r = static_cast<int>(a->value.rows());
  const int c = static_cast<int>(a->value.cols());
  return detail::unary<S>(t, a, std::move(v), [r, c](const Mat<S>& g) {
    return Mat<S>(Mat<S>::Constant(r, c, g(0, 0)));
  });
}

template <class S>
Var<S> mean_all(Tape<S>& t, Var<S> a) {
  return scale(t, sum_all(t, a), S(1) / S(a->value.size()));
}

/// Column-major reinterpret to (rows, cols); element order is preserved.
template <class S>
Var<S> reshape(Tape<S>& t, Var<S> a, int rows, int cols) {
  if (a->value.size() != static_cast<long>(rows) * cols)
    throw ShapeError("reshape: element count mismatch");
  Mat<S> v = Eigen::Map<const Mat<S>>(a->value.data(), rows, cols);
  const int ar = static_cast<int>(a->value.rows());
  const int ac = static_cast<int>(a->value.cols());
  return detail::unary<S>(t, a, std::move(v), [ar, ac](const Mat<S>& g) {
    return Mat<S>(Eigen::Map<const Mat<S>>(g.data(), ar, ac));
  });
}

/// out(i,j) = flat(src)[idx(i,j)], with idx < 0 meaning zero padding.
/// flat() reads src in Eigen's column-major storage order. The index map
/// is shared, not copied: layers cache one map per input shape.
template <class S>
Var<S> gather(Tape<S>& t, Var<S> src, std::shared_ptr<const MatXi> idx) {
  const auto& m = *idx;
  Mat<S> v(m.rows(), m.cols());
  const S* flat = src->value.data();
  for (int c = 0; c < m.cols(); ++c)
    for (int r = 0; r < m.rows(); ++r)
      v(r, c) = m(r, c) >= 0 ? flat[m(r, c)] : S(0);
  Var<S> out = t.make(std::move(v), src->needs_grad);
  if (src->needs_grad)
    out->backprop = [out, src, idx]() {
      const auto& mm = *idx;
      if (src->grad.size() == 0)
        src->grad = Mat<S>::Zero(src->value.rows(), src->value.cols());
      S* gflat = src->grad.data();
      for (int c = 0; c < mm.cols(); ++c)
        for (int r = 0; r < mm.rows(); ++r)
          if (mm(r, c) >= 0) gflat[mm(r, c)] += out->grad(r, c);
    };
  return out;
}

/// Repeats each row of a CxK matrix `times` times consecutively:
/// out.row(c * times + p) = in.row(c). Pairs with reshape for
/// depthwise convolutions.
template <class S>
Var<S> repeat_rows(Tape<S>& t, Var<S> a, int times) {
  const int c = static_cast<int>(a->value.rows());
  const int k = static_cast<int>(a->value.cols());
  Mat<S> v(c * times, k);
  for (int i = 0; i < c; ++i)
    v.middleRows(i * times, times) = a->value.row(i).replicate(times, 1);
  return detail::unary<S>(t, a, std::move(v), [c, k, times](const Mat<S>& g) {
    Mat<S> da(c, k);
    for (int i = 0; i < c; ++i)
      da.row(i) = g.middleRows(i * times, times).colwise().sum();
    return da;
  });
}

/// Row-wise sum: NxK -> Nx1.
template <class S>
Var<S> rowwise_sum(Tape<S>& t, Var<S> a) {
  const int k = static_cast<int>(a->value.cols());
  return detail::unary<S>(t, a, Mat<S>(a->value.rowwise().sum()),
                          [k](const Mat<S>& g) {
                            return Mat<S>(g.replicate(1, k));
                          });
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

/// Mean per-joint Euclidean distance of a Kx3 prediction against a constant
/// target. Subgradient 0 at coincident points.
template <class S>
Var<S> mpjpe_to_target(Tape<S>& t, Var<S> pred, const Mat<S>& target) {
  if (pred->value.rows() != target.rows() || pred->value.cols() != 3 ||
      target.cols() != 3)
    throw ShapeError("mpjpe_to_target: expected Kx3 against Kx3");
  const int k = static_cast<int>(pred->value.rows());
  Mat<S> diff = pred->value - target;
  Vec<S> norms = diff.rowwise().norm();
  Mat<S> v(1, 1);
  v(0, 0) = norms.mean();
  Var<S> out = t.make(std::move(v), pred->needs_grad);
  if (pred->needs_grad)
    out->backprop = [out, pred, diff, norms, k]() {
      Mat<S> dp = Mat<S>::Zero(k, 3);
      const S g = out->grad(0, 0) / S(k);
      for (int r = 0; r < k; ++r)
        if (norms(r) > S(0)) dp.row(r) = diff.row(r) * (g / norms(r));
      Tape<S>::accum(pred, dp);
    };
  return out;
}

/// Mean negative log softmax probability of each row's true class.
template <class S>
Var<S> softmax_cross_entropy(Tape<S>& t, Var<S> logits,
                             const std::vector<int>& labels) {
  const int n = static_cast<int>(logits->value.rows());
  const int c = static_cast<int>(logits->value.cols());
  if (n != static_cast<int>(labels.size()))
    throw ShapeError("softmax_cross_entropy: batch size mismatch");
  for (int l : labels)
    if (l < 0 || l >= c) throw LabelError("label out of range");
  Mat<S> probs(n, c);
  S loss = S(0);
  for (int r = 0; r < n; ++r) {
    Eigen::Array<S, 1, Eigen::Dynamic> row = logits->value.row(r).array();
    const S mx = row.maxCoeff();
    Eigen::Array<S, 1, Eigen::Dynamic> e = (row - mx).exp();
    const S z = e.sum();
    probs.row(r) = (e / z).matrix();
    loss -= (row(labels[static_cast<size_t>(r)]) - mx - std::log(z));
  }
  Mat<S> v(1, 1);
  v(0, 0) = loss / S(n);
  Var<S> out = t.make(std::move(v), logits->needs_grad);
  if (logits->needs_grad)
    out->backprop = [out, logits, probs, labels, n]() {
      Mat<S> d = probs;
      for (int r = 0; r < n; ++r) d(r, labels[static_cast<size_t>(r)]) -= S(1);
      Tape<S>::accum(logits, Mat<S>(d * (out->grad(0, 0) / S(n))));
    };
  return out;
}

/// Mean squared error against a constant target.
template <class S>
Var<S> mse_to_target(Tape<S>& t, Var<S> x, const Mat<S>& target) {
  if (x->value.rows() != target.rows() || x->value.cols() != target.cols())
    throw ShapeError("mse_to_target: shape mismatch");
  Mat<S> diff = x->value - target;
  Mat<S> v(1, 1);
  v(0, 0) = diff.squaredNorm() / S(diff.size());
  const S inv = S(2) / S(diff.size());
  return detail::unary<S>(t, x, std::move(v), [diff, inv](const Mat<S>& g) {
    return Mat<S>(diff * (g(0, 0) * inv));
  });
}

}  // namespace egopose::ad
