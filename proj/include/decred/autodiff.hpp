#pragma once

// Minimal tape-based reverse-mode differentiation over dense row-major
// matrices. Every op records its output value and, when any input requires a
// gradient, a closure that pushes the output gradient back to its inputs.
// Nodes are appended in evaluation order, so a reverse sweep over the tape is a
// valid topological order.

#include <Eigen/Dense>

#include <cassert>
#include <cmath>
#include <functional>
#include <initializer_list>
#include <limits>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "decred/rng.hpp"

namespace decred::ad {

template <class S>
using Matrix = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <class S>
using RowVector = Eigen::Matrix<S, 1, Eigen::Dynamic>;

/// A named trainable tensor with its accumulated gradient.
template <class S>
struct Parameter {
  std::string name;
  Matrix<S> value;
  Matrix<S> grad;

  Parameter() = default;
  Parameter(std::string n, Matrix<S> v)
      : name(std::move(n)), value(std::move(v)), grad(Matrix<S>::Zero(value.rows(), value.cols())) {}

  void zero_grad() { grad.setZero(); }
  Eigen::Index size() const { return value.size(); }
};

template <class S>
class Tape;

template <class S>
class Var {
 public:
  Var() = default;
  Var(Tape<S>* tape, std::size_t id) : tape_(tape), id_(id) {}

  const Matrix<S>& value() const { return tape_->value(id_); }
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  S scalar() const { return value()(0, 0); }

  Tape<S>* tape() const { return tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  Tape<S>* tape_ = nullptr;
  std::size_t id_ = 0;
};

template <class S>
class Tape {
 public:
  /// Receives the gradient of the node and the node's own forward value.
  using Backward = std::function<void(const Matrix<S>& grad, const Matrix<S>& out)>;

  explicit Tape(bool record = true) : record_(record) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return record_; }

  Var<S> constant(Matrix<S> value) {
    nodes_.push_back(Node{std::move(value), {}, {}, false});
    return Var<S>(this, nodes_.size() - 1);
  }

  /// Leaf bound to a parameter; backward accumulates into `p.grad`. The value
  /// is referenced, not copied, so `p` must outlive the tape and stay unchanged.
  Var<S> parameter(Parameter<S>& p) {
    Node node{{}, {}, {}, record_, &p.value};
    if (record_) {
      Parameter<S>* target = &p;
      node.backward = [target](const Matrix<S>& g, const Matrix<S>&) { target->grad += g; };
    }
    nodes_.push_back(std::move(node));
    return Var<S>(this, nodes_.size() - 1);
  }

  Var<S> push(Matrix<S> value, std::initializer_list<Var<S>> inputs, Backward fn) {
    bool needs = false;
    if (record_) {
      for (const auto& in : inputs) needs = needs || nodes_[in.id()].requires_grad;
    }
    nodes_.push_back(Node{std::move(value), {}, needs ? std::move(fn) : Backward{}, needs});
    return Var<S>(this, nodes_.size() - 1);
  }

  Var<S> push(Matrix<S> value, std::span<const Var<S>> inputs, Backward fn) {
    bool needs = false;
    if (record_) {
      for (const auto& in : inputs) needs = needs || nodes_[in.id()].requires_grad;
    }
    nodes_.push_back(Node{std::move(value), {}, needs ? std::move(fn) : Backward{}, needs});
    return Var<S>(this, nodes_.size() - 1);
  }

  const Matrix<S>& value(std::size_t id) const {
    const Node& n = nodes_[id];
    return n.external != nullptr ? *n.external : n.value;
  }
  bool requires_grad(const Var<S>& v) const { return nodes_[v.id()].requires_grad; }

  template <class Derived>
  void accumulate(const Var<S>& v, const Eigen::MatrixBase<Derived>& g) {
    Node& n = nodes_[v.id()];
    if (!n.requires_grad) return;
    if (n.grad.size() == 0) {
      n.grad = g;
    } else {
      n.grad += g;
    }
  }

  /// Reverse sweep from a 1x1 root.
  void backward(const Var<S>& root, S seed = S(1)) {
    if (!record_) throw std::logic_error("backward on a non-recording tape");
    if (root.rows() != 1 || root.cols() != 1) throw std::invalid_argument("backward root must be 1x1");
    if (!nodes_[root.id()].requires_grad) return;
    nodes_[root.id()].grad = Matrix<S>::Constant(1, 1, seed);
    for (std::size_t i = root.id() + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.backward || n.grad.size() == 0) continue;
      n.backward(n.grad, n.external != nullptr ? *n.external : n.value);
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Matrix<S> value;
    Matrix<S> grad;
    Backward backward;
    bool requires_grad = false;
    const Matrix<S>* external = nullptr;
  };

  std::vector<Node> nodes_;
  bool record_;
};

// ---------------------------------------------------------------------------
// Elementwise and linear algebra

template <class S>
Var<S> add(const Var<S>& a, const Var<S>& b) {
  assert(a.rows() == b.rows() && a.cols() == b.cols());
  Tape<S>* t = a.tape();
  return t->push(a.value() + b.value(), {a, b}, [t, a, b](const Matrix<S>& g, const Matrix<S>&) {
    t->accumulate(a, g);
    t->accumulate(b, g);
  });
}

template <class S>
Var<S> operator+(const Var<S>& a, const Var<S>& b) {
  return add(a, b);
}

template <class S>
Var<S> scale(const Var<S>& a, S s) {
  Tape<S>* t = a.tape();
  return t->push(a.value() * s, {a}, [t, a, s](const Matrix<S>& g, const Matrix<S>&) { t->accumulate(a, g * s); });
}

template <class S>
Var<S> mul(const Var<S>& a, const Var<S>& b) {
  assert(a.rows() == b.rows() && a.cols() == b.cols());
  Tape<S>* t = a.tape();
  return t->push(a.value().cwiseProduct(b.value()), {a, b}, [t, a, b](const Matrix<S>& g, const Matrix<S>&) {
    t->accumulate(a, g.cwiseProduct(b.value()));
    t->accumulate(b, g.cwiseProduct(a.value()));
  });
}

/// Adds a 1xC row to every row of `a`.
template <class S>
Var<S> add_row(const Var<S>& a, const Var<S>& row) {
  assert(row.rows() == 1 && row.cols() == a.cols());
  Tape<S>* t = a.tape();
  Matrix<S> out = a.value().rowwise() + row.value().row(0);
  return t->push(std::move(out), {a, row}, [t, a, row](const Matrix<S>& g, const Matrix<S>&) {
    t->accumulate(a, g);
    t->accumulate(row, g.colwise().sum());
  });
}

template <class S>
Var<S> matmul(const Var<S>& a, const Var<S>& b) {
  assert(a.cols() == b.rows());
  Tape<S>* t = a.tape();
  Matrix<S> out = a.value() * b.value();
  return t->push(std::move(out), {a, b}, [t, a, b](const Matrix<S>& g, const Matrix<S>&) {
    if (t->requires_grad(a)) t->accumulate(a, g * b.value().transpose());
    if (t->requires_grad(b)) t->accumulate(b, a.value().transpose() * g);
  });
}

/// x W + b, with `bias` optional (pass an invalid Var to skip it).
template <class S>
Var<S> linear(const Var<S>& x, const Var<S>& weight, const Var<S>& bias = {}) {
  Var<S> y = matmul(x, weight);
  return bias.valid() ? add_row(y, bias) : y;
}

template <class S>
Var<S> relu(const Var<S>& a) {
  Tape<S>* t = a.tape();
  return t->push(a.value().cwiseMax(S(0)), {a}, [t, a](const Matrix<S>& g, const Matrix<S>&) {
    t->accumulate(a, (a.value().array() > S(0)).select(g.array(), S(0)).matrix());
  });
}

template <class S>
Var<S> sigmoid(const Var<S>& a) {
  Tape<S>* t = a.tape();
  Matrix<S> out = (S(1) / (S(1) + (-a.value().array()).exp())).matrix();
  return t->push(std::move(out), {a}, [t, a](const Matrix<S>& g, const Matrix<S>& y) {
    t->accumulate(a, (g.array() * y.array() * (S(1) - y.array())).matrix());
  });
}

/// Multiplies by a fixed inverted-dropout mask drawn from `rng`.
template <class S>
Var<S> dropout(const Var<S>& a, double p, Rng& rng) {
  if (p <= 0.0) return a;
  Matrix<S> mask(a.rows(), a.cols());
  const S keep = S(1) / S(1.0 - p);
  for (Eigen::Index i = 0; i < mask.size(); ++i) mask.data()[i] = rng.uniform() < p ? S(0) : keep;
  Tape<S>* t = a.tape();
  Matrix<S> out = a.value().cwiseProduct(mask);
  return t->push(std::move(out), {a},
                 [t, a, mask = std::move(mask)](const Matrix<S>& g, const Matrix<S>&) {
                   t->accumulate(a, g.cwiseProduct(mask));
                 });
}

template <class S>
Var<S> sum(const Var<S>& a) {
  Tape<S>* t = a.tape();
  Matrix<S> out = Matrix<S>::Constant(1, 1, a.value().sum());
  return t->push(std::move(out), {a}, [t, a](const Matrix<S>& g, const Matrix<S>&) {
    t->accumulate(a, Matrix<S>::Constant(a.rows(), a.cols(), g(0, 0)));
  });
}

template <class S>
Var<S> concat_cols(const std::vector<Var<S>>& parts) {
  assert(!parts.empty());
  Tape<S>* t = parts.front().tape();
  const Eigen::Index rows = parts.front().rows();
  Eigen::Index cols = 0;
  for (const auto& p : parts) cols += p.cols();
  Matrix<S> out(rows, cols);
  Eigen::Index c = 0;
  for (const auto& p : parts) {
    out.middleCols(c, p.cols()) = p.value();
    c += p.cols();
  }
  return t->push(std::move(out), std::span<const Var<S>>(parts), [t, parts](const Matrix<S>& g, const Matrix<S>&) {
    Eigen::Index c0 = 0;
    for (const auto& p : parts) {
      t->accumulate(p, g.middleCols(c0, p.cols()));
      c0 += p.cols();
    }
  });
}

template <class S>
Var<S> slice_cols(const Var<S>& a, Eigen::Index start, Eigen::Index count) {
  Tape<S>* t = a.tape();
  Matrix<S> out = a.value().middleCols(start, count);
  return t->push(std::move(out), {a}, [t, a, start, count](const Matrix<S>& g, const Matrix<S>&) {
    Matrix<S> full = Matrix<S>::Zero(a.rows(), a.cols());
    full.middleCols(start, count) = g;
    t->accumulate(a, full);
  });
}

/// Gathers rows of `table` (V x d) for each id.
template <class S>
Var<S> embedding(const Var<S>& table, std::span<const int> ids) {
  Tape<S>* t = table.tape();
  Matrix<S> out(static_cast<Eigen::Index>(ids.size()), table.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = table.value().row(ids[i]);
  std::vector<int> idx(ids.begin(), ids.end());
  return t->push(std::move(out), {table}, [t, table, idx = std::move(idx)](const Matrix<S>& g, const Matrix<S>&) {
    Matrix<S> full = Matrix<S>::Zero(table.rows(), table.cols());
    for (std::size_t i = 0; i < idx.size(); ++i) full.row(idx[i]) += g.row(static_cast<Eigen::Index>(i));
    t->accumulate(table, full);
  });
}

// ---------------------------------------------------------------------------
// Normalization and softmax

template <class S>
Var<S> layer_norm(const Var<S>& x, const Var<S>& gamma, const Var<S>& beta, S eps = S(1e-5)) {
  Tape<S>* t = x.tape();
  const Eigen::Index rows = x.rows();
  const Eigen::Index cols = x.cols();
  Matrix<S> xhat(rows, cols);
  RowVector<S> inv_std(rows);
  for (Eigen::Index r = 0; r < rows; ++r) {
    const auto row = x.value().row(r);
    const S mu = row.mean();
    const S var = (row.array() - mu).square().mean();
    inv_std(r) = S(1) / std::sqrt(var + eps);
    xhat.row(r) = (row.array() - mu) * inv_std(r);
  }
  Matrix<S> out = (xhat.array().rowwise() * gamma.value().row(0).array()).rowwise() + beta.value().row(0).array();
  return t->push(std::move(out), {x, gamma, beta},
                 [t, x, gamma, beta, xhat = std::move(xhat), inv_std = std::move(inv_std)](const Matrix<S>& g,
                                                                                            const Matrix<S>&) {
                   t->accumulate(gamma, (g.cwiseProduct(xhat)).colwise().sum());
                   t->accumulate(beta, g.colwise().sum());
                   if (!t->requires_grad(x)) return;
                   Matrix<S> dxhat = g.array().rowwise() * gamma.value().row(0).array();
                   Matrix<S> dx(dxhat.rows(), dxhat.cols());
                   for (Eigen::Index r = 0; r < dx.rows(); ++r) {
                     const S mean_d = dxhat.row(r).mean();
                     const S mean_dx = dxhat.row(r).cwiseProduct(xhat.row(r)).mean();
                     dx.row(r) = ((dxhat.row(r).array() - mean_d) - xhat.row(r).array() * mean_dx) * inv_std(r);
                   }
                   t->accumulate(x, dx);
                 });
}

/// Row-wise log-softmax on plain matrices; shared by the differentiable op and
/// by inference-only paths so both produce identical bits.
template <class S>
Matrix<S> log_softmax_rows(const Matrix<S>& x) {
  Matrix<S> out(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const S m = x.row(r).maxCoeff();
    const S lse = m + std::log((x.row(r).array() - m).exp().sum());
    out.row(r) = x.row(r).array() - lse;
  }
  return out;
}

template <class S>
Var<S> log_softmax(const Var<S>& x) {
  Tape<S>* t = x.tape();
  return t->push(log_softmax_rows(x.value()), {x}, [t, x](const Matrix<S>& g, const Matrix<S>& y) {
    Matrix<S> p = y.array().exp().matrix();
    Matrix<S> dx = g - (p.array().colwise() * g.rowwise().sum().array()).matrix();
    t->accumulate(x, dx);
  });
}

// ---------------------------------------------------------------------------
// Attention

/// Scaled dot-product attention over `heads` column groups of Q, K, V.
/// Q: Nq x d, K and V: Nk x d. With `causal`, query i attends to keys <= i.
template <class S>
Var<S> multi_head_attention(const Var<S>& q, const Var<S>& k, const Var<S>& v, int heads, bool causal) {
  Tape<S>* t = q.tape();
  const Eigen::Index nq = q.rows();
  const Eigen::Index nk = k.rows();
  const Eigen::Index d = q.cols();
  const Eigen::Index dk = d / heads;
  const S inv_sqrt = S(1) / std::sqrt(static_cast<S>(dk));

  std::vector<Matrix<S>> probs(static_cast<std::size_t>(heads));
  Matrix<S> out(nq, d);
  for (int h = 0; h < heads; ++h) {
    const auto qh = q.value().middleCols(h * dk, dk);
    const auto kh = k.value().middleCols(h * dk, dk);
    const auto vh = v.value().middleCols(h * dk, dk);
    Matrix<S> scores = (qh * kh.transpose()) * inv_sqrt;
    Matrix<S>& p = probs[static_cast<std::size_t>(h)];
    p.resize(nq, nk);
    for (Eigen::Index i = 0; i < nq; ++i) {
      const Eigen::Index visible = causal ? std::min<Eigen::Index>(i + 1, nk) : nk;
      const S m = scores.row(i).head(visible).maxCoeff();
      S z = S(0);
      for (Eigen::Index j = 0; j < visible; ++j) {
        p(i, j) = std::exp(scores(i, j) - m);
        z += p(i, j);
      }
      for (Eigen::Index j = 0; j < visible; ++j) p(i, j) /= z;
      for (Eigen::Index j = visible; j < nk; ++j) p(i, j) = S(0);
    }
    out.middleCols(h * dk, dk) = p * vh;
  }

  return t->push(std::move(out), {q, k, v},
                 [t, q, k, v, heads, dk, inv_sqrt, probs = std::move(probs)](const Matrix<S>& g, const Matrix<S>&) {
                   Matrix<S> dq = Matrix<S>::Zero(q.rows(), q.cols());
                   Matrix<S> dkm = Matrix<S>::Zero(k.rows(), k.cols());
                   Matrix<S> dv = Matrix<S>::Zero(v.rows(), v.cols());
                   for (int h = 0; h < heads; ++h) {
                     const Matrix<S>& p = probs[static_cast<std::size_t>(h)];
                     const auto gh = g.middleCols(h * dk, dk);
                     const auto qh = q.value().middleCols(h * dk, dk);
                     const auto kh = k.value().middleCols(h * dk, dk);
                     const auto vh = v.value().middleCols(h * dk, dk);
                     dv.middleCols(h * dk, dk) = p.transpose() * gh;
                     Matrix<S> dp = gh * vh.transpose();
                     Matrix<S> ds = (p.array() * (dp.array().colwise() - (dp.cwiseProduct(p)).rowwise().sum().array()))
                                        .matrix() *
                                    inv_sqrt;
                     dq.middleCols(h * dk, dk) = ds * kh;
                     dkm.middleCols(h * dk, dk) = ds.transpose() * qh;
                   }
                   t->accumulate(q, dq);
                   t->accumulate(k, dkm);
                   t->accumulate(v, dv);
                 });
}

// ---------------------------------------------------------------------------
// Convolutions

/// 3x3 convolution with stride 2 and zero padding 1 over a (time x freq) grid.
/// Layout: input is T x (Cin*F) with column c*F + f; output is
/// T2 x (Cout*F2) where T2 = floor((T-1)/2)+1 and likewise for F2.
/// weight: Cout x (Cin*9) indexed ci*9 + kt*3 + kf; bias: 1 x Cout.
template <class S>
Var<S> conv2d_stride2(const Var<S>& x, int in_channels, const Var<S>& weight, const Var<S>& bias) {
  Tape<S>* t = x.tape();
  const int T = static_cast<int>(x.rows());
  const int F = static_cast<int>(x.cols()) / in_channels;
  const int cout = static_cast<int>(weight.rows());
  const int T2 = (T - 1) / 2 + 1;
  const int F2 = (F - 1) / 2 + 1;
  const Matrix<S>& in = x.value();
  // im2col: one row per output position (t2, f2), one column per (ci, kt, kf).
  auto patches = std::make_shared<Matrix<S>>(Matrix<S>::Zero(T2 * F2, in_channels * 9));
  for (int t2 = 0; t2 < T2; ++t2) {
    for (int f2 = 0; f2 < F2; ++f2) {
      auto row = patches->row(t2 * F2 + f2);
      for (int ci = 0; ci < in_channels; ++ci) {
        for (int kt = 0; kt < 3; ++kt) {
          const int ti = 2 * t2 - 1 + kt;
          if (ti < 0 || ti >= T) continue;
          for (int kf = 0; kf < 3; ++kf) {
            const int fi = 2 * f2 - 1 + kf;
            if (fi >= 0 && fi < F) row(ci * 9 + kt * 3 + kf) = in(ti, ci * F + fi);
          }
        }
      }
    }
  }
  Matrix<S> pos = *patches * weight.value().transpose();
  pos.rowwise() += bias.value().row(0);
  Matrix<S> out(T2, cout * F2);
  for (int t2 = 0; t2 < T2; ++t2)
    for (int f2 = 0; f2 < F2; ++f2)
      for (int co = 0; co < cout; ++co) out(t2, co * F2 + f2) = pos(t2 * F2 + f2, co);
  return t->push(std::move(out), {x, weight, bias},
                 [t, x, weight, bias, patches, in_channels, T, F, cout, T2, F2](const Matrix<S>& g, const Matrix<S>&) {
                   Matrix<S> gpos(T2 * F2, cout);
                   for (int t2 = 0; t2 < T2; ++t2)
                     for (int f2 = 0; f2 < F2; ++f2)
                       for (int co = 0; co < cout; ++co) gpos(t2 * F2 + f2, co) = g(t2, co * F2 + f2);
                   t->accumulate(weight, gpos.transpose() * *patches);
                   t->accumulate(bias, gpos.colwise().sum());
                   if (!t->requires_grad(x)) return;
                   const Matrix<S> gpatch = gpos * weight.value();
                   Matrix<S> dx = Matrix<S>::Zero(T, in_channels * F);
                   for (int t2 = 0; t2 < T2; ++t2) {
                     for (int f2 = 0; f2 < F2; ++f2) {
                       const auto row = gpatch.row(t2 * F2 + f2);
                       for (int ci = 0; ci < in_channels; ++ci) {
                         for (int kt = 0; kt < 3; ++kt) {
                           const int ti = 2 * t2 - 1 + kt;
                           if (ti < 0 || ti >= T) continue;
                           for (int kf = 0; kf < 3; ++kf) {
                             const int fi = 2 * f2 - 1 + kf;
                             if (fi >= 0 && fi < F) dx(ti, ci * F + fi) += row(ci * 9 + kt * 3 + kf);
                           }
                         }
                       }
                     }
                   }
                   t->accumulate(x, dx);
                 });
}

/// Per-channel convolution along time with "same" zero padding (odd kernel).
/// x: T x C, weight: K x C, bias: 1 x C.
template <class S>
Var<S> depthwise_conv1d(const Var<S>& x, const Var<S>& weight, const Var<S>& bias) {
  Tape<S>* t = x.tape();
  const Eigen::Index T = x.rows();
  const Eigen::Index K = weight.rows();
  const Eigen::Index half = K / 2;
  Matrix<S> out = Matrix<S>::Zero(T, x.cols());
  out.rowwise() += bias.value().row(0);
  for (Eigen::Index i = 0; i < T; ++i) {
    for (Eigen::Index k = 0; k < K; ++k) {
      const Eigen::Index src = i + k - half;
      if (src < 0 || src >= T) continue;
      out.row(i) += x.value().row(src).cwiseProduct(weight.value().row(k));
    }
  }
  return t->push(std::move(out), {x, weight, bias}, [t, x, weight, bias, T, K, half](const Matrix<S>& g, const Matrix<S>&) {
    Matrix<S> dx = Matrix<S>::Zero(x.rows(), x.cols());
    Matrix<S> dw = Matrix<S>::Zero(weight.rows(), weight.cols());
    for (Eigen::Index i = 0; i < T; ++i) {
      for (Eigen::Index k = 0; k < K; ++k) {
        const Eigen::Index src = i + k - half;
        if (src < 0 || src >= T) continue;
        dx.row(src) += g.row(i).cwiseProduct(weight.value().row(k));
        dw.row(k) += g.row(i).cwiseProduct(x.value().row(src));
      }
    }
    t->accumulate(x, dx);
    t->accumulate(weight, dw);
    t->accumulate(bias, g.colwise().sum());
  });
}

}  // namespace decred::ad
