#pragma once

// Matrix-level reverse-mode differentiation. Every op records its output on
// the tape together with a closure that pushes the output gradient back to
// its inputs; parameters enter as leaves that add their gradient into the
// owning Tensor when the backward pass reaches them.

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <limits>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace semtrace::nn {

template <class T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <class T>
struct Tensor {
  std::string name;
  Mat<T> value;
  Mat<T> grad;

  Tensor() = default;
  Tensor(std::string n, Eigen::Index rows, Eigen::Index cols)
      : name(std::move(n)), value(Mat<T>::Zero(rows, cols)), grad(Mat<T>::Zero(rows, cols)) {}

  void zero_grad() { grad.setZero(value.rows(), value.cols()); }
};

class NonFiniteGradient : public std::runtime_error {
 public:
  explicit NonFiniteGradient(const std::string& tensor)
      : std::runtime_error("non-finite gradient in tensor '" + tensor + "'"), tensor_(tensor) {}
  const std::string& tensor() const noexcept { return tensor_; }

 private:
  std::string tensor_;
};

struct Var {
  std::size_t id = 0;
};

template <class T>
class Tape {
 public:
  using M = Mat<T>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  const M& value(Var v) const { return nodes_[v.id].get(); }
  std::size_t size() const { return nodes_.size(); }

  Var constant(M m) { return push(std::move(m), false); }

  /// A leaf reading a parameter in place.
  Var param(Tensor<T>& t) {
    Node n;
    n.ext = &t.value;
    n.param = &t;
    n.requires_grad = true;
    nodes_.push_back(std::move(n));
    return Var{nodes_.size() - 1};
  }

  // -- linear algebra --------------------------------------------------------

  Var matmul(Var a, Var b) {
    M out = value(a) * value(b);
    return op(std::move(out), {a, b}, [this, a, b](const M& g) {
      if (wants(a)) acc(a, g * value(b).transpose());
      if (wants(b)) acc(b, value(a).transpose() * g);
    });
  }

  Var add(Var a, Var b) {
    check_same(a, b, "add");
    M out = value(a) + value(b);
    return op(std::move(out), {a, b}, [this, a, b](const M& g) {
      if (wants(a)) acc(a, g);
      if (wants(b)) acc(b, g);
    });
  }

  /// a (n x d) plus a row vector b (1 x d) on every row.
  Var add_row(Var a, Var b) {
    if (value(b).rows() != 1 || value(b).cols() != value(a).cols()) throw std::invalid_argument("add_row: shape mismatch");
    M out = value(a).rowwise() + value(b).row(0);
    return op(std::move(out), {a, b}, [this, a, b](const M& g) {
      if (wants(a)) acc(a, g);
      if (wants(b)) acc(b, g.colwise().sum());
    });
  }

  Var mul(Var a, Var b) {
    check_same(a, b, "mul");
    M out = value(a).cwiseProduct(value(b));
    return op(std::move(out), {a, b}, [this, a, b](const M& g) {
      if (wants(a)) acc(a, g.cwiseProduct(value(b)));
      if (wants(b)) acc(b, g.cwiseProduct(value(a)));
    });
  }

  Var scale(Var a, T s) {
    M out = value(a) * s;
    return op(std::move(out), {a}, [this, a, s](const M& g) { acc(a, g * s); });
  }

  /// Sum of all entries as a 1 x 1 matrix.
  Var sum(Var a) {
    M out(1, 1);
    out(0, 0) = value(a).sum();
    return op(std::move(out), {a}, [this, a](const M& g) {
      acc(a, M::Constant(value(a).rows(), value(a).cols(), g(0, 0)));
    });
  }

  Var sum(const std::vector<Var>& xs) {
    if (xs.empty()) throw std::invalid_argument("sum of no terms");
    Var s = xs[0];
    for (std::size_t i = 1; i < xs.size(); ++i) s = add(s, xs[i]);
    return s;
  }

  // -- activations -----------------------------------------------------------

  Var tanh(Var a) {
    M out = value(a).array().tanh().matrix();
    const Var o{nodes_.size()};
    return op(std::move(out), {a}, [this, a, o](const M& g) {
      acc(a, g.cwiseProduct((T(1) - value(o).array().square()).matrix()));
    });
  }

  Var sigmoid(Var a) {
    M out = (T(1) / (T(1) + (-value(a).array()).exp())).matrix();
    const Var o{nodes_.size()};
    return op(std::move(out), {a}, [this, a, o](const M& g) {
      const auto& y = value(o).array();
      acc(a, (g.array() * y * (T(1) - y)).matrix());
    });
  }

  /// Exact GeLU, x * Phi(x).
  Var gelu(Var a) {
    const M& x = value(a);
    M out = x.unaryExpr([](T v) { return v * phi(v); });
    return op(std::move(out), {a}, [this, a](const M& g) {
      const M& xv = value(a);
      const T inv_sqrt_2pi = T(0.3989422804014327);
      M d = xv.unaryExpr([inv_sqrt_2pi](T v) { return phi(v) + v * inv_sqrt_2pi * std::exp(T(-0.5) * v * v); });
      acc(a, g.cwiseProduct(d));
    });
  }

  /// Inverted dropout; `uniform` supplies one draw in [0,1) per entry.
  template <class Uniform>
  Var dropout(Var a, double p, Uniform&& uniform) {
    if (p <= 0.0) return a;
    const M& x = value(a);
    M mask(x.rows(), x.cols());
    const T keep = T(1) / T(1.0 - p);
    for (Eigen::Index i = 0; i < mask.size(); ++i) mask.data()[i] = uniform() < p ? T(0) : keep;
    M out = x.cwiseProduct(mask);
    return op(std::move(out), {a}, [this, a, mask = std::move(mask)](const M& g) { acc(a, g.cwiseProduct(mask)); });
  }

  // -- indexing --------------------------------------------------------------

  /// out.row(i) = a.row(ids[i]).
  Var gather_rows(Var a, std::vector<std::int32_t> ids) {
    const M& x = value(a);
    M out(static_cast<Eigen::Index>(ids.size()), x.cols());
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (ids[i] < 0 || ids[i] >= x.rows())
        throw std::out_of_range("gather_rows: id " + std::to_string(ids[i]) + " outside table of " + std::to_string(x.rows()));
      out.row(static_cast<Eigen::Index>(i)) = x.row(ids[i]);
    }
    return op(std::move(out), {a}, [this, a, ids = std::move(ids)](const M& g) {
      M& ga = grad_of(a);
      for (std::size_t i = 0; i < ids.size(); ++i) ga.row(ids[i]) += g.row(static_cast<Eigen::Index>(i));
    });
  }

  Var slice_cols(Var a, Eigen::Index start, Eigen::Index len) {
    M out = value(a).middleCols(start, len);
    return op(std::move(out), {a}, [this, a, start, len](const M& g) { grad_of(a).middleCols(start, len) += g; });
  }

  Var concat_cols(const std::vector<Var>& xs) {
    Eigen::Index rows = value(xs.at(0)).rows(), cols = 0;
    for (Var x : xs) {
      if (value(x).rows() != rows) throw std::invalid_argument("concat_cols: row mismatch");
      cols += value(x).cols();
    }
    M out(rows, cols);
    Eigen::Index c = 0;
    for (Var x : xs) {
      out.middleCols(c, value(x).cols()) = value(x);
      c += value(x).cols();
    }
    return op(std::move(out), xs, [this, xs](const M& g) {
      Eigen::Index c0 = 0;
      for (Var x : xs) {
        const auto w = value(x).cols();
        if (wants(x)) acc(x, g.middleCols(c0, w));
        c0 += w;
      }
    });
  }

  Var mean_rows(Var a) {
    const auto n = value(a).rows();
    M out = value(a).colwise().mean();
    return op(std::move(out), {a}, [this, a, n](const M& g) { grad_of(a).rowwise() += g.row(0) / T(n); });
  }

  // -- attention -------------------------------------------------------------

  /// Multi-head scaled dot-product attention. q, k, v are n x d; head h reads
  /// columns [h*d/H, (h+1)*d/H). Logits are divided by sqrt(scale_dim).
  /// If `probs_out` is given it receives the per-head attention matrices.
  Var attention(Var q, Var k, Var v, std::size_t heads, T scale_dim, std::vector<M>* probs_out = nullptr) {
    const M& Q = value(q);
    const M& K = value(k);
    const M& V = value(v);
    const Eigen::Index n = Q.rows(), d = Q.cols();
    if (heads == 0 || d % static_cast<Eigen::Index>(heads) != 0) throw std::invalid_argument("attention: d not divisible by heads");
    const Eigen::Index dh = d / static_cast<Eigen::Index>(heads);
    const T s = T(1) / std::sqrt(scale_dim);
    auto probs = std::make_shared<std::vector<M>>();
    M out(n, d);
    for (std::size_t h = 0; h < heads; ++h) {
      const Eigen::Index c = static_cast<Eigen::Index>(h) * dh;
      M logits = (Q.middleCols(c, dh) * K.middleCols(c, dh).transpose()) * s;
      softmax_rows(logits);
      out.middleCols(c, dh) = logits * V.middleCols(c, dh);
      probs->push_back(std::move(logits));
    }
    if (probs_out) *probs_out = *probs;
    return op(std::move(out), {q, k, v}, [this, q, k, v, dh, s, probs](const M& g) {
      const M& Qv = value(q);
      const M& Kv = value(k);
      const M& Vv = value(v);
      M gq = M::Zero(Qv.rows(), Qv.cols()), gk = M::Zero(Kv.rows(), Kv.cols()), gv = M::Zero(Vv.rows(), Vv.cols());
      for (std::size_t h = 0; h < probs->size(); ++h) {
        const Eigen::Index c = static_cast<Eigen::Index>(h) * dh;
        const M& P = (*probs)[h];
        const auto gh = g.middleCols(c, dh);
        gv.middleCols(c, dh) += P.transpose() * gh;
        M dP = gh * Vv.middleCols(c, dh).transpose();
        M dS = P.cwiseProduct(dP);
        const Eigen::Matrix<T, Eigen::Dynamic, 1> rs = dS.rowwise().sum();
        dS -= P.cwiseProduct(rs.replicate(1, P.cols()));
        dS *= s;
        gq.middleCols(c, dh) += dS * Kv.middleCols(c, dh);
        gk.middleCols(c, dh) += dS.transpose() * Qv.middleCols(c, dh);
      }
      if (wants(q)) acc(q, gq);
      if (wants(k)) acc(k, gk);
      if (wants(v)) acc(v, gv);
    });
  }

  // -- losses ----------------------------------------------------------------

  /// sum_i w_i * CE(softmax(logits_i[0:classes]), target_i) as a 1 x 1 value.
  /// Columns at or beyond `classes` take no part. Rows with w_i = 0 are
  /// ignored entirely, so their targets may be anything.
  Var softmax_xent(Var logits, std::vector<std::int32_t> targets, std::vector<T> weights, Eigen::Index classes,
                   std::vector<T>* per_row_ce = nullptr) {
    const M& x = value(logits);
    if (static_cast<Eigen::Index>(targets.size()) != x.rows() || weights.size() != targets.size())
      throw std::invalid_argument("softmax_xent: target count mismatch");
    if (classes > x.cols()) throw std::invalid_argument("softmax_xent: classes exceed logits");
    auto probs = std::make_shared<M>(x.leftCols(classes));
    softmax_rows(*probs);
    M out = M::Zero(1, 1);
    if (per_row_ce) per_row_ce->assign(targets.size(), T(0));
    for (std::size_t i = 0; i < targets.size(); ++i) {
      if (weights[i] == T(0)) continue;
      if (targets[i] < 0 || targets[i] >= classes) throw std::out_of_range("softmax_xent: target out of range");
      const Eigen::Index r = static_cast<Eigen::Index>(i);
      // log-softmax computed directly for accuracy
      const T mx = x.row(r).head(classes).maxCoeff();
      const T lse = mx + std::log((x.row(r).head(classes).array() - mx).exp().sum());
      const T ce = lse - x(r, targets[i]);
      if (per_row_ce) (*per_row_ce)[i] = ce;
      out(0, 0) += weights[i] * ce;
    }
    return op(std::move(out), {logits},
              [this, logits, probs, targets = std::move(targets), weights = std::move(weights), classes](const M& g) {
                M& gl = grad_of(logits);
                for (std::size_t i = 0; i < targets.size(); ++i) {
                  if (weights[i] == T(0)) continue;
                  const Eigen::Index r = static_cast<Eigen::Index>(i);
                  const T w = weights[i] * g(0, 0);
                  gl.row(r).head(classes) += w * probs->row(r);
                  gl(r, targets[i]) -= w;
                }
              });
  }

  /// Cosine embedding loss between two row vectors: 1 - cos for y = +1 and
  /// max(0, cos - margin) for y = -1.
  Var cosine_embedding_loss(Var a, Var b, int y, T margin) {
    const M& x1 = value(a);
    const M& x2 = value(b);
    const T n1 = x1.norm(), n2 = x2.norm();
    if (n1 == T(0) || n2 == T(0)) throw std::domain_error("cosine of a zero vector");
    const T cos = x1.cwiseProduct(x2).sum() / (n1 * n2);
    T slope;  // d loss / d cos
    M out(1, 1);
    if (y == 1) {
      out(0, 0) = T(1) - cos;
      slope = T(-1);
    } else if (y == -1) {
      out(0, 0) = std::max(T(0), cos - margin);
      slope = cos > margin ? T(1) : T(0);
    } else {
      throw std::invalid_argument("cosine_embedding_loss: label must be +1 or -1");
    }
    return op(std::move(out), {a, b}, [this, a, b, cos, n1, n2, slope](const M& g) {
      const T s = slope * g(0, 0);
      if (s == T(0)) return;
      const M& u = value(a);
      const M& w = value(b);
      if (wants(a)) acc(a, s * (w / (n1 * n2) - cos * u / (n1 * n1)));
      if (wants(b)) acc(b, s * (u / (n1 * n2) - cos * w / (n2 * n2)));
    });
  }

  // -- backward --------------------------------------------------------------

  /// Seeds d(root)/d(root) = 1 and runs every recorded closure in reverse.
  /// Parameter leaves add into their Tensor's grad.
  void backward(Var root) {
    if (value(root).size() != 1) throw std::invalid_argument("backward: root must be a scalar");
    grad_of(root).setOnes();
    for (std::size_t i = root.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.grad.size() == 0) continue;
      if (n.param) {
        if (!n.grad.allFinite()) throw NonFiniteGradient(n.param->name);
        if (n.param->grad.size() == 0) n.param->zero_grad();
        n.param->grad += n.grad;
      } else if (n.backward) {
        n.backward(n.grad);
      }
      n.grad.resize(0, 0);
    }
  }

  static void softmax_rows(M& m) {
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
      const T mx = m.row(r).maxCoeff();
      m.row(r) = (m.row(r).array() - mx).exp();
      m.row(r) /= m.row(r).sum();
    }
  }

 private:
  struct Node {
    M value;
    const M* ext = nullptr;
    Tensor<T>* param = nullptr;
    M grad;
    std::function<void(const M&)> backward;
    bool requires_grad = false;
    const M& get() const { return ext ? *ext : value; }
  };

  static T phi(T v) { return T(0.5) * (T(1) + std::erf(v / std::sqrt(T(2)))); }

  Var push(M m, bool requires_grad) {
    Node n;
    n.value = std::move(m);
    n.requires_grad = requires_grad;
    nodes_.push_back(std::move(n));
    return Var{nodes_.size() - 1};
  }

  Var op(M out, const std::vector<Var>& inputs, std::function<void(const M&)> back) {
    bool rg = false;
    for (Var v : inputs) rg = rg || nodes_[v.id].requires_grad;
    Var o = push(std::move(out), rg);
    if (rg) nodes_[o.id].backward = std::move(back);
    return o;
  }

  bool wants(Var v) const { return nodes_[v.id].requires_grad; }

  M& grad_of(Var v) {
    Node& n = nodes_[v.id];
    if (n.grad.size() == 0) n.grad = M::Zero(n.get().rows(), n.get().cols());
    return n.grad;
  }

  template <class E>
  void acc(Var v, const E& g) {
    if (!wants(v)) return;
    grad_of(v) += g;
  }

  void check_same(Var a, Var b, const char* what) const {
    if (value(a).rows() != value(b).rows() || value(a).cols() != value(b).cols())
      throw std::invalid_argument(std::string(what) + ": shape mismatch");
  }

  std::deque<Node> nodes_;
};

}  // namespace semtrace::nn
