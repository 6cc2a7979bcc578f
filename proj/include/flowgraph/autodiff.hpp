#pragma once

// Tape-based reverse-mode differentiation over dense row-major matrices.
//
// Every value is a rows x cols block of doubles. Ops append a node holding the
// forward value and a closure that scatters the node's gradient into its
// inputs. Tape::backward walks nodes in reverse creation order.

#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "flowgraph/error.hpp"
#include "flowgraph/rng.hpp"

namespace flowgraph::ad {

class Tape;

struct Var {
  Tape* tape = nullptr;
  int id = -1;
  bool valid() const noexcept { return tape != nullptr && id >= 0; }
};

class Tape {
 public:
  struct Node {
    int rows = 0, cols = 0;
    std::vector<double> value;
    std::vector<double> grad;
    bool requires_grad = false;
    std::function<void(Tape&, int)> backward;
  };

  explicit Tape(bool recording = true) : recording_(recording) { nodes_.reserve(256); }

  bool recording() const noexcept { return recording_; }

  Var constant(int rows, int cols, std::vector<double> value) { return leaf(rows, cols, std::move(value), false); }

  Var leaf(int rows, int cols, std::vector<double> value, bool requires_grad) {
    require(static_cast<std::size_t>(rows) * cols == value.size(), "Tape::leaf: shape does not match data");
    Node n;
    n.rows = rows;
    n.cols = cols;
    n.value = std::move(value);
    n.requires_grad = requires_grad && recording_;
    nodes_.push_back(std::move(n));
    return Var{this, static_cast<int>(nodes_.size()) - 1};
  }

  // Appends an op result. `backward` is dropped when no input needs a gradient.
  Var op(int rows, int cols, std::vector<double> value, bool requires_grad,
         std::function<void(Tape&, int)> backward) {
    Node n;
    n.rows = rows;
    n.cols = cols;
    n.value = std::move(value);
    n.requires_grad = requires_grad && recording_;
    if (n.requires_grad) n.backward = std::move(backward);
    nodes_.push_back(std::move(n));
    return Var{this, static_cast<int>(nodes_.size()) - 1};
  }

  Node& node(int id) { return nodes_[id]; }
  const Node& node(int id) const { return nodes_[id]; }
  Node& node(Var v) { return nodes_[v.id]; }
  const Node& node(Var v) const { return nodes_[v.id]; }

  const std::vector<double>& value(Var v) const { return nodes_[v.id].value; }
  int rows(Var v) const { return nodes_[v.id].rows; }
  int cols(Var v) const { return nodes_[v.id].cols; }
  bool requires_grad(Var v) const { return nodes_[v.id].requires_grad; }

  // Gradient buffer for node `id`, zero-initialized on first access.
  std::vector<double>& grad(int id) {
    Node& n = nodes_[id];
    if (n.grad.empty()) n.grad.assign(n.value.size(), 0.0);
    return n.grad;
  }
  std::vector<double>& grad(Var v) { return grad(v.id); }

  double scalar(Var v) const {
    require(nodes_[v.id].value.size() == 1, "Tape::scalar: value is not 1x1");
    return nodes_[v.id].value[0];
  }

  // Seeds d(root)/d(root) = 1 and propagates to every node created before it.
  void backward(Var root) {
    require(recording_, "Tape::backward: tape was created without recording");
    require(nodes_[root.id].value.size() == 1, "Tape::backward: root must be a scalar");
    grad(root.id)[0] += 1.0;
    for (int id = root.id; id >= 0; --id) {
      Node& n = nodes_[id];
      if (!n.requires_grad || !n.backward || n.grad.empty()) continue;
      n.backward(*this, id);
    }
  }

  std::size_t size() const noexcept { return nodes_.size(); }

 private:
  bool recording_;
  std::vector<Node> nodes_;
};

namespace detail {

inline Tape& tape_of(Var a) {
  require(a.valid(), "autodiff: invalid variable");
  return *a.tape;
}

inline void same_tape(Var a, Var b) { require(a.tape == b.tape, "autodiff: variables live on different tapes"); }

inline void same_shape(const Tape& t, Var a, Var b, const char* op) {
  if (t.rows(a) != t.rows(b) || t.cols(a) != t.cols(b))
    throw PreconditionError(std::string(op) + ": shape mismatch (" + std::to_string(t.rows(a)) + "x" +
                            std::to_string(t.cols(a)) + " vs " + std::to_string(t.rows(b)) + "x" +
                            std::to_string(t.cols(b)) + ")");
}

}  // namespace detail

// x[r x k] * w[k x c] (+ b[1 x c])
inline Var linear(Var x, Var w, Var b = {}) {
  Tape& t = detail::tape_of(x);
  detail::same_tape(x, w);
  const int r = t.rows(x), k = t.cols(x), c = t.cols(w);
  if (t.rows(w) != k)
    throw PreconditionError("linear: input width " + std::to_string(k) + " does not match weight rows " +
                            std::to_string(t.rows(w)));
  if (b.valid() && (t.rows(b) != 1 || t.cols(b) != c)) throw PreconditionError("linear: bias shape mismatch");
  std::vector<double> y(static_cast<std::size_t>(r) * c, 0.0);
  {
    const double* X = t.value(x).data();
    const double* W = t.value(w).data();
    for (int i = 0; i < r; ++i) {
      double* yi = y.data() + static_cast<std::size_t>(i) * c;
      if (b.valid()) {
        const double* B = t.value(b).data();
        for (int j = 0; j < c; ++j) yi[j] = B[j];
      }
      const double* xi = X + static_cast<std::size_t>(i) * k;
      for (int kk = 0; kk < k; ++kk) {
        const double xv = xi[kk];
        if (xv == 0.0) continue;
        const double* wk = W + static_cast<std::size_t>(kk) * c;
        for (int j = 0; j < c; ++j) yi[j] += xv * wk[j];
      }
    }
  }
  const bool rg = t.requires_grad(x) || t.requires_grad(w) || (b.valid() && t.requires_grad(b));
  const int xi_id = x.id, wi_id = w.id, bi_id = b.valid() ? b.id : -1;
  return t.op(r, c, std::move(y), rg, [=](Tape& tp, int self) {
    const std::vector<double>& dy = tp.node(self).grad;
    if (tp.node(xi_id).requires_grad) {
      std::vector<double>& dx = tp.grad(xi_id);
      const double* W = tp.node(wi_id).value.data();
      // W transposed so the inner loop is a contiguous axpy.
      std::vector<double> wt(static_cast<std::size_t>(k) * c);
      for (int kk = 0; kk < k; ++kk)
        for (int j = 0; j < c; ++j) wt[static_cast<std::size_t>(j) * k + kk] = W[static_cast<std::size_t>(kk) * c + j];
      for (int i = 0; i < r; ++i) {
        const double* dyi = dy.data() + static_cast<std::size_t>(i) * c;
        double* dxi = dx.data() + static_cast<std::size_t>(i) * k;
        for (int j = 0; j < c; ++j) {
          const double d = dyi[j];
          if (d == 0.0) continue;
          const double* wj = wt.data() + static_cast<std::size_t>(j) * k;
          for (int kk = 0; kk < k; ++kk) dxi[kk] += d * wj[kk];
        }
      }
    }
    if (tp.node(wi_id).requires_grad) {
      std::vector<double>& dw = tp.grad(wi_id);
      const double* X = tp.node(xi_id).value.data();
      for (int i = 0; i < r; ++i) {
        const double* dyi = dy.data() + static_cast<std::size_t>(i) * c;
        const double* xi = X + static_cast<std::size_t>(i) * k;
        for (int kk = 0; kk < k; ++kk) {
          const double xv = xi[kk];
          if (xv == 0.0) continue;
          double* dwk = dw.data() + static_cast<std::size_t>(kk) * c;
          for (int j = 0; j < c; ++j) dwk[j] += xv * dyi[j];
        }
      }
    }
    if (bi_id >= 0 && tp.node(bi_id).requires_grad) {
      std::vector<double>& db = tp.grad(bi_id);
      for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) db[j] += dy[static_cast<std::size_t>(i) * c + j];
    }
  });
}

inline Var add(Var a, Var b) {
  Tape& t = detail::tape_of(a);
  detail::same_tape(a, b);
  detail::same_shape(t, a, b, "add");
  std::vector<double> y = t.value(a);
  const std::vector<double>& bv = t.value(b);
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += bv[i];
  const int ai = a.id, bi = b.id;
  return t.op(t.rows(a), t.cols(a), std::move(y), t.requires_grad(a) || t.requires_grad(b), [=](Tape& tp, int self) {
    const std::vector<double>& dy = tp.node(self).grad;
    for (int id : {ai, bi}) {
      if (!tp.node(id).requires_grad) continue;
      std::vector<double>& g = tp.grad(id);
      for (std::size_t i = 0; i < dy.size(); ++i) g[i] += dy[i];
    }
  });
}

inline Var mul(Var a, Var b) {
  Tape& t = detail::tape_of(a);
  detail::same_tape(a, b);
  detail::same_shape(t, a, b, "mul");
  std::vector<double> y = t.value(a);
  const std::vector<double>& bv = t.value(b);
  for (std::size_t i = 0; i < y.size(); ++i) y[i] *= bv[i];
  const int ai = a.id, bi = b.id;
  return t.op(t.rows(a), t.cols(a), std::move(y), t.requires_grad(a) || t.requires_grad(b), [=](Tape& tp, int self) {
    const std::vector<double>& dy = tp.node(self).grad;
    if (tp.node(ai).requires_grad) {
      std::vector<double>& g = tp.grad(ai);
      const std::vector<double>& o = tp.node(bi).value;
      for (std::size_t i = 0; i < dy.size(); ++i) g[i] += dy[i] * o[i];
    }
    if (tp.node(bi).requires_grad) {
      std::vector<double>& g = tp.grad(bi);
      const std::vector<double>& o = tp.node(ai).value;
      for (std::size_t i = 0; i < dy.size(); ++i) g[i] += dy[i] * o[i];
    }
  });
}

// a * s + c elementwise
inline Var affine_scalar(Var a, double s, double c) {
  Tape& t = detail::tape_of(a);
  std::vector<double> y = t.value(a);
  for (double& v : y) v = v * s + c;
  const int ai = a.id;
  return t.op(t.rows(a), t.cols(a), std::move(y), t.requires_grad(a), [=](Tape& tp, int self) {
    const std::vector<double>& dy = tp.node(self).grad;
    std::vector<double>& g = tp.grad(ai);
    for (std::size_t i = 0; i < dy.size(); ++i) g[i] += dy[i] * s;
  });
}

// a[r x c] (op) row[1 x c] broadcast over rows; multiply when `multiply` else add.
inline Var broadcast_row(Var a, Var row, bool multiply) {
  Tape& t = detail::tape_of(a);
  detail::same_tape(a, row);
  const int r = t.rows(a), c = t.cols(a);
  if (t.rows(row) != 1 || t.cols(row) != c) throw PreconditionError("broadcast_row: row shape mismatch");
  std::vector<double> y = t.value(a);
  const std::vector<double>& rv = t.value(row);
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) {
      double& v = y[static_cast<std::size_t>(i) * c + j];
      v = multiply ? v * rv[j] : v + rv[j];
    }
  const int ai = a.id, ri = row.id;
  return t.op(r, c, std::move(y), t.requires_grad(a) || t.requires_grad(row), [=](Tape& tp, int self) {
    const std::vector<double>& dy = tp.node(self).grad;
    if (tp.node(ai).requires_grad) {
      std::vector<double>& g = tp.grad(ai);
      const std::vector<double>& rvv = tp.node(ri).value;
      for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) {
          const std::size_t idx = static_cast<std::size_t>(i) * c + j;
          g[idx] += multiply ? dy[idx] * rvv[j] : dy[idx];
        }
    }
    if (tp.node(ri).requires_grad) {
      std::vector<double>& g = tp.grad(ri);
      const std::vector<double>& av = tp.node(ai).value;
      for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) {
          const std::size_t idx = static_cast<std::size_t>(i) * c + j;
          g[j] += multiply ? dy[idx] * av[idx] : dy[idx];
        }
    }
  });
}

inline Var mul_row(Var a, Var row) { return broadcast_row(a, row, true); }
inline Var add_row(Var a, Var row) { return broadcast_row(a, row, false); }

inline Var relu(Var a) {
  Tape& t = detail::tape_of(a);
  std::vector<double> y = t.value(a);
  for (double& v : y) v = v > 0.0 ? v : 0.0;
  const int ai = a.id;
  return t.op(t.rows(a), t.cols(a), std::move(y), t.requires_grad(a), [=](Tape& tp, int self) {
    const std::vector<double>& dy = tp.node(self).grad;
    const std::vector<double>& x = tp.node(ai).value;
    std::vector<double>& g = tp.grad(ai);
    for (std::size_t i = 0; i < dy.size(); ++i)
      if (x[i] > 0.0) g[i] += dy[i];
  });
}

inline Var sigmoid(Var a) {
  Tape& t = detail::tape_of(a);
  std::vector<double> y = t.value(a);
  for (double& v : y) v = 1.0 / (1.0 + std::exp(-v));
  const int ai = a.id;
  return t.op(t.rows(a), t.cols(a), std::move(y), t.requires_grad(a), [=](Tape& tp, int self) {
    const std::vector<double>& dy = tp.node(self).grad;
    const std::vector<double>& s = tp.node(self).value;
    std::vector<double>& g = tp.grad(ai);
    for (std::size_t i = 0; i < dy.size(); ++i) g[i] += dy[i] * s[i] * (1.0 - s[i]);
  });
}

/// Row-wise layer normalization with learned gain and offset (both 1 x c).
inline Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-5) {
  Tape& t = detail::tape_of(x);
  const int r = t.rows(x), c = t.cols(x);
  if (t.cols(gamma) != c || t.cols(beta) != c || t.rows(gamma) != 1 || t.rows(beta) != 1)
    throw PreconditionError("layer_norm: gamma/beta shape mismatch");
  const std::vector<double>& xv = t.value(x);
  const std::vector<double>& gv = t.value(gamma);
  const std::vector<double>& bv = t.value(beta);
  std::vector<double> y(xv.size());
  std::vector<double> xhat(xv.size());
  std::vector<double> inv_std(r);
  for (int i = 0; i < r; ++i) {
    const double* xi = xv.data() + static_cast<std::size_t>(i) * c;
    double mean = 0.0;
    for (int j = 0; j < c; ++j) mean += xi[j];
    mean /= c;
    double var = 0.0;
    for (int j = 0; j < c; ++j) var += (xi[j] - mean) * (xi[j] - mean);
    var /= c;
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[i] = is;
    for (int j = 0; j < c; ++j) {
      const std::size_t idx = static_cast<std::size_t>(i) * c + j;
      xhat[idx] = (xi[j] - mean) * is;
      y[idx] = xhat[idx] * gv[j] + bv[j];
    }
  }
  const int xi_id = x.id, gi = gamma.id, bi = beta.id;
  const bool rg = t.requires_grad(x) || t.requires_grad(gamma) || t.requires_grad(beta);
  return t.op(r, c, std::move(y), rg,
              [=, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape& tp, int self) {
                const std::vector<double>& dy = tp.node(self).grad;
                const std::vector<double>& g = tp.node(gi).value;
                if (tp.node(gi).requires_grad) {
                  std::vector<double>& dg = tp.grad(gi);
                  for (std::size_t idx = 0; idx < dy.size(); ++idx) dg[idx % c] += dy[idx] * xhat[idx];
                }
                if (tp.node(bi).requires_grad) {
                  std::vector<double>& db = tp.grad(bi);
                  for (std::size_t idx = 0; idx < dy.size(); ++idx) db[idx % c] += dy[idx];
                }
                if (tp.node(xi_id).requires_grad) {
                  std::vector<double>& dx = tp.grad(xi_id);
                  for (int i = 0; i < r; ++i) {
                    const std::size_t o = static_cast<std::size_t>(i) * c;
                    double sum_d = 0.0, sum_dx = 0.0;
                    for (int j = 0; j < c; ++j) {
                      const double d = dy[o + j] * g[j];
                      sum_d += d;
                      sum_dx += d * xhat[o + j];
                    }
                    for (int j = 0; j < c; ++j) {
                      const double d = dy[o + j] * g[j];
                      dx[o + j] += inv_std[i] * (d - sum_d / c - xhat[o + j] * sum_dx / c);
                    }
                  }
                }
              });
}

/// Inverted dropout; identity when rate == 0.
inline Var dropout(Var x, double rate, Rng& rng) {
  if (rate <= 0.0) return x;
  Tape& t = detail::tape_of(x);
  std::vector<double> mask(t.value(x).size());
  const double keep = 1.0 - rate;
  for (double& m : mask) m = rng.uniform() < keep ? 1.0 / keep : 0.0;
  std::vector<double> y = t.value(x);
  for (std::size_t i = 0; i < y.size(); ++i) y[i] *= mask[i];
  const int xi = x.id;
  return t.op(t.rows(x), t.cols(x), std::move(y), t.requires_grad(x),
              [=, mask = std::move(mask)](Tape& tp, int self) {
                const std::vector<double>& dy = tp.node(self).grad;
                std::vector<double>& g = tp.grad(xi);
                for (std::size_t i = 0; i < dy.size(); ++i) g[i] += dy[i] * mask[i];
              });
}

/// Per-head scaled dot products between node rows.
/// q, k: N x C with C split into `heads` contiguous blocks. Output N*N x heads,
/// row i*N+j holds <q_i^h, k_j^h> / sqrt(C/heads).
inline Var head_scores(Var q, Var k, int heads) {
  Tape& t = detail::tape_of(q);
  detail::same_shape(t, q, k, "head_scores");
  const int N = t.rows(q), C = t.cols(q);
  require(heads > 0 && C % heads == 0, "head_scores: width not divisible by heads");
  const int dh = C / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const std::vector<double>& Q = t.value(q);
  const std::vector<double>& K = t.value(k);
  std::vector<double> y(static_cast<std::size_t>(N) * N * heads, 0.0);
  for (int i = 0; i < N; ++i)
    for (int j = 0; j < N; ++j)
      for (int h = 0; h < heads; ++h) {
        double s = 0.0;
        const double* qi = Q.data() + static_cast<std::size_t>(i) * C + h * dh;
        const double* kj = K.data() + static_cast<std::size_t>(j) * C + h * dh;
        for (int c = 0; c < dh; ++c) s += qi[c] * kj[c];
        y[(static_cast<std::size_t>(i) * N + j) * heads + h] = s * scale;
      }
  const int qi_id = q.id, ki_id = k.id;
  return t.op(N * N, heads, std::move(y), t.requires_grad(q) || t.requires_grad(k), [=](Tape& tp, int self) {
    const std::vector<double>& dy = tp.node(self).grad;
    const std::vector<double>& Qv = tp.node(qi_id).value;
    const std::vector<double>& Kv = tp.node(ki_id).value;
    const bool gq = tp.node(qi_id).requires_grad, gk = tp.node(ki_id).requires_grad;
    std::vector<double>* dq = gq ? &tp.grad(qi_id) : nullptr;
    std::vector<double>* dk = gk ? &tp.grad(ki_id) : nullptr;
    for (int i = 0; i < N; ++i)
      for (int j = 0; j < N; ++j)
        for (int h = 0; h < heads; ++h) {
          const double d = dy[(static_cast<std::size_t>(i) * N + j) * heads + h] * scale;
          if (d == 0.0) continue;
          const std::size_t oi = static_cast<std::size_t>(i) * C + h * dh;
          const std::size_t oj = static_cast<std::size_t>(j) * C + h * dh;
          for (int c = 0; c < dh; ++c) {
            if (gq) (*dq)[oi + c] += d * Kv[oj + c];
            if (gk) (*dk)[oj + c] += d * Qv[oi + c];
          }
        }
  });
}

/// Softmax over keys j for each (query i, head h) of an N*N x H score block.
/// Keys with mask[j] == 0 receive probability 0.
inline Var masked_softmax_keys(Var scores, std::span<const char> mask, bool apply_softmax = true) {
  Tape& t = detail::tape_of(scores);
  const int N = static_cast<int>(mask.size()), H = t.cols(scores);
  require(t.rows(scores) == N * N, "masked_softmax_keys: score rows must be N*N");
  const std::vector<double>& s = t.value(scores);
  std::vector<double> y(s.size(), 0.0);
  std::vector<char> m(mask.begin(), mask.end());
  for (int i = 0; i < N; ++i)
    for (int h = 0; h < H; ++h) {
      if (!apply_softmax) {
        for (int j = 0; j < N; ++j) {
          const std::size_t idx = (static_cast<std::size_t>(i) * N + j) * H + h;
          y[idx] = m[j] ? s[idx] : 0.0;
        }
        continue;
      }
      double mx = -std::numeric_limits<double>::infinity();
      for (int j = 0; j < N; ++j)
        if (m[j]) mx = std::max(mx, s[(static_cast<std::size_t>(i) * N + j) * H + h]);
      if (!std::isfinite(mx)) continue;
      double z = 0.0;
      for (int j = 0; j < N; ++j) {
        if (!m[j]) continue;
        const std::size_t idx = (static_cast<std::size_t>(i) * N + j) * H + h;
        y[idx] = std::exp(s[idx] - mx);
        z += y[idx];
      }
      for (int j = 0; j < N; ++j)
        if (m[j]) y[(static_cast<std::size_t>(i) * N + j) * H + h] /= z;
    }
  const int si = scores.id;
  return t.op(N * N, H, std::move(y), t.requires_grad(scores), [=, m = std::move(m)](Tape& tp, int self) {
    const std::vector<double>& dy = tp.node(self).grad;
    const std::vector<double>& p = tp.node(self).value;
    std::vector<double>& g = tp.grad(si);
    for (int i = 0; i < N; ++i)
      for (int h = 0; h < H; ++h) {
        if (!apply_softmax) {
          for (int j = 0; j < N; ++j) {
            const std::size_t idx = (static_cast<std::size_t>(i) * N + j) * H + h;
            if (m[j]) g[idx] += dy[idx];
          }
          continue;
        }
        double dot = 0.0;
        for (int j = 0; j < N; ++j) {
          const std::size_t idx = (static_cast<std::size_t>(i) * N + j) * H + h;
          if (m[j]) dot += dy[idx] * p[idx];
        }
        for (int j = 0; j < N; ++j) {
          const std::size_t idx = (static_cast<std::size_t>(i) * N + j) * H + h;
          if (m[j]) g[idx] += p[idx] * (dy[idx] - dot);
        }
      }
  });
}

/// out[i, c] = sum_j attn[(i,j), head(c)] * v[j, c]; v is N x C, attn N*N x H.
inline Var aggregate_values(Var attn, Var v) {
  Tape& t = detail::tape_of(attn);
  detail::same_tape(attn, v);
  const int N = t.rows(v), C = t.cols(v), H = t.cols(attn);
  require(t.rows(attn) == N * N, "aggregate_values: attention rows must be N*N");
  require(C % H == 0, "aggregate_values: width not divisible by heads");
  const int dh = C / H;
  const std::vector<double>& A = t.value(attn);
  const std::vector<double>& V = t.value(v);
  std::vector<double> y(static_cast<std::size_t>(N) * C, 0.0);
  for (int i = 0; i < N; ++i)
    for (int j = 0; j < N; ++j)
      for (int h = 0; h < H; ++h) {
        const double a = A[(static_cast<std::size_t>(i) * N + j) * H + h];
        if (a == 0.0) continue;
        double* yi = y.data() + static_cast<std::size_t>(i) * C + h * dh;
        const double* vj = V.data() + static_cast<std::size_t>(j) * C + h * dh;
        for (int c = 0; c < dh; ++c) yi[c] += a * vj[c];
      }
  const int ai = attn.id, vi = v.id;
  return t.op(N, C, std::move(y), t.requires_grad(attn) || t.requires_grad(v), [=](Tape& tp, int self) {
    const std::vector<double>& dy = tp.node(self).grad;
    const std::vector<double>& Av = tp.node(ai).value;
    const std::vector<double>& Vv = tp.node(vi).value;
    const bool ga = tp.node(ai).requires_grad, gv = tp.node(vi).requires_grad;
    std::vector<double>* da = ga ? &tp.grad(ai) : nullptr;
    std::vector<double>* dv = gv ? &tp.grad(vi) : nullptr;
    for (int i = 0; i < N; ++i)
      for (int j = 0; j < N; ++j)
        for (int h = 0; h < H; ++h) {
          const std::size_t aidx = (static_cast<std::size_t>(i) * N + j) * H + h;
          const double* dyi = dy.data() + static_cast<std::size_t>(i) * C + h * dh;
          const std::size_t vo = static_cast<std::size_t>(j) * C + h * dh;
          if (ga) {
            double s = 0.0;
            for (int c = 0; c < dh; ++c) s += dyi[c] * Vv[vo + c];
            (*da)[aidx] += s;
          }
          if (gv) {
            const double a = Av[aidx];
            if (a == 0.0) continue;
            for (int c = 0; c < dh; ++c) (*dv)[vo + c] += a * dyi[c];
          }
        }
  });
}

/// Triangle contraction over an intermediate node:
/// out[(i,j), h] = sum_{k : mask[k]} <qe[(i,k)]^h, ke[(k,j)]^h> / sqrt(C/H).
/// qe, ke: N*N x C.
inline Var triangle_scores(Var qe, Var ke, int heads, std::span<const char> mask) {
  Tape& t = detail::tape_of(qe);
  detail::same_shape(t, qe, ke, "triangle_scores");
  const int N = static_cast<int>(mask.size()), C = t.cols(qe);
  require(t.rows(qe) == N * N, "triangle_scores: rows must be N*N");
  require(heads > 0 && C % heads == 0, "triangle_scores: width not divisible by heads");
  const int dh = C / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const std::vector<double>& Qe = t.value(qe);
  const std::vector<double>& Ke = t.value(ke);
  std::vector<char> m(mask.begin(), mask.end());
  std::vector<double> y(static_cast<std::size_t>(N) * N * heads, 0.0);
  std::vector<double> acc(C);
  for (int i = 0; i < N; ++i)
    for (int j = 0; j < N; ++j) {
      std::fill(acc.begin(), acc.end(), 0.0);
      for (int k = 0; k < N; ++k) {
        if (!m[k]) continue;
        const double* a = Qe.data() + (static_cast<std::size_t>(i) * N + k) * C;
        const double* b = Ke.data() + (static_cast<std::size_t>(k) * N + j) * C;
        for (int c = 0; c < C; ++c) acc[c] += a[c] * b[c];
      }
      double* yo = y.data() + (static_cast<std::size_t>(i) * N + j) * heads;
      for (int h = 0; h < heads; ++h) {
        double s = 0.0;
        for (int c = h * dh; c < (h + 1) * dh; ++c) s += acc[c];
        yo[h] = s * scale;
      }
    }
  const int qi = qe.id, ki = ke.id;
  return t.op(N * N, heads, std::move(y), t.requires_grad(qe) || t.requires_grad(ke),
              [=, m = std::move(m)](Tape& tp, int self) {
                const std::vector<double>& dy = tp.node(self).grad;
                const std::vector<double>& Qv = tp.node(qi).value;
                const std::vector<double>& Kv = tp.node(ki).value;
                const bool gq = tp.node(qi).requires_grad, gk = tp.node(ki).requires_grad;
                std::vector<double>* dq = gq ? &tp.grad(qi) : nullptr;
                std::vector<double>* dk = gk ? &tp.grad(ki) : nullptr;
                std::vector<double> dexp(C);
                for (int i = 0; i < N; ++i)
                  for (int j = 0; j < N; ++j) {
                    const double* d = dy.data() + (static_cast<std::size_t>(i) * N + j) * heads;
                    bool any = false;
                    for (int c = 0; c < C; ++c) {
                      dexp[c] = d[c / dh] * scale;
                      any |= dexp[c] != 0.0;
                    }
                    if (!any) continue;
                    for (int k = 0; k < N; ++k) {
                      if (!m[k]) continue;
                      const std::size_t ao = (static_cast<std::size_t>(i) * N + k) * C;
                      const std::size_t bo = (static_cast<std::size_t>(k) * N + j) * C;
                      if (gq)
                        for (int c = 0; c < C; ++c) (*dq)[ao + c] += dexp[c] * Kv[bo + c];
                      if (gk)
                        for (int c = 0; c < C; ++c) (*dk)[bo + c] += dexp[c] * Qv[ao + c];
                    }
                  }
              });
}

// out[r, c] = x[r, c / (C/H)] for x of width H.
inline Var expand_heads(Var x, int width) {
  Tape& t = detail::tape_of(x);
  const int R = t.rows(x), H = t.cols(x);
  require(width % H == 0, "expand_heads: width not divisible by heads");
  const int dh = width / H;
  const std::vector<double>& xv = t.value(x);
  std::vector<double> y(static_cast<std::size_t>(R) * width);
  for (int r = 0; r < R; ++r)
    for (int c = 0; c < width; ++c) y[static_cast<std::size_t>(r) * width + c] = xv[static_cast<std::size_t>(r) * H + c / dh];
  const int xi = x.id;
  return t.op(R, width, std::move(y), t.requires_grad(x), [=](Tape& tp, int self) {
    const std::vector<double>& dy = tp.node(self).grad;
    std::vector<double>& g = tp.grad(xi);
    for (int r = 0; r < R; ++r)
      for (int c = 0; c < width; ++c) g[static_cast<std::size_t>(r) * H + c / dh] += dy[static_cast<std::size_t>(r) * width + c];
  });
}

/// Pooled statistics over the rows with row_mask != 0: [max | min | mean | std]
/// (population std), output 1 x 4C.
inline Var pool_stats(Var x, std::span<const char> row_mask) {
  Tape& t = detail::tape_of(x);
  const int R = t.rows(x), C = t.cols(x);
  require(static_cast<int>(row_mask.size()) == R, "pool_stats: mask length must equal row count");
  std::vector<int> rows;
  for (int r = 0; r < R; ++r)
    if (row_mask[r]) rows.push_back(r);
  if (rows.empty()) throw PreconditionError("pool_stats: empty set after masking");
  const std::vector<double>& xv = t.value(x);
  const double cnt = static_cast<double>(rows.size());
  std::vector<double> y(4 * static_cast<std::size_t>(C));
  std::vector<int> argmax(C), argmin(C);
  for (int c = 0; c < C; ++c) {
    double mx = -std::numeric_limits<double>::infinity(), mn = std::numeric_limits<double>::infinity(), s = 0.0;
    for (int r : rows) {
      const double v = xv[static_cast<std::size_t>(r) * C + c];
      if (v > mx) {
        mx = v;
        argmax[c] = r;
      }
      if (v < mn) {
        mn = v;
        argmin[c] = r;
      }
      s += v;
    }
    const double mean = s / cnt;
    double var = 0.0;
    for (int r : rows) {
      const double d = xv[static_cast<std::size_t>(r) * C + c] - mean;
      var += d * d;
    }
    var /= cnt;
    y[c] = mx;
    y[C + c] = mn;
    y[2 * C + c] = mean;
    y[3 * C + c] = std::sqrt(var);
  }
  const int xi = x.id;
  return t.op(1, 4 * C, std::move(y), t.requires_grad(x),
              [=, rows = std::move(rows), argmax = std::move(argmax), argmin = std::move(argmin)](Tape& tp, int self) {
                const std::vector<double>& dy = tp.node(self).grad;
                const std::vector<double>& out = tp.node(self).value;
                const std::vector<double>& xv2 = tp.node(xi).value;
                std::vector<double>& g = tp.grad(xi);
                for (int c = 0; c < C; ++c) {
                  g[static_cast<std::size_t>(argmax[c]) * C + c] += dy[c];
                  g[static_cast<std::size_t>(argmin[c]) * C + c] += dy[C + c];
                  const double mean = out[2 * C + c], sd = out[3 * C + c];
                  const double dstd = sd > 0.0 ? dy[3 * C + c] / (cnt * sd) : 0.0;
                  for (int r : rows) {
                    const std::size_t idx = static_cast<std::size_t>(r) * C + c;
                    g[idx] += dy[2 * C + c] / cnt + dstd * (xv2[idx] - mean);
                  }
                }
              });
}

// out[(i,j)] = (x[(i,j)] + x[(j,i)]) / 2 for an N*N x C block.
inline Var symmetrize_pairs(Var x, int N) {
  Tape& t = detail::tape_of(x);
  const int C = t.cols(x);
  require(t.rows(x) == N * N, "symmetrize_pairs: rows must be N*N");
  const std::vector<double>& xv = t.value(x);
  std::vector<double> y(xv.size());
  for (int i = 0; i < N; ++i)
    for (int j = 0; j < N; ++j)
      for (int c = 0; c < C; ++c)
        y[(static_cast<std::size_t>(i) * N + j) * C + c] =
            0.5 * (xv[(static_cast<std::size_t>(i) * N + j) * C + c] + xv[(static_cast<std::size_t>(j) * N + i) * C + c]);
  const int xi = x.id;
  return t.op(N * N, C, std::move(y), t.requires_grad(x), [=](Tape& tp, int self) {
    const std::vector<double>& dy = tp.node(self).grad;
    std::vector<double>& g = tp.grad(xi);
    for (int i = 0; i < N; ++i)
      for (int j = 0; j < N; ++j)
        for (int c = 0; c < C; ++c) {
          const double d = 0.5 * dy[(static_cast<std::size_t>(i) * N + j) * C + c];
          g[(static_cast<std::size_t>(i) * N + j) * C + c] += d;
          g[(static_cast<std::size_t>(j) * N + i) * C + c] += d;
        }
  });
}

// Row-wise log-softmax of a plain buffer.
inline std::vector<double> log_softmax_rows(std::span<const double> logits, int rows, int cols) {
  std::vector<double> out(logits.size());
  for (int r = 0; r < rows; ++r) {
    const double* l = logits.data() + static_cast<std::size_t>(r) * cols;
    double mx = -std::numeric_limits<double>::infinity();
    for (int c = 0; c < cols; ++c) mx = std::max(mx, l[c]);
    double z = 0.0;
    for (int c = 0; c < cols; ++c) z += std::exp(l[c] - mx);
    const double lz = mx + std::log(z);
    for (int c = 0; c < cols; ++c) out[static_cast<std::size_t>(r) * cols + c] = l[c] - lz;
  }
  return out;
}

/// sum_r weight[r] * log softmax(logits_r)[target[r]] as a 1x1 value.
/// Rows with weight 0 are skipped entirely.
inline Var weighted_log_likelihood(Var logits, std::span<const int> targets, std::span<const double> weights) {
  Tape& t = detail::tape_of(logits);
  const int R = t.rows(logits), C = t.cols(logits);
  require(static_cast<int>(targets.size()) == R && static_cast<int>(weights.size()) == R,
          "weighted_log_likelihood: target/weight length mismatch");
  const std::vector<double> ls = log_softmax_rows(t.value(logits), R, C);
  double total = 0.0;
  for (int r = 0; r < R; ++r) {
    if (weights[r] == 0.0) continue;
    require(targets[r] >= 0 && targets[r] < C, "weighted_log_likelihood: target out of range");
    total += weights[r] * ls[static_cast<std::size_t>(r) * C + targets[r]];
  }
  const int li = logits.id;
  std::vector<int> tg(targets.begin(), targets.end());
  std::vector<double> w(weights.begin(), weights.end());
  return t.op(1, 1, {total}, t.requires_grad(logits),
              [=, tg = std::move(tg), w = std::move(w), ls = std::move(ls)](Tape& tp, int self) {
                const double d = tp.node(self).grad[0];
                std::vector<double>& g = tp.grad(li);
                for (int r = 0; r < R; ++r) {
                  if (w[r] == 0.0) continue;
                  for (int c = 0; c < C; ++c) {
                    const std::size_t idx = static_cast<std::size_t>(r) * C + c;
                    g[idx] += d * w[r] * ((c == tg[r] ? 1.0 : 0.0) - std::exp(ls[idx]));
                  }
                }
              });
}

/// sum_r weight[r] * KL(softmax(logits_r) || softmax(ref_logits_r)); ref is a constant.
inline Var weighted_kl(Var logits, std::span<const double> ref_logits, std::span<const double> weights) {
  Tape& t = detail::tape_of(logits);
  const int R = t.rows(logits), C = t.cols(logits);
  require(ref_logits.size() == static_cast<std::size_t>(R) * C && static_cast<int>(weights.size()) == R,
          "weighted_kl: shape mismatch");
  const std::vector<double> lp = log_softmax_rows(t.value(logits), R, C);
  const std::vector<double> lq = log_softmax_rows(ref_logits, R, C);
  double total = 0.0;
  std::vector<double> row_kl(R, 0.0);
  for (int r = 0; r < R; ++r) {
    if (weights[r] == 0.0) continue;
    double kl = 0.0;
    for (int c = 0; c < C; ++c) {
      const std::size_t idx = static_cast<std::size_t>(r) * C + c;
      kl += std::exp(lp[idx]) * (lp[idx] - lq[idx]);
    }
    row_kl[r] = kl;
    total += weights[r] * kl;
  }
  const int li = logits.id;
  std::vector<double> w(weights.begin(), weights.end());
  return t.op(1, 1, {total}, t.requires_grad(logits),
              [=, w = std::move(w), lp = std::move(lp), lq = std::move(lq), row_kl = std::move(row_kl)](Tape& tp,
                                                                                                       int self) {
                const double d = tp.node(self).grad[0];
                std::vector<double>& g = tp.grad(li);
                // dKL/dz_c = p_c * ((log p_c - log q_c) - KL)
                for (int r = 0; r < R; ++r) {
                  if (w[r] == 0.0) continue;
                  for (int c = 0; c < C; ++c) {
                    const std::size_t idx = static_cast<std::size_t>(r) * C + c;
                    g[idx] += d * w[r] * std::exp(lp[idx]) * ((lp[idx] - lq[idx]) - row_kl[r]);
                  }
                }
              });
}

// sum_k a[k] * w[k] as a 1x1 value.
inline Var weighted_sum(Var a, std::vector<double> w) {
  Tape& t = detail::tape_of(a);
  require(w.size() == t.value(a).size(), "weighted_sum: weight length mismatch");
  double s = 0.0;
  const std::vector<double>& av = t.value(a);
  for (std::size_t k = 0; k < w.size(); ++k) s += av[k] * w[k];
  const int ai = a.id;
  return t.op(1, 1, {s}, t.requires_grad(a), [=, w = std::move(w)](Tape& tp, int self) {
    const double d = tp.node(self).grad[0];
    std::vector<double>& g = tp.grad(ai);
    for (std::size_t k = 0; k < w.size(); ++k) g[k] += d * w[k];
  });
}

// a * sa + b * sb for 1x1 values.
inline Var combine_scalars(Var a, double sa, Var b, double sb) {
  Tape& t = detail::tape_of(a);
  detail::same_tape(a, b);
  require(t.value(a).size() == 1 && t.value(b).size() == 1, "combine_scalars: inputs must be 1x1");
  const int ai = a.id, bi = b.id;
  return t.op(1, 1, {t.scalar(a) * sa + t.scalar(b) * sb}, t.requires_grad(a) || t.requires_grad(b),
              [=](Tape& tp, int self) {
                const double d = tp.node(self).grad[0];
                if (tp.node(ai).requires_grad) tp.grad(ai)[0] += d * sa;
                if (tp.node(bi).requires_grad) tp.grad(bi)[0] += d * sb;
              });
}

}  // namespace flowgraph::ad
