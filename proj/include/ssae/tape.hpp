#pragma once

// Reverse-mode autodiff over a per-example tape. Values are computed
// eagerly as nodes are appended; backward() walks the tape in reverse.
// Parameter leaves reference external tensors, so building a graph never
// copies weights; their gradients land in node-local buffers and are
// flushed by the caller in a fixed order (that is what keeps multi-example
// batches deterministic regardless of thread count).

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <limits>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "ssae/tensor.hpp"

namespace ssae {

// ---------------------------------------------------------------------
// GEMM kernels. Row-major, accumulate into C. Loop orders are chosen so
// the inner loop runs over contiguous rows and auto-vectorizes.
// ---------------------------------------------------------------------

// C[M x N] += A[M x K] * B[K x N]
inline void gemm_nn_acc(const double* __restrict a, const double* __restrict b,
                        double* __restrict c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const double* ai = a + static_cast<std::size_t>(i) * k;
    double* ci = c + static_cast<std::size_t>(i) * n;
    for (int p = 0; p < k; ++p) {
      const double s = ai[p];
      const double* bp = b + static_cast<std::size_t>(p) * n;
      for (int j = 0; j < n; ++j) ci[j] += s * bp[j];
    }
  }
}

// C[M x N] += A[M x K] * B[N x K]^T
inline void gemm_nt_acc(const double* __restrict a, const double* __restrict b,
                        double* __restrict c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const double* ai = a + static_cast<std::size_t>(i) * k;
    double* ci = c + static_cast<std::size_t>(i) * n;
    for (int j = 0; j < n; ++j) {
      const double* bj = b + static_cast<std::size_t>(j) * k;
      double s = 0.0;
      for (int p = 0; p < k; ++p) s += ai[p] * bj[p];
      ci[j] += s;
    }
  }
}

// C[M x N] += A[K x M]^T * B[K x N]
inline void gemm_tn_acc(const double* __restrict a, const double* __restrict b,
                        double* __restrict c, int m, int k, int n) {
  for (int p = 0; p < k; ++p) {
    const double* ap = a + static_cast<std::size_t>(p) * m;
    const double* bp = b + static_cast<std::size_t>(p) * n;
    for (int i = 0; i < m; ++i) {
      const double s = ap[i];
      if (s == 0.0) continue;
      double* ci = c + static_cast<std::size_t>(i) * n;
      for (int j = 0; j < n; ++j) ci[j] += s * bp[j];
    }
  }
}

inline void axpy(double a, const double* __restrict x, double* __restrict y,
                 std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += a * x[i];
}

// ---------------------------------------------------------------------
// Named parameter store shared by models, probes and the optimizer.
// ---------------------------------------------------------------------

struct ParamStore {
  std::vector<std::string> names;
  std::vector<Tensor> values;
  std::vector<Tensor> grads;
  std::unordered_map<std::string, int> index;

  int add(const std::string& name, Tensor value) {
    if (index.count(name))
      throw std::runtime_error("ParamStore: duplicate parameter " + name);
    int id = static_cast<int>(values.size());
    index.emplace(name, id);
    names.push_back(name);
    grads.emplace_back(Tensor::zeros(value.shape));
    values.push_back(std::move(value));
    return id;
  }

  int id_of(const std::string& name) const {
    auto it = index.find(name);
    if (it == index.end())
      throw std::runtime_error("ParamStore: unknown parameter " + name);
    return it->second;
  }

  int size() const { return static_cast<int>(values.size()); }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& v : values) n += v.numel();
    return n;
  }

  void zero_grads() {
    for (auto& g : grads) std::fill(g.data.begin(), g.data.end(), 0.0);
  }
};

// ---------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------

class Tape {
 public:
  struct Node {
    Tensor owned;                 // value for computed nodes
    const Tensor* external = nullptr;  // value for parameter leaves
    Tensor grad;                  // allocated on demand in backward
    int param_id = -1;
    bool needs_grad = false;
    std::function<void(Tape&, Node&)> backward;
    std::vector<int> inputs;
    // op-specific saved state (softmax probs, norms, ...):
    Tensor saved;

    const Tensor& val() const { return external ? *external : owned; }
  };

  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}

  const Tensor& val(int id) const { return nodes_[id].val(); }
  Tensor& grad(int id) { return nodes_[id].grad; }
  const Node& node(int id) const { return nodes_[id]; }
  int size() const { return static_cast<int>(nodes_.size()); }
  bool grad_enabled() const { return grad_enabled_; }

  // --- leaves ---

  int input(Tensor v) {
    Node n;
    n.owned = std::move(v);
    n.needs_grad = false;
    return push(std::move(n));
  }

  int param(const ParamStore& store, int param_id) {
    Node n;
    n.external = &store.values[param_id];
    n.param_id = param_id;
    n.needs_grad = grad_enabled_;
    return push(std::move(n));
  }

  // --- elementwise ---

  int add(int a, int b) {
    const Tensor& ta = val(a);
    const Tensor& tb = val(b);
    require(ta.same_shape(tb), "add: shape mismatch");
    Tensor out = ta;
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] += tb.data[i];
    return unary_or_binary(std::move(out), {a, b},
                           [](Tape& t, Node& n) {
                             t.accum(n.inputs[0], n.grad.data.data(), n.grad.numel());
                             t.accum(n.inputs[1], n.grad.data.data(), n.grad.numel());
                           });
  }

  // x + constant tensor (no gradient into the constant); used for noise.
  int add_const(int x, const Tensor& c) {
    const Tensor& tx = val(x);
    require(tx.same_shape(c), "add_const: shape mismatch");
    Tensor out = tx;
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] += c.data[i];
    return unary_or_binary(std::move(out), {x}, [](Tape& t, Node& n) {
      t.accum(n.inputs[0], n.grad.data.data(), n.grad.numel());
    });
  }

  int scale(int x, double s) {
    Tensor out = val(x);
    for (double& v : out.data) v *= s;
    return unary_or_binary(std::move(out), {x}, [s](Tape& t, Node& n) {
      Node& in = t.nodes_[n.inputs[0]];
      if (!in.needs_grad) return;
      t.ensure_grad(n.inputs[0]);
      axpy(s, n.grad.data.data(), in.grad.data.data(), n.grad.numel());
    });
  }

  int relu(int x) {
    Tensor out = val(x);
    for (double& v : out.data) v = v > 0.0 ? v : 0.0;
    return unary_or_binary(std::move(out), {x}, [](Tape& t, Node& n) {
      Node& in = t.nodes_[n.inputs[0]];
      if (!in.needs_grad) return;
      t.ensure_grad(n.inputs[0]);
      const Tensor& xin = in.val();
      // subgradient 0 at exactly 0
      for (std::size_t i = 0; i < n.grad.data.size(); ++i)
        if (xin.data[i] > 0.0) in.grad.data[i] += n.grad.data[i];
    });
  }

  int gelu(int x) {
    static constexpr double kC = 0.7978845608028653558799;  // sqrt(2/pi)
    Tensor out = val(x);
    for (double& v : out.data) {
      const double u = kC * (v + 0.044715 * v * v * v);
      v = 0.5 * v * (1.0 + std::tanh(u));
    }
    return unary_or_binary(std::move(out), {x}, [](Tape& t, Node& n) {
      Node& in = t.nodes_[n.inputs[0]];
      if (!in.needs_grad) return;
      t.ensure_grad(n.inputs[0]);
      const Tensor& xin = in.val();
      for (std::size_t i = 0; i < n.grad.data.size(); ++i) {
        const double v = xin.data[i];
        const double u = kC * (v + 0.044715 * v * v * v);
        const double th = std::tanh(u);
        const double d = 0.5 * (1.0 + th) +
                         0.5 * v * (1.0 - th * th) * kC *
                             (1.0 + 3.0 * 0.044715 * v * v);
        in.grad.data[i] += n.grad.data[i] * d;
      }
    });
  }

  int mul(int a, int b) {
    const Tensor& ta = val(a);
    const Tensor& tb = val(b);
    require(ta.same_shape(tb), "mul: shape mismatch");
    Tensor out = ta;
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] *= tb.data[i];
    return unary_or_binary(std::move(out), {a, b}, [](Tape& t, Node& n) {
      Node& na = t.nodes_[n.inputs[0]];
      Node& nb = t.nodes_[n.inputs[1]];
      if (na.needs_grad) {
        t.ensure_grad(n.inputs[0]);
        const Tensor& vb = nb.val();
        for (std::size_t i = 0; i < n.grad.data.size(); ++i)
          na.grad.data[i] += n.grad.data[i] * vb.data[i];
      }
      if (nb.needs_grad) {
        t.ensure_grad(n.inputs[1]);
        const Tensor& va = na.val();
        for (std::size_t i = 0; i < n.grad.data.size(); ++i)
          nb.grad.data[i] += n.grad.data[i] * va.data[i];
      }
    });
  }

  // --- linear algebra ---

  int matmul(int a, int b) {
    const Tensor& ta = val(a);
    const Tensor& tb = val(b);
    require(ta.shape.size() == 2 && tb.shape.size() == 2,
            "matmul: rank-2 required");
    require(ta.shape[1] == tb.shape[0], "matmul: inner dim mismatch");
    const int m = ta.shape[0], k = ta.shape[1], n = tb.shape[1];
    Tensor out({m, n});
    gemm_nn_acc(ta.data.data(), tb.data.data(), out.data.data(), m, k, n);
    return unary_or_binary(std::move(out), {a, b}, [m, k, n](Tape& t, Node& nd) {
      Node& na = t.nodes_[nd.inputs[0]];
      Node& nb = t.nodes_[nd.inputs[1]];
      if (na.needs_grad) {
        t.ensure_grad(nd.inputs[0]);
        gemm_nt_acc(nd.grad.data.data(), nb.val().data.data(),
                    na.grad.data.data(), m, n, k);
      }
      if (nb.needs_grad) {
        t.ensure_grad(nd.inputs[1]);
        gemm_tn_acc(na.val().data.data(), nd.grad.data.data(),
                    nb.grad.data.data(), k, m, n);
      }
    });
  }

  // rows of x plus a bias vector
  int add_bias(int x, int bias) {
    const Tensor& tx = val(x);
    const Tensor& tb = val(bias);
    require(tx.shape.size() == 2 && tb.shape.size() == 1,
            "add_bias: want matrix + vector");
    require(tx.shape[1] == tb.shape[0], "add_bias: width mismatch");
    const int m = tx.shape[0], n = tx.shape[1];
    Tensor out = tx;
    for (int i = 0; i < m; ++i) axpy(1.0, tb.data.data(), out.row(i), n);
    return unary_or_binary(std::move(out), {x, bias}, [m, n](Tape& t, Node& nd) {
      Node& nx = t.nodes_[nd.inputs[0]];
      Node& nb = t.nodes_[nd.inputs[1]];
      if (nx.needs_grad) {
        t.ensure_grad(nd.inputs[0]);
        axpy(1.0, nd.grad.data.data(), nx.grad.data.data(), nd.grad.numel());
      }
      if (nb.needs_grad) {
        t.ensure_grad(nd.inputs[1]);
        for (int i = 0; i < m; ++i)
          axpy(1.0, nd.grad.row(i), nb.grad.data.data(), n);
      }
    });
  }

  // gather rows of a [V x d] table; ids validated by the caller
  int embed_rows(int table, const std::vector<int>& ids) {
    const Tensor& tt = val(table);
    require(tt.shape.size() == 2, "embed_rows: rank-2 table");
    const int d = tt.shape[1];
    Tensor out({static_cast<int>(ids.size()), d});
    for (std::size_t i = 0; i < ids.size(); ++i) {
      require(ids[i] >= 0 && ids[i] < tt.shape[0],
              "embed_rows: id out of range");
      std::memcpy(out.row(static_cast<int>(i)), tt.row(ids[i]),
                  sizeof(double) * d);
    }
    Node n;
    n.owned = std::move(out);
    n.inputs = {table};
    auto ids_copy = ids;
    n.backward = [ids_copy, d](Tape& t, Node& nd) {
      Node& tab = t.nodes_[nd.inputs[0]];
      if (!tab.needs_grad) return;
      t.ensure_grad(nd.inputs[0]);
      for (std::size_t i = 0; i < ids_copy.size(); ++i)
        axpy(1.0, nd.grad.row(static_cast<int>(i)),
             tab.grad.row(ids_copy[i]), d);
    };
    n.needs_grad = grad_enabled_ && nodes_[table].needs_grad;
    return push(std::move(n));
  }

  // vertical concat of row blocks, all with equal width
  int concat_rows(const std::vector<int>& parts) {
    require(!parts.empty(), "concat_rows: empty");
    const int d = val(parts[0]).cols();
    int rows = 0;
    for (int p : parts) {
      require(val(p).shape.size() == 2 && val(p).shape[1] == d,
              "concat_rows: width mismatch");
      rows += val(p).shape[0];
    }
    Tensor out({rows, d});
    int off = 0;
    for (int p : parts) {
      const Tensor& tp = val(p);
      std::memcpy(out.row(off), tp.data.data(),
                  sizeof(double) * tp.data.size());
      off += tp.shape[0];
    }
    Node n;
    n.owned = std::move(out);
    n.inputs = parts;
    n.backward = [d](Tape& t, Node& nd) {
      int off2 = 0;
      for (int p : nd.inputs) {
        Node& np = t.nodes_[p];
        const int r = np.val().shape[0];
        if (np.needs_grad) {
          t.ensure_grad(p);
          axpy(1.0, nd.grad.row(off2), np.grad.data.data(),
               static_cast<std::size_t>(r) * d);
        }
        off2 += r;
      }
    };
    n.needs_grad = false;
    for (int p : parts) n.needs_grad = n.needs_grad || nodes_[p].needs_grad;
    n.needs_grad = n.needs_grad && grad_enabled_;
    return push(std::move(n));
  }

  int take_rows(int x, int from, int len) {
    const Tensor& tx = val(x);
    require(tx.shape.size() == 2, "take_rows: rank-2");
    require(from >= 0 && len >= 1 && from + len <= tx.shape[0],
            "take_rows: slice out of range");
    const int d = tx.shape[1];
    Tensor out({len, d});
    std::memcpy(out.data.data(), tx.row(from),
                sizeof(double) * static_cast<std::size_t>(len) * d);
    return unary_or_binary(std::move(out), {x}, [from, len, d](Tape& t, Node& nd) {
      Node& nx = t.nodes_[nd.inputs[0]];
      if (!nx.needs_grad) return;
      t.ensure_grad(nd.inputs[0]);
      axpy(1.0, nd.grad.data.data(), nx.grad.row(from),
           static_cast<std::size_t>(len) * d);
    });
  }

  int reshape(int x, std::vector<int> shape) {
    const Tensor& tx = val(x);
    require(Tensor::numel_of(shape) == tx.numel(), "reshape: numel mismatch");
    Tensor out(shape, tx.data);
    return unary_or_binary(std::move(out), {x}, [](Tape& t, Node& nd) {
      Node& nx = t.nodes_[nd.inputs[0]];
      if (!nx.needs_grad) return;
      t.ensure_grad(nd.inputs[0]);
      axpy(1.0, nd.grad.data.data(), nx.grad.data.data(), nd.grad.numel());
    });
  }

  int layer_norm(int x, int gain, int bias, double eps = 1e-5) {
    const Tensor& tx = val(x);
    const Tensor& tg = val(gain);
    require(tx.shape.size() == 2 && tg.shape.size() == 1 &&
                tx.shape[1] == tg.shape[0],
            "layer_norm: shape mismatch");
    const int m = tx.shape[0], d = tx.shape[1];
    Tensor out({m, d});
    Tensor saved({m, d + 1});  // per row: xhat then 1/sigma in last slot
    const Tensor& tb = val(bias);
    for (int i = 0; i < m; ++i) {
      const double* xi = tx.row(i);
      double mean = 0.0;
      for (int j = 0; j < d; ++j) mean += xi[j];
      mean /= d;
      double var = 0.0;
      for (int j = 0; j < d; ++j) {
        const double c = xi[j] - mean;
        var += c * c;
      }
      var /= d;
      const double inv = 1.0 / std::sqrt(var + eps);
      double* oi = out.row(i);
      double* si = saved.row(i);
      for (int j = 0; j < d; ++j) {
        const double xh = (xi[j] - mean) * inv;
        si[j] = xh;
        oi[j] = tg.data[j] * xh + tb.data[j];
      }
      si[d] = inv;
    }
    Node n;
    n.owned = std::move(out);
    n.saved = std::move(saved);
    n.inputs = {x, gain, bias};
    n.backward = [m, d](Tape& t, Node& nd) {
      Node& nx = t.nodes_[nd.inputs[0]];
      Node& ng = t.nodes_[nd.inputs[1]];
      Node& nb = t.nodes_[nd.inputs[2]];
      const Tensor& g = ng.val();
      for (int i = 0; i < m; ++i) {
        const double* dy = nd.grad.row(i);
        const double* si = nd.saved.row(i);
        const double inv = si[d];
        if (ng.needs_grad) {
          t.ensure_grad(nd.inputs[1]);
          for (int j = 0; j < d; ++j) ng.grad.data[j] += dy[j] * si[j];
        }
        if (nb.needs_grad) {
          t.ensure_grad(nd.inputs[2]);
          for (int j = 0; j < d; ++j) nb.grad.data[j] += dy[j];
        }
        if (nx.needs_grad) {
          t.ensure_grad(nd.inputs[0]);
          double s1 = 0.0, s2 = 0.0;
          for (int j = 0; j < d; ++j) {
            const double gd = g.data[j] * dy[j];
            s1 += gd;
            s2 += gd * si[j];
          }
          s1 /= d;
          s2 /= d;
          double* dx = nx.grad.row(i);
          for (int j = 0; j < d; ++j) {
            const double gd = g.data[j] * dy[j];
            dx[j] += (gd - s1 - si[j] * s2) * inv;
          }
        }
      }
    };
    n.needs_grad = grad_enabled_ &&
                   (nodes_[x].needs_grad || nodes_[gain].needs_grad ||
                    nodes_[bias].needs_grad);
    return push(std::move(n));
  }

  // Fused multi-head causal self-attention over projected q,k,v [L x d].
  // Saves the softmax probabilities (heads x L x L) for backward.
  int causal_attention(int q, int k, int v, int n_heads) {
    const Tensor& tq = val(q);
    const Tensor& tk = val(k);
    const Tensor& tv = val(v);
    require(tq.same_shape(tk) && tq.same_shape(tv), "attention: q/k/v shapes");
    const int L = tq.shape[0], d = tq.shape[1];
    require(d % n_heads == 0, "attention: heads must divide width");
    const int hd = d / n_heads;
    const double scl = 1.0 / std::sqrt(static_cast<double>(hd));
    Tensor out({L, d});
    Tensor probs({n_heads, L * L});
    std::vector<double> row(L);
    for (int h = 0; h < n_heads; ++h) {
      const int off = h * hd;
      double* ph = probs.row(h);
      for (int i = 0; i < L; ++i) {
        const double* qi = tq.row(i) + off;
        double mx = -std::numeric_limits<double>::infinity();
        for (int j = 0; j <= i; ++j) {
          const double* kj = tk.row(j) + off;
          double s = 0.0;
          for (int c = 0; c < hd; ++c) s += qi[c] * kj[c];
          s *= scl;
          row[j] = s;
          mx = std::max(mx, s);
        }
        double z = 0.0;
        for (int j = 0; j <= i; ++j) {
          row[j] = std::exp(row[j] - mx);
          z += row[j];
        }
        double* pi = ph + static_cast<std::size_t>(i) * L;
        for (int j = 0; j <= i; ++j) pi[j] = row[j] / z;
        for (int j = i + 1; j < L; ++j) pi[j] = 0.0;
        double* oi = out.row(i) + off;
        for (int c = 0; c < hd; ++c) oi[c] = 0.0;
        for (int j = 0; j <= i; ++j) {
          const double p = pi[j];
          const double* vj = tv.row(j) + off;
          for (int c = 0; c < hd; ++c) oi[c] += p * vj[c];
        }
      }
    }
    Node n;
    n.owned = std::move(out);
    n.saved = std::move(probs);
    n.inputs = {q, k, v};
    n.backward = [L, d, n_heads, hd, scl](Tape& t, Node& nd) {
      Node& nq = t.nodes_[nd.inputs[0]];
      Node& nk = t.nodes_[nd.inputs[1]];
      Node& nv = t.nodes_[nd.inputs[2]];
      if (!(nq.needs_grad || nk.needs_grad || nv.needs_grad)) return;
      t.ensure_grad(nd.inputs[0]);
      t.ensure_grad(nd.inputs[1]);
      t.ensure_grad(nd.inputs[2]);
      const Tensor& tq = nq.val();
      const Tensor& tk = nk.val();
      const Tensor& tv = nv.val();
      std::vector<double> dp(L);
      for (int h = 0; h < n_heads; ++h) {
        const int off = h * hd;
        const double* ph = nd.saved.row(h);
        for (int i = 0; i < L; ++i) {
          const double* go = nd.grad.row(i) + off;
          const double* pi = ph + static_cast<std::size_t>(i) * L;
          // dV and dP
          double dot = 0.0;
          for (int j = 0; j <= i; ++j) {
            const double* vj = tv.row(j) + off;
            double s = 0.0;
            for (int c = 0; c < hd; ++c) s += go[c] * vj[c];
            dp[j] = s;
            dot += s * pi[j];
            double* dvj = nv.grad.row(j) + off;
            const double p = pi[j];
            for (int c = 0; c < hd; ++c) dvj[c] += p * go[c];
          }
          // dS = P .* (dP - dot), then dQ, dK
          double* dqi = nq.grad.row(i) + off;
          for (int j = 0; j <= i; ++j) {
            const double ds = pi[j] * (dp[j] - dot) * scl;
            if (ds == 0.0) continue;
            const double* kj = tk.row(j) + off;
            double* dkj = nk.grad.row(j) + off;
            const double* qi = tq.row(i) + off;
            for (int c = 0; c < hd; ++c) {
              dqi[c] += ds * kj[c];
              dkj[c] += ds * qi[c];
            }
          }
        }
      }
    };
    n.needs_grad = grad_enabled_ &&
                   (nodes_[q].needs_grad || nodes_[k].needs_grad ||
                    nodes_[v].needs_grad);
    return push(std::move(n));
  }

  // --- losses / reductions (scalars are rank-1 tensors of size 1) ---

  int l1_norm(int x) {
    const Tensor& tx = val(x);
    double s = 0.0;
    for (double v : tx.data) s += std::abs(v);
    Tensor out({1});
    out.data[0] = s;
    return unary_or_binary(std::move(out), {x}, [](Tape& t, Node& nd) {
      Node& nx = t.nodes_[nd.inputs[0]];
      if (!nx.needs_grad) return;
      t.ensure_grad(nd.inputs[0]);
      const double g = nd.grad.data[0];
      const Tensor& xv = nx.val();
      // sign(0) = 0
      for (std::size_t i = 0; i < xv.data.size(); ++i) {
        if (xv.data[i] > 0.0)
          nx.grad.data[i] += g;
        else if (xv.data[i] < 0.0)
          nx.grad.data[i] -= g;
      }
    });
  }

  int sum(int x) {
    const Tensor& tx = val(x);
    double s = 0.0;
    for (double v : tx.data) s += v;
    Tensor out({1});
    out.data[0] = s;
    return unary_or_binary(std::move(out), {x}, [](Tape& t, Node& nd) {
      Node& nx = t.nodes_[nd.inputs[0]];
      if (!nx.needs_grad) return;
      t.ensure_grad(nd.inputs[0]);
      const double g = nd.grad.data[0];
      for (double& v : nx.grad.data) v += g;
    });
  }

  // Mean negative log-likelihood of targets under row-wise softmax.
  // Stable via max subtraction; saves the softmax for backward.
  int sequence_nll(int logits, const std::vector<int>& targets) {
    const Tensor& tl = val(logits);
    require(tl.shape.size() == 2, "sequence_nll: rank-2 logits");
    const int L = tl.shape[0], V = tl.shape[1];
    require(static_cast<int>(targets.size()) == L,
            "sequence_nll: length mismatch between logits rows and targets");
    for (int t : targets)
      require(t >= 0 && t < V, "sequence_nll: target id out of range");
    Tensor soft({L, V});
    double loss = 0.0;
    for (int i = 0; i < L; ++i) {
      const double* li = tl.row(i);
      double mx = li[0];
      for (int j = 1; j < V; ++j) mx = std::max(mx, li[j]);
      double z = 0.0;
      double* si = soft.row(i);
      for (int j = 0; j < V; ++j) {
        si[j] = std::exp(li[j] - mx);
        z += si[j];
      }
      const double inv = 1.0 / z;
      for (int j = 0; j < V; ++j) si[j] *= inv;
      loss += -(li[targets[i]] - mx - std::log(z));
    }
    loss /= L;
    Tensor out({1});
    out.data[0] = loss;
    Node n;
    n.owned = std::move(out);
    n.saved = std::move(soft);
    n.inputs = {logits};
    auto tgt = targets;
    n.backward = [L, V, tgt](Tape& t, Node& nd) {
      Node& nl = t.nodes_[nd.inputs[0]];
      if (!nl.needs_grad) return;
      t.ensure_grad(nd.inputs[0]);
      const double g = nd.grad.data[0] / L;
      for (int i = 0; i < L; ++i) {
        const double* si = nd.saved.row(i);
        double* di = nl.grad.row(i);
        for (int j = 0; j < V; ++j) di[j] += g * si[j];
        di[tgt[i]] -= g;
      }
    };
    n.needs_grad = grad_enabled_ && nodes_[logits].needs_grad;
    return push(std::move(n));
  }

  // Mean squared error between a [B x 1] prediction and targets.
  int mse(int pred, const std::vector<double>& targets) {
    const Tensor& tp = val(pred);
    const int B = tp.shape[0];
    require(static_cast<int>(targets.size()) == B, "mse: length mismatch");
    double s = 0.0;
    for (int i = 0; i < B; ++i) {
      const double e = tp.data[i] - targets[i];
      s += e * e;
    }
    Tensor out({1});
    out.data[0] = s / B;
    Node n;
    n.owned = std::move(out);
    n.inputs = {pred};
    auto tgt = targets;
    n.backward = [B, tgt](Tape& t, Node& nd) {
      Node& np = t.nodes_[nd.inputs[0]];
      if (!np.needs_grad) return;
      t.ensure_grad(nd.inputs[0]);
      const double g = nd.grad.data[0] * 2.0 / B;
      const Tensor& pv = np.val();
      for (int i = 0; i < B; ++i)
        np.grad.data[i] += g * (pv.data[i] - tgt[i]);
    };
    n.needs_grad = grad_enabled_ && nodes_[pred].needs_grad;
    return push(std::move(n));
  }

  // --- driver ---

  void backward(int loss_node) {
    const Tensor& lv = val(loss_node);
    require(lv.numel() == 1, "backward: loss must be scalar");
    if (!std::isfinite(lv.data[0]))
      throw std::runtime_error("backward: non-finite loss");
    ensure_grad(loss_node);
    nodes_[loss_node].grad.data[0] = 1.0;
    for (int i = loss_node; i >= 0; --i) {
      Node& n = nodes_[i];
      if (!n.needs_grad || !n.backward || n.grad.data.empty()) continue;
      n.backward(*this, n);
    }
  }

  // Flush parameter-leaf gradients into the store, scaled.
  void flush_param_grads(ParamStore& store, double scale_factor = 1.0) const {
    for (const Node& n : nodes_) {
      if (n.param_id < 0 || n.grad.data.empty()) continue;
      axpy(scale_factor, n.grad.data.data(),
           store.grads[n.param_id].data.data(), n.grad.numel());
    }
  }

  void ensure_grad(int id) {
    Node& n = nodes_[id];
    if (n.grad.data.empty()) n.grad = Tensor::zeros(n.val().shape);
  }

 private:
  static void require(bool ok, const char* msg) {
    if (!ok) throw std::runtime_error(msg);
  }

  int push(Node n) {
    nodes_.push_back(std::move(n));
    return static_cast<int>(nodes_.size()) - 1;
  }

  int unary_or_binary(Tensor out, std::vector<int> inputs,
                      std::function<void(Tape&, Node&)> bwd) {
    Node n;
    n.owned = std::move(out);
    n.inputs = std::move(inputs);
    n.backward = std::move(bwd);
    n.needs_grad = false;
    for (int i : n.inputs) n.needs_grad = n.needs_grad || nodes_[i].needs_grad;
    n.needs_grad = n.needs_grad && grad_enabled_;
    return push(std::move(n));
  }

  // add helper used by generic backward lambdas
  void accum(int id, const double* g, std::size_t n) {
    Node& nd = nodes_[id];
    if (!nd.needs_grad) return;
    ensure_grad(id);
    axpy(1.0, g, nd.grad.data.data(), n);
  }

  std::vector<Node> nodes_;
  bool grad_enabled_;
};

}  // namespace ssae
