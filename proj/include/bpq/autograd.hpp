#pragma once

#include <functional>
#include <optional>
#include <vector>

#include "bpq/tensor.hpp"

namespace bpq {

template <std::floating_point Real>
class Tape;

// Handle to a value recorded on a Tape.
template <std::floating_point Real>
struct Var {
  Tape<Real>* tape = nullptr;
  std::size_t id = 0;

  const BasicTensor<Real>& value() const { return tape->value(*this); }
};

// Reverse-mode gradient tape. Nodes are appended in evaluation order, which
// is a topological order; backward() walks them once in reverse.
template <std::floating_point Real>
class Tape {
 public:
  using TensorT = BasicTensor<Real>;
  using BackwardFn = std::function<void(Tape&, const TensorT& out_grad)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<Real> constant(TensorT value) { return push(std::move(value), nullptr, false, {}); }

  // Registers an externally owned parameter. The tensor must outlive the tape.
  Var<Real> parameter(const TensorT& value, bool trainable) { return push({}, &value, trainable, {}); }

  // Records an op result. `backward` is dropped when no input needs a gradient.
  Var<Real> record(TensorT value, std::initializer_list<Var<Real>> inputs, BackwardFn backward) {
    bool needs = false;
    for (const auto& in : inputs) needs = needs || nodes_[in.id].requires_grad;
    return push(std::move(value), nullptr, needs, needs ? std::move(backward) : BackwardFn{});
  }

  const TensorT& value(Var<Real> v) const { return nodes_.at(v.id).get(); }
  bool requires_grad(Var<Real> v) const { return nodes_.at(v.id).requires_grad; }

  // Gradient of the last backward() target with respect to v; nullptr when v
  // does not require a gradient or was not reached.
  const TensorT* grad(Var<Real> v) const {
    const Node& n = nodes_.at(v.id);
    return n.grad.empty() ? nullptr : &n.grad;
  }

  // Accumulation buffer used by op backward functions; zero-initialised on
  // first use. Returns nullptr for nodes that do not require a gradient.
  TensorT* grad_sink(Var<Real> v) {
    Node& n = nodes_[v.id];
    if (!n.requires_grad) return nullptr;
    if (n.grad.empty()) n.grad = TensorT(n.get().shape());
    return &n.grad;
  }

  void backward(Var<Real> loss) {
    if (value(loss).size() != 1) {
      throw ContractError("backward requires a scalar loss, got shape " + shape_to_string(value(loss).shape()));
    }
    if (!nodes_[loss.id].requires_grad) return;
    for (auto& n : nodes_) n.grad = TensorT();
    nodes_[loss.id].grad = TensorT(value(loss).shape(), Real(1));
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.grad.empty() || !n.backward) continue;
      // Callbacks only write to the gradients of earlier nodes, and no node is
      // appended during backward, so this reference stays valid.
      n.backward(*this, n.grad);
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    TensorT owned;
    const TensorT* ref = nullptr;
    bool requires_grad = false;
    BackwardFn backward;
    TensorT grad;

    const TensorT& get() const { return ref != nullptr ? *ref : owned; }
  };

  Var<Real> push(TensorT value, const TensorT* ref, bool requires_grad, BackwardFn backward) {
    Node n;
    n.owned = std::move(value);
    n.ref = ref;
    n.requires_grad = requires_grad;
    n.backward = std::move(backward);
    nodes_.push_back(std::move(n));
    return Var<Real>{this, nodes_.size() - 1};
  }

  std::vector<Node> nodes_;
};

namespace ag {

template <std::floating_point Real>
Var<Real> matmul(Var<Real> a, Var<Real> b) {
  Tape<Real>& tape = *a.tape;
  return tape.record(bpq::matmul(a.value(), b.value()), {a, b}, [a, b](Tape<Real>& t, const BasicTensor<Real>& g) {
    const auto& av = t.value(a);
    const auto& bv = t.value(b);
    const std::size_t m = av.dim(0), k = av.dim(1), n = bv.dim(1);
    if (auto* ga = t.grad_sink(a)) {
      BasicTensor<Real> bt = bpq::transpose(bv);
      kernels::gemm_nn(m, n, k, g.raw(), bt.raw(), ga->raw(), true);
    }
    if (auto* gb = t.grad_sink(b)) kernels::gemm_tn_acc(m, k, n, av.raw(), g.raw(), gb->raw());
  });
}

// x[N,in] * W[in,out] + b; bias is optional.
template <std::floating_point Real>
Var<Real> linear(Var<Real> x, Var<Real> weight, std::optional<Var<Real>> bias) {
  Tape<Real>& tape = *x.tape;
  const BasicTensor<Real>* bias_value = bias ? &bias->value() : nullptr;
  auto out = bpq::linear(x.value(), weight.value(), bias_value);
  auto backward = [x, weight, bias](Tape<Real>& t, const BasicTensor<Real>& g) {
    const auto& xv = t.value(x);
    const auto& wv = t.value(weight);
    const std::size_t m = xv.rows(), k = xv.cols(), n = wv.dim(1);
    if (auto* gx = t.grad_sink(x)) {
      BasicTensor<Real> wt = bpq::transpose(wv);
      kernels::gemm_nn(m, n, k, g.raw(), wt.raw(), gx->raw(), true);
    }
    if (auto* gw = t.grad_sink(weight)) kernels::gemm_tn_acc(m, k, n, xv.raw(), g.raw(), gw->raw());
    if (bias) {
      if (auto* gb = t.grad_sink(*bias)) {
        for (std::size_t r = 0; r < m; ++r)
          for (std::size_t c = 0; c < n; ++c) (*gb)[c] += g[r * n + c];
      }
    }
  };
  if (bias) return tape.record(std::move(out), {x, weight, *bias}, std::move(backward));
  return tape.record(std::move(out), {x, weight}, std::move(backward));
}

template <std::floating_point Real>
Var<Real> add(Var<Real> a, Var<Real> b) {
  return a.tape->record(bpq::add(a.value(), b.value()), {a, b}, [a, b](Tape<Real>& t, const BasicTensor<Real>& g) {
    for (auto v : {a, b}) {
      if (auto* gv = t.grad_sink(v))
        for (std::size_t i = 0; i < g.size(); ++i) (*gv)[i] += g[i];
    }
  });
}

template <std::floating_point Real>
Var<Real> add_rows(Var<Real> x, Var<Real> table, std::vector<std::uint32_t> index) {
  auto out = bpq::add_rows(x.value(), table.value(), std::span<const std::uint32_t>(index));
  return x.tape->record(std::move(out), {x, table},
                        [x, table, index = std::move(index)](Tape<Real>& t, const BasicTensor<Real>& g) {
                          if (auto* gx = t.grad_sink(x))
                            for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i];
                          if (auto* gt = t.grad_sink(table)) {
                            const std::size_t cols = g.cols();
                            for (std::size_t r = 0; r < index.size(); ++r)
                              for (std::size_t c = 0; c < cols; ++c) (*gt)[index[r] * cols + c] += g[r * cols + c];
                          }
                        });
}

template <std::floating_point Real>
Var<Real> layer_norm(Var<Real> x, Var<Real> gain, Var<Real> bias, Real eps = Real(1e-5)) {
  LayerNormStats<Real> stats;
  auto out = bpq::layer_norm(x.value(), gain.value(), bias.value(), eps, &stats);
  return x.tape->record(
      std::move(out), {x, gain, bias},
      [x, gain, bias, stats = std::move(stats)](Tape<Real>& t, const BasicTensor<Real>& g) {
        const auto& xv = t.value(x);
        const auto& gv = t.value(gain);
        const std::size_t rows = xv.rows(), cols = xv.cols();
        auto* gx = t.grad_sink(x);
        auto* gg = t.grad_sink(gain);
        auto* gb = t.grad_sink(bias);
        std::vector<Real> xhat(cols), dxhat(cols);
        for (std::size_t r = 0; r < rows; ++r) {
          const Real mean = stats.mean[r], rstd = stats.rstd[r];
          Real sum_d = 0, sum_dx = 0;
          for (std::size_t c = 0; c < cols; ++c) {
            xhat[c] = (xv[r * cols + c] - mean) * rstd;
            const Real go = g[r * cols + c];
            if (gg) (*gg)[c] += go * xhat[c];
            if (gb) (*gb)[c] += go;
            dxhat[c] = go * gv[c];
            sum_d += dxhat[c];
            sum_dx += dxhat[c] * xhat[c];
          }
          if (gx) {
            const Real inv_n = Real(1) / Real(cols);
            for (std::size_t c = 0; c < cols; ++c)
              (*gx)[r * cols + c] += rstd * (dxhat[c] - inv_n * sum_d - xhat[c] * inv_n * sum_dx);
          }
        }
      });
}

template <std::floating_point Real>
Var<Real> gelu(Var<Real> x) {
  return x.tape->record(bpq::gelu(x.value()), {x}, [x](Tape<Real>& t, const BasicTensor<Real>& g) {
    const auto& xv = t.value(x);
    if (auto* gx = t.grad_sink(x)) {
      std::vector<Real> d(g.size());
      kernels::map_lanes(g.size(), xv.raw(), d.data(), [](auto v) { return kernels::gelu_tanh_grad(v); });
      for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i] * d[i];
    }
  });
}

template <std::floating_point Real>
Var<Real> mean_rows(Var<Real> x) {
  return x.tape->record(bpq::mean_rows(x.value()), {x}, [x](Tape<Real>& t, const BasicTensor<Real>& g) {
    if (auto* gx = t.grad_sink(x)) {
      const std::size_t rows = gx->rows(), cols = gx->cols();
      const Real inv = Real(1) / Real(rows);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) (*gx)[r * cols + c] += g[c] * inv;
    }
  });
}

template <std::floating_point Real>
Var<Real> sum(Var<Real> x) {
  const auto& xv = x.value();
  Real s = 0;
  for (std::size_t i = 0; i < xv.size(); ++i) s += xv[i];
  return x.tape->record(BasicTensor<Real>({1}, std::vector<Real>{s}), {x},
                        [x](Tape<Real>& t, const BasicTensor<Real>& g) {
                          if (auto* gx = t.grad_sink(x))
                            for (std::size_t i = 0; i < gx->size(); ++i) (*gx)[i] += g[0];
                        });
}

// sum((pred - target)^2) / denom over the rows listed in `rows` (all rows when
// empty).
template <std::floating_point Real>
Var<Real> squared_error(Var<Real> pred, const BasicTensor<Real>& target, Real denom,
                        std::vector<std::uint32_t> rows = {}) {
  const auto& pv = pred.value();
  if (pv.shape() != target.shape()) throw ShapeError("squared_error shape mismatch");
  const std::size_t cols = pv.cols();
  if (rows.empty()) {
    rows.resize(pv.rows());
    std::iota(rows.begin(), rows.end(), 0u);
  }
  Real s = 0;
  for (auto r : rows)
    for (std::size_t c = 0; c < cols; ++c) {
      const Real d = pv[r * cols + c] - target[r * cols + c];
      s += d * d;
    }
  return pred.tape->record(
      BasicTensor<Real>({1}, std::vector<Real>{s / denom}), {pred},
      [pred, target, denom, rows = std::move(rows)](Tape<Real>& t, const BasicTensor<Real>& g) {
        const auto& p = t.value(pred);
        const std::size_t c_n = p.cols();
        if (auto* gp = t.grad_sink(pred))
          for (auto r : rows)
            for (std::size_t c = 0; c < c_n; ++c)
              (*gp)[r * c_n + c] += g[0] * Real(2) * (p[r * c_n + c] - target[r * c_n + c]) / denom;
      });
}

// Rows listed in `rows` are replaced by the vector `fill` (shape [1, D]).
template <std::floating_point Real>
Var<Real> replace_rows(Var<Real> x, Var<Real> fill, std::vector<std::uint32_t> rows) {
  BasicTensor<Real> out = x.value();
  const std::size_t cols = out.cols();
  const auto& f = fill.value();
  if (f.size() != cols) throw ShapeError("replace_rows fill width mismatch");
  for (auto r : rows) std::copy(f.raw(), f.raw() + cols, out.raw() + r * cols);
  return x.tape->record(std::move(out), {x, fill},
                        [x, fill, rows = std::move(rows)](Tape<Real>& t, const BasicTensor<Real>& g) {
                          const std::size_t cols = g.cols();
                          if (auto* gx = t.grad_sink(x)) {
                            std::vector<bool> masked(g.rows(), false);
                            for (auto r : rows) masked[r] = true;
                            for (std::size_t r = 0; r < g.rows(); ++r)
                              if (!masked[r])
                                for (std::size_t c = 0; c < cols; ++c) (*gx)[r * cols + c] += g[r * cols + c];
                          }
                          if (auto* gf = t.grad_sink(fill))
                            for (auto r : rows)
                              for (std::size_t c = 0; c < cols; ++c) (*gf)[c] += g[r * cols + c];
                        });
}

template <std::floating_point Real>
Var<Real> grouped_attention(Var<Real> q, Var<Real> k, Var<Real> v, const AttentionGroups& groups,
                            std::size_t heads) {
  std::vector<Real> probs;
  auto out = bpq::grouped_attention(q.value(), k.value(), v.value(), groups, heads, &probs);
  // `groups` must outlive the tape.
  return q.tape->record(
      std::move(out), {q, k, v},
      [q, k, v, groups_ptr = &groups, heads, probs = std::move(probs)](Tape<Real>& t, const BasicTensor<Real>& g) {
        const auto& qv = t.value(q);
        const auto& kv = t.value(k);
        const auto& vv = t.value(v);
        auto* gq = t.grad_sink(q);
        auto* gk = t.grad_sink(k);
        auto* gv = t.grad_sink(v);
        const std::size_t dim = qv.cols(), dh = dim / heads;
        const Real scale = Real(1) / std::sqrt(Real(dh));
        std::size_t p_off = 0;
        std::vector<Real> qg, kg, vt, go, dp, ds, tmp_t, grad_tile;
        for (const auto& members : groups_ptr->members) {
          const std::size_t len = members.size();
          qg.resize(len * dh);
          kg.resize(len * dh);
          vt.resize(len * dh);
          go.resize(len * dh);
          grad_tile.resize(len * dh);
          dp.resize(len * len);
          ds.resize(len * len);
          tmp_t.resize(std::max(len * len, len * dh));
          for (std::size_t h = 0; h < heads; ++h) {
            const std::size_t off = h * dh;
            const Real* p = probs.data() + p_off;
            p_off += len * len;
            kernels::gather_head(g.raw(), dim, members, off, dh, go.data());
            // dV = P^T dO
            if (gv) {
              kernels::transpose(len, len, p, tmp_t.data());
              kernels::gemm_nn(len, len, dh, tmp_t.data(), go.data(), grad_tile.data(), false);
              kernels::scatter_add_head(grad_tile.data(), dim, members, off, dh, gv->raw());
            }
            if (!gq && !gk) continue;
            // dP = dO V^T, dS = P * (dP - rowsum(dP * P)) * scale
            kernels::gather_head(vv.raw(), dim, members, off, dh, tmp_t.data());
            kernels::transpose(len, dh, tmp_t.data(), vt.data());
            kernels::gemm_nn(len, dh, len, go.data(), vt.data(), dp.data(), false);
            for (std::size_t i = 0; i < len; ++i) {
              Real dot = 0;
              for (std::size_t j = 0; j < len; ++j) dot += dp[i * len + j] * p[i * len + j];
              for (std::size_t j = 0; j < len; ++j) ds[i * len + j] = p[i * len + j] * (dp[i * len + j] - dot) * scale;
            }
            if (gq) {
              kernels::gather_head(kv.raw(), dim, members, off, dh, kg.data());
              kernels::gemm_nn(len, len, dh, ds.data(), kg.data(), grad_tile.data(), false);
              kernels::scatter_add_head(grad_tile.data(), dim, members, off, dh, gq->raw());
            }
            if (gk) {
              kernels::gather_head(qv.raw(), dim, members, off, dh, qg.data());
              kernels::transpose(len, len, ds.data(), tmp_t.data());
              kernels::gemm_nn(len, len, dh, tmp_t.data(), qg.data(), grad_tile.data(), false);
              kernels::scatter_add_head(grad_tile.data(), dim, members, off, dh, gk->raw());
            }
          }
        }
      });
}

}  // namespace ag
}  // namespace bpq
