// Copyright 2026 the slicemoe authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <vector>

#include "slicemoe/config.hpp"
#include "slicemoe/router.hpp"
#include "slicemoe/tensor.hpp"

namespace slicemoe {

/// Two-layer expert FFN acting on slice rows: relu(x*U1 + c1)*U2 + c2.
/// Input and output width is d/S; hidden width F defaults to 4*(d/S) so the
/// slice-expert expansion ratio matches a dense FFN's 4x.
template <typename T>
struct ExpertParamsT {
  TensorT<T> U1;  // [W x F]
  TensorT<T> c1;  // [F]
  TensorT<T> U2;  // [F x W]
  TensorT<T> c2;  // [W]
};

using ExpertParams = ExpertParamsT<double>;

inline std::vector<ExpertParams> init_experts(const SliceMoeConfig& cfg,
                                              Rng& rng) {
  const std::size_t w = cfg.slice_width(), f = cfg.expert_width();
  std::vector<ExpertParams> experts(cfg.experts);
  for (auto& e : experts) {
    e.U1 = gaussian(rng, {w, f}, 1.0 / std::sqrt(static_cast<double>(w)));
    e.c1 = Tensor({f});
    e.U2 = gaussian(rng, {f, w}, 1.0 / std::sqrt(static_cast<double>(f)));
    e.c2 = Tensor({w});
  }
  return experts;
}

/// Where a stacked expert row came from: token b, slice s, selection rank j.
struct Origin {
  std::size_t token;
  std::size_t slice;
  std::size_t rank;
};

/// All slices bound for each expert, stacked in assignment order, plus the
/// origin coordinates needed to reassemble outputs. Invariant: the origin
/// lists partition the full assignment set (sum of counts == B*S*k).
template <typename T>
struct ExpertBatchT {
  std::size_t width = 0;
  std::vector<std::vector<T>> inputs;        // [E][n_e * W] gated rows
  std::vector<std::vector<Origin>> origins;  // [E][n_e]

  std::vector<long> counts() const {
    std::vector<long> c(origins.size());
    for (std::size_t e = 0; e < origins.size(); ++e)
      c[e] = static_cast<long>(origins[e].size());
    return c;
  }
  std::size_t total_assignments() const {
    std::size_t n = 0;
    for (const auto& o : origins) n += o.size();
    return n;
  }
};

using ExpertBatch = ExpertBatchT<double>;

namespace detail {

/// Forward FFN on n stacked rows through the shared kernels. h and y are
/// caller-allocated (n*F, n*W); mask records pre-activation > 0 when given.
template <typename T>
void ffn_rows(const T* x, std::size_t n, const ExpertParamsT<T>& p, T* h,
              std::uint8_t* mask, T* y) {
  const std::size_t w = p.U1.dim(0), f = p.U1.dim(1);
  matmul_into(x, p.U1.data(), h, n, w, f);
  for (std::size_t r = 0; r < n; ++r) {
    T* hr = h + r * f;
    for (std::size_t i = 0; i < f; ++i) {
      const T pre = hr[i] + p.c1[i];
      const bool on = pre > T{0};
      hr[i] = on ? pre : T{0};
      if (mask) mask[r * f + i] = on ? 1 : 0;
    }
  }
  matmul_into(h, p.U2.data(), y, n, f, w);
  for (std::size_t r = 0; r < n; ++r) {
    T* yr = y + r * w;
    for (std::size_t i = 0; i < w; ++i) yr[i] += p.c2[i];
  }
}

}  // namespace detail

/// Batched expert FFN on [n x (d/S)] rows. Rows are independent, so batched
/// evaluation equals row-by-row evaluation exactly.
template <typename T>
TensorT<T> expert_ffn(const TensorT<T>& x, const ExpertParamsT<T>& p) {
  if (x.rank() != 2 || x.dim(1) != p.U1.dim(0))
    throw DimError("expert_ffn: input width does not match expert");
  const std::size_t n = x.dim(0), w = x.dim(1), f = p.U1.dim(1);
  std::vector<T> h(n * f);
  TensorT<T> y({n, w});
  detail::ffn_rows(x.data(), n, p, h.data(), nullptr, y.data());
  ensure_finite(y, "expert_ffn");
  return y;
}

// ---------------------------------------------------------------------------
// Flattened view of a routed batch: ids/weights indexed by assignment
// n = (b*S + s)*k + j. Keeping one value source per call avoids any ambiguity
// about which weights (tape or decision struct) a path consumed.

template <typename T>
struct RoutedBatchView {
  std::size_t batch = 0, slices = 0, width = 0, k = 0, n_experts = 0;
  const int* ids = nullptr;    // [N*k]
  const T* weights = nullptr;  // [N*k]
  const T* slabs = nullptr;    // [N*width], row r = token b slice s

  std::size_t rows() const { return batch * slices; }
  std::size_t assignments() const { return rows() * k; }
};

inline std::vector<int> flatten_ids(
    const std::vector<RoutingDecision>& decisions) {
  std::vector<int> ids;
  for (const auto& d : decisions)
    ids.insert(ids.end(), d.expert_ids.begin(), d.expert_ids.end());
  return ids;
}

inline std::vector<double> flatten_weights(
    const std::vector<RoutingDecision>& decisions) {
  std::vector<double> w;
  for (const auto& d : decisions)
    w.insert(w.end(), d.weights.begin(), d.weights.end());
  return w;
}

namespace detail {

template <typename T>
void check_view(const RoutedBatchView<T>& v) {
  if (v.batch == 0 || v.slices == 0 || v.width == 0 || v.k == 0 ||
      v.n_experts == 0)
    throw ContractError("dispatch: empty routed batch");
  for (std::size_t n = 0; n < v.assignments(); ++n)
    if (v.ids[n] < 0 || static_cast<std::size_t>(v.ids[n]) >= v.n_experts)
      throw ContractError("dispatch: expert id out of range");
}

}  // namespace detail

/// Gather Eq.-1 gated rows per destination expert. Assignment order is
/// (token, slice, rank) ascending within each expert, matching the naive
/// loop's visit order. Zero-weight rows (from dropout) are still dispatched.
template <typename T>
ExpertBatchT<T> gate_and_assign(const RoutedBatchView<T>& v) {
  detail::check_view(v);
  ExpertBatchT<T> batch;
  batch.width = v.width;
  batch.inputs.resize(v.n_experts);
  batch.origins.resize(v.n_experts);
  for (std::size_t r = 0; r < v.rows(); ++r) {
    const T* slab = v.slabs + r * v.width;
    for (std::size_t j = 0; j < v.k; ++j) {
      const std::size_t n = r * v.k + j;
      const auto e = static_cast<std::size_t>(v.ids[n]);
      const T wgt = v.weights[n];
      auto& rows = batch.inputs[e];
      const std::size_t off = rows.size();
      rows.resize(off + v.width);
      for (std::size_t i = 0; i < v.width; ++i) rows[off + i] = wgt * slab[i];
      batch.origins[e].push_back(
          Origin{r / v.slices, r % v.slices, j});
    }
  }
  return batch;
}

template <typename T>
ExpertBatchT<T> gate_and_assign(const TensorT<T>& slabs,
                                const std::vector<RoutingDecision>& decisions,
                                std::size_t n_experts) {
  if (slabs.rank() != 3) throw DimError("gate_and_assign: expected rank-3");
  const std::size_t b = slabs.dim(0), s = slabs.dim(1);
  if (decisions.size() != b * s)
    throw ContractError("gate_and_assign: one decision per (token, slice)");
  std::vector<int> ids = flatten_ids(decisions);
  std::vector<double> wts = flatten_weights(decisions);
  std::vector<T> wts_t(wts.begin(), wts.end());
  RoutedBatchView<T> v{b,
                       s,
                       slabs.dim(2),
                       decisions.front().expert_ids.size(),
                       n_experts,
                       ids.data(),
                       wts_t.data(),
                       slabs.data()};
  return gate_and_assign(v);
}

// ---------------------------------------------------------------------------
// The two dispatch paths. Both produce identical per-assignment outputs and
// share the final rank-ascending reassembly, so results are bit-identical;
// the grouped path is the production one, the naive loop is its oracle.

/// Per-assignment intermediates kept for the backward pass.
template <typename T>
struct DispatchTrace {
  std::size_t assignments = 0, width = 0, hidden = 0;
  std::vector<T> gated;            // [NK * W] Eq.-1 inputs
  std::vector<T> hidden_act;       // [NK * F] post-relu
  std::vector<std::uint8_t> mask;  // [NK * F] pre-activation > 0
};

namespace detail {

template <typename T>
void alloc_trace(DispatchTrace<T>* trace, std::size_t nk, std::size_t w,
                 std::size_t f) {
  if (!trace) return;
  trace->assignments = nk;
  trace->width = w;
  trace->hidden = f;
  trace->gated.assign(nk * w, T{0});
  trace->hidden_act.assign(nk * f, T{0});
  trace->mask.assign(nk * f, 0);
}

/// Sum per-assignment output rows into token slices, rank ascending.
template <typename T>
TensorT<T> reassemble(const std::vector<T>& y, const RoutedBatchView<T>& v) {
  TensorT<T> out({v.batch, v.slices * v.width});
  for (std::size_t r = 0; r < v.rows(); ++r) {
    T* dst = out.data() + r * v.width;  // row r targets slice block s of b
    for (std::size_t j = 0; j < v.k; ++j) {
      const T* src = y.data() + (r * v.k + j) * v.width;
      if (j == 0)
        for (std::size_t i = 0; i < v.width; ++i) dst[i] = src[i];
      else
        for (std::size_t i = 0; i < v.width; ++i) dst[i] += src[i];
    }
  }
  return out;
}

/// Reference loop: every assignment runs the expert FFN on its own 1-row
/// input, in (token, slice, rank) order.
template <typename T>
void run_naive(const RoutedBatchView<T>& v,
               const std::vector<ExpertParamsT<T>>& experts, std::vector<T>& y,
               DispatchTrace<T>* trace) {
  const std::size_t w = v.width, f = experts.front().U1.dim(1);
  alloc_trace(trace, v.assignments(), w, f);
  y.assign(v.assignments() * w, T{0});
  for (std::size_t r = 0; r < v.rows(); ++r) {
    const T* slab = v.slabs + r * w;
    for (std::size_t j = 0; j < v.k; ++j) {
      const std::size_t n = r * v.k + j;
      const auto e = static_cast<std::size_t>(v.ids[n]);
      std::vector<T> gated(w);
      for (std::size_t i = 0; i < w; ++i) gated[i] = v.weights[n] * slab[i];
      std::vector<T> h(f);
      std::vector<std::uint8_t> m(f);
      ffn_rows(gated.data(), 1, experts[e], h.data(), m.data(),
               y.data() + n * w);
      if (trace) {
        std::copy(gated.begin(), gated.end(), trace->gated.begin() + n * w);
        std::copy(h.begin(), h.end(), trace->hidden_act.begin() + n * f);
        std::copy(m.begin(), m.end(), trace->mask.begin() + n * f);
      }
    }
  }
}

/// Grouped path: one stacked FFN evaluation per expert, then scatter.
/// prune_zero skips zero-weight rows from the stacks and substitutes the
/// expert's cached zero-input response (forward-only optimization).
template <typename T>
void run_grouped(const RoutedBatchView<T>& v,
                 const std::vector<ExpertParamsT<T>>& experts,
                 std::vector<T>& y, DispatchTrace<T>* trace, bool prune_zero) {
  const std::size_t w = v.width, f = experts.front().U1.dim(1);
  if (prune_zero && trace)
    throw ContractError("dispatch: pruning is forward-only");
  alloc_trace(trace, v.assignments(), w, f);
  y.assign(v.assignments() * w, T{0});

  const std::size_t n_experts = experts.size();
  std::vector<std::vector<T>> stacks(n_experts);
  std::vector<std::vector<std::size_t>> members(n_experts);
  std::vector<std::size_t> pruned;
  for (std::size_t r = 0; r < v.rows(); ++r) {
    const T* slab = v.slabs + r * w;
    for (std::size_t j = 0; j < v.k; ++j) {
      const std::size_t n = r * v.k + j;
      if (prune_zero && v.weights[n] == T{0}) {
        pruned.push_back(n);
        continue;
      }
      const auto e = static_cast<std::size_t>(v.ids[n]);
      auto& stack = stacks[e];
      const std::size_t off = stack.size();
      stack.resize(off + w);
      for (std::size_t i = 0; i < w; ++i) stack[off + i] = v.weights[n] * slab[i];
      members[e].push_back(n);
    }
  }

  parallel_for(n_experts, [&](std::size_t lo, std::size_t hi) {
    for (std::size_t e = lo; e < hi; ++e) {
      const std::size_t ne = members[e].size();
      if (ne == 0) continue;  // empty expert, nothing to run
      std::vector<T> h(ne * f);
      std::vector<std::uint8_t> m(ne * f);
      std::vector<T> out(ne * w);
      ffn_rows(stacks[e].data(), ne, experts[e], h.data(), m.data(),
               out.data());
      for (std::size_t r = 0; r < ne; ++r) {
        const std::size_t n = members[e][r];
        std::copy_n(out.data() + r * w, w, y.data() + n * w);
        if (trace) {
          std::copy_n(stacks[e].data() + r * w, w,
                      trace->gated.begin() + n * w);
          std::copy_n(h.data() + r * f, f,
                      trace->hidden_act.begin() + n * f);
          std::copy_n(m.data() + r * f, f, trace->mask.begin() + n * f);
        }
      }
    }
  });

  if (!pruned.empty()) {
    // One zero-input response per expert covers every pruned row: the gated
    // input of a zero-weight row is exactly zero after relu normalization.
    std::vector<std::vector<T>> zero_resp(n_experts);
    for (std::size_t n : pruned) {
      const auto e = static_cast<std::size_t>(v.ids[n]);
      if (zero_resp[e].empty()) {
        std::vector<T> zero_in(w, T{0});
        std::vector<T> h(f);
        zero_resp[e].resize(w);
        ffn_rows(zero_in.data(), 1, experts[e], h.data(), nullptr,
                 zero_resp[e].data());
      }
      std::copy_n(zero_resp[e].data(), w, y.data() + n * w);
    }
  }
}

}  // namespace detail

template <typename T>
TensorT<T> dispatch_naive(const RoutedBatchView<T>& v,
                          const std::vector<ExpertParamsT<T>>& experts,
                          DispatchTrace<T>* trace = nullptr) {
  detail::check_view(v);
  std::vector<T> y;
  detail::run_naive(v, experts, y, trace);
  TensorT<T> out = detail::reassemble(y, v);
  ensure_finite(out, "dispatch_naive");
  return out;
}

template <typename T>
TensorT<T> dispatch_grouped(const RoutedBatchView<T>& v,
                            const std::vector<ExpertParamsT<T>>& experts,
                            DispatchTrace<T>* trace = nullptr,
                            bool prune_zero = false) {
  detail::check_view(v);
  std::vector<T> y;
  detail::run_grouped(v, experts, y, trace, prune_zero);
  TensorT<T> out = detail::reassemble(y, v);
  ensure_finite(out, "dispatch_grouped");
  return out;
}

namespace detail {

template <typename T>
RoutedBatchView<T> make_view(const TensorT<T>& slabs,
                             const std::vector<RoutingDecision>& decisions,
                             std::size_t n_experts, std::vector<int>& ids,
                             std::vector<T>& wts) {
  if (slabs.rank() != 3) throw DimError("dispatch: expected rank-3 slabs");
  const std::size_t b = slabs.dim(0), s = slabs.dim(1);
  if (decisions.empty() || decisions.size() != b * s)
    throw ContractError("dispatch: one decision per (token, slice)");
  ids = flatten_ids(decisions);
  std::vector<double> wd = flatten_weights(decisions);
  wts.assign(wd.begin(), wd.end());
  RoutedBatchView<T> v;
  v.batch = b;
  v.slices = s;
  v.width = slabs.dim(2);
  v.k = decisions.front().expert_ids.size();
  v.n_experts = n_experts;
  v.ids = ids.data();
  v.weights = wts.data();
  v.slabs = slabs.data();
  return v;
}

}  // namespace detail

/// Convenience overloads taking slabs [B x S x W] plus per-slice decisions.
template <typename T>
TensorT<T> dispatch_naive(const TensorT<T>& slabs,
                          const std::vector<RoutingDecision>& decisions,
                          const std::vector<ExpertParamsT<T>>& experts) {
  std::vector<int> ids;
  std::vector<T> wts;
  auto v = detail::make_view(slabs, decisions, experts.size(), ids, wts);
  return dispatch_naive(v, experts, static_cast<DispatchTrace<T>*>(nullptr));
}

template <typename T>
TensorT<T> dispatch_grouped(const TensorT<T>& slabs,
                            const std::vector<RoutingDecision>& decisions,
                            const std::vector<ExpertParamsT<T>>& experts,
                            bool prune_zero = false) {
  std::vector<int> ids;
  std::vector<T> wts;
  auto v = detail::make_view(slabs, decisions, experts.size(), ids, wts);
  return dispatch_grouped(v, experts, static_cast<DispatchTrace<T>*>(nullptr),
                          prune_zero);
}

// ---------------------------------------------------------------------------
// Backward. The two implementations mirror each other's per-element fold
// orders exactly (contraction over an expert's assignments always ascends),
// so their gradients are bit-identical; the naive route is the oracle.

struct DispatchGrads {
  Tensor dslabs;    // [B x S x W]
  Tensor dweights;  // [N x k]
  std::vector<ExpertParams> dexperts;
};

namespace detail {

inline DispatchGrads alloc_dispatch_grads(const RoutedBatchView<double>& v,
                                          const std::vector<ExpertParams>& e) {
  DispatchGrads g;
  g.dslabs = Tensor({v.batch, v.slices, v.width});
  g.dweights = Tensor({v.rows(), v.k});
  g.dexperts.resize(e.size());
  for (std::size_t i = 0; i < e.size(); ++i) {
    g.dexperts[i].U1 = Tensor(e[i].U1.shape());
    g.dexperts[i].c1 = Tensor(e[i].c1.shape());
    g.dexperts[i].U2 = Tensor(e[i].U2.shape());
    g.dexperts[i].c2 = Tensor(e[i].c2.shape());
  }
  return g;
}

/// Shared tail: per-assignment input grads -> gate-weight grads and slab
/// grads (rank-ascending fold per slice, identical in both routes).
inline void finish_dispatch_grads(const std::vector<double>& dgated,
                                  const RoutedBatchView<double>& v,
                                  DispatchGrads& g) {
  const std::size_t w = v.width;
  for (std::size_t r = 0; r < v.rows(); ++r) {
    const double* slab = v.slabs + r * w;
    double* dslab = g.dslabs.data() + r * w;
    for (std::size_t j = 0; j < v.k; ++j) {
      const std::size_t n = r * v.k + j;
      const double* dx = dgated.data() + n * w;
      double acc = 0.0;
      for (std::size_t i = 0; i < w; ++i) acc += dx[i] * slab[i];
      g.dweights[n] = acc;
      const double wgt = v.weights[n];
      for (std::size_t i = 0; i < w; ++i) dslab[i] += wgt * dx[i];
    }
  }
}

}  // namespace detail

/// Oracle backward: per-assignment loop in (token, slice, rank) order,
/// accumulating expert grads term by term.
inline DispatchGrads dispatch_backward_naive(
    const DispatchTrace<double>& trace, const RoutedBatchView<double>& v,
    const std::vector<ExpertParams>& experts, const Tensor& grad_out) {
  const std::size_t w = v.width, f = trace.hidden;
  DispatchGrads g = detail::alloc_dispatch_grads(v, experts);
  std::vector<double> dgated(v.assignments() * w, 0.0);
  std::vector<double> dh(f), dhpre(f);
  for (std::size_t r = 0; r < v.rows(); ++r) {
    const double* gout = grad_out.data() + r * w;
    for (std::size_t j = 0; j < v.k; ++j) {
      const std::size_t n = r * v.k + j;
      const auto e = static_cast<std::size_t>(v.ids[n]);
      ExpertParams& de = g.dexperts[e];
      const ExpertParams& pe = experts[e];
      // d(hidden) = dY * U2^T, masked by the saved relu pattern
      detail::matmul_nt_into(gout, pe.U2.data(), dh.data(), 1, w, f);
      for (std::size_t i = 0; i < f; ++i)
        dhpre[i] = trace.mask[n * f + i] ? dh[i] : 0.0;
      // dU2 += H_n^T dY, dc2 += dY
      const double* hn = trace.hidden_act.data() + n * f;
      for (std::size_t p = 0; p < f; ++p) {
        const double hp = hn[p];
        double* du2 = de.U2.data() + p * w;
        for (std::size_t q = 0; q < w; ++q) du2[q] += hp * gout[q];
      }
      for (std::size_t q = 0; q < w; ++q) de.c2[q] += gout[q];
      // d(gated input) = dhpre * U1^T
      detail::matmul_nt_into(dhpre.data(), pe.U1.data(), dgated.data() + n * w,
                             1, f, w);
      // dU1 += X_n^T dhpre, dc1 += dhpre
      const double* xn = trace.gated.data() + n * w;
      for (std::size_t p = 0; p < w; ++p) {
        const double xp = xn[p];
        double* du1 = de.U1.data() + p * f;
        for (std::size_t q = 0; q < f; ++q) du1[q] += xp * dhpre[q];
      }
      for (std::size_t q = 0; q < f; ++q) de.c1[q] += dhpre[q];
    }
  }
  detail::finish_dispatch_grads(dgated, v, g);
  return g;
}

/// Production backward: per-expert stacked GEMMs over the same assignment
/// ordering the forward gather used.
inline DispatchGrads dispatch_backward_grouped(
    const DispatchTrace<double>& trace, const RoutedBatchView<double>& v,
    const std::vector<ExpertParams>& experts, const Tensor& grad_out) {
  const std::size_t w = v.width, f = trace.hidden;
  DispatchGrads g = detail::alloc_dispatch_grads(v, experts);
  std::vector<double> dgated(v.assignments() * w, 0.0);

  std::vector<std::vector<std::size_t>> members(experts.size());
  for (std::size_t n = 0; n < v.assignments(); ++n)
    members[static_cast<std::size_t>(v.ids[n])].push_back(n);

  parallel_for(experts.size(), [&](std::size_t lo, std::size_t hi) {
    for (std::size_t e = lo; e < hi; ++e) {
      const std::size_t ne = members[e].size();
      if (ne == 0) continue;
      const ExpertParams& pe = experts[e];
      ExpertParams& de = g.dexperts[e];
      // Stack dY, H, X rows for this expert in assignment order.
      std::vector<double> dy(ne * w), hs(ne * f), xs(ne * w);
      for (std::size_t r = 0; r < ne; ++r) {
        const std::size_t n = members[e][r];
        const std::size_t row = n / v.k;
        std::copy_n(grad_out.data() + row * w, w, dy.data() + r * w);
        std::copy_n(trace.hidden_act.data() + n * f, f, hs.data() + r * f);
        std::copy_n(trace.gated.data() + n * w, w, xs.data() + r * w);
      }
      std::vector<double> dh(ne * f);
      detail::matmul_nt_into(dy.data(), pe.U2.data(), dh.data(), ne, w, f);
      for (std::size_t r = 0; r < ne; ++r) {
        const std::size_t n = members[e][r];
        for (std::size_t i = 0; i < f; ++i)
          dh[r * f + i] = trace.mask[n * f + i] ? dh[r * f + i] : 0.0;
      }
      detail::matmul_tn_into(hs.data(), dy.data(), de.U2.data(), ne, f, w);
      for (std::size_t r = 0; r < ne; ++r)
        for (std::size_t q = 0; q < w; ++q) de.c2[q] += dy[r * w + q];
      std::vector<double> dx(ne * w);
      detail::matmul_nt_into(dh.data(), pe.U1.data(), dx.data(), ne, f, w);
      detail::matmul_tn_into(xs.data(), dh.data(), de.U1.data(), ne, w, f);
      for (std::size_t r = 0; r < ne; ++r)
        for (std::size_t q = 0; q < f; ++q) de.c1[q] += dh[r * f + q];
      for (std::size_t r = 0; r < ne; ++r)
        std::copy_n(dx.data() + r * w, w,
                    dgated.begin() + static_cast<long>(members[e][r] * w));
    }
  });

  detail::finish_dispatch_grads(dgated, v, g);
  return g;
}

// ---------------------------------------------------------------------------
// Active-parameter accounting.

/// Parameters touched per token forward pass. Each of the S slices activates
/// k of the E expert blocks, so the per-slice active fraction of expert
/// parameters is k/E; the per-token count (with multiplicity) is k*S blocks
/// and is independent of E. The router MLP is shared and counted once.
struct ActiveParamReport {
  std::size_t router_params = 0;
  std::size_t expert_block_params = 0;   // one expert's U1+c1+U2+c2
  std::size_t total_expert_params = 0;   // E blocks
  std::size_t active_expert_params = 0;  // k*S blocks per token
  std::size_t active_params = 0;         // router + active experts
  std::size_t dense_ffn_params = 0;      // width-4d reference FFN
  double expert_fraction = 0.0;          // k/E, per-slice active fraction
  double ratio_vs_dense = 0.0;           // active_params / dense_ffn_params
};

inline ActiveParamReport active_param_count(const SliceMoeConfig& cfg) {
  cfg.validate();
  const std::size_t w = cfg.slice_width(), f = cfg.expert_width(),
                    h = cfg.router_hidden;
  ActiveParamReport r;
  r.router_params = w * h + h + h * cfg.experts + cfg.experts;
  r.expert_block_params = w * f + f + f * w + w;
  r.total_expert_params = cfg.experts * r.expert_block_params;
  r.active_expert_params = cfg.top_k * cfg.slices * r.expert_block_params;
  r.active_params = r.router_params + r.active_expert_params;
  r.dense_ffn_params = cfg.d * 4 * cfg.d + 4 * cfg.d + 4 * cfg.d * cfg.d +
                       cfg.d;
  r.expert_fraction = static_cast<double>(cfg.top_k) /
                      static_cast<double>(cfg.experts);
  r.ratio_vs_dense = static_cast<double>(r.active_params) /
                     static_cast<double>(r.dense_ffn_params);
  return r;
}

/// Instrumented counterpart: reads what a real forward actually touched from
/// the gathered expert batch. Returns the per-token expert parameter count
/// (with multiplicity) and verifies every (token, slice) activated exactly k
/// distinct expert blocks.
template <typename T>
std::size_t instrumented_active_expert_params(
    const ExpertBatchT<T>& batch, const SliceMoeConfig& cfg) {
  const std::size_t block = cfg.slice_width() * cfg.expert_width() +
                            cfg.expert_width() +
                            cfg.expert_width() * cfg.slice_width() +
                            cfg.slice_width();
  // touched[token][slice] -> distinct experts
  std::vector<std::vector<std::vector<int>>> touched;
  std::size_t max_token = 0;
  for (std::size_t e = 0; e < batch.origins.size(); ++e)
    for (const Origin& o : batch.origins[e])
      max_token = std::max(max_token, o.token);
  touched.assign(max_token + 1,
                 std::vector<std::vector<int>>(cfg.slices));
  for (std::size_t e = 0; e < batch.origins.size(); ++e)
    for (const Origin& o : batch.origins[e])
      touched[o.token][o.slice].push_back(static_cast<int>(e));
  std::size_t per_token_blocks = 0;
  for (auto& token : touched) {
    std::size_t blocks = 0;
    for (auto& ids : token) {
      std::sort(ids.begin(), ids.end());
      if (std::adjacent_find(ids.begin(), ids.end()) != ids.end())
        throw ContractError("active params: duplicate expert per slice");
      if (ids.size() != cfg.top_k)
        throw ContractError("active params: slice did not activate k experts");
      blocks += ids.size();
    }
    if (per_token_blocks == 0) per_token_blocks = blocks;
    if (blocks != per_token_blocks)
      throw ContractError("active params: uneven token activation");
  }
  return per_token_blocks * block;
}

}  // namespace slicemoe
