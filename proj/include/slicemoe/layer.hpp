// Copyright 2026 the slicemoe authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <memory>
#include <utility>
#include <vector>

#include "slicemoe/autodiff.hpp"
#include "slicemoe/dispatch.hpp"
#include "slicemoe/objectives.hpp"
#include "slicemoe/router.hpp"

namespace slicemoe {

// ---------------------------------------------------------------------------
// Domain tape ops. Discrete routing artifacts (top-k ids, dropout masks,
// noise draws) enter these ops as frozen constants; gradients flow only
// through the softmax probabilities of selected experts.

namespace ad_ops {

using ad::Tape;
using ad::Var;

/// Gather the probabilities of the selected experts: [N x E] -> [N x k].
inline Var select_probs(Tape& t, Var probs, std::vector<int> ids,
                        std::size_t k) {
  const Tensor& p = t.value(probs);
  const std::size_t n = p.dim(0), e = p.dim(1);
  if (ids.size() != n * k) throw ContractError("select_probs: id count");
  Tensor sel({n, k});
  for (std::size_t i = 0; i < n * k; ++i)
    sel[i] = p[(i / k) * e + static_cast<std::size_t>(ids[i])];
  Var out = t.push(std::move(sel), t.requires_grad(probs));
  t.set_backprop(out, [out, probs, ids = std::move(ids), k, e](Tape& tp) {
    if (!tp.requires_grad(probs)) return;
    const Tensor& d = tp.grad(out);
    Tensor& gp = tp.grad_mut(probs);
    for (std::size_t i = 0; i < d.size(); ++i)
      gp[(i / k) * e + static_cast<std::size_t>(ids[i])] += d[i];
  });
  return out;
}

/// Cross-slice dropout with survivor renormalization, mask frozen.
/// w_j = m_j p_j / sum_i m_i p_i; rows where everything was dropped restore
/// rank 0 with constant weight 1 (no gradient).
inline Var dropout_renorm(Tape& t, Var sel, std::vector<std::uint8_t> dropped) {
  const Tensor& p = t.value(sel);
  const std::size_t n = p.dim(0), k = p.dim(1);
  if (dropped.size() != n * k) throw ContractError("dropout_renorm: mask size");
  Tensor w({n, k});
  auto restored = std::make_shared<std::vector<std::uint8_t>>(n, 0);
  for (std::size_t r = 0; r < n; ++r)
    (*restored)[r] = renormalize_weights(p.data() + r * k,
                                         dropped.data() + r * k, k,
                                         w.data() + r * k)
                         ? 1
                         : 0;
  Var out = t.push(std::move(w), t.requires_grad(sel));
  t.set_backprop(out, [out, sel, dropped = std::move(dropped), restored, n,
                       k](Tape& tp) {
    if (!tp.requires_grad(sel)) return;
    const Tensor& d = tp.grad(out);
    const Tensor& pv = tp.value(sel);
    const Tensor& wv = tp.value(out);
    Tensor& gp = tp.grad_mut(sel);
    for (std::size_t r = 0; r < n; ++r) {
      if ((*restored)[r]) continue;  // constant row
      const double* pr = pv.data() + r * k;
      const double* wr = wv.data() + r * k;
      const double* dr = d.data() + r * k;
      double s = 0.0;
      for (std::size_t j = 0; j < k; ++j)
        if (!dropped[r * k + j]) s += pr[j];
      double dot = 0.0;
      for (std::size_t j = 0; j < k; ++j) dot += dr[j] * wr[j];
      for (std::size_t j = 0; j < k; ++j)
        if (!dropped[r * k + j]) gp[r * k + j] += (dr[j] - dot) / s;
    }
  });
  return out;
}

/// Differentiable load surrogate: soft_counts[e] = sum of selected gate
/// probabilities routed to e. [N x k] -> [E].
inline Var soft_counts(Tape& t, Var sel, std::vector<int> ids,
                       std::size_t n_experts) {
  const Tensor& p = t.value(sel);
  if (ids.size() != p.size()) throw ContractError("soft_counts: id count");
  Tensor c({n_experts});
  for (std::size_t i = 0; i < p.size(); ++i)
    c[static_cast<std::size_t>(ids[i])] += p[i];
  Var out = t.push(std::move(c), t.requires_grad(sel));
  t.set_backprop(out, [out, sel, ids = std::move(ids)](Tape& tp) {
    if (!tp.requires_grad(sel)) return;
    const Tensor& d = tp.grad(out);
    Tensor& gp = tp.grad_mut(sel);
    for (std::size_t i = 0; i < gp.size(); ++i)
      gp[i] += d[static_cast<std::size_t>(ids[i])];
  });
  return out;
}

/// alpha * squared coefficient of variation of the soft counts.
inline Var capacity_loss(Tape& t, Var counts, double alpha) {
  const Tensor& c = t.value(counts);
  Tensor v({1});
  v[0] = slicemoe::capacity_loss(c, alpha);
  Var out = t.push(std::move(v), t.requires_grad(counts));
  t.set_backprop(out, [out, counts, alpha](Tape& tp) {
    if (!tp.requires_grad(counts)) return;
    const double d = tp.grad(out)[0];
    const Tensor& cv = tp.value(counts);
    std::vector<double> g =
        capacity_loss_grad(cv.data(), cv.size(), alpha);
    Tensor& gc = tp.grad_mut(counts);
    for (std::size_t i = 0; i < gc.size(); ++i) gc[i] += d * g[i];
  });
  return out;
}

/// Mean negative log-likelihood of integer labels under row softmax.
inline Var cross_entropy(Tape& t, Var logits, std::vector<int> labels) {
  const Tensor& lv = t.value(logits);
  Tensor v({1});
  v[0] = slicemoe::cross_entropy(lv, labels);
  Var out = t.push(std::move(v), t.requires_grad(logits));
  t.set_backprop(out, [out, logits, labels = std::move(labels)](Tape& tp) {
    if (!tp.requires_grad(logits)) return;
    const double d = tp.grad(out)[0];
    const Tensor& lv2 = tp.value(logits);
    const std::size_t b = lv2.dim(0), c = lv2.dim(1);
    Tensor p = softmax_rows(lv2, 1.0);
    Tensor& gl = tp.grad_mut(logits);
    const double inv_b = 1.0 / static_cast<double>(b);
    for (std::size_t i = 0; i < b; ++i)
      for (std::size_t j = 0; j < c; ++j) {
        const double onehot =
            (static_cast<std::size_t>(labels[i]) == j) ? 1.0 : 0.0;
        gl[i * c + j] += d * (p[i * c + j] - onehot) * inv_b;
      }
  });
  return out;
}

struct ExpertVars {
  Var U1, c1, U2, c2;
};

/// Gate (Eq.-1 multiply), dispatch to experts, reassemble: the layer body as
/// one tape node. `grouped` selects which of the two bit-identical routes
/// computes it; gradients of both routes also agree bitwise.
inline Var dispatch(Tape& t, Var slabs, Var weights, std::vector<int> ids,
                    const std::vector<ExpertVars>& experts, bool grouped) {
  const Tensor& sv = t.value(slabs);
  if (sv.rank() != 3) throw DimError("dispatch: slabs must be [B x S x W]");
  auto params = std::make_shared<std::vector<ExpertParams>>();
  params->reserve(experts.size());
  for (const auto& e : experts)
    params->push_back(ExpertParams{t.value(e.U1), t.value(e.c1),
                                   t.value(e.U2), t.value(e.c2)});
  auto ids_ptr = std::make_shared<std::vector<int>>(std::move(ids));
  auto trace = std::make_shared<DispatchTrace<double>>();

  RoutedBatchView<double> view;
  view.batch = sv.dim(0);
  view.slices = sv.dim(1);
  view.width = sv.dim(2);
  view.k = t.value(weights).dim(1);
  view.n_experts = params->size();
  view.ids = ids_ptr->data();
  view.weights = t.value(weights).data();
  view.slabs = sv.data();

  Tensor out_val = grouped ? dispatch_grouped(view, *params, trace.get())
                           : dispatch_naive(view, *params, trace.get());

  bool req = t.requires_grad(slabs) || t.requires_grad(weights);
  for (const auto& e : experts)
    req = req || t.requires_grad(e.U1) || t.requires_grad(e.c1) ||
          t.requires_grad(e.U2) || t.requires_grad(e.c2);

  Var out = t.push(std::move(out_val), req);
  std::vector<ExpertVars> evars = experts;
  t.set_backprop(out, [out, slabs, weights, ids_ptr, params, trace, grouped,
                       evars = std::move(evars)](Tape& tp) {
    const Tensor& sv2 = tp.value(slabs);
    RoutedBatchView<double> v;
    v.batch = sv2.dim(0);
    v.slices = sv2.dim(1);
    v.width = sv2.dim(2);
    v.k = tp.value(weights).dim(1);
    v.n_experts = params->size();
    v.ids = ids_ptr->data();
    v.weights = tp.value(weights).data();
    v.slabs = sv2.data();
    DispatchGrads g =
        grouped ? dispatch_backward_grouped(*trace, v, *params, tp.grad(out))
                : dispatch_backward_naive(*trace, v, *params, tp.grad(out));
    if (tp.requires_grad(slabs))
      ad::detail::add_into(tp.grad_mut(slabs), g.dslabs);
    if (tp.requires_grad(weights))
      ad::detail::add_into(tp.grad_mut(weights), g.dweights);
    for (std::size_t e = 0; e < evars.size(); ++e) {
      if (tp.requires_grad(evars[e].U1))
        ad::detail::add_into(tp.grad_mut(evars[e].U1), g.dexperts[e].U1);
      if (tp.requires_grad(evars[e].c1))
        ad::detail::add_into(tp.grad_mut(evars[e].c1), g.dexperts[e].c1);
      if (tp.requires_grad(evars[e].U2))
        ad::detail::add_into(tp.grad_mut(evars[e].U2), g.dexperts[e].U2);
      if (tp.requires_grad(evars[e].c2))
        ad::detail::add_into(tp.grad_mut(evars[e].c2), g.dexperts[e].c2);
    }
  });
  return out;
}

}  // namespace ad_ops

// ---------------------------------------------------------------------------
// Model: router + experts + linear classifier head over the reassembled
// token, plus the fixed coordinate permutation of the shuffled-slice mode.

struct ModelParams {
  RouterParams router;
  std::vector<ExpertParams> experts;
  Tensor Wc;  // [d x C]
  Tensor bc;  // [C]
  std::vector<std::size_t> perm;  // coordinate permutation, size d
};

inline ModelParams init_model(const SliceMoeConfig& cfg, std::size_t classes,
                              std::uint64_t seed) {
  cfg.validate();
  if (classes < 2) throw ConfigError("model: need at least 2 classes");
  Rng init(seed, stream::kInit);
  ModelParams m;
  m.router = init_router(cfg, init);
  m.experts = init_experts(cfg, init);
  m.Wc = gaussian(init, {cfg.d, classes},
                  1.0 / std::sqrt(static_cast<double>(cfg.d)));
  m.bc = Tensor({classes});
  m.perm = make_permutation(cfg.permutation, cfg.d,
                            Rng(seed, stream::kPermutation));
  return m;
}

/// Canonical parameter order shared by gradient collection, the optimizer,
/// and checkpoints.
inline std::vector<std::pair<std::string, Tensor*>> named_params(
    ModelParams& m) {
  std::vector<std::pair<std::string, Tensor*>> out;
  out.emplace_back("router.W1", &m.router.W1);
  out.emplace_back("router.b1", &m.router.b1);
  out.emplace_back("router.W2", &m.router.W2);
  out.emplace_back("router.b2", &m.router.b2);
  for (std::size_t e = 0; e < m.experts.size(); ++e) {
    const std::string p = "expert" + std::to_string(e);
    out.emplace_back(p + ".U1", &m.experts[e].U1);
    out.emplace_back(p + ".c1", &m.experts[e].c1);
    out.emplace_back(p + ".U2", &m.experts[e].U2);
    out.emplace_back(p + ".c2", &m.experts[e].c2);
  }
  out.emplace_back("classifier.W", &m.Wc);
  out.emplace_back("classifier.b", &m.bc);
  return out;
}

struct ModelVars {
  ad::Var W1, b1, W2, b2;
  std::vector<ad_ops::ExpertVars> experts;
  ad::Var Wc, bc;

  std::vector<ad::Var> all() const {
    std::vector<ad::Var> v{W1, b1, W2, b2};
    for (const auto& e : experts) {
      v.push_back(e.U1);
      v.push_back(e.c1);
      v.push_back(e.U2);
      v.push_back(e.c2);
    }
    v.push_back(Wc);
    v.push_back(bc);
    return v;
  }
};

inline ModelVars register_model(ad::Tape& t, const ModelParams& m) {
  ModelVars v;
  v.W1 = t.leaf(m.router.W1);
  v.b1 = t.leaf(m.router.b1);
  v.W2 = t.leaf(m.router.W2);
  v.b2 = t.leaf(m.router.b2);
  for (const auto& e : m.experts)
    v.experts.push_back(ad_ops::ExpertVars{t.leaf(e.U1), t.leaf(e.c1),
                                           t.leaf(e.U2), t.leaf(e.c2)});
  v.Wc = t.leaf(m.Wc);
  v.bc = t.leaf(m.bc);
  return v;
}

/// Routing randomness of one forward, recorded so the pass can be replayed
/// exactly (the finite-difference oracle freezes these).
struct FrozenRouting {
  bool has_noise = false;
  Tensor noise;                       // [N x E]
  std::vector<int> ids;               // [N * k]
  bool has_mask = false;
  std::vector<std::uint8_t> dropped;  // [N * k]
};

/// Handles into the training graph of one step.
struct TrainStepGraph {
  ad::Var slabs;     // leaf, [B x S x W] (input gradient flows here)
  ad::Var probs;     // [N x E]
  ad::Var selected;  // [N x k] pre-dropout gate probs
  ad::Var weights;   // [N x k] post-dropout
  ad::Var layer_out;  // [B x d]
  ad::Var cls_logits;  // [B x C]
  ad::Var task_loss, cap_loss, loss;  // scalars
  std::vector<RoutingDecision> decisions;
  FrozenRouting frozen;
  LoadCounts loads;
};

/// Builds the training graph over an existing slabs leaf [B x S x W]:
/// shared router -> tempered softmax (+ optional logit noise) -> frozen
/// top-k -> cross-slice dropout -> Eq.-1 gating + expert dispatch ->
/// reassembly -> classifier -> cross-entropy + capacity loss. Passing
/// `replay` freezes noise, selection, and dropout to a previous forward's
/// draws (the finite-difference oracle depends on this).
inline TrainStepGraph layer_graph(ad::Tape& t, const ModelVars& mv,
                                  ad::Var slabs,
                                  const std::vector<int>& labels,
                                  const SliceMoeConfig& cfg, Rng noise_rng,
                                  Rng dropout_rng, bool grouped,
                                  const FrozenRouting* replay = nullptr) {
  cfg.validate();
  const Tensor& sv = t.value(slabs);
  if (sv.rank() != 3 || sv.dim(1) != cfg.slices ||
      sv.dim(2) != cfg.slice_width())
    throw DimError("layer_graph: slabs shape does not match config");
  const std::size_t s = cfg.slices, w = cfg.slice_width(), e = cfg.experts,
                    k = cfg.top_k;
  const std::size_t rows = sv.dim(0) * s;

  TrainStepGraph gph;
  gph.slabs = slabs;

  ad::Var slab_rows = ad::reshape(t, gph.slabs, {rows, w});
  ad::Var hidden = ad::relu(
      t, ad::add_rowvec(t, ad::matmul(t, slab_rows, mv.W1), mv.b1));
  ad::Var logits =
      ad::add_rowvec(t, ad::matmul(t, hidden, mv.W2), mv.b2);

  if (replay ? replay->has_noise : cfg.noise_sigma > 0.0) {
    Tensor noise = replay ? replay->noise
                          : gaussian(noise_rng, {rows, e}, cfg.noise_sigma);
    gph.frozen.has_noise = true;
    gph.frozen.noise = noise;
    logits = ad::add(t, logits, t.constant(std::move(noise)));
  }
  gph.probs = ad::softmax_rows(t, logits, cfg.temperature);

  // Frozen selection: the discrete top-k is non-differentiable.
  std::vector<int> ids;
  if (replay) {
    ids = replay->ids;
  } else {
    ids.reserve(rows * k);
    const Tensor& pv = t.value(gph.probs);
    for (std::size_t r = 0; r < rows; ++r) {
      auto [rid, rtop] = top_k_select(pv.data() + r * e, e, k);
      ids.insert(ids.end(), rid.begin(), rid.end());
    }
  }
  gph.frozen.ids = ids;
  gph.selected = ad_ops::select_probs(t, gph.probs, ids, k);

  if (cfg.dropout > 0.0) {
    std::vector<std::uint8_t> dropped;
    if (replay && replay->has_mask) {
      dropped = replay->dropped;
    } else {
      dropped.resize(rows * k);
      for (auto& bit : dropped) bit = dropout_rng.bernoulli(cfg.dropout);
    }
    gph.frozen.has_mask = true;
    gph.frozen.dropped = dropped;
    gph.weights = ad_ops::dropout_renorm(t, gph.selected, dropped);
  } else {
    gph.weights = gph.selected;
  }

  gph.layer_out =
      ad_ops::dispatch(t, gph.slabs, gph.weights, ids, mv.experts, grouped);
  gph.cls_logits =
      ad::add_rowvec(t, ad::matmul(t, gph.layer_out, mv.Wc), mv.bc);
  gph.task_loss = ad_ops::cross_entropy(t, gph.cls_logits, labels);

  ad::Var counts = ad_ops::soft_counts(t, gph.selected, ids, e);
  gph.cap_loss = ad_ops::capacity_loss(t, counts, cfg.alpha);
  gph.loss = ad::add(t, gph.task_loss, gph.cap_loss);

  // Bookkeeping: decisions + load tallies mirroring the tape values.
  const Tensor& selv = t.value(gph.selected);
  const Tensor& wv = t.value(gph.weights);
  gph.decisions.resize(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    auto& d = gph.decisions[r];
    d.expert_ids.assign(ids.begin() + static_cast<long>(r * k),
                        ids.begin() + static_cast<long>((r + 1) * k));
    d.gate_probs.assign(selv.data() + r * k, selv.data() + (r + 1) * k);
    d.weights.assign(wv.data() + r * k, wv.data() + (r + 1) * k);
  }
  gph.loads = soft_counts(gph.decisions, e);
  return gph;
}

/// Training forward from a raw [B x d] batch: applies the fixed coordinate
/// permutation, partitions into slices, registers the slabs leaf, and builds
/// the graph.
inline TrainStepGraph layer_forward_train(
    ad::Tape& t, const ModelVars& mv, const ModelParams& m, const Tensor& x,
    const std::vector<int>& labels, const SliceMoeConfig& cfg, Rng noise_rng,
    Rng dropout_rng, bool grouped, const FrozenRouting* replay = nullptr) {
  if (x.rank() != 2 || x.dim(1) != cfg.d)
    throw DimError("layer_forward_train: expected [B x d] input");
  Tensor x_perm = apply_permutation(x, m.perm);
  ad::Var slabs = t.leaf(partition_slices(x_perm, cfg.slices));
  return layer_graph(t, mv, slabs, labels, cfg, noise_rng, dropout_rng,
                     grouped, replay);
}

/// Inference forward: dropout and noise off, weights equal the raw top-k
/// gate probabilities, grouped dispatch by default.
struct EvalOutput {
  Tensor layer_out;  // [B x d]
  Tensor logits;     // [B x C]
  std::vector<RoutingDecision> decisions;
};

inline EvalOutput layer_forward_eval(const ModelParams& m, const Tensor& x,
                                     const SliceMoeConfig& cfg,
                                     bool grouped = true) {
  cfg.validate();
  if (x.rank() != 2 || x.dim(1) != cfg.d)
    throw DimError("layer_forward_eval: expected [B x d] input");
  Tensor x_perm = apply_permutation(x, m.perm);
  Tensor slabs = partition_slices(x_perm, cfg.slices);
  Tensor slab_rows =
      slabs.reshaped({x.dim(0) * cfg.slices, cfg.slice_width()});
  Rng unused(0);
  std::vector<RoutingDecision> decisions = route_batch(
      slab_rows, m.router, cfg, unused, unused, /*training=*/false);
  EvalOutput out;
  out.layer_out = grouped
                      ? dispatch_grouped(slabs, decisions, m.experts)
                      : dispatch_naive(slabs, decisions, m.experts);
  out.logits = add_rowvec(matmul(out.layer_out, m.Wc), m.bc);
  out.decisions = std::move(decisions);
  return out;
}

/// Sequence inputs [B x T x d] flatten to (B*T) token rows; the layer is
/// shared across positions.
inline Tensor flatten_tokens(const Tensor& x) {
  if (x.rank() != 3) throw DimError("flatten_tokens: expected [B x T x d]");
  return x.reshaped({x.dim(0) * x.dim(1), x.dim(2)});
}

}  // namespace slicemoe
