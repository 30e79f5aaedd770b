// Copyright 2026 the slicemoe authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <vector>

#include "slicemoe/config.hpp"
#include "slicemoe/rng.hpp"
#include "slicemoe/tensor.hpp"

namespace slicemoe {

/// Shared router MLP: Linear(d/S -> H_r) -> ReLU -> Linear(H_r -> E).
/// One instance serves every slice of every token.
struct RouterParams {
  Tensor W1;  // [d/S x H_r]
  Tensor b1;  // [H_r]
  Tensor W2;  // [H_r x E]
  Tensor b2;  // [E]
};

/// Variance-preserving init: weights ~ N(0, 1/fan_in), biases zero.
inline RouterParams init_router(const SliceMoeConfig& cfg, Rng& rng) {
  const std::size_t w = cfg.slice_width(), h = cfg.router_hidden,
                    e = cfg.experts;
  RouterParams p;
  p.W1 = gaussian(rng, {w, h}, 1.0 / std::sqrt(static_cast<double>(w)));
  p.b1 = Tensor({h});
  p.W2 = gaussian(rng, {h, e}, 1.0 / std::sqrt(static_cast<double>(h)));
  p.b2 = Tensor({e});
  return p;
}

/// Routing outcome for one (token, slice): the selected experts, their
/// softmax probabilities (descending, before dropout), and the weights
/// actually used to gate the slice (after dropout + renormalization, or
/// equal to gate_probs when dropout is off).
struct RoutingDecision {
  std::vector<int> expert_ids;
  std::vector<double> gate_probs;
  std::vector<double> weights;
};

// ---------------------------------------------------------------------------
// Slice partitioning and the shuffled-coordinate ablation.

/// [B x d] -> [B x S x (d/S)]; slice s of token b is the contiguous block
/// h[b, s*(d/S) .. (s+1)*(d/S)). Row-major layout makes this a reshape.
template <typename T>
TensorT<T> partition_slices(const TensorT<T>& h, std::size_t slices) {
  if (h.rank() != 2) throw DimError("partition_slices: expected rank-2 input");
  const std::size_t b = h.dim(0), d = h.dim(1);
  if (slices == 0 || d % slices != 0)
    throw ConfigError("partition_slices: d must be divisible by slice count");
  return h.reshaped({b, slices, d / slices});
}

/// Inverse of partition_slices; round-trip is bitwise identity.
template <typename T>
TensorT<T> concat_slices(const TensorT<T>& slabs) {
  if (slabs.rank() != 3) throw DimError("concat_slices: expected rank-3");
  return slabs.reshaped({slabs.dim(0), slabs.dim(1) * slabs.dim(2)});
}

/// Fixed permutation of the d coordinates, sampled once per run. Identity in
/// contiguous mode; a seeded shuffle in shuffled mode, applied identically to
/// every token in train and eval.
inline std::vector<std::size_t> make_permutation(PermutationMode mode,
                                                 std::size_t d, Rng rng) {
  std::vector<std::size_t> perm(d);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  if (mode == PermutationMode::kShuffled) rng.shuffle(perm);
  return perm;
}

inline void check_permutation(const std::vector<std::size_t>& perm,
                              std::size_t d) {
  if (perm.size() != d)
    throw ConfigError("permutation: wrong length");
  std::vector<char> seen(d, 0);
  for (std::size_t p : perm) {
    if (p >= d || seen[p])
      throw ConfigError("permutation: not a bijection on [0, d)");
    seen[p] = 1;
  }
}

/// out[b][i] = h[b][perm[i]] for every token b.
template <typename T>
TensorT<T> apply_permutation(const TensorT<T>& h,
                             const std::vector<std::size_t>& perm) {
  if (h.rank() != 2) throw DimError("apply_permutation: expected rank-2");
  const std::size_t b = h.dim(0), d = h.dim(1);
  check_permutation(perm, d);
  TensorT<T> out({b, d});
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t j = 0; j < d; ++j)
      out[i * d + j] = h[i * d + perm[j]];
  return out;
}

// ---------------------------------------------------------------------------
// Router forward pieces. The tape-based training path reuses exactly these
// kernels, so train-time and eval-time logits are bit-identical.

/// Route a batch of slice rows: logits, optional Gaussian noise, tempered
/// softmax. noise_sigma > 0 draws one N(0, sigma) perturbation per logit.
struct RoutedProbs {
  Tensor logits;  // after noise, [n x E]
  Tensor probs;   // [n x E]
};

/// Logits of the router MLP for a batch of slice rows [n x (d/S)] -> [n x E].
inline Tensor router_forward_logits(const Tensor& slice_rows,
                                    const RouterParams& params) {
  Tensor h = add_rowvec(matmul(slice_rows, params.W1), params.b1);
  h = relu(h);
  return add_rowvec(matmul(h, params.W2), params.b2);
}

inline RoutedProbs route(const Tensor& slice_rows, const RouterParams& params,
                         double temperature, double noise_sigma, Rng& rng) {
  if (!(temperature > 0.0))
    throw ConfigError("route: temperature must be positive");
  if (!(noise_sigma >= 0.0))
    throw ConfigError("route: noise_sigma must be >= 0");
  RoutedProbs out;
  out.logits = router_forward_logits(slice_rows, params);
  if (noise_sigma > 0.0) {
    Tensor noise = gaussian(rng, out.logits.shape(), noise_sigma);
    out.logits = add(out.logits, noise);
  }
  out.probs = softmax_rows(out.logits, temperature);
  return out;
}

// ---------------------------------------------------------------------------
// Selection and cross-slice dropout.

/// Indices and probabilities of the k largest entries, probabilities in
/// descending order, ties broken by lower expert index.
inline std::pair<std::vector<int>, std::vector<double>> top_k_select(
    const double* probs, std::size_t n_experts, std::size_t k) {
  if (k == 0 || k > n_experts)
    throw ConfigError("top_k_select: k must be in [1, E]");
  std::vector<int> order(n_experts);
  std::iota(order.begin(), order.end(), 0);
  std::partial_sort(order.begin(), order.begin() + static_cast<long>(k),
                    order.end(), [&](int a, int b) {
                      if (probs[a] != probs[b]) return probs[a] > probs[b];
                      return a < b;
                    });
  std::vector<int> ids(order.begin(), order.begin() + static_cast<long>(k));
  std::vector<double> top(k);
  for (std::size_t j = 0; j < k; ++j)
    top[j] = probs[static_cast<std::size_t>(ids[j])];
  return {std::move(ids), std::move(top)};
}

inline std::pair<std::vector<int>, std::vector<double>> top_k_select(
    const Tensor& probs, std::size_t k) {
  if (probs.rank() != 1) throw DimError("top_k_select: expected rank-1");
  return top_k_select(probs.data(), probs.dim(0), k);
}

/// Survivor renormalization shared by the plain path and the tape op.
/// dropped[j] != 0 zeroes assignment j; survivors are rescaled to sum to 1.
/// If everything is dropped, the highest-probability assignment (rank 0) is
/// restored with weight 1 so information flow is maintained. Returns true
/// when the restore rule fired.
inline bool renormalize_weights(const double* gate_probs,
                                const std::uint8_t* dropped, std::size_t k,
                                double* weights) {
  double survivor_mass = 0.0;
  bool any = false;
  for (std::size_t j = 0; j < k; ++j) {
    if (!dropped[j]) {
      survivor_mass += gate_probs[j];
      any = true;
    }
  }
  if (!any || survivor_mass <= 0.0) {
    for (std::size_t j = 0; j < k; ++j) weights[j] = 0.0;
    weights[0] = 1.0;
    return true;
  }
  for (std::size_t j = 0; j < k; ++j)
    weights[j] = dropped[j] ? 0.0 : gate_probs[j] / survivor_mass;
  return false;
}

/// Training-mode cross-slice dropout on one decision: each of the k
/// assignments is independently zeroed with probability `rate`, survivors
/// renormalized. Eval mode returns the decision unchanged (weights =
/// gate_probs).
inline RoutingDecision cross_slice_dropout(const RoutingDecision& in,
                                           double rate, Rng& rng,
                                           bool training) {
  if (!(rate >= 0.0 && rate < 1.0))
    throw ConfigError("cross_slice_dropout: rate must be in [0, 1)");
  RoutingDecision out = in;
  if (!training || rate == 0.0) {
    out.weights = out.gate_probs;
    return out;
  }
  const std::size_t k = in.expert_ids.size();
  std::vector<std::uint8_t> dropped(k);
  for (std::size_t j = 0; j < k; ++j)
    dropped[j] = rng.bernoulli(rate) ? 1 : 0;
  out.weights.assign(k, 0.0);
  renormalize_weights(in.gate_probs.data(), dropped.data(), k,
                      out.weights.data());
  return out;
}

/// Full plain-tensor routing of a batch of slice rows [n x W]: probabilities,
/// selection, and (in training mode) dropout. Used by evaluation, the
/// benchmark, and tests; the training path shares every kernel but records
/// the softmax on the tape.
inline std::vector<RoutingDecision> route_batch(
    const Tensor& slice_rows, const RouterParams& params,
    const SliceMoeConfig& cfg, Rng& noise_rng, Rng& dropout_rng,
    bool training) {
  Rng noise = noise_rng;  // local copies keep call sites replayable
  RoutedProbs routed =
      route(slice_rows, params, cfg.temperature,
            training ? cfg.noise_sigma : 0.0, noise);
  const std::size_t n = routed.probs.dim(0), e = routed.probs.dim(1);
  std::vector<RoutingDecision> decisions(n);
  for (std::size_t r = 0; r < n; ++r) {
    auto [ids, top] = top_k_select(routed.probs.data() + r * e, e, cfg.top_k);
    decisions[r].expert_ids = std::move(ids);
    decisions[r].gate_probs = std::move(top);
    decisions[r] = cross_slice_dropout(decisions[r], cfg.dropout, dropout_rng,
                                       training);
  }
  return decisions;
}

}  // namespace slicemoe
