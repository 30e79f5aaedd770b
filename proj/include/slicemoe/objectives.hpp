// Copyright 2026 the slicemoe authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <iostream>
#include <vector>

#include "slicemoe/router.hpp"
#include "slicemoe/tensor.hpp"

namespace slicemoe {

/// Capacity loss: alpha * (std/mean)^2 over per-expert assignment counts,
/// population standard deviation. Zero iff all counts are equal; scale-free
/// in the counts. The differentiable form runs on soft counts (summed gate
/// probabilities); hard integer counts are metric-only.
inline double capacity_loss(const double* counts, std::size_t n_experts,
                            double alpha) {
  double mean = 0.0;
  for (std::size_t e = 0; e < n_experts; ++e) mean += counts[e];
  mean /= static_cast<double>(n_experts);
  if (!(mean > 0.0)) {
    std::cerr << "slicemoe: capacity_loss on empty batch, defining as 0\n";
    return 0.0;
  }
  double var = 0.0;
  for (std::size_t e = 0; e < n_experts; ++e) {
    const double dev = counts[e] - mean;
    var += dev * dev;
  }
  var /= static_cast<double>(n_experts);
  return alpha * var / (mean * mean);
}

inline double capacity_loss(const Tensor& counts, double alpha) {
  if (counts.rank() != 1) throw DimError("capacity_loss: expected rank-1");
  return capacity_loss(counts.data(), counts.dim(0), alpha);
}

/// d(capacity_loss)/d(counts_e) = (2 alpha / E) * ((c_e - mean) * mean - var)
/// / mean^3. Zero on the degenerate empty batch.
inline std::vector<double> capacity_loss_grad(const double* counts,
                                              std::size_t n_experts,
                                              double alpha) {
  std::vector<double> grad(n_experts, 0.0);
  double mean = 0.0;
  for (std::size_t e = 0; e < n_experts; ++e) mean += counts[e];
  mean /= static_cast<double>(n_experts);
  if (!(mean > 0.0)) return grad;
  double var = 0.0;
  for (std::size_t e = 0; e < n_experts; ++e) {
    const double dev = counts[e] - mean;
    var += dev * dev;
  }
  var /= static_cast<double>(n_experts);
  const double m3 = mean * mean * mean;
  for (std::size_t e = 0; e < n_experts; ++e)
    grad[e] = 2.0 * alpha / static_cast<double>(n_experts) *
              ((counts[e] - mean) * mean - var) / m3;
  return grad;
}

/// Entropy of Load Estimate: -sum_e load_e log load_e / log E, with
/// 0 log 0 = 0. Loads are fractions of total assignments and must sum to 1
/// within 1e-9. 1 means perfect balance, 0 means one expert takes all.
inline double ele(const double* loads, std::size_t n_experts) {
  if (n_experts == 0) throw ContractError("ele: no experts");
  if (n_experts == 1) return 1.0;  // single expert is trivially balanced
  double total = 0.0;
  for (std::size_t e = 0; e < n_experts; ++e) {
    if (loads[e] < 0.0) throw ContractError("ele: negative load");
    total += loads[e];
  }
  if (std::abs(total - 1.0) > 1e-9)
    throw ContractError("ele: loads must sum to 1");
  double h = 0.0;
  for (std::size_t e = 0; e < n_experts; ++e)
    if (loads[e] > 0.0) h -= loads[e] * std::log(loads[e]);
  return h / std::log(static_cast<double>(n_experts));
}

inline double ele(const Tensor& loads) {
  if (loads.rank() != 1) throw DimError("ele: expected rank-1 loads");
  return ele(loads.data(), loads.dim(0));
}

/// ELE over raw assignment counts; returns 0 for an empty tally.
inline double ele_from_counts(const std::vector<long>& counts) {
  long total = 0;
  for (long c : counts) total += c;
  if (total <= 0) return 0.0;
  std::vector<double> loads(counts.size());
  for (std::size_t e = 0; e < counts.size(); ++e)
    loads[e] = static_cast<double>(counts[e]) / static_cast<double>(total);
  return ele(loads.data(), loads.size());
}

/// Mean cross-entropy of logits [B x C] against integer labels, computed
/// with log-sum-exp stabilization.
inline double cross_entropy(const Tensor& logits,
                            const std::vector<int>& labels) {
  if (logits.rank() != 2) throw DimError("cross_entropy: expected rank-2");
  const std::size_t b = logits.dim(0), c = logits.dim(1);
  if (labels.size() != b)
    throw ContractError("cross_entropy: one label per row");
  double loss = 0.0;
  for (std::size_t i = 0; i < b; ++i) {
    const int label = labels[i];
    if (label < 0 || static_cast<std::size_t>(label) >= c)
      throw DataError("cross_entropy: label out of range");
    const double* row = logits.data() + i * c;
    double mx = row[0];
    for (std::size_t j = 1; j < c; ++j)
      if (row[j] > mx) mx = row[j];
    double lse = 0.0;
    for (std::size_t j = 0; j < c; ++j) lse += std::exp(row[j] - mx);
    loss += std::log(lse) + mx - row[static_cast<std::size_t>(label)];
  }
  return loss / static_cast<double>(b);
}

/// Differentiable load surrogate plus the hard tally. soft[e] sums the
/// pre-dropout gate probabilities of every assignment routed to e, giving
/// the router a smooth path from the balance objective; hard[e] counts
/// assignments and feeds the ELE metric.
struct LoadCounts {
  std::vector<double> soft;
  std::vector<long> hard;
};

inline LoadCounts soft_counts(const std::vector<RoutingDecision>& decisions,
                              std::size_t n_experts) {
  LoadCounts lc;
  lc.soft.assign(n_experts, 0.0);
  lc.hard.assign(n_experts, 0);
  for (const auto& d : decisions) {
    for (std::size_t j = 0; j < d.expert_ids.size(); ++j) {
      const auto e = static_cast<std::size_t>(d.expert_ids[j]);
      if (e >= n_experts) throw ContractError("soft_counts: bad expert id");
      lc.soft[e] += d.gate_probs[j];
      lc.hard[e] += 1;
    }
  }
  return lc;
}

/// Task loss plus capacity loss; alpha is already inside cap.
struct LossBundle {
  double task = 0.0;
  double cap = 0.0;
  double total() const { return task + cap; }
};

}  // namespace slicemoe
