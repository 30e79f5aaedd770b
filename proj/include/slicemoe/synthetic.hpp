// Copyright 2026 the slicemoe authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <numeric>
#include <vector>

#include "slicemoe/config.hpp"
#include "slicemoe/rng.hpp"
#include "slicemoe/tensor.hpp"

namespace slicemoe {

struct Dataset {
  Tensor x;  // [N x d]
  std::vector<int> labels;

  std::size_t size() const { return labels.size(); }
};

struct SyntheticData {
  Dataset train;
  Dataset val;
  std::size_t classes = 0;
};

/// Segment-structured synthetic task. Fixed unit-norm concept centroids are
/// drawn once per (segment, concept) from the seed; each sample picks one
/// concept per segment uniformly and adds N(0, noise_std) coordinate noise.
/// The label is the concept of spec.label_segment, so only one contiguous
/// segment carries label signal. 80/20 train/val split by seeded shuffle.
inline SyntheticData generate_synthetic(const SyntheticSpec& spec,
                                        std::uint64_t seed) {
  spec.validate();
  const std::size_t seg_w = spec.d / spec.segments;
  Rng data_rng(seed, stream::kData);
  Rng centroid_rng = data_rng.derive(0);
  Rng sample_rng = data_rng.derive(1);
  Rng split_rng = data_rng.derive(2);

  // centroids[g][c]: unit-norm direction of concept c inside segment g.
  std::vector<std::vector<std::vector<double>>> centroids(spec.segments);
  for (std::size_t g = 0; g < spec.segments; ++g) {
    centroids[g].resize(spec.concepts);
    for (std::size_t c = 0; c < spec.concepts; ++c) {
      std::vector<double> v(seg_w);
      double norm2 = 0.0;
      for (double& x : v) {
        x = centroid_rng.gaussian();
        norm2 += x * x;
      }
      const double inv = 1.0 / std::sqrt(norm2);
      for (double& x : v) x *= inv;
      centroids[g][c] = std::move(v);
    }
  }

  Tensor all({spec.n_samples, spec.d});
  std::vector<int> labels(spec.n_samples);
  for (std::size_t i = 0; i < spec.n_samples; ++i) {
    for (std::size_t g = 0; g < spec.segments; ++g) {
      const auto concept_id =
          static_cast<std::size_t>(sample_rng.next_u64() % spec.concepts);
      if (g == spec.label_segment) labels[i] = static_cast<int>(concept_id);
      double* dst = all.data() + i * spec.d + g * seg_w;
      const auto& ctr = centroids[g][concept_id];
      for (std::size_t j = 0; j < seg_w; ++j)
        dst[j] = ctr[j] + spec.noise_std * sample_rng.gaussian();
    }
  }

  std::vector<std::size_t> order(spec.n_samples);
  std::iota(order.begin(), order.end(), std::size_t{0});
  split_rng.shuffle(order);
  const std::size_t n_train = spec.n_samples * 8 / 10;

  SyntheticData out;
  out.classes = spec.concepts;
  auto take = [&](std::size_t lo, std::size_t hi) {
    Dataset ds;
    ds.x = Tensor({hi - lo, spec.d});
    ds.labels.resize(hi - lo);
    for (std::size_t i = lo; i < hi; ++i) {
      const std::size_t src = order[i];
      std::copy_n(all.data() + src * spec.d, spec.d,
                  ds.x.data() + (i - lo) * spec.d);
      ds.labels[i - lo] = labels[src];
    }
    return ds;
  };
  out.train = take(0, n_train);
  out.val = take(n_train, spec.n_samples);
  return out;
}

/// Rows lo..hi of a dataset as a batch.
inline std::pair<Tensor, std::vector<int>> dataset_batch(
    const Dataset& ds, const std::vector<std::size_t>& order, std::size_t lo,
    std::size_t hi) {
  const std::size_t d = ds.x.dim(1);
  Tensor bx({hi - lo, d});
  std::vector<int> by(hi - lo);
  for (std::size_t i = lo; i < hi; ++i) {
    std::copy_n(ds.x.data() + order[i] * d, d, bx.data() + (i - lo) * d);
    by[i - lo] = ds.labels[order[i]];
  }
  return {std::move(bx), std::move(by)};
}

}  // namespace slicemoe
