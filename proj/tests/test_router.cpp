// Copyright 2026 the slicemoe authors
// SPDX-License-Identifier: Apache-2.0
//
// Slice partitioning, the shuffled-coordinate ablation, the shared router
// MLP, top-k selection, and cross-slice dropout.

#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>

#include "slicemoe/router.hpp"

namespace {

using slicemoe::RoutingDecision;
using slicemoe::Rng;
using slicemoe::Tensor;

TEST(Partition, DefinitionOnSmallRow) {
  Tensor h({1, 6}, {1, 2, 3, 4, 5, 6});
  Tensor slabs = slicemoe::partition_slices(h, 3);
  EXPECT_EQ(slabs.shape(), (std::vector<std::size_t>{1, 3, 2}));
  EXPECT_EQ(slabs.raw(), h.raw());  // contiguous reshape
}

TEST(Partition, DegenerateSliceCounts) {
  Rng rng(1);
  Tensor h = slicemoe::gaussian(rng, {3, 8});
  Tensor one = slicemoe::partition_slices(h, 1);
  EXPECT_EQ(one.shape(), (std::vector<std::size_t>{3, 1, 8}));
  Tensor each = slicemoe::partition_slices(h, 8);
  EXPECT_EQ(each.shape(), (std::vector<std::size_t>{3, 8, 1}));
}

TEST(Partition, RoundTripBitwiseForAllDivisors) {
  Rng rng(2);
  Tensor h = slicemoe::gaussian(rng, {4, 12});
  for (std::size_t s : {1u, 2u, 3u, 4u, 6u, 12u}) {
    Tensor back = slicemoe::concat_slices(slicemoe::partition_slices(h, s));
    EXPECT_EQ(back.raw(), h.raw()) << "S=" << s;
  }
}

TEST(Partition, IndivisibleWidthRejected) {
  Tensor h({2, 6});
  EXPECT_THROW(slicemoe::partition_slices(h, 4), slicemoe::ConfigError);
}

TEST(Permutation, ContiguousModeIsIdentity) {
  Rng rng(3);
  Tensor h = slicemoe::gaussian(rng, {2, 8});
  auto perm = slicemoe::make_permutation(
      slicemoe::PermutationMode::kContiguous, 8, Rng(7));
  Tensor out = slicemoe::apply_permutation(h, perm);
  EXPECT_EQ(out.raw(), h.raw());
}

TEST(Permutation, ReversalDefinition) {
  Tensor h({1, 4}, {1, 2, 3, 4});
  std::vector<std::size_t> rev{3, 2, 1, 0};
  Tensor out = slicemoe::apply_permutation(h, rev);
  EXPECT_EQ(out.raw(), std::vector<double>({4, 3, 2, 1}));
  Tensor slabs = slicemoe::partition_slices(out, 2);
  EXPECT_EQ(slabs.at(0, 0, 0), 4);
  EXPECT_EQ(slabs.at(0, 0, 1), 3);
  EXPECT_EQ(slabs.at(0, 1, 0), 2);
  EXPECT_EQ(slabs.at(0, 1, 1), 1);
}

TEST(Permutation, SameSeedSamePermutation) {
  auto a = slicemoe::make_permutation(
      slicemoe::PermutationMode::kShuffled, 16,
      Rng(42, slicemoe::stream::kPermutation));
  auto b = slicemoe::make_permutation(
      slicemoe::PermutationMode::kShuffled, 16,
      Rng(42, slicemoe::stream::kPermutation));
  EXPECT_EQ(a, b);
  slicemoe::check_permutation(a, 16);
}

TEST(Permutation, NonBijectionRejected) {
  Tensor h({1, 3});
  EXPECT_THROW(slicemoe::apply_permutation(h, {0, 0, 1}),
               slicemoe::ConfigError);
  EXPECT_THROW(slicemoe::apply_permutation(h, {0, 1}), slicemoe::ConfigError);
}

slicemoe::RouterParams zero_router(std::size_t w, std::size_t h,
                                   std::size_t e) {
  slicemoe::RouterParams p;
  p.W1 = Tensor({w, h});
  p.b1 = Tensor({h});
  p.W2 = Tensor({h, e});
  p.b2 = Tensor({e});
  return p;
}

TEST(Route, ZeroParamsGiveUniformProbs) {
  auto params = zero_router(4, 6, 5);
  Rng rng(9);
  Tensor rows = slicemoe::gaussian(rng, {3, 4});
  Rng noise(1);
  auto routed = slicemoe::route(rows, params, 1.0, 0.0, noise);
  for (std::size_t i = 0; i < routed.probs.size(); ++i)
    EXPECT_NEAR(routed.probs[i], 0.2, 1e-15);
}

TEST(Route, DeterministicWithoutNoise) {
  Rng rng(10);
  slicemoe::SliceMoeConfig cfg;
  cfg.d = 8;
  cfg.slices = 2;
  cfg.experts = 4;
  cfg.router_hidden = 5;
  auto params = slicemoe::init_router(cfg, rng);
  Tensor rows = slicemoe::gaussian(rng, {4, 4});
  Rng n1(1), n2(2);  // different noise streams must not matter at sigma=0
  auto a = slicemoe::route(rows, params, 1.0, 0.0, n1);
  auto b = slicemoe::route(rows, params, 1.0, 0.0, n2);
  EXPECT_EQ(a.probs.raw(), b.probs.raw());
}

TEST(Route, HandSetTwoExpertClosedForm) {
  // W1 = 0 so the hidden layer is relu(b1); choose b1, W2 to produce logits
  // (1, 0) and check the softmax against the closed form e/(e+1).
  auto params = zero_router(2, 1, 2);
  params.b1 = Tensor({1}, {1.0});
  params.W2 = Tensor({1, 2}, {1.0, 0.0});
  Tensor row({1, 2}, {0.3, -0.7});
  Rng noise(1);
  auto routed = slicemoe::route(row, params, 1.0, 0.0, noise);
  EXPECT_NEAR(routed.probs[0], 0.7311, 1e-4);
  EXPECT_NEAR(routed.probs[1], 0.2689, 1e-4);
}

TEST(Route, NoiseChangesLogitsOnlyWhenEnabled) {
  auto params = zero_router(3, 4, 4);
  Rng rng(11);
  Tensor rows = slicemoe::gaussian(rng, {2, 3});
  Rng noise(5);
  auto clean = slicemoe::route(rows, params, 1.0, 0.0, noise);
  Rng noise2(5);
  auto noisy = slicemoe::route(rows, params, 1.0, 0.8, noise2);
  EXPECT_NE(clean.logits.raw(), noisy.logits.raw());
  double s = 0.0;
  for (std::size_t i = 0; i < 4; ++i) s += noisy.probs[i];
  EXPECT_NEAR(s, 1.0, 1e-12);
}

TEST(Route, RouterSharedAcrossPositions) {
  // The same slice values at different (token, slice) positions must route
  // identically: the MLP has no positional input.
  Rng rng(12);
  slicemoe::SliceMoeConfig cfg;
  cfg.d = 6;
  cfg.slices = 2;
  cfg.experts = 3;
  cfg.router_hidden = 4;
  auto params = slicemoe::init_router(cfg, rng);
  Tensor rows({4, 3}, {0.5, -1.0, 2.0,   //
                       1.5, 0.25, -0.5,  //
                       0.5, -1.0, 2.0,  // duplicate of row 0
                       1.5, 0.25, -0.5});
  Rng noise(1);
  auto routed = slicemoe::route(rows, params, 1.0, 0.0, noise);
  for (std::size_t j = 0; j < 3; ++j) {
    EXPECT_EQ(routed.probs.at(0, j), routed.probs.at(2, j));
    EXPECT_EQ(routed.probs.at(1, j), routed.probs.at(3, j));
  }
}

TEST(TopK, DefinitionExample) {
  Tensor probs({3}, {0.1, 0.6, 0.3});
  auto [ids, top] = slicemoe::top_k_select(probs, 2);
  EXPECT_EQ(ids, (std::vector<int>{1, 2}));
  EXPECT_EQ(top, (std::vector<double>{0.6, 0.3}));
}

TEST(TopK, UniformTieBreaksToLowerIndex) {
  Tensor probs({4}, {0.25, 0.25, 0.25, 0.25});
  auto [ids, top] = slicemoe::top_k_select(probs, 1);
  EXPECT_EQ(ids[0], 0);
}

TEST(TopK, FullSelectionSortsByProbThenIndex) {
  Tensor probs({4}, {0.1, 0.4, 0.1, 0.4});
  auto [ids, top] = slicemoe::top_k_select(probs, 4);
  EXPECT_EQ(ids, (std::vector<int>{1, 3, 0, 2}));
  EXPECT_TRUE(std::is_sorted(top.rbegin(), top.rend()));
}

TEST(TopK, KLargerThanERejected) {
  Tensor probs({3}, {0.2, 0.3, 0.5});
  EXPECT_THROW(slicemoe::top_k_select(probs, 4), slicemoe::ConfigError);
}

TEST(TopK, PermutationEquivariantOnDistinctValues) {
  Rng rng(13);
  for (int trial = 0; trial < 25; ++trial) {
    Tensor probs = slicemoe::softmax(slicemoe::gaussian(rng, {6}, 2.0), 1.0);
    auto [ids, top] = slicemoe::top_k_select(probs, 3);
    std::vector<std::size_t> perm(6);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    rng.shuffle(perm);
    Tensor shuffled({6});
    for (std::size_t i = 0; i < 6; ++i) shuffled[i] = probs[perm[i]];
    auto [ids2, top2] = slicemoe::top_k_select(shuffled, 3);
    EXPECT_EQ(top, top2);
    for (std::size_t j = 0; j < 3; ++j)
      EXPECT_EQ(perm[static_cast<std::size_t>(ids2[j])],
                static_cast<std::size_t>(ids[j]));
  }
}

RoutingDecision make_decision(std::vector<int> ids,
                              std::vector<double> probs) {
  RoutingDecision d;
  d.expert_ids = std::move(ids);
  d.gate_probs = std::move(probs);
  d.weights = d.gate_probs;
  return d;
}

TEST(Dropout, RateZeroIsNoOp) {
  auto d = make_decision({2, 0}, {0.6, 0.4});
  Rng rng(14);
  auto out = slicemoe::cross_slice_dropout(d, 0.0, rng, true);
  EXPECT_EQ(out.weights, d.gate_probs);
}

TEST(Dropout, EvalModeKeepsGateProbs) {
  auto d = make_decision({1, 3}, {0.7, 0.1});
  Rng rng(15);
  auto out = slicemoe::cross_slice_dropout(d, 0.9, rng, false);
  EXPECT_EQ(out.weights, d.gate_probs);
}

TEST(Dropout, SurvivorRenormalizationIsExact) {
  std::vector<double> probs{0.6, 0.4};
  std::vector<std::uint8_t> dropped{0, 1};
  std::vector<double> w(2);
  bool restored = slicemoe::renormalize_weights(probs.data(), dropped.data(),
                                                2, w.data());
  EXPECT_FALSE(restored);
  EXPECT_EQ(w[0], 1.0);  // 0.6 / 0.6 is exactly 1
  EXPECT_EQ(w[1], 0.0);
}

TEST(Dropout, AllDroppedRestoresHighestProb) {
  std::vector<double> probs{0.6, 0.4};
  std::vector<std::uint8_t> dropped{1, 1};
  std::vector<double> w(2);
  bool restored = slicemoe::renormalize_weights(probs.data(), dropped.data(),
                                                2, w.data());
  EXPECT_TRUE(restored);
  EXPECT_EQ(w[0], 1.0);
  EXPECT_EQ(w[1], 0.0);
}

TEST(Dropout, TrainingWeightsAlwaysSumToOne) {
  Rng rng(16);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t k = 1 + rng.next_u64() % 4;
    std::vector<double> probs(k);
    double s = 0.0;
    for (auto& p : probs) {
      p = 0.05 + rng.next_unit();
      s += p;
    }
    for (auto& p : probs) p /= s * 1.25;  // selected mass < 1, like top-k
    std::sort(probs.rbegin(), probs.rend());
    auto d = make_decision(std::vector<int>(k, 0), probs);
    auto out = slicemoe::cross_slice_dropout(d, 0.5, rng, true);
    double w = 0.0;
    bool any_nonzero = false;
    for (double x : out.weights) {
      w += x;
      any_nonzero = any_nonzero || x != 0.0;
    }
    EXPECT_TRUE(any_nonzero);
    EXPECT_NEAR(w, 1.0, 1e-12);
  }
}

TEST(Dropout, BadRateRejected) {
  auto d = make_decision({0}, {1.0});
  Rng rng(17);
  EXPECT_THROW(slicemoe::cross_slice_dropout(d, 1.0, rng, true),
               slicemoe::ConfigError);
  EXPECT_THROW(slicemoe::cross_slice_dropout(d, -0.1, rng, true),
               slicemoe::ConfigError);
}

TEST(RouteBatch, DeterministicPipelineWithoutNoiseOrDropout) {
  Rng rng(18);
  slicemoe::SliceMoeConfig cfg;
  cfg.d = 8;
  cfg.slices = 2;
  cfg.experts = 5;
  cfg.top_k = 2;
  cfg.router_hidden = 6;
  cfg.dropout = 0.0;
  cfg.noise_sigma = 0.0;
  auto params = slicemoe::init_router(cfg, rng);
  Tensor rows = slicemoe::gaussian(rng, {6, 4});
  Rng a1(1), a2(2), b1(3), b2(4);
  auto da = slicemoe::route_batch(rows, params, cfg, a1, a2, true);
  auto db = slicemoe::route_batch(rows, params, cfg, b1, b2, true);
  ASSERT_EQ(da.size(), db.size());
  for (std::size_t i = 0; i < da.size(); ++i) {
    EXPECT_EQ(da[i].expert_ids, db[i].expert_ids);
    EXPECT_EQ(da[i].gate_probs, db[i].gate_probs);
    EXPECT_EQ(da[i].weights, db[i].weights);
  }
}

}  // namespace
