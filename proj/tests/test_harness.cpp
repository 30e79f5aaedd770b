// Copyright 2026 the slicemoe authors
// SPDX-License-Identifier: Apache-2.0
//
// Synthetic data generation, Adam, and the training loop: determinism,
// learnability, and eval purity.

#include <gtest/gtest.h>

#include <cmath>

#include "slicemoe/ablate.hpp"
#include "slicemoe/train.hpp"

namespace {

using slicemoe::Rng;
using slicemoe::Tensor;

slicemoe::SyntheticSpec small_spec() {
  slicemoe::SyntheticSpec spec;
  spec.n_samples = 600;
  spec.d = 16;
  spec.segments = 4;
  spec.concepts = 3;
  spec.noise_std = 0.1;
  return spec;
}

TEST(Synthetic, ZeroNoiseReproducesCentroidsExactly) {
  slicemoe::SyntheticSpec spec = small_spec();
  spec.noise_std = 0.0;
  auto data = slicemoe::generate_synthetic(spec, 5);
  // With zero noise every segment equals its centroid, so each segment has
  // at most `concepts` distinct value vectors across the dataset.
  const std::size_t seg_w = spec.d / spec.segments;
  for (std::size_t g = 0; g < spec.segments; ++g) {
    std::vector<std::vector<double>> seen;
    for (std::size_t i = 0; i < data.train.size(); ++i) {
      std::vector<double> seg(
          data.train.x.data() + i * spec.d + g * seg_w,
          data.train.x.data() + i * spec.d + (g + 1) * seg_w);
      bool found = false;
      for (const auto& s : seen) found = found || s == seg;
      if (!found) seen.push_back(seg);
    }
    EXPECT_LE(seen.size(), spec.concepts) << "segment " << g;
  }
}

TEST(Synthetic, SameSeedSameDataset) {
  auto a = slicemoe::generate_synthetic(small_spec(), 11);
  auto b = slicemoe::generate_synthetic(small_spec(), 11);
  EXPECT_EQ(a.train.x.raw(), b.train.x.raw());
  EXPECT_EQ(a.train.labels, b.train.labels);
  EXPECT_EQ(a.val.x.raw(), b.val.x.raw());
  EXPECT_EQ(a.val.labels, b.val.labels);
  auto c = slicemoe::generate_synthetic(small_spec(), 12);
  EXPECT_NE(a.train.x.raw(), c.train.x.raw());
}

TEST(Synthetic, SplitIsEightyTwenty) {
  auto data = slicemoe::generate_synthetic(small_spec(), 3);
  EXPECT_EQ(data.train.size(), 480u);
  EXPECT_EQ(data.val.size(), 120u);
}

// Oracle for learnability: a linear softmax probe on the label segment
// alone must reach high validation accuracy at noise_std = 0.1.
TEST(Synthetic, LinearProbeOnLabelSegmentSeparates) {
  slicemoe::SyntheticSpec spec;
  spec.n_samples = 1500;
  spec.d = 64;
  spec.segments = 4;
  spec.concepts = 4;
  spec.noise_std = 0.1;
  auto data = slicemoe::generate_synthetic(spec, 21);
  const std::size_t seg_w = spec.d / spec.segments;

  // Probe: logits = x_seg0 * W + b, trained with plain gradient descent on
  // the tape (test-only model, independent of the slice layer).
  Tensor w({seg_w, spec.concepts});
  Tensor b({spec.concepts});
  auto segment0 = [&](const slicemoe::Dataset& ds) {
    Tensor seg({ds.size(), seg_w});
    for (std::size_t i = 0; i < ds.size(); ++i)
      std::copy_n(ds.x.data() + i * spec.d, seg_w, seg.data() + i * seg_w);
    return seg;
  };
  Tensor train_x = segment0(data.train);
  Tensor val_x = segment0(data.val);

  namespace ad = slicemoe::ad;
  for (int step = 0; step < 150; ++step) {
    ad::Tape t;
    ad::Var vw = t.leaf(w), vb = t.leaf(b);
    ad::Var logits =
        ad::add_rowvec(t, ad::matmul(t, t.constant(train_x), vw), vb);
    ad::Var loss = slicemoe::ad_ops::cross_entropy(t, logits,
                                                   data.train.labels);
    t.backward(loss);
    for (std::size_t i = 0; i < w.size(); ++i)
      w[i] -= 0.5 * t.grad(vw)[i];
    for (std::size_t i = 0; i < b.size(); ++i)
      b[i] -= 0.5 * t.grad(vb)[i];
  }
  Tensor logits = slicemoe::add_rowvec(slicemoe::matmul(val_x, w), b);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < data.val.size(); ++i) {
    const double* row = logits.data() + i * spec.concepts;
    std::size_t best = 0;
    for (std::size_t c = 1; c < spec.concepts; ++c)
      if (row[c] > row[best]) best = c;
    if (static_cast<int>(best) == data.val.labels[i]) ++correct;
  }
  const double acc =
      static_cast<double>(correct) / static_cast<double>(data.val.size());
  EXPECT_GT(acc, 0.95);
}

TEST(Adam, ZeroGradientLeavesParamsUnchanged) {
  Tensor p({3}, {1.0, -2.0, 0.5});
  Tensor g({3});
  slicemoe::AdamState st{Tensor({3}), Tensor({3})};
  slicemoe::AdamHyper h;
  Tensor before = p;
  slicemoe::adam_step(p, g, st, h, 1);
  EXPECT_EQ(p.raw(), before.raw());
}

TEST(Adam, FirstStepMovesByLearningRate) {
  // Scalar param 0, gradient 1, lr 0.1: bias-corrected mhat/sqrt(vhat) is 1
  // up to eps, so the update is about -0.1.
  Tensor p({1});
  Tensor g({1}, {1.0});
  slicemoe::AdamState st{Tensor({1}), Tensor({1})};
  slicemoe::AdamHyper h;
  h.lr = 0.1;
  slicemoe::adam_step(p, g, st, h, 1);
  EXPECT_NEAR(p[0], -0.1, 1e-7);
}

TEST(Adam, DeterministicOverManySteps) {
  auto run = [] {
    Rng rng(31);
    Tensor p = slicemoe::gaussian(rng, {8});
    slicemoe::Adam opt{slicemoe::AdamHyper{}};
    std::vector<Tensor*> params{&p};
    opt.init(params);
    Rng grad_rng(32);
    for (int step = 0; step < 100; ++step) {
      std::vector<Tensor> grads{slicemoe::gaussian(grad_rng, {8})};
      opt.step(params, grads);
    }
    return p;
  };
  Tensor a = run(), b = run();
  EXPECT_EQ(a.raw(), b.raw());
}

TEST(Adam, ShapeMismatchRejected) {
  Tensor p({2});
  Tensor g({3});
  slicemoe::AdamState st{Tensor({2}), Tensor({2})};
  slicemoe::AdamHyper h;
  EXPECT_THROW(slicemoe::adam_step(p, g, st, h, 1), slicemoe::ContractError);
}

slicemoe::TrainConfig tiny_train_config() {
  slicemoe::TrainConfig cfg;
  cfg.moe.d = 16;
  cfg.moe.slices = 4;
  cfg.moe.experts = 4;
  cfg.moe.top_k = 2;
  cfg.moe.router_hidden = 16;
  cfg.moe.alpha = 0.05;
  cfg.moe.dropout = 0.2;
  cfg.data = small_spec();
  cfg.data.d = 16;
  cfg.batch_size = 32;
  cfg.epochs = 2;
  cfg.seed = 9;
  return cfg;
}

TEST(Train, DeterministicHistoryAcrossRuns) {
  slicemoe::TrainConfig cfg = tiny_train_config();
  auto a = slicemoe::train(cfg);
  auto b = slicemoe::train(cfg);
  ASSERT_EQ(a.history.size(), b.history.size());
  for (std::size_t i = 0; i < a.history.size(); ++i) {
    EXPECT_EQ(a.history[i].train_loss, b.history[i].train_loss);
    EXPECT_EQ(a.history[i].cap_loss, b.history[i].cap_loss);
    EXPECT_EQ(a.history[i].val_loss, b.history[i].val_loss);
    EXPECT_EQ(a.history[i].val_acc, b.history[i].val_acc);
    EXPECT_EQ(a.history[i].ele, b.history[i].ele);
  }
  // Final parameters bitwise equal too.
  auto pa = slicemoe::named_params(a.model);
  auto pb = slicemoe::named_params(b.model);
  for (std::size_t i = 0; i < pa.size(); ++i)
    EXPECT_EQ(pa[i].second->raw(), pb[i].second->raw());
}

TEST(Train, NaiveAndGroupedDispatchTrainsIdentically) {
  slicemoe::TrainConfig cfg = tiny_train_config();
  cfg.epochs = 1;
  cfg.grouped_dispatch = true;
  auto a = slicemoe::train(cfg);
  cfg.grouped_dispatch = false;
  auto b = slicemoe::train(cfg);
  EXPECT_EQ(a.history.back().train_loss, b.history.back().train_loss);
  EXPECT_EQ(a.history.back().val_acc, b.history.back().val_acc);
}

TEST(Train, DenseDegenerateCaseLearnsTheTask) {
  // E=1, k=1, S=1 collapses to a dense two-layer FFN plus classifier.
  slicemoe::TrainConfig cfg;
  cfg.moe.d = 16;
  cfg.moe.slices = 1;
  cfg.moe.experts = 1;
  cfg.moe.top_k = 1;
  cfg.moe.router_hidden = 8;
  cfg.moe.alpha = 0.05;
  cfg.moe.dropout = 0.0;
  cfg.data = small_spec();
  cfg.data.d = 16;
  cfg.data.n_samples = 1200;
  cfg.opt.lr = 2e-3;  // small model, short budget
  cfg.batch_size = 32;
  cfg.epochs = 12;
  cfg.seed = 4;
  auto res = slicemoe::train(cfg);
  EXPECT_GT(res.history.back().val_acc, 0.95);
  // Loss decreases over training (smoke property).
  EXPECT_LT(res.history.back().train_loss, res.history.front().train_loss);
}

TEST(Train, LossDecreasesOnDefaultConfig) {
  // Smoke property on the default synthetic configuration: epoch-5 training
  // loss below epoch-1.
  slicemoe::TrainConfig cfg;  // built-in defaults: d=64, S=8, E=16, k=2
  cfg.seed = 3;
  auto res = slicemoe::train(cfg);
  ASSERT_EQ(res.history.size(), 5u);
  EXPECT_LT(res.history.back().train_loss, res.history.front().train_loss);
  for (const auto& m : res.history) {
    EXPECT_GE(m.ele, 0.0);
    EXPECT_LE(m.ele, 1.0);
  }
}

TEST(Train, EvalPurityOnFinalModel) {
  slicemoe::TrainConfig cfg = tiny_train_config();
  auto res = slicemoe::train(cfg);
  auto data = slicemoe::generate_synthetic(cfg.data, cfg.seed);
  auto e1 = slicemoe::evaluate(res.model, cfg.moe, data.val, cfg.batch_size);
  auto e2 = slicemoe::evaluate(res.model, cfg.moe, data.val, cfg.batch_size);
  EXPECT_EQ(e1.loss, e2.loss);
  EXPECT_EQ(e1.accuracy, e2.accuracy);
  EXPECT_EQ(e1.ele, e2.ele);
  // And it matches the final epoch's recorded validation metrics.
  EXPECT_EQ(e1.loss, res.history.back().val_loss);
  EXPECT_EQ(e1.accuracy, res.history.back().val_acc);
}

TEST(Train, NonFiniteLossAborts) {
  // Adam's normalized steps move parameters by about lr, so a catastrophic
  // rate overflows the forward products and the numeric guard aborts the
  // run instead of training on garbage.
  slicemoe::TrainConfig cfg = tiny_train_config();
  cfg.opt.lr = 1e200;
  cfg.epochs = 2;
  EXPECT_THROW(slicemoe::train(cfg), slicemoe::NumericError);
}

TEST(Train, SequenceModeFlattensTokens) {
  Rng rng(41);
  Tensor seq = slicemoe::gaussian(rng, {2, 5, 16});
  Tensor flat = slicemoe::flatten_tokens(seq);
  EXPECT_EQ(flat.shape(), (std::vector<std::size_t>{10, 16}));
  slicemoe::SliceMoeConfig cfg;
  cfg.d = 16;
  cfg.slices = 4;
  cfg.experts = 3;
  cfg.top_k = 2;
  cfg.router_hidden = 8;
  cfg.dropout = 0.0;
  auto model = slicemoe::init_model(cfg, 3, 77);
  auto out = slicemoe::layer_forward_eval(model, flat, cfg);
  EXPECT_EQ(out.layer_out.shape(), (std::vector<std::size_t>{10, 16}));
  // Each token row is processed independently, so the sequence view and a
  // standalone batch of the same rows agree bitwise.
  auto direct = slicemoe::layer_forward_eval(model, flat, cfg);
  EXPECT_EQ(out.layer_out.raw(), direct.layer_out.raw());
}

TEST(Ablate, SettingsValidatedBeforeAnyRun) {
  slicemoe::TrainConfig cfg = tiny_train_config();
  cfg.moe.d = 15;  // slices sweep includes 2 and 4, which cannot divide 15
  cfg.data.d = 15;
  cfg.data.segments = 3;
  EXPECT_THROW(
      slicemoe::detail::sweep_settings(slicemoe::Sweep::kSlices, cfg),
      slicemoe::ConfigError);
}

TEST(Ablate, ShuffleSweepRunsBothModes) {
  slicemoe::TrainConfig cfg = tiny_train_config();
  cfg.epochs = 1;
  cfg.data.n_samples = 200;
  auto rows = slicemoe::ablate(slicemoe::Sweep::kShuffle, cfg, {1, 2});
  ASSERT_EQ(rows.size(), 4u);
  EXPECT_EQ(rows[0].setting, "contiguous");
  EXPECT_EQ(rows[2].setting, "shuffled");
  for (const auto& r : rows) {
    EXPECT_GE(r.ele, 0.0);
    EXPECT_LE(r.ele, 1.0);
    EXPECT_GE(r.val_acc, 0.0);
    EXPECT_LE(r.val_acc, 1.0);
  }
}

}  // namespace
