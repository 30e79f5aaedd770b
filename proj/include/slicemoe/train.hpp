// Copyright 2026 the slicemoe authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <chrono>
#include <fstream>
#include <iostream>
#include <numeric>
#include <string>
#include <vector>

#include "slicemoe/adam.hpp"
#include "slicemoe/dispatch.hpp"
#include "slicemoe/layer.hpp"
#include "slicemoe/synthetic.hpp"

namespace slicemoe {

struct EpochMetrics {
  std::size_t epoch = 0;       // 1-based
  double train_loss = 0.0;     // mean total loss per sample
  double cap_loss = 0.0;       // mean capacity loss per sample
  double val_loss = 0.0;       // mean cross-entropy on the validation split
  double val_acc = 0.0;
  double ele = 0.0;            // hard-count ELE accumulated over the epoch
  std::size_t active_params = 0;
  double wall_ms = 0.0;
};

inline const char* kMetricsHeader =
    "epoch,train_loss,cap_loss,val_loss,val_acc,ele,active_params,wall_ms";

inline void write_metrics_csv(const std::string& path,
                              const std::vector<EpochMetrics>& history) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path);
  out << kMetricsHeader << "\n";
  for (const auto& m : history)
    out << m.epoch << ',' << fmt_g17(m.train_loss) << ','
        << fmt_g17(m.cap_loss) << ',' << fmt_g17(m.val_loss) << ','
        << fmt_g17(m.val_acc) << ',' << fmt_g17(m.ele) << ','
        << m.active_params << ',' << fmt_g17(m.wall_ms) << "\n";
}

struct EvalMetrics {
  double loss = 0.0;  // mean cross-entropy
  double accuracy = 0.0;
  double ele = 0.0;  // hard-count ELE over the evaluated set
  std::vector<long> hard_counts;
};

/// Batched inference over a dataset; pure, so evaluating the same model
/// twice gives identical numbers.
inline EvalMetrics evaluate(const ModelParams& model,
                            const SliceMoeConfig& cfg, const Dataset& ds,
                            std::size_t batch_size, bool grouped = true) {
  EvalMetrics out;
  out.hard_counts.assign(cfg.experts, 0);
  const std::size_t n = ds.size();
  if (n == 0) return out;
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  double loss_sum = 0.0;
  std::size_t correct = 0;
  for (std::size_t lo = 0; lo < n; lo += batch_size) {
    const std::size_t hi = std::min(n, lo + batch_size);
    auto [bx, by] = dataset_batch(ds, order, lo, hi);
    EvalOutput fw = layer_forward_eval(model, bx, cfg, grouped);
    loss_sum += cross_entropy(fw.logits, by) * static_cast<double>(hi - lo);
    const std::size_t classes = fw.logits.dim(1);
    for (std::size_t i = 0; i < hi - lo; ++i) {
      const double* row = fw.logits.data() + i * classes;
      std::size_t best = 0;
      for (std::size_t c = 1; c < classes; ++c)
        if (row[c] > row[best]) best = c;
      if (static_cast<int>(best) == by[i]) ++correct;
    }
    for (const auto& dec : fw.decisions)
      for (int e : dec.expert_ids)
        out.hard_counts[static_cast<std::size_t>(e)] += 1;
  }
  out.loss = loss_sum / static_cast<double>(n);
  out.accuracy = static_cast<double>(correct) / static_cast<double>(n);
  out.ele = ele_from_counts(out.hard_counts);
  return out;
}

struct TrainResult {
  std::vector<EpochMetrics> history;
  ModelParams model;
  Adam optimizer;
  std::size_t classes = 0;
};

/// Full training run: seeded shuffling, tape forward/backward per batch,
/// Adam updates, per-epoch validation. Identical (config, seed) pairs
/// produce bitwise-identical histories (wall_ms aside).
inline TrainResult train(const TrainConfig& cfg, const SyntheticData& data,
                         std::ostream* log = nullptr) {
  cfg.validate();
  TrainResult res;
  res.classes = data.classes;
  res.model = init_model(cfg.moe, data.classes, cfg.seed);
  res.optimizer = Adam(cfg.opt);

  std::vector<Tensor*> params;
  for (auto& [name, ptr] : named_params(res.model)) params.push_back(ptr);
  res.optimizer.init(params);

  const std::size_t active = active_param_count(cfg.moe).active_params;
  Rng shuffle_master(cfg.seed, stream::kShuffle);
  Rng noise_master(cfg.seed, stream::kNoise);
  Rng dropout_master(cfg.seed, stream::kDropout);

  const std::size_t n = data.train.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::uint64_t step = 0;

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    Rng epoch_rng = shuffle_master.derive(epoch);
    epoch_rng.shuffle(order);

    double loss_sum = 0.0, cap_sum = 0.0;
    std::vector<long> hard(cfg.moe.experts, 0);

    for (std::size_t lo = 0; lo < n; lo += cfg.batch_size) {
      const std::size_t hi = std::min(n, lo + cfg.batch_size);
      auto [bx, by] = dataset_batch(data.train, order, lo, hi);
      ++step;

      ad::Tape tape;
      ModelVars mv = register_model(tape, res.model);
      TrainStepGraph g = layer_forward_train(
          tape, mv, res.model, bx, by, cfg.moe, noise_master.derive(step),
          dropout_master.derive(step), cfg.grouped_dispatch);

      const double total = tape.value(g.loss)[0];
      const double cap = tape.value(g.cap_loss)[0];
      if (!std::isfinite(total))
        throw NumericError(
            "train: non-finite loss at step " + std::to_string(step) +
            " (task=" + fmt_g17(tape.value(g.task_loss)[0]) +
            ", cap=" + fmt_g17(cap) + ")");

      tape.backward(g.loss);
      std::vector<Tensor> grads;
      grads.reserve(params.size());
      for (ad::Var v : mv.all()) grads.push_back(tape.grad(v));
      res.optimizer.step(params, grads);

      const auto bsize = static_cast<double>(hi - lo);
      loss_sum += total * bsize;
      cap_sum += cap * bsize;
      for (std::size_t e = 0; e < hard.size(); ++e)
        hard[e] += g.loads.hard[e];
    }

    EvalMetrics val =
        evaluate(res.model, cfg.moe, data.val, cfg.batch_size,
                 cfg.grouped_dispatch);
    EpochMetrics m;
    m.epoch = epoch;
    m.train_loss = loss_sum / static_cast<double>(n);
    m.cap_loss = cap_sum / static_cast<double>(n);
    m.val_loss = val.loss;
    m.val_acc = val.accuracy;
    m.ele = ele_from_counts(hard);
    m.active_params = active;
    m.wall_ms = std::chrono::duration<double, std::milli>(
                    std::chrono::steady_clock::now() - t0)
                    .count();
    res.history.push_back(m);
    if (log)
      *log << "epoch " << epoch << " train_loss=" << m.train_loss
           << " val_acc=" << m.val_acc << " ele=" << m.ele << "\n";
  }
  return res;
}

inline TrainResult train(const TrainConfig& cfg, std::ostream* log = nullptr) {
  SyntheticData data = generate_synthetic(cfg.data, cfg.seed);
  return train(cfg, data, log);
}

}  // namespace slicemoe
