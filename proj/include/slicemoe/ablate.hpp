// Copyright 2026 the slicemoe authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <fstream>
#include <string>
#include <vector>

#include "slicemoe/train.hpp"

namespace slicemoe {

enum class Sweep { kSlices, kTopK, kNoise, kTemperature, kShuffle };

inline const char* to_string(Sweep s) {
  switch (s) {
    case Sweep::kSlices: return "slices";
    case Sweep::kTopK: return "k";
    case Sweep::kNoise: return "noise";
    case Sweep::kTemperature: return "temperature";
    case Sweep::kShuffle: return "shuffle";
  }
  return "?";
}

inline Sweep parse_sweep(const std::string& s) {
  if (s == "slices") return Sweep::kSlices;
  if (s == "k") return Sweep::kTopK;
  if (s == "noise") return Sweep::kNoise;
  if (s == "temperature") return Sweep::kTemperature;
  if (s == "shuffle") return Sweep::kShuffle;
  throw ConfigError("ablate: unknown sweep '" + s + "'");
}

struct AblationRow {
  std::string sweep;
  std::string setting;
  std::uint64_t seed = 0;
  double val_acc = 0.0;
  double ele = 0.0;       // final-epoch hard-count ELE
  double best_ele = 0.0;  // best epoch within the run
  double val_loss = 0.0;
  double wall_ms = 0.0;
};

inline const char* kAblationHeader =
    "sweep,setting,seed,val_acc,ele,best_ele,val_loss,wall_ms";

inline void write_ablation_csv(const std::string& path,
                               const std::vector<AblationRow>& rows) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path);
  out << kAblationHeader << "\n";
  for (const auto& r : rows)
    out << r.sweep << ',' << r.setting << ',' << r.seed << ','
        << fmt_g17(r.val_acc) << ',' << fmt_g17(r.ele) << ','
        << fmt_g17(r.best_ele) << ',' << fmt_g17(r.val_loss) << ','
        << fmt_g17(r.wall_ms) << "\n";
}

namespace detail {

struct SweepSetting {
  std::string label;
  TrainConfig config;
};

inline std::vector<SweepSetting> sweep_settings(Sweep sweep,
                                                const TrainConfig& base) {
  std::vector<SweepSetting> out;
  auto push = [&](const std::string& label, TrainConfig cfg) {
    cfg.validate();  // every setting checked before any run starts
    out.push_back(SweepSetting{label, std::move(cfg)});
  };
  switch (sweep) {
    case Sweep::kSlices:
      for (std::size_t s : {1, 2, 4, 8}) {
        TrainConfig cfg = base;
        cfg.moe.slices = s;
        cfg.moe.expert_hidden = 0;  // keep F = 4 * slice width per setting
        push(std::to_string(s), cfg);
      }
      break;
    case Sweep::kTopK:
      for (std::size_t k : {1, 2, 3}) {
        TrainConfig cfg = base;
        cfg.moe.top_k = k;
        push(std::to_string(k), cfg);
      }
      break;
    case Sweep::kNoise:
      for (double sigma : {0.0, 0.1, 0.5, 1.0, 2.0}) {
        TrainConfig cfg = base;
        cfg.moe.noise_sigma = sigma;
        push(fmt_g17(sigma), cfg);
      }
      break;
    case Sweep::kTemperature:
      for (double temp : {0.25, 0.5, 1.0, 2.0, 4.0}) {
        TrainConfig cfg = base;
        cfg.moe.temperature = temp;
        push(fmt_g17(temp), cfg);
      }
      break;
    case Sweep::kShuffle:
      for (auto mode : {PermutationMode::kContiguous,
                        PermutationMode::kShuffled}) {
        TrainConfig cfg = base;
        cfg.moe.permutation = mode;
        push(to_string(mode), cfg);
      }
      break;
  }
  return out;
}

}  // namespace detail

/// Runs every sweep setting with the same seed list (paired seeds share
/// data and, where shapes allow, initialization, so differences isolate the
/// swept variable). One row per (setting, seed); downstream analysis takes
/// seed means.
inline std::vector<AblationRow> ablate(Sweep sweep, const TrainConfig& base,
                                       const std::vector<std::uint64_t>& seeds,
                                       std::ostream* log = nullptr) {
  const auto settings = detail::sweep_settings(sweep, base);
  std::vector<AblationRow> rows;
  for (const auto& setting : settings) {
    for (std::uint64_t seed : seeds) {
      TrainConfig cfg = setting.config;
      cfg.seed = seed;
      const auto t0 = std::chrono::steady_clock::now();
      TrainResult res = train(cfg);
      const auto& last = res.history.back();
      AblationRow row;
      row.sweep = to_string(sweep);
      row.setting = setting.label;
      row.seed = seed;
      row.val_acc = last.val_acc;
      row.ele = last.ele;
      for (const auto& m : res.history)
        row.best_ele = std::max(row.best_ele, m.ele);
      row.val_loss = last.val_loss;
      row.wall_ms = std::chrono::duration<double, std::milli>(
                        std::chrono::steady_clock::now() - t0)
                        .count();
      rows.push_back(row);
      if (log)
        *log << "ablate " << row.sweep << "=" << row.setting << " seed "
             << seed << ": val_acc=" << row.val_acc << " ele=" << row.ele
             << "\n";
    }
  }
  return rows;
}

}  // namespace slicemoe
