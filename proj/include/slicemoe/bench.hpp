// Copyright 2026 the slicemoe authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <functional>
#include <iostream>
#include <string>
#include <vector>

#include "slicemoe/dispatch.hpp"
#include "slicemoe/router.hpp"

namespace slicemoe {

/// Closed-form forward FLOP count (2mnk per matrix product; biases and
/// activations excluded, matching the instrumented kernel counters).
struct FlopBreakdown {
  std::uint64_t routing = 0;  // B*S * (2*(d/S)*H_r + 2*H_r*E)
  std::uint64_t experts = 0;  // B*S*k * (2*(d/S)*F + 2*F*(d/S))
  std::uint64_t total = 0;
  std::uint64_t dense_ref = 0;  // two GEMMs of a width-4d dense FFN

  bool operator==(const FlopBreakdown&) const = default;
};

inline FlopBreakdown flop_count(const SliceMoeConfig& cfg,
                                std::size_t batch) {
  cfg.validate();
  const std::uint64_t n = batch * cfg.slices;
  const std::uint64_t w = cfg.slice_width(), f = cfg.expert_width(),
                      h = cfg.router_hidden, e = cfg.experts,
                      k = cfg.top_k, d = cfg.d;
  FlopBreakdown fb;
  fb.routing = n * (2 * w * h + 2 * h * e);
  fb.experts = n * k * (2 * w * f + 2 * f * w);
  fb.total = fb.routing + fb.experts;
  fb.dense_ref = static_cast<std::uint64_t>(batch) * (2 * d * 4 * d) * 2;
  return fb;
}

/// Runs one routed forward (router + grouped dispatch) with the kernel FLOP
/// counter enabled and returns what the kernels reported.
inline std::uint64_t instrumented_layer_flops(const SliceMoeConfig& cfg,
                                              std::size_t batch,
                                              std::uint64_t seed) {
  Rng rng(seed, stream::kInit);
  RouterParams router = init_router(cfg, rng);
  std::vector<ExpertParams> experts = init_experts(cfg, rng);
  Rng data_rng(seed, stream::kData);
  Tensor x = gaussian(data_rng, {batch, cfg.d});
  Tensor slabs = partition_slices(x, cfg.slices);
  Tensor rows = slabs.reshaped({batch * cfg.slices, cfg.slice_width()});

  FlopCounter::reset();
  FlopCounter::enable(true);
  Rng noise(seed, stream::kNoise), drop(seed, stream::kDropout);
  auto decisions = route_batch(rows, router, cfg, noise, drop, false);
  Tensor out = dispatch_grouped(slabs, decisions, experts);
  FlopCounter::enable(false);
  (void)out;
  return FlopCounter::value();
}

// ---------------------------------------------------------------------------
// Timing harness.

/// Median wall time of fn over `iters` timed runs after `warmup` untimed
/// ones. Median, not mean, to shrug off scheduler noise.
template <typename Fn>
double time_median_ms(Fn&& fn, int iters = 20, int warmup = 3) {
  for (int i = 0; i < warmup; ++i) fn();
  std::vector<double> times;
  times.reserve(static_cast<std::size_t>(iters));
  for (int i = 0; i < iters; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    fn();
    times.push_back(std::chrono::duration<double, std::milli>(
                        std::chrono::steady_clock::now() - t0)
                        .count());
  }
  std::sort(times.begin(), times.end());
  const std::size_t mid = times.size() / 2;
  return times.size() % 2 ? times[mid]
                          : 0.5 * (times[mid - 1] + times[mid]);
}

struct BenchConfig {
  std::size_t batch = 64;
  std::size_t slices = 8;
  std::size_t experts = 16;
  std::size_t top_k = 2;
  std::size_t d = 256;
  std::size_t expert_hidden = 0;  // 0 -> 4 * (d/S)
  bool f32 = false;               // benchmark-mode single precision

  SliceMoeConfig layer() const {
    SliceMoeConfig cfg;
    cfg.d = d;
    cfg.slices = slices;
    cfg.experts = experts;
    cfg.top_k = top_k;
    cfg.expert_hidden = expert_hidden;
    cfg.router_hidden = 64;
    cfg.dropout = 0.0;
    cfg.noise_sigma = 0.0;
    return cfg;
  }
};

struct BenchResult {
  BenchConfig cfg;
  double naive_ms = 0.0;
  double grouped_ms = 0.0;
  double speedup = 0.0;
  std::uint64_t checksum = 0;  // of the (verified equal) outputs
  FlopBreakdown flops;
};

namespace detail {

inline std::uint64_t fnv1a_bytes(const void* data, std::size_t bytes) {
  const auto* p = static_cast<const unsigned char*>(data);
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::size_t i = 0; i < bytes; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

/// Bitwise for doubles; 1e-5 relative for the f32 benchmark mode.
template <typename T>
void check_path_equivalence(const TensorT<T>& naive,
                            const TensorT<T>& grouped) {
  if (!naive.same_shape(grouped))
    throw NumericError("bench: path outputs differ in shape");
  if constexpr (std::is_same_v<T, double>) {
    if (std::memcmp(naive.data(), grouped.data(),
                    naive.size() * sizeof(T)) != 0)
      throw NumericError("bench: naive and grouped outputs differ bitwise");
  } else {
    for (std::size_t i = 0; i < naive.size(); ++i) {
      const double a = naive[i], b = grouped[i];
      const double denom = std::max(1.0, std::max(std::abs(a), std::abs(b)));
      if (std::abs(a - b) / denom > 1e-5)
        throw NumericError("bench: f32 paths diverge beyond 1e-5");
    }
  }
}

template <typename T>
BenchResult run_one_bench(const BenchConfig& bc, int iters, int warmup,
                          std::function<TensorT<T>()> naive_fn,
                          std::function<TensorT<T>()> grouped_fn) {
  BenchResult r;
  r.cfg = bc;
  // Equivalence gate first: never time divergent paths.
  TensorT<T> out_naive = naive_fn();
  TensorT<T> out_grouped = grouped_fn();
  check_path_equivalence(out_naive, out_grouped);
  r.checksum =
      fnv1a_bytes(out_grouped.data(), out_grouped.size() * sizeof(T));
  r.naive_ms = time_median_ms([&] { (void)naive_fn(); }, iters, warmup);
  r.grouped_ms = time_median_ms([&] { (void)grouped_fn(); }, iters, warmup);
  r.speedup = r.naive_ms / r.grouped_ms;
  r.flops = flop_count(bc.layer(), bc.batch);
  return r;
}

template <typename T>
BenchResult bench_config(const BenchConfig& bc, std::uint64_t seed, int iters,
                         int warmup) {
  SliceMoeConfig cfg = bc.layer();
  cfg.validate();
  Rng rng(seed, stream::kInit);
  RouterParams router = init_router(cfg, rng);
  std::vector<ExpertParams> experts64 = init_experts(cfg, rng);
  Rng data_rng(seed, stream::kData);
  Tensor x = gaussian(data_rng, {bc.batch, cfg.d});
  Tensor slabs64 = partition_slices(x, cfg.slices);
  Tensor rows = slabs64.reshaped({bc.batch * cfg.slices, cfg.slice_width()});
  Rng noise(seed, stream::kNoise), drop(seed, stream::kDropout);
  auto decisions = route_batch(rows, router, cfg, noise, drop, false);

  if constexpr (std::is_same_v<T, double>) {
    return run_one_bench<double>(
        bc, iters, warmup,
        [&] { return dispatch_naive(slabs64, decisions, experts64); },
        [&] { return dispatch_grouped(slabs64, decisions, experts64); });
  } else {
    TensorT<float> slabs32 = to_f32(slabs64);
    std::vector<ExpertParamsT<float>> experts32;
    experts32.reserve(experts64.size());
    for (const auto& e : experts64)
      experts32.push_back(ExpertParamsT<float>{to_f32(e.U1), to_f32(e.c1),
                                               to_f32(e.U2), to_f32(e.c2)});
    return run_one_bench<float>(
        bc, iters, warmup,
        [&] { return dispatch_naive(slabs32, decisions, experts32); },
        [&] { return dispatch_grouped(slabs32, decisions, experts32); });
  }
}

}  // namespace detail

/// Times both dispatch paths (forward only) for each configuration after
/// verifying their outputs agree; throws NumericError and reports nothing
/// if any pair of paths diverges.
inline std::vector<BenchResult> run_bench(const std::vector<BenchConfig>& grid,
                                          std::uint64_t seed = 7,
                                          int iters = 20, int warmup = 3,
                                          std::ostream* log = nullptr) {
  std::vector<BenchResult> results;
  for (const auto& bc : grid) {
    BenchResult r = bc.f32
                        ? detail::bench_config<float>(bc, seed, iters, warmup)
                        : detail::bench_config<double>(bc, seed, iters, warmup);
    if (log)
      *log << "bench B=" << bc.batch << " S=" << bc.slices
           << " E=" << bc.experts << " k=" << bc.top_k << " d=" << bc.d
           << (bc.f32 ? " f32" : " f64") << ": naive " << r.naive_ms
           << " ms, grouped " << r.grouped_ms << " ms (x" << r.speedup
           << ")\n";
    results.push_back(r);
  }
  return results;
}

inline const char* kBenchHeader =
    "batch,slices,experts,top_k,d,expert_hidden,precision,naive_ms,"
    "grouped_ms,speedup,flops,checksum";

inline void write_bench_csv(const std::string& path,
                            const std::vector<BenchResult>& results) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path);
  out << kBenchHeader << "\n";
  for (const auto& r : results) {
    char checksum[17];
    std::snprintf(checksum, sizeof(checksum), "%016llx",
                  static_cast<unsigned long long>(r.checksum));
    out << r.cfg.batch << ',' << r.cfg.slices << ',' << r.cfg.experts << ','
        << r.cfg.top_k << ',' << r.cfg.d << ','
        << r.cfg.layer().expert_width() << ','
        << (r.cfg.f32 ? "f32" : "f64") << ',' << fmt_g17(r.naive_ms) << ','
        << fmt_g17(r.grouped_ms) << ',' << fmt_g17(r.speedup) << ','
        << r.flops.total << ',' << checksum << "\n";
  }
}

/// Default benchmark grid: small widths where grouping pays the most, a
/// medium configuration, the k sweep at fixed B/S/E, and one
/// transformer-scale f32 row.
inline std::vector<BenchConfig> default_bench_grid() {
  std::vector<BenchConfig> grid;
  grid.push_back(BenchConfig{1, 1, 1, 1, 16, 0, false});
  grid.push_back(BenchConfig{64, 8, 16, 2, 64, 0, false});
  for (std::size_t k : {1, 2, 3})
    grid.push_back(BenchConfig{64, 8, 16, k, 256, 0, false});
  grid.push_back(BenchConfig{256, 8, 16, 2, 768, 384, true});
  return grid;
}

}  // namespace slicemoe
