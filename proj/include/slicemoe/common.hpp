// Copyright 2026 the slicemoe authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <atomic>
#include <cstdint>
#include <cstdio>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace slicemoe {

/// Base class for all library errors.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Invalid configuration (bad hyperparameter, d not divisible by S, ...).
/// Reported at construction time, never mid-training. CLI exit code 2.
struct ConfigError : Error {
  using Error::Error;
};

/// Tensor shape mismatch in an operation.
struct DimError : Error {
  using Error::Error;
};

/// API contract violation (non-scalar loss, unnormalized loads, ...).
struct ContractError : Error {
  using Error::Error;
};

/// Bad input data (label out of range, ...). CLI exit code 3.
struct DataError : Error {
  using Error::Error;
};

/// Corrupt or truncated file, unknown schema version. CLI exit code 3.
struct IntegrityError : Error {
  using Error::Error;
};

/// Non-finite value produced where finiteness is required. CLI exit code 4.
struct NumericError : Error {
  using Error::Error;
};

// ---------------------------------------------------------------------------
// Global worker-thread count. Default 1; internal parallelism must stay
// bit-identical to the single-threaded path, so only row/expert-disjoint work
// is ever split.

inline std::atomic<int>& thread_count_ref() {
  static std::atomic<int> n{1};
  return n;
}

inline void set_threads(int n) { thread_count_ref().store(n < 1 ? 1 : n); }
inline int threads() { return thread_count_ref().load(); }

/// Splits [0, total) into contiguous chunks, one per worker. Each chunk's
/// results must land in disjoint output ranges so the split is unobservable.
template <typename Fn>
void parallel_for(std::size_t total, Fn&& fn) {
  int n_threads = threads();
  if (n_threads <= 1 || total <= 1) {
    fn(std::size_t{0}, total);
    return;
  }
  if (static_cast<std::size_t>(n_threads) > total)
    n_threads = static_cast<int>(total);
  const std::size_t chunk = total / static_cast<std::size_t>(n_threads);
  std::vector<std::thread> workers;
  workers.reserve(static_cast<std::size_t>(n_threads) - 1);
  for (int t = 0; t < n_threads - 1; ++t) {
    const std::size_t lo = static_cast<std::size_t>(t) * chunk;
    workers.emplace_back(fn, lo, lo + chunk);
  }
  fn(static_cast<std::size_t>(n_threads - 1) * chunk, total);
  for (auto& w : workers) w.join();
}

// ---------------------------------------------------------------------------
// FLOP accounting. Every matrix-multiply kernel reports 2*m*n*k when enabled;
// the benchmark cross-checks these totals against the closed-form counter.

struct FlopCounter {
  static std::atomic<std::uint64_t>& total() {
    static std::atomic<std::uint64_t> v{0};
    return v;
  }
  static std::atomic<bool>& enabled() {
    static std::atomic<bool> e{false};
    return e;
  }
  static void reset() { total().store(0); }
  static void enable(bool on) { enabled().store(on); }
  static std::uint64_t value() { return total().load(); }
  static void add(std::uint64_t flops) {
    if (enabled().load(std::memory_order_relaxed))
      total().fetch_add(flops, std::memory_order_relaxed);
  }
};

/// Shortest round-trippable decimal rendering of a double; CSV files use
/// this so reruns with identical values produce identical bytes.
inline std::string fmt_g17(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return std::string(buf);
}

}  // namespace slicemoe
