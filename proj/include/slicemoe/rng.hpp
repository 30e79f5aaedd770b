// Copyright 2026 the slicemoe authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>

#include "slicemoe/common.hpp"

namespace slicemoe {

/// Deterministic counter-based generator. A draw is a pure function of
/// (seed, stream, counter), so any consumer (dropout masks, router noise,
/// data generation) can be replayed independently of every other one.
/// Identical seeds give identical sequences across runs and platforms.
class Rng {
 public:
  explicit Rng(std::uint64_t seed, std::uint64_t stream = 0)
      : key_(mix(seed ^ mix(stream))), counter_(0) {}

  /// Child generator on an independent stream; drawing from the child does
  /// not advance the parent.
  Rng derive(std::uint64_t substream) const {
    Rng child(0);
    child.key_ = mix(key_ ^ mix(substream + 0x517cc1b727220a95ULL));
    child.counter_ = 0;
    return child;
  }

  std::uint64_t next_u64() { return mix(key_ + (++counter_) * kGamma); }

  /// Uniform on [0, 1), 53-bit resolution.
  double next_unit() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + next_unit() * (hi - lo); }

  /// Standard normal via Box-Muller (cosine branch; two uniforms per draw).
  double gaussian() {
    const double u1 = 1.0 - next_unit();  // (0, 1], keeps log finite
    const double u2 = next_unit();
    return std::sqrt(-2.0 * std::log(u1)) *
           std::cos(2.0 * std::numbers::pi * u2);
  }

  /// Fisher-Yates shuffle of [0, n) index array.
  template <typename Int>
  void shuffle(std::vector<Int>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      const std::size_t j = static_cast<std::size_t>(next_u64() % i);
      std::swap(v[i - 1], v[j]);
    }
  }

  bool bernoulli(double p) { return next_unit() < p; }

 private:
  // splitmix64 finalizer
  static std::uint64_t mix(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
  }
  static constexpr std::uint64_t kGamma = 0x9e3779b97f4a7c15ULL;

  std::uint64_t key_;
  std::uint64_t counter_;
};

// Fixed stream ids so the purposes never collide.
namespace stream {
inline constexpr std::uint64_t kData = 1;
inline constexpr std::uint64_t kInit = 2;
inline constexpr std::uint64_t kDropout = 3;
inline constexpr std::uint64_t kNoise = 4;
inline constexpr std::uint64_t kShuffle = 5;
inline constexpr std::uint64_t kPermutation = 6;
}  // namespace stream

}  // namespace slicemoe
