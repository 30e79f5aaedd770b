// Copyright 2026 the slicemoe authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>

#include "slicemoe/common.hpp"

namespace slicemoe {

enum class PermutationMode { kContiguous, kShuffled };

inline const char* to_string(PermutationMode m) {
  return m == PermutationMode::kContiguous ? "contiguous" : "shuffled";
}

/// Hyperparameters of the slice-routing layer itself.
struct SliceMoeConfig {
  std::size_t d = 64;             // token embedding width
  std::size_t slices = 8;         // S, contiguous slices per token
  std::size_t experts = 16;       // E
  std::size_t top_k = 2;          // experts selected per slice
  std::size_t router_hidden = 256;  // H_r
  std::size_t expert_hidden = 0;  // F; 0 means 4 * slice width
  double alpha = 0.05;            // capacity loss weight
  double dropout = 0.2;           // cross-slice dropout rate
  double temperature = 1.0;       // router softmax temperature
  double noise_sigma = 0.0;       // stddev of Gaussian logit noise (training)
  PermutationMode permutation = PermutationMode::kContiguous;

  std::size_t slice_width() const { return d / slices; }
  std::size_t expert_width() const {
    return expert_hidden != 0 ? expert_hidden : 4 * slice_width();
  }

  void validate() const {
    if (d == 0 || slices == 0 || experts == 0 || top_k == 0)
      throw ConfigError("config: d, slices, experts, top_k must be positive");
    if (d % slices != 0)
      throw ConfigError("config: d must be divisible by slices (d=" +
                        std::to_string(d) +
                        ", slices=" + std::to_string(slices) + ")");
    if (top_k > experts)
      throw ConfigError("config: top_k exceeds expert count");
    if (router_hidden == 0)
      throw ConfigError("config: router_hidden must be positive");
    if (!(alpha >= 0.0)) throw ConfigError("config: alpha must be >= 0");
    if (!(dropout >= 0.0 && dropout < 1.0))
      throw ConfigError("config: dropout must be in [0, 1)");
    if (!(temperature > 0.0))
      throw ConfigError("config: temperature must be positive");
    if (!(noise_sigma >= 0.0))
      throw ConfigError("config: noise_sigma must be >= 0");
  }
};

/// Generator for the segment-structured synthetic classification task. Each
/// sample is one d-dimensional vector whose segments are drawn from
/// per-segment concept centroids plus noise; the label is the concept id of
/// one segment (segment 0 by default), so the task is solvable from a single
/// contiguous block of coordinates.
struct SyntheticSpec {
  std::size_t n_samples = 5000;
  std::size_t d = 64;
  std::size_t segments = 4;    // G
  std::size_t concepts = 4;    // concepts per segment = number of classes
  double noise_std = 0.1;
  std::size_t label_segment = 0;  // label = concept id of this segment

  void validate() const {
    if (n_samples < 10) throw ConfigError("data: need at least 10 samples");
    if (segments == 0 || d % segments != 0)
      throw ConfigError("data: d must be divisible by segments");
    if (concepts < 2) throw ConfigError("data: need at least 2 concepts");
    if (label_segment >= segments)
      throw ConfigError("data: label_segment out of range");
    if (!(noise_std >= 0.0))
      throw ConfigError("data: noise_std must be >= 0");
  }
};

struct AdamHyper {
  double lr = 2e-4;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-8;

  void validate() const {
    if (!(lr > 0.0)) throw ConfigError("optimizer: lr must be positive");
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0))
      throw ConfigError("optimizer: betas must be in [0, 1)");
    if (!(eps > 0.0)) throw ConfigError("optimizer: eps must be positive");
  }
};

/// Everything a training run needs. The resolved form of this struct is what
/// the run manifest records.
struct TrainConfig {
  SliceMoeConfig moe;
  SyntheticSpec data;
  AdamHyper opt;
  std::size_t batch_size = 32;
  std::size_t epochs = 5;
  std::uint64_t seed = 0;
  bool grouped_dispatch = true;  // false switches to the naive reference path

  void validate() const {
    moe.validate();
    data.validate();
    opt.validate();
    if (batch_size == 0) throw ConfigError("config: batch_size must be >= 1");
    if (epochs == 0) throw ConfigError("config: epochs must be >= 1");
    if (data.d != moe.d)
      throw ConfigError("config: data dimension and layer dimension differ");
  }
};

// ---------------------------------------------------------------------------
// Flat key=value config files. '#' starts a comment; unknown keys are
// rejected so typos fail loudly. The contract is the resolved manifest, not
// this syntax.

using KvMap = std::map<std::string, std::string>;

inline KvMap parse_kv_text(std::istream& in) {
  KvMap kv;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    // trim
    const auto b = line.find_first_not_of(" \t\r");
    if (b == std::string::npos) continue;
    const auto e = line.find_last_not_of(" \t\r");
    line = line.substr(b, e - b + 1);
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(lineno) +
                        ": expected key=value");
    auto trim = [](std::string s) {
      const auto x = s.find_first_not_of(" \t");
      const auto y = s.find_last_not_of(" \t");
      return x == std::string::npos ? std::string() : s.substr(x, y - x + 1);
    };
    kv[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  return kv;
}

inline KvMap parse_kv_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot open " + path);
  return parse_kv_text(in);
}

namespace detail {

inline std::uint64_t parse_uint(const std::string& key,
                                const std::string& s) {
  try {
    std::size_t pos = 0;
    const unsigned long long v = std::stoull(s, &pos);
    if (pos != s.size()) throw std::invalid_argument(s);
    return static_cast<std::uint64_t>(v);
  } catch (const std::exception&) {
    throw ConfigError("config: bad integer for " + key + ": '" + s + "'");
  }
}

inline double parse_double(const std::string& key, const std::string& s) {
  try {
    std::size_t pos = 0;
    const double v = std::stod(s, &pos);
    if (pos != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw ConfigError("config: bad number for " + key + ": '" + s + "'");
  }
}

}  // namespace detail

/// Applies key=value pairs onto a TrainConfig. Keys not listed here throw,
/// except the bookkeeping keys a manifest carries (schema_version,
/// config_hash, created_*), which are ignored so a manifest is itself a
/// valid config file.
inline void apply_kv(TrainConfig& c, const KvMap& kv) {
  for (const auto& [key, val] : kv) {
    if (key == "d") {
      c.moe.d = detail::parse_uint(key, val);
      c.data.d = c.moe.d;
    } else if (key == "slices") {
      c.moe.slices = detail::parse_uint(key, val);
    } else if (key == "experts") {
      c.moe.experts = detail::parse_uint(key, val);
    } else if (key == "top_k") {
      c.moe.top_k = detail::parse_uint(key, val);
    } else if (key == "router_hidden") {
      c.moe.router_hidden = detail::parse_uint(key, val);
    } else if (key == "expert_hidden") {
      c.moe.expert_hidden = detail::parse_uint(key, val);
    } else if (key == "alpha") {
      c.moe.alpha = detail::parse_double(key, val);
    } else if (key == "dropout") {
      c.moe.dropout = detail::parse_double(key, val);
    } else if (key == "temperature") {
      c.moe.temperature = detail::parse_double(key, val);
    } else if (key == "noise_sigma") {
      c.moe.noise_sigma = detail::parse_double(key, val);
    } else if (key == "permutation") {
      if (val == "contiguous")
        c.moe.permutation = PermutationMode::kContiguous;
      else if (val == "shuffled")
        c.moe.permutation = PermutationMode::kShuffled;
      else
        throw ConfigError("config: permutation must be contiguous|shuffled");
    } else if (key == "samples") {
      c.data.n_samples = detail::parse_uint(key, val);
    } else if (key == "segments") {
      c.data.segments = detail::parse_uint(key, val);
    } else if (key == "concepts") {
      c.data.concepts = detail::parse_uint(key, val);
    } else if (key == "data_noise_std") {
      c.data.noise_std = detail::parse_double(key, val);
    } else if (key == "label_segment") {
      c.data.label_segment = detail::parse_uint(key, val);
    } else if (key == "lr") {
      c.opt.lr = detail::parse_double(key, val);
    } else if (key == "beta1") {
      c.opt.beta1 = detail::parse_double(key, val);
    } else if (key == "beta2") {
      c.opt.beta2 = detail::parse_double(key, val);
    } else if (key == "adam_eps") {
      c.opt.eps = detail::parse_double(key, val);
    } else if (key == "batch_size") {
      c.batch_size = detail::parse_uint(key, val);
    } else if (key == "epochs") {
      c.epochs = detail::parse_uint(key, val);
    } else if (key == "seed") {
      c.seed = detail::parse_uint(key, val);
    } else if (key == "grouped_dispatch") {
      if (val == "true" || val == "1")
        c.grouped_dispatch = true;
      else if (val == "false" || val == "0")
        c.grouped_dispatch = false;
      else
        throw ConfigError("config: grouped_dispatch must be true|false");
    } else if (key == "schema_version" || key == "config_hash" ||
               key.rfind("created_", 0) == 0) {
      // manifest bookkeeping, not configuration
    } else {
      throw ConfigError("config: unknown key '" + key + "'");
    }
  }
}

/// Canonical key=value rendering of a fully resolved config. Every
/// hyperparameter appears, in fixed order, so the text (and its hash) is a
/// complete record of the run.
inline std::string render_config(const TrainConfig& c) {
  std::ostringstream os;
  os.precision(17);
  os << "d=" << c.moe.d << "\n"
     << "slices=" << c.moe.slices << "\n"
     << "experts=" << c.moe.experts << "\n"
     << "top_k=" << c.moe.top_k << "\n"
     << "router_hidden=" << c.moe.router_hidden << "\n"
     << "expert_hidden=" << c.moe.expert_width() << "\n"
     << "alpha=" << c.moe.alpha << "\n"
     << "dropout=" << c.moe.dropout << "\n"
     << "temperature=" << c.moe.temperature << "\n"
     << "noise_sigma=" << c.moe.noise_sigma << "\n"
     << "permutation=" << to_string(c.moe.permutation) << "\n"
     << "samples=" << c.data.n_samples << "\n"
     << "segments=" << c.data.segments << "\n"
     << "concepts=" << c.data.concepts << "\n"
     << "data_noise_std=" << c.data.noise_std << "\n"
     << "label_segment=" << c.data.label_segment << "\n"
     << "lr=" << c.opt.lr << "\n"
     << "beta1=" << c.opt.beta1 << "\n"
     << "beta2=" << c.opt.beta2 << "\n"
     << "adam_eps=" << c.opt.eps << "\n"
     << "batch_size=" << c.batch_size << "\n"
     << "epochs=" << c.epochs << "\n"
     << "seed=" << c.seed << "\n"
     << "grouped_dispatch=" << (c.grouped_dispatch ? "true" : "false")
     << "\n";
  return os.str();
}

/// FNV-1a 64-bit content hash, hex-encoded. Identifies a resolved config.
inline std::string content_hash(const std::string& text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx",
                static_cast<unsigned long long>(h));
  return std::string(buf);
}

}  // namespace slicemoe
