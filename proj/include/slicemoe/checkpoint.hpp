// Copyright 2026 the slicemoe authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <bit>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "slicemoe/adam.hpp"
#include "slicemoe/config.hpp"
#include "slicemoe/layer.hpp"

namespace slicemoe {

static_assert(std::endian::native == std::endian::little,
              "checkpoint body is little-endian float64");

// Checkpoint layout: a human-readable text header (schema version, the
// resolved config, a tensor directory of name/shape/offset/length), a
// `body <bytes>` line, then raw little-endian float64 data. Offsets are
// relative to the body start; load validates every offset and length before
// touching tensor data, so a truncated file fails loudly instead of
// producing garbage tensors.

inline constexpr int kCheckpointSchema = 1;

struct Checkpoint {
  int schema_version = kCheckpointSchema;
  KvMap config;                         // resolved key=value pairs
  std::vector<std::pair<std::string, Tensor>> tensors;  // directory order

  const Tensor* find(const std::string& name) const {
    for (const auto& [n, t] : tensors)
      if (n == name) return &t;
    return nullptr;
  }
};

inline void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("checkpoint: cannot write " + path);
  out << "slicemoe-checkpoint " << ckpt.schema_version << "\n";
  out << "config-begin\n";
  for (const auto& [k, v] : ckpt.config) out << k << "=" << v << "\n";
  out << "config-end\n";
  out << "tensors " << ckpt.tensors.size() << "\n";
  std::size_t offset = 0;
  for (const auto& [name, t] : ckpt.tensors) {
    out << "tensor " << name << " " << t.rank();
    for (std::size_t i = 0; i < t.rank(); ++i) out << " " << t.dim(i);
    out << " " << offset << " " << t.size() * sizeof(double) << "\n";
    offset += t.size() * sizeof(double);
  }
  out << "body " << offset << "\n";
  for (const auto& [name, t] : ckpt.tensors)
    out.write(reinterpret_cast<const char*>(t.data()),
              static_cast<std::streamsize>(t.size() * sizeof(double)));
  if (!out) throw DataError("checkpoint: write failed for " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IntegrityError("checkpoint: cannot open " + path);

  auto next_line = [&in, &path]() {
    std::string line;
    if (!std::getline(in, line))
      throw IntegrityError("checkpoint: truncated header in " + path);
    return line;
  };

  Checkpoint ckpt;
  {
    std::istringstream head(next_line());
    std::string magic;
    head >> magic >> ckpt.schema_version;
    if (magic != "slicemoe-checkpoint" || head.fail())
      throw IntegrityError("checkpoint: bad magic in " + path);
    if (ckpt.schema_version != kCheckpointSchema)
      throw IntegrityError("checkpoint: unknown schema_version " +
                           std::to_string(ckpt.schema_version));
  }
  if (next_line() != "config-begin")
    throw IntegrityError("checkpoint: missing config block");
  for (std::string line = next_line(); line != "config-end";
       line = next_line()) {
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw IntegrityError("checkpoint: malformed config line");
    ckpt.config[line.substr(0, eq)] = line.substr(eq + 1);
  }

  std::size_t n_tensors = 0;
  {
    std::istringstream ts(next_line());
    std::string word;
    ts >> word >> n_tensors;
    if (word != "tensors" || ts.fail())
      throw IntegrityError("checkpoint: missing tensor directory");
  }
  struct Entry {
    std::string name;
    std::vector<std::size_t> shape;
    std::size_t offset, bytes;
  };
  std::vector<Entry> dir(n_tensors);
  std::size_t expected_offset = 0;
  for (auto& e : dir) {
    std::istringstream ls(next_line());
    std::string word;
    std::size_t rank = 0;
    ls >> word >> e.name >> rank;
    if (word != "tensor" || ls.fail() || rank == 0 || rank > 3)
      throw IntegrityError("checkpoint: malformed tensor entry");
    e.shape.resize(rank);
    for (auto& d : e.shape) ls >> d;
    ls >> e.offset >> e.bytes;
    if (ls.fail()) throw IntegrityError("checkpoint: malformed tensor entry");
    std::size_t count = 1;
    for (std::size_t d : e.shape) count *= d;
    if (e.bytes != count * sizeof(double) || e.offset != expected_offset)
      throw IntegrityError("checkpoint: inconsistent directory for " +
                           e.name);
    expected_offset += e.bytes;
  }
  std::size_t body_bytes = 0;
  {
    std::istringstream bs(next_line());
    std::string word;
    bs >> word >> body_bytes;
    if (word != "body" || bs.fail())
      throw IntegrityError("checkpoint: missing body marker");
  }
  if (body_bytes != expected_offset)
    throw IntegrityError("checkpoint: directory/body size mismatch");

  const std::streampos body_start = in.tellg();
  in.seekg(0, std::ios::end);
  const auto available =
      static_cast<std::size_t>(in.tellg() - body_start);
  if (available < body_bytes)
    throw IntegrityError("checkpoint: body truncated (" +
                         std::to_string(available) + " of " +
                         std::to_string(body_bytes) + " bytes)");
  in.seekg(body_start);

  for (const auto& e : dir) {
    std::size_t count = 1;
    for (std::size_t d : e.shape) count *= d;
    std::vector<double> data(count);
    in.read(reinterpret_cast<char*>(data.data()),
            static_cast<std::streamsize>(e.bytes));
    if (!in) throw IntegrityError("checkpoint: read failed for " + e.name);
    ckpt.tensors.emplace_back(e.name, Tensor(e.shape, std::move(data)));
  }
  return ckpt;
}

// ---------------------------------------------------------------------------
// Model <-> checkpoint.

/// Packs model parameters (and optionally optimizer state) with the resolved
/// run config. load(save(model)) round-trips bitwise.
inline Checkpoint make_checkpoint(ModelParams& model, const TrainConfig& cfg,
                                  const Adam* optimizer = nullptr) {
  Checkpoint ckpt;
  std::istringstream cfg_text(render_config(cfg));
  ckpt.config = parse_kv_text(cfg_text);
  for (auto& [name, ptr] : named_params(model))
    ckpt.tensors.emplace_back(name, *ptr);
  if (optimizer) {
    ckpt.config["adam_timestep"] = std::to_string(optimizer->timestep());
    const auto& states = optimizer->states();
    auto named = named_params(model);
    for (std::size_t i = 0; i < states.size(); ++i) {
      ckpt.tensors.emplace_back("adam.m." + named[i].first, states[i].m);
      ckpt.tensors.emplace_back("adam.v." + named[i].first, states[i].v);
    }
  }
  return ckpt;
}

/// Rebuilds the model (and optimizer state when present) from a checkpoint.
/// The embedded config supplies the architecture; caller may re-parse it
/// into a TrainConfig via apply_kv.
struct RestoredRun {
  TrainConfig config;
  ModelParams model;
  Adam optimizer;
  bool has_optimizer = false;
  std::size_t classes = 0;
};

inline RestoredRun restore_run(const Checkpoint& ckpt) {
  RestoredRun run;
  KvMap cfg_kv = ckpt.config;
  const bool has_t = cfg_kv.count("adam_timestep") > 0;
  std::uint64_t adam_t = 0;
  if (has_t) {
    adam_t = detail::parse_uint("adam_timestep", cfg_kv.at("adam_timestep"));
    cfg_kv.erase("adam_timestep");
  }
  apply_kv(run.config, cfg_kv);
  run.config.validate();
  run.classes = run.config.data.concepts;
  run.model = init_model(run.config.moe, run.classes, run.config.seed);
  for (auto& [name, ptr] : named_params(run.model)) {
    const Tensor* t = ckpt.find(name);
    if (!t) throw IntegrityError("checkpoint: missing tensor " + name);
    if (t->shape() != ptr->shape())
      throw IntegrityError("checkpoint: shape mismatch for " + name);
    *ptr = *t;
  }
  if (has_t) {
    run.optimizer = Adam(run.config.opt);
    std::vector<Tensor*> params;
    for (auto& [name, ptr] : named_params(run.model)) params.push_back(ptr);
    run.optimizer.init(params);
    auto named = named_params(run.model);
    for (std::size_t i = 0; i < named.size(); ++i) {
      const Tensor* m = ckpt.find("adam.m." + named[i].first);
      const Tensor* v = ckpt.find("adam.v." + named[i].first);
      if (!m || !v)
        throw IntegrityError("checkpoint: missing optimizer state for " +
                             named[i].first);
      run.optimizer.states_mut()[i].m = *m;
      run.optimizer.states_mut()[i].v = *v;
    }
    run.optimizer.set_timestep(static_cast<long>(adam_t));
    run.has_optimizer = true;
  }
  return run;
}

// ---------------------------------------------------------------------------
// Run manifest: the complete resolved configuration plus its content hash.
// Re-running from a manifest reproduces the run bitwise; the created_at
// line is informational and excluded from the hash.

inline constexpr int kManifestSchema = 1;

inline std::string render_manifest(const TrainConfig& cfg,
                                   const std::string& created_at) {
  const std::string cfg_text = render_config(cfg);
  std::ostringstream os;
  os << "schema_version=" << kManifestSchema << "\n"
     << cfg_text << "config_hash=" << content_hash(cfg_text) << "\n";
  if (!created_at.empty()) os << "created_at=" << created_at << "\n";
  return os.str();
}

inline void write_manifest(const std::string& path, const TrainConfig& cfg,
                           const std::string& created_at) {
  std::ofstream out(path);
  if (!out) throw DataError("manifest: cannot write " + path);
  out << render_manifest(cfg, created_at);
}

/// A manifest is itself a valid config file; this loads and re-resolves it.
inline TrainConfig load_train_config(const std::string& path) {
  TrainConfig cfg;
  apply_kv(cfg, parse_kv_file(path));
  cfg.validate();
  return cfg;
}

}  // namespace slicemoe
