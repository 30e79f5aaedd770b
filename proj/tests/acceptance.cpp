// Copyright 2026 the slicemoe authors
// SPDX-License-Identifier: Apache-2.0
//
// End-to-end acceptance gate. Each criterion prints one PASS/FAIL line;
// the process exits nonzero if any criterion fails.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "slicemoe/ablate.hpp"
#include "slicemoe/bench.hpp"
#include "slicemoe/checkpoint.hpp"
#include "slicemoe/gradcheck.hpp"
#include "slicemoe/train.hpp"

namespace {

using slicemoe::Rng;
using slicemoe::Tensor;

int g_failures = 0;

void criterion(int number, const std::string& name,
               const std::function<bool(std::string&)>& body) {
  std::string detail;
  bool ok = false;
  const auto t0 = std::chrono::steady_clock::now();
  try {
    ok = body(detail);
  } catch (const std::exception& e) {
    detail = std::string("exception: ") + e.what();
  }
  const double secs = std::chrono::duration<double>(
                          std::chrono::steady_clock::now() - t0)
                          .count();
  std::printf("[%s] C%-2d %-28s (%.1fs)%s%s\n", ok ? "PASS" : "FAIL", number,
              name.c_str(), secs, detail.empty() ? "" : " -- ",
              detail.c_str());
  std::fflush(stdout);
  if (!ok) ++g_failures;
}

// Default synthetic run of the balance experiments: d=64, S=8, E=16, k=2,
// 5k samples, 5 epochs.
slicemoe::TrainConfig default_run_config(std::uint64_t seed) {
  slicemoe::TrainConfig cfg;
  cfg.moe.d = 64;
  cfg.moe.slices = 8;
  cfg.moe.experts = 16;
  cfg.moe.top_k = 2;
  cfg.moe.router_hidden = 256;
  cfg.moe.alpha = 0.05;
  cfg.moe.dropout = 0.2;
  cfg.data.n_samples = 5000;
  cfg.data.d = 64;
  cfg.data.segments = 4;
  cfg.data.concepts = 4;
  cfg.data.noise_std = 0.1;
  cfg.batch_size = 32;
  cfg.epochs = 5;
  cfg.seed = seed;
  return cfg;
}

const std::vector<std::uint64_t> kSeeds{11, 22, 33};

double mean(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

// C1 ------------------------------------------------------------------
bool gradient_oracle(std::string& detail) {
  auto results = slicemoe::run_gradcheck_suite(2026, 10);
  double worst = 0.0;
  std::string worst_op;
  bool full_layer_seen = false;
  for (const auto& r : results) {
    if (r.max_rel_err > worst) {
      worst = r.max_rel_err;
      worst_op = r.op;
    }
    full_layer_seen = full_layer_seen || r.op == "full_layer";
  }
  std::ostringstream os;
  os << results.size() << " ops, worst " << worst_op << " rel_err "
     << slicemoe::fmt_g17(worst);
  detail = os.str();
  return full_layer_seen && worst < 1e-4;
}

// C2 ------------------------------------------------------------------
bool dispatch_equivalence(std::string& detail) {
  Rng rng(909);
  int checked = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t s =
        std::vector<std::size_t>{1, 2, 4, 8}[rng.next_u64() % 4];
    const std::size_t b = 1 + rng.next_u64() % 64;
    const std::size_t e = 1 + rng.next_u64() % 16;
    const std::size_t k = 1 + rng.next_u64() % std::min<std::size_t>(3, e);
    const std::size_t w = 1 + rng.next_u64() % 6;
    const std::size_t f = 1 + rng.next_u64() % 8;

    Tensor slabs = slicemoe::gaussian(rng, {b, s, w});
    Tensor weights = slicemoe::uniform(rng, {b * s, k}, 0.0, 1.0);
    std::vector<int> ids(b * s * k);
    for (std::size_t r = 0; r < b * s; ++r) {
      Tensor probs = slicemoe::softmax(slicemoe::gaussian(rng, {e}), 1.0);
      auto [rid, rtop] = slicemoe::top_k_select(probs, k);
      std::copy(rid.begin(), rid.end(),
                ids.begin() + static_cast<long>(r * k));
    }
    std::vector<slicemoe::ExpertParams> experts;
    for (std::size_t i = 0; i < e; ++i)
      experts.push_back(slicemoe::ExpertParams{
          slicemoe::gaussian(rng, {w, f}), slicemoe::gaussian(rng, {f}),
          slicemoe::gaussian(rng, {f, w}), slicemoe::gaussian(rng, {w})});
    Tensor head = slicemoe::gaussian(rng, {b, s * w});

    auto run = [&](bool grouped) {
      namespace ad = slicemoe::ad;
      ad::Tape t;
      ad::Var vs = t.leaf(slabs);
      ad::Var vw = t.leaf(weights);
      std::vector<slicemoe::ad_ops::ExpertVars> ev;
      for (const auto& ex : experts)
        ev.push_back(slicemoe::ad_ops::ExpertVars{
            t.leaf(ex.U1), t.leaf(ex.c1), t.leaf(ex.U2), t.leaf(ex.c2)});
      ad::Var out = slicemoe::ad_ops::dispatch(t, vs, vw, ids, ev, grouped);
      ad::Var loss = ad::sum(t, ad::mul(t, out, t.constant(head)));
      t.backward(loss);
      std::vector<Tensor> all{t.value(out), t.grad(vs), t.grad(vw)};
      for (const auto& x : ev) {
        all.push_back(t.grad(x.U1));
        all.push_back(t.grad(x.c1));
        all.push_back(t.grad(x.U2));
        all.push_back(t.grad(x.c2));
      }
      return all;
    };
    auto naive = run(false), grouped = run(true);
    for (std::size_t i = 0; i < naive.size(); ++i)
      if (naive[i].raw() != grouped[i].raw()) {
        detail = "divergence at trial " + std::to_string(trial);
        return false;
      }
    ++checked;
  }
  detail = std::to_string(checked) +
           " random configs bitwise-equal, forward and backward";
  return checked == 100;
}

// C3 ------------------------------------------------------------------
bool capacity_contract(std::string& detail) {
  Tensor uniform4({4}, {4, 4, 4, 4});
  Tensor skew2({2}, {3, 1});
  Tensor onehot4({4}, {8, 0, 0, 0});
  const double u = slicemoe::capacity_loss(uniform4, 0.25);
  const double a = slicemoe::capacity_loss(skew2, 0.1);
  const double b = slicemoe::capacity_loss(onehot4, 0.1);
  std::ostringstream os;
  os << "cap([3,1])=" << slicemoe::fmt_g17(a)
     << " cap([8,0,0,0])=" << slicemoe::fmt_g17(b);
  detail = os.str();
  return u == 0.0 && std::abs(a - 0.025) < 1e-12 && std::abs(b - 0.3) < 1e-12;
}

// C4 ------------------------------------------------------------------
bool ele_contract(std::string& detail) {
  Tensor uniform4({4}, {0.25, 0.25, 0.25, 0.25});
  Tensor onehot({5}, {0, 1, 0, 0, 0});
  Tensor half({4}, {0.5, 0.5, 0, 0});
  const double u = slicemoe::ele(uniform4);
  const double o = slicemoe::ele(onehot);
  const double h = slicemoe::ele(half);
  std::ostringstream os;
  os << "uniform=" << u << " onehot=" << o
     << " half=" << slicemoe::fmt_g17(h);
  detail = os.str();
  return u == 1.0 && o == 0.0 && std::abs(h - 0.5) < 1e-12;
}

// C5 ------------------------------------------------------------------
bool balance_emergence(std::string& detail) {
  std::vector<double> best_ele, final_with, final_without;
  for (std::uint64_t seed : kSeeds) {
    slicemoe::TrainConfig cfg = default_run_config(seed);
    auto with_cap = slicemoe::train(cfg);
    double best = 0.0;
    for (const auto& m : with_cap.history) best = std::max(best, m.ele);
    best_ele.push_back(best);
    final_with.push_back(with_cap.history.back().ele);

    slicemoe::TrainConfig plain = cfg;  // paired run, same seed and data
    plain.moe.alpha = 0.0;
    auto without_cap = slicemoe::train(plain);
    final_without.push_back(without_cap.history.back().ele);
  }
  std::ostringstream os;
  os << "mean best ELE " << mean(best_ele) << ", final ELE alpha=0.05 "
     << mean(final_with) << " vs alpha=0 " << mean(final_without);
  detail = os.str();
  return mean(best_ele) >= 0.9 && mean(final_without) < mean(final_with);
}

// C6 ------------------------------------------------------------------
bool contiguous_vs_shuffled(std::string& detail) {
  std::vector<double> contiguous, shuffled;
  for (std::uint64_t seed : kSeeds) {
    slicemoe::TrainConfig cfg = default_run_config(seed);
    auto c = slicemoe::train(cfg);
    contiguous.push_back(c.history.back().val_acc);
    cfg.moe.permutation = slicemoe::PermutationMode::kShuffled;
    auto s = slicemoe::train(cfg);
    shuffled.push_back(s.history.back().val_acc);
  }
  std::ostringstream os;
  os << "3-seed mean acc contiguous " << mean(contiguous) << " vs shuffled "
     << mean(shuffled);
  detail = os.str();
  return mean(contiguous) > mean(shuffled);
}

// C7 ------------------------------------------------------------------
bool noise_robustness(std::string& detail) {
  auto acc_at_sigma = [&](double sigma) {
    std::vector<double> accs;
    for (std::uint64_t seed : kSeeds) {
      slicemoe::TrainConfig cfg = default_run_config(seed);
      cfg.moe.noise_sigma = sigma;
      accs.push_back(slicemoe::train(cfg).history.back().val_acc);
    }
    return mean(accs);
  };
  const double clean = acc_at_sigma(0.0);
  const double mild = acc_at_sigma(0.1);
  const double heavy = acc_at_sigma(2.0);
  std::ostringstream os;
  os << "acc sigma=0: " << clean << ", 0.1: " << mild << ", 2.0: " << heavy;
  detail = os.str();
  return std::abs(mild - clean) <= 0.02 && heavy < clean;
}

// C8 ------------------------------------------------------------------
bool latency_increases_with_k(std::string& detail) {
  std::vector<slicemoe::BenchConfig> grid;
  for (std::size_t k : {1, 2, 3}) {
    slicemoe::BenchConfig bc;
    bc.batch = 64;
    bc.slices = 8;
    bc.experts = 16;
    bc.top_k = k;
    bc.d = 256;
    grid.push_back(bc);
  }
  auto results = slicemoe::run_bench(grid, 7, 15, 3);
  std::ostringstream os;
  os << "grouped ms for k=1,2,3: " << results[0].grouped_ms << ", "
     << results[1].grouped_ms << ", " << results[2].grouped_ms;
  detail = os.str();
  return results[0].grouped_ms < results[1].grouped_ms &&
         results[1].grouped_ms < results[2].grouped_ms;
}

// C9 ------------------------------------------------------------------
bool active_param_accounting(std::string& detail) {
  slicemoe::SliceMoeConfig cfg;
  cfg.d = 64;
  cfg.slices = 8;
  cfg.experts = 16;
  cfg.top_k = 2;
  cfg.router_hidden = 32;
  cfg.dropout = 0.0;
  auto report = slicemoe::active_param_count(cfg);

  Rng rng(55, slicemoe::stream::kInit);
  auto router = slicemoe::init_router(cfg, rng);
  auto experts = slicemoe::init_experts(cfg, rng);
  Rng data_rng(55, slicemoe::stream::kData);
  Tensor x = slicemoe::gaussian(data_rng, {16, cfg.d});
  Tensor slabs = slicemoe::partition_slices(x, cfg.slices);
  Tensor rows = slabs.reshaped({16 * cfg.slices, cfg.slice_width()});
  Rng n1(1), n2(2);
  auto ds = slicemoe::route_batch(rows, router, cfg, n1, n2, false);
  auto batch = slicemoe::gate_and_assign(slabs, ds, cfg.experts);
  const std::size_t instrumented =
      slicemoe::instrumented_active_expert_params(batch, cfg);

  const double fraction =
      static_cast<double>(report.active_expert_params / cfg.slices) /
      static_cast<double>(report.total_expert_params);
  std::ostringstream os;
  os << "per-slice active fraction " << slicemoe::fmt_g17(fraction)
     << " (k/E = 0.125), instrumented per-token params " << instrumented;
  detail = os.str();
  return instrumented == report.active_expert_params &&
         std::abs(fraction - 0.125) < 1e-15 &&
         std::abs(report.expert_fraction - 0.125) < 1e-15;
}

// C10 -----------------------------------------------------------------
std::string strip_wall_ms(const std::string& csv) {
  // Drop the trailing wall_ms column of every row; wall-clock time is the
  // one field that cannot reproduce bitwise.
  std::istringstream in(csv);
  std::ostringstream out;
  std::string line;
  while (std::getline(in, line)) {
    const auto pos = line.rfind(',');
    out << line.substr(0, pos) << "\n";
  }
  return out.str();
}

bool reproducibility_and_persistence(std::string& detail) {
  namespace fs = std::filesystem;
  slicemoe::TrainConfig cfg = default_run_config(77);
  cfg.data.n_samples = 1000;
  cfg.epochs = 2;

  auto run_csv = [&](const std::string& name) {
    auto res = slicemoe::train(cfg);
    const std::string path =
        (fs::temp_directory_path() / name).string();
    slicemoe::write_metrics_csv(path, res.history);
    std::ifstream in(path);
    std::stringstream ss;
    ss << in.rdbuf();
    std::remove(path.c_str());
    return std::make_pair(ss.str(), std::move(res));
  };
  auto [csv1, res1] = run_csv("slicemoe_acc_run1.csv");
  auto [csv2, res2] = run_csv("slicemoe_acc_run2.csv");
  if (strip_wall_ms(csv1) != strip_wall_ms(csv2)) {
    detail = "metrics.csv differs between identical runs";
    return false;
  }

  // Checkpoint round-trip, bitwise.
  const std::string ckpt_path =
      (fs::temp_directory_path() / "slicemoe_acc.ckpt").string();
  auto ckpt = slicemoe::make_checkpoint(res1.model, cfg, &res1.optimizer);
  slicemoe::save_checkpoint(ckpt, ckpt_path);
  auto restored = slicemoe::restore_run(slicemoe::load_checkpoint(ckpt_path));
  std::remove(ckpt_path.c_str());
  auto pa = slicemoe::named_params(res1.model);
  auto pb = slicemoe::named_params(restored.model);
  for (std::size_t i = 0; i < pa.size(); ++i)
    if (pa[i].second->raw() != pb[i].second->raw()) {
      detail = "checkpoint round-trip altered " + pa[i].first;
      return false;
    }

  // Eval of the restored checkpoint equals the final epoch's val metrics.
  auto data = slicemoe::generate_synthetic(cfg.data, cfg.seed);
  auto ev = slicemoe::evaluate(restored.model, cfg.moe, data.val,
                               cfg.batch_size);
  const auto& last = res1.history.back();
  std::ostringstream os;
  os << "eval val_acc " << slicemoe::fmt_g17(ev.accuracy) << " == history "
     << slicemoe::fmt_g17(last.val_acc);
  detail = os.str();
  return ev.accuracy == last.val_acc && ev.loss == last.val_loss;
}

// C11 -----------------------------------------------------------------
bool bench_integrity(std::string& detail) {
  // Refusal: a corrupted grouped path must throw before any timing.
  bool refused = false;
  try {
    slicemoe::BenchConfig bc;
    Rng rng(3);
    Tensor good = slicemoe::gaussian(rng, {4, 8});
    Tensor bad = good;
    bad[5] = std::nextafter(bad[5], 1e300);
    (void)slicemoe::detail::run_one_bench<double>(
        bc, 5, 1, [&] { return good; }, [&] { return bad; });
  } catch (const slicemoe::NumericError&) {
    refused = true;
  }
  if (!refused) {
    detail = "benchmark timed divergent paths";
    return false;
  }
  // FLOP counter agreement on 10 random configs.
  Rng rng(18);
  for (int trial = 0; trial < 10; ++trial) {
    slicemoe::SliceMoeConfig cfg;
    cfg.slices = std::vector<std::size_t>{1, 2, 4, 8}[rng.next_u64() % 4];
    cfg.d = cfg.slices * (1 + rng.next_u64() % 8);
    cfg.experts = 1 + rng.next_u64() % 12;
    cfg.top_k = 1 + rng.next_u64() % std::min<std::size_t>(3, cfg.experts);
    cfg.router_hidden = 1 + rng.next_u64() % 24;
    cfg.expert_hidden = 1 + rng.next_u64() % 12;
    const std::size_t batch = 1 + rng.next_u64() % 12;
    if (slicemoe::instrumented_layer_flops(cfg, batch, rng.next_u64()) !=
        slicemoe::flop_count(cfg, batch).total) {
      detail = "flop mismatch at trial " + std::to_string(trial);
      return false;
    }
  }
  detail = "divergence refused; 10/10 flop counts exact";
  return true;
}

}  // namespace

int main() {
  std::printf("slicemoe acceptance suite\n");
  criterion(1, "gradient oracle", gradient_oracle);
  criterion(2, "dispatch equivalence", dispatch_equivalence);
  criterion(3, "capacity loss contract", capacity_contract);
  criterion(4, "ELE contract", ele_contract);
  criterion(5, "balance emergence", balance_emergence);
  criterion(6, "contiguous vs shuffled", contiguous_vs_shuffled);
  criterion(7, "noise robustness", noise_robustness);
  criterion(8, "latency increases with k", latency_increases_with_k);
  criterion(9, "active param accounting", active_param_accounting);
  criterion(10, "reproducibility+persistence", reproducibility_and_persistence);
  criterion(11, "bench integrity", bench_integrity);
  if (g_failures == 0) {
    std::printf("all criteria passed\n");
    return 0;
  }
  std::printf("%d criteria failed\n", g_failures);
  return 1;
}
