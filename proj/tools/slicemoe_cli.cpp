// Copyright 2026 the slicemoe authors
// SPDX-License-Identifier: Apache-2.0
//
// Command-line workbench: train | eval | ablate | bench | gradcheck.
// Exit codes: 0 success, 1 usage, 2 config error, 3 data/integrity error,
// 4 numeric failure.

#include <CLI11.hpp>

#include <chrono>
#include <ctime>
#include <filesystem>
#include <iostream>

#include "slicemoe/ablate.hpp"
#include "slicemoe/bench.hpp"
#include "slicemoe/checkpoint.hpp"
#include "slicemoe/gradcheck.hpp"
#include "slicemoe/train.hpp"

namespace fs = std::filesystem;

namespace {

std::string now_utc() {
  const std::time_t t = std::chrono::system_clock::to_time_t(
      std::chrono::system_clock::now());
  char buf[32];
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

slicemoe::TrainConfig resolve_config(const std::string& config_path,
                                     bool seed_given, std::uint64_t seed) {
  slicemoe::TrainConfig cfg;
  if (!config_path.empty())
    slicemoe::apply_kv(cfg, slicemoe::parse_kv_file(config_path));
  if (seed_given) cfg.seed = seed;  // flag beats file beats default
  cfg.validate();
  return cfg;
}

int run_train(const std::string& config_path, bool seed_given,
              std::uint64_t seed, const std::string& out_dir) {
  slicemoe::TrainConfig cfg = resolve_config(config_path, seed_given, seed);
  fs::create_directories(out_dir);
  std::cout << "resolved configuration:\n" << slicemoe::render_config(cfg);
  slicemoe::write_manifest((fs::path(out_dir) / "manifest").string(), cfg,
                           now_utc());
  slicemoe::TrainResult res = slicemoe::train(cfg, &std::cout);
  slicemoe::write_metrics_csv((fs::path(out_dir) / "metrics.csv").string(),
                              res.history);
  auto ckpt = slicemoe::make_checkpoint(res.model, cfg, &res.optimizer);
  slicemoe::save_checkpoint(ckpt,
                            (fs::path(out_dir) / "final.ckpt").string());
  const auto& last = res.history.back();
  std::cout << "done: val_acc=" << slicemoe::fmt_g17(last.val_acc)
            << " val_loss=" << slicemoe::fmt_g17(last.val_loss)
            << " ele=" << slicemoe::fmt_g17(last.ele) << "\n"
            << "wrote " << out_dir << "/{manifest,metrics.csv,final.ckpt}\n";
  return 0;
}

int run_eval(const std::string& ckpt_path, const std::string& config_path) {
  slicemoe::RestoredRun run =
      slicemoe::restore_run(slicemoe::load_checkpoint(ckpt_path));
  slicemoe::TrainConfig cfg = run.config;
  if (!config_path.empty()) {
    cfg = slicemoe::load_train_config(config_path);
    if (cfg.moe.d != run.config.moe.d ||
        cfg.moe.experts != run.config.moe.experts)
      throw slicemoe::ConfigError(
          "eval: --config architecture does not match checkpoint");
  }
  slicemoe::SyntheticData data =
      slicemoe::generate_synthetic(cfg.data, cfg.seed);
  slicemoe::EvalMetrics m = slicemoe::evaluate(run.model, cfg.moe, data.val,
                                               cfg.batch_size);
  std::cout << "val_loss=" << slicemoe::fmt_g17(m.loss)
            << " val_acc=" << slicemoe::fmt_g17(m.accuracy)
            << " val_ele=" << slicemoe::fmt_g17(m.ele) << "\n";
  return 0;
}

int run_ablate(const std::string& sweep_name, const std::string& config_path,
               bool seed_given, std::uint64_t seed,
               const std::string& out_dir) {
  slicemoe::Sweep sweep = slicemoe::parse_sweep(sweep_name);
  slicemoe::TrainConfig base = resolve_config(config_path, seed_given, seed);
  fs::create_directories(out_dir);
  const std::vector<std::uint64_t> seeds{base.seed, base.seed + 1,
                                         base.seed + 2};
  auto rows = slicemoe::ablate(sweep, base, seeds, &std::cout);
  const std::string path =
      (fs::path(out_dir) / ("ablation_" + sweep_name + ".csv")).string();
  slicemoe::write_ablation_csv(path, rows);
  std::cout << "wrote " << path << "\n";
  return 0;
}

int run_bench_cmd(const std::string& out_dir, int iters, int warmup,
                  std::uint64_t seed) {
  fs::create_directories(out_dir);
  auto results =
      slicemoe::run_bench(slicemoe::default_bench_grid(), seed, iters,
                          warmup, &std::cout);
  const std::string path = (fs::path(out_dir) / "bench.csv").string();
  slicemoe::write_bench_csv(path, results);
  std::cout << "wrote " << path << "\n";
  return 0;
}

int run_gradcheck(std::uint64_t seed) {
  auto results = slicemoe::run_gradcheck_suite(seed);
  double worst = 0.0;
  for (const auto& r : results) {
    std::cout << r.op << ": max_rel_err=" << slicemoe::fmt_g17(r.max_rel_err)
              << "\n";
    worst = std::max(worst, r.max_rel_err);
  }
  if (worst >= 1e-4) {
    std::cerr << "gradcheck FAILED: max relative error "
              << slicemoe::fmt_g17(worst) << " >= 1e-4\n";
    return 4;
  }
  std::cout << "gradcheck OK: all ops under 1e-4\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"slice-routing mixture-of-experts workbench"};
  app.require_subcommand(1);

  std::string config_path, out_dir = "run", ckpt_path, sweep_name;
  std::uint64_t seed = 0;
  bool seed_given = false;
  int threads = 1, iters = 20, warmup = 3;

  auto add_seed = [&](CLI::App* cmd) {
    cmd->add_option("--seed", seed, "run seed (overrides config file)")
        ->each([&](const std::string&) { seed_given = true; });
  };
  auto add_threads = [&](CLI::App* cmd) {
    cmd->add_option("--threads", threads, "worker threads (default 1)");
  };

  CLI::App* train = app.add_subcommand("train", "train on the synthetic task");
  train->add_option("--config", config_path, "key=value config file");
  train->add_option("--out", out_dir, "output directory (default: run)");
  add_seed(train);
  add_threads(train);

  CLI::App* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  eval->add_option("--checkpoint", ckpt_path, "checkpoint file")->required();
  eval->add_option("--config", config_path,
                   "config/manifest describing the dataset (default: the "
                   "checkpoint's embedded config)");
  add_threads(eval);

  CLI::App* ablate = app.add_subcommand("ablate", "run a hyperparameter sweep");
  ablate->add_option("--sweep", sweep_name,
                     "one of slices|k|noise|temperature|shuffle")
      ->required();
  ablate->add_option("--config", config_path, "base config file");
  ablate->add_option("--out", out_dir, "output directory (default: run)");
  add_seed(ablate);
  add_threads(ablate);

  CLI::App* bench = app.add_subcommand(
      "bench", "time naive vs grouped dispatch (forward only)");
  bench->add_option("--out", out_dir, "output directory (default: run)");
  bench->add_option("--iters", iters, "timed iterations per path");
  bench->add_option("--warmup", warmup, "untimed warmup iterations");
  add_seed(bench);
  add_threads(bench);

  CLI::App* gradcheck = app.add_subcommand(
      "gradcheck", "finite-difference oracle over every differentiable op");
  add_seed(gradcheck);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    slicemoe::set_threads(threads);
    if (*train) return run_train(config_path, seed_given, seed, out_dir);
    if (*eval) return run_eval(ckpt_path, config_path);
    if (*ablate)
      return run_ablate(sweep_name, config_path, seed_given, seed, out_dir);
    if (*bench) return run_bench_cmd(out_dir, iters, warmup,
                                     seed_given ? seed : 7);
    if (*gradcheck) return run_gradcheck(seed_given ? seed : 2026);
  } catch (const slicemoe::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const slicemoe::DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 3;
  } catch (const slicemoe::IntegrityError& e) {
    std::cerr << "integrity error: " << e.what() << "\n";
    return 3;
  } catch (const slicemoe::NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
