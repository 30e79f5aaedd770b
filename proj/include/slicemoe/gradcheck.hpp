// Copyright 2026 the slicemoe authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <string>
#include <vector>

#include "slicemoe/layer.hpp"

namespace slicemoe {

/// Central finite differences: (f(x + h e_i) - f(x - h e_i)) / 2h per
/// coordinate. The universal gradient oracle; it never touches the reverse
/// pass it checks. f must be deterministic (routing randomness frozen).
inline Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f,
                               const Tensor& x, double h = 1e-5) {
  Tensor g(x.shape());
  Tensor xp = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double saved = xp[i];
    xp[i] = saved + h;
    const double fp = f(xp);
    xp[i] = saved - h;
    const double fm = f(xp);
    xp[i] = saved;
    g[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

/// Relative error with unit floor: |a - n| / max(1, |a|, |n|).
inline double rel_err(double analytic, double numeric) {
  const double denom =
      std::max(1.0, std::max(std::abs(analytic), std::abs(numeric)));
  return std::abs(analytic - numeric) / denom;
}

// ---------------------------------------------------------------------------
// Graph checker: a graph builder maps leaf tensors to a scalar loss var; the
// checker compares tape gradients of every leaf coordinate against central
// differences, rebuilding the graph for each probe.

using GraphFn =
    std::function<ad::Var(ad::Tape&, const std::vector<ad::Var>&)>;

inline double check_graph(const GraphFn& build,
                          const std::vector<Tensor>& leaf_values,
                          double h = 1e-5) {
  // Analytic gradients once.
  ad::Tape tape;
  std::vector<ad::Var> leaves;
  leaves.reserve(leaf_values.size());
  for (const Tensor& v : leaf_values) leaves.push_back(tape.leaf(v));
  ad::Var loss = build(tape, leaves);
  tape.backward(loss);
  std::vector<Tensor> analytic;
  analytic.reserve(leaves.size());
  for (ad::Var v : leaves) analytic.push_back(tape.grad(v));

  auto eval_at = [&](const std::vector<Tensor>& vals) {
    ad::Tape t2;
    std::vector<ad::Var> l2;
    l2.reserve(vals.size());
    for (const Tensor& v : vals) l2.push_back(t2.leaf(v));
    return t2.value(build(t2, l2))[0];
  };

  double worst = 0.0;
  std::vector<Tensor> probe = leaf_values;
  for (std::size_t li = 0; li < probe.size(); ++li) {
    for (std::size_t i = 0; i < probe[li].size(); ++i) {
      const double saved = probe[li][i];
      double err = 0.0;
      for (double step : {h, h / 10.0}) {
        probe[li][i] = saved + step;
        const double fp = eval_at(probe);
        probe[li][i] = saved - step;
        const double fm = eval_at(probe);
        const double numeric = (fp - fm) / (2.0 * step);
        err = rel_err(analytic[li][i], numeric);
        if (err < 1e-4) break;  // retry with smaller h near relu kinks
      }
      probe[li][i] = saved;
      if (err > worst) worst = err;
    }
  }
  return worst;
}

// ---------------------------------------------------------------------------
// Registered-op suite. Every differentiable operation gets checked at
// `points` random parameter settings; the CLI prints one line per op and the
// acceptance gate requires max relative error < 1e-4 everywhere.

struct GradCheckResult {
  std::string op;
  double max_rel_err = 0.0;
};

namespace detail {

/// Loss head that makes gradients non-uniform: sum(output * R) for a fixed
/// random R.
inline ad::Var weighted_sum(ad::Tape& t, ad::Var x, const Tensor& r) {
  return ad::sum(t, ad::mul(t, x, t.constant(r)));
}

}  // namespace detail

inline std::vector<GradCheckResult> run_gradcheck_suite(std::uint64_t seed,
                                                        int points = 10) {
  std::vector<GradCheckResult> results;
  auto record = [&](const std::string& name, auto&& one_point) {
    double worst = 0.0;
    for (int p = 0; p < points; ++p) {
      const double e = one_point(Rng(seed, 1000 + static_cast<std::uint64_t>(
                                               results.size() * 64 + p)));
      if (e > worst) worst = e;
    }
    results.push_back({name, worst});
  };

  record("matmul", [](Rng rng) {
    Tensor a = gaussian(rng, {3, 4});
    Tensor b = gaussian(rng, {4, 5});
    Tensor r = gaussian(rng, {3, 5});
    return check_graph(
        [&](ad::Tape& t, const std::vector<ad::Var>& l) {
          return detail::weighted_sum(t, ad::matmul(t, l[0], l[1]), r);
        },
        {a, b});
  });

  record("batched_matmul", [](Rng rng) {
    Tensor a = gaussian(rng, {2, 3, 4});
    Tensor b = gaussian(rng, {4, 3});
    Tensor r = gaussian(rng, {2, 3, 3});
    return check_graph(
        [&](ad::Tape& t, const std::vector<ad::Var>& l) {
          return detail::weighted_sum(t, ad::batched_matmul(t, l[0], l[1]),
                                      r);
        },
        {a, b});
  });

  record("softmax", [](Rng rng) {
    Tensor x = gaussian(rng, {4, 6});
    Tensor r = gaussian(rng, {4, 6});
    return check_graph(
        [&](ad::Tape& t, const std::vector<ad::Var>& l) {
          return detail::weighted_sum(t, ad::softmax_rows(t, l[0], 0.7), r);
        },
        {x});
  });

  record("relu", [](Rng rng) {
    Tensor x = gaussian(rng, {5, 5});
    for (std::size_t i = 0; i < x.size(); ++i)  // keep clear of the kink
      if (std::abs(x[i]) < 1e-2) x[i] = x[i] < 0 ? x[i] - 1e-2 : x[i] + 1e-2;
    Tensor r = gaussian(rng, {5, 5});
    return check_graph(
        [&](ad::Tape& t, const std::vector<ad::Var>& l) {
          return detail::weighted_sum(t, ad::relu(t, l[0]), r);
        },
        {x});
  });

  record("bias_add", [](Rng rng) {
    Tensor m = gaussian(rng, {4, 3});
    Tensor v = gaussian(rng, {3});
    Tensor r = gaussian(rng, {4, 3});
    return check_graph(
        [&](ad::Tape& t, const std::vector<ad::Var>& l) {
          return detail::weighted_sum(t, ad::add_rowvec(t, l[0], l[1]), r);
        },
        {m, v});
  });

  record("mul", [](Rng rng) {
    Tensor a = gaussian(rng, {6});
    Tensor b = gaussian(rng, {6});
    Tensor r = gaussian(rng, {6});
    return check_graph(
        [&](ad::Tape& t, const std::vector<ad::Var>& l) {
          return detail::weighted_sum(t, ad::mul(t, l[0], l[1]), r);
        },
        {a, b});
  });

  record("select_probs", [](Rng rng) {
    const std::size_t n = 4, e = 5, k = 2;
    Tensor probs = softmax_rows(gaussian(rng, {n, e}), 1.0);
    std::vector<int> ids;
    for (std::size_t row = 0; row < n; ++row) {
      auto [rid, rp] = top_k_select(probs.data() + row * e, e, k);
      ids.insert(ids.end(), rid.begin(), rid.end());
    }
    Tensor r = gaussian(rng, {n, k});
    return check_graph(
        [&, ids](ad::Tape& t, const std::vector<ad::Var>& l) {
          return detail::weighted_sum(t, ad_ops::select_probs(t, l[0], ids, k),
                                      r);
        },
        {probs});
  });

  record("dropout_renorm", [](Rng rng) {
    const std::size_t n = 6, k = 3;
    Tensor sel = uniform(rng, {n, k}, 0.2, 0.9);
    std::vector<std::uint8_t> dropped(n * k);
    for (auto& b : dropped) b = rng.bernoulli(0.3) ? 1 : 0;
    Tensor r = gaussian(rng, {n, k});
    return check_graph(
        [&, dropped](ad::Tape& t, const std::vector<ad::Var>& l) {
          return detail::weighted_sum(
              t, ad_ops::dropout_renorm(t, l[0], dropped), r);
        },
        {sel});
  });

  record("soft_counts", [](Rng rng) {
    const std::size_t n = 5, k = 2, e = 4;
    Tensor sel = uniform(rng, {n, k}, 0.1, 0.9);
    std::vector<int> ids(n * k);
    for (auto& id : ids) id = static_cast<int>(rng.next_u64() % e);
    Tensor r = gaussian(rng, {e});
    return check_graph(
        [&, ids](ad::Tape& t, const std::vector<ad::Var>& l) {
          return detail::weighted_sum(
              t, ad_ops::soft_counts(t, l[0], ids, e), r);
        },
        {sel});
  });

  record("capacity_loss", [](Rng rng) {
    Tensor c = uniform(rng, {6}, 0.5, 4.0);
    return check_graph(
        [&](ad::Tape& t, const std::vector<ad::Var>& l) {
          return ad_ops::capacity_loss(t, l[0], 0.1);
        },
        {c});
  });

  record("cross_entropy", [](Rng rng) {
    const std::size_t b = 5, c = 4;
    Tensor logits = gaussian(rng, {b, c});
    std::vector<int> labels(b);
    for (auto& l : labels) l = static_cast<int>(rng.next_u64() % c);
    return check_graph(
        [&, labels](ad::Tape& t, const std::vector<ad::Var>& l) {
          return ad_ops::cross_entropy(t, l[0], labels);
        },
        {logits});
  });

  // Eq.-1 gating: gradient through the weight-times-slice multiply feeding
  // one expert, expert parameters held constant.
  record("eq1_gating", [](Rng rng) {
    const std::size_t b = 2, s = 2, w = 3, f = 4;
    Tensor slabs = gaussian(rng, {b, s, w});
    Tensor weights = uniform(rng, {b * s, 1}, 0.2, 1.0);
    ExpertParams pe{gaussian(rng, {w, f}), gaussian(rng, {f}),
                    gaussian(rng, {f, w}), gaussian(rng, {w})};
    std::vector<int> ids(b * s, 0);
    Tensor r = gaussian(rng, {b, s * w});
    return check_graph(
        [&, ids](ad::Tape& t, const std::vector<ad::Var>& l) {
          std::vector<ad_ops::ExpertVars> ev{{t.constant(pe.U1),
                                              t.constant(pe.c1),
                                              t.constant(pe.U2),
                                              t.constant(pe.c2)}};
          return detail::weighted_sum(
              t, ad_ops::dispatch(t, l[0], l[1], ids, ev, true), r);
        },
        {slabs, weights});
  });

  for (bool grouped : {false, true}) {
    record(grouped ? "dispatch_grouped" : "dispatch_naive", [grouped](Rng rng) {
      const std::size_t b = 2, s = 2, w = 3, f = 5, e = 3, k = 2;
      Tensor slabs = gaussian(rng, {b, s, w});
      Tensor weights = uniform(rng, {b * s, k}, 0.2, 1.0);
      std::vector<int> ids(b * s * k);
      for (std::size_t r2 = 0; r2 < b * s; ++r2) {
        ids[r2 * k] = static_cast<int>(rng.next_u64() % e);
        ids[r2 * k + 1] =
            static_cast<int>((static_cast<std::size_t>(ids[r2 * k]) + 1 +
                              rng.next_u64() % (e - 1)) %
                             e);
      }
      std::vector<ExpertParams> experts;
      for (std::size_t i = 0; i < e; ++i)
        experts.push_back(ExpertParams{gaussian(rng, {w, f}),
                                       gaussian(rng, {f}),
                                       gaussian(rng, {f, w}),
                                       gaussian(rng, {w})});
      Tensor r = gaussian(rng, {b, s * w});
      std::vector<Tensor> leaves{slabs, weights};
      for (const auto& ep : experts) {
        leaves.push_back(ep.U1);
        leaves.push_back(ep.c1);
        leaves.push_back(ep.U2);
        leaves.push_back(ep.c2);
      }
      return check_graph(
          [&, ids, grouped](ad::Tape& t, const std::vector<ad::Var>& l) {
            std::vector<ad_ops::ExpertVars> ev;
            for (std::size_t i = 0; i < e; ++i)
              ev.push_back(ad_ops::ExpertVars{l[2 + 4 * i], l[3 + 4 * i],
                                              l[4 + 4 * i], l[5 + 4 * i]});
            return detail::weighted_sum(
                t, ad_ops::dispatch(t, l[0], l[1], ids, ev, grouped), r);
          },
          leaves);
    });
  }

  // Full composed layer: partition -> route -> gate -> experts -> reassemble
  // -> cross-entropy + capacity loss, gradients w.r.t. every parameter and
  // the input, with routing randomness frozen.
  record("full_layer", [](Rng rng) {
    SliceMoeConfig cfg;
    cfg.d = 12;
    cfg.slices = 3;
    cfg.experts = 4;
    cfg.top_k = 2;
    cfg.router_hidden = 6;
    cfg.expert_hidden = 5;
    cfg.alpha = 0.1;
    cfg.dropout = 0.3;
    cfg.temperature = 0.8;
    cfg.noise_sigma = 0.2;
    const std::size_t batch = 3, classes = 3;
    const std::uint64_t mseed = rng.next_u64();
    ModelParams model = init_model(cfg, classes, mseed);
    // Probe at a generic point: zero-initialized biases would park dropped
    // assignments exactly on the relu kink, where the derivative is not
    // defined and finite differences cannot resolve it.
    for (auto& [name, ptr] : named_params(model)) {
      Tensor jitter = gaussian(rng, ptr->shape(), 0.2);
      *ptr = add(*ptr, jitter);
    }
    Tensor x = gaussian(rng, {batch, cfg.d});
    std::vector<int> labels(batch);
    for (auto& l : labels) l = static_cast<int>(rng.next_u64() % classes);

    // One unfrozen pass records noise, selection, and dropout.
    FrozenRouting frozen;
    {
      ad::Tape t0;
      ModelVars mv0 = register_model(t0, model);
      TrainStepGraph g0 = layer_forward_train(
          t0, mv0, model, x, labels, cfg, Rng(mseed, stream::kNoise),
          Rng(mseed, stream::kDropout), true);
      frozen = g0.frozen;
    }

    // Leaves: the partitioned input, then every parameter in canonical order.
    std::vector<Tensor> leaves;
    leaves.push_back(partition_slices(apply_permutation(x, model.perm),
                                      cfg.slices));
    {
      ModelParams tmp = model;
      for (auto& [name, ptr] : named_params(tmp)) leaves.push_back(*ptr);
    }
    const std::size_t n_experts = cfg.experts;

    return check_graph(
        [&, labels, frozen, n_experts](ad::Tape& t,
                                       const std::vector<ad::Var>& l) {
          ModelVars mv;
          mv.W1 = l[1];
          mv.b1 = l[2];
          mv.W2 = l[3];
          mv.b2 = l[4];
          for (std::size_t e2 = 0; e2 < n_experts; ++e2)
            mv.experts.push_back(ad_ops::ExpertVars{
                l[5 + 4 * e2], l[6 + 4 * e2], l[7 + 4 * e2], l[8 + 4 * e2]});
          mv.Wc = l[5 + 4 * n_experts];
          mv.bc = l[6 + 4 * n_experts];
          Rng dummy(0);
          TrainStepGraph g = layer_graph(t, mv, l[0], labels, cfg, dummy,
                                         dummy, /*grouped=*/true, &frozen);
          return g.loss;
        },
        leaves);
  });

  return results;
}

}  // namespace slicemoe
