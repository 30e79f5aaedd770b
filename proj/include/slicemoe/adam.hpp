// Copyright 2026 the slicemoe authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <vector>

#include "slicemoe/config.hpp"
#include "slicemoe/tensor.hpp"

namespace slicemoe {

struct AdamState {
  Tensor m;  // first-moment estimate
  Tensor v;  // second-moment estimate
};

/// One Adam update with bias correction. t is the 1-based timestep of this
/// update; state starts at zeros.
inline void adam_step(Tensor& param, const Tensor& grad, AdamState& state,
                      const AdamHyper& h, long t) {
  if (!param.same_shape(grad) || !param.same_shape(state.m) ||
      !param.same_shape(state.v))
    throw ContractError("adam_step: shape mismatch");
  if (t < 1) throw ContractError("adam_step: timestep starts at 1");
  const double bc1 = 1.0 - std::pow(h.beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(h.beta2, static_cast<double>(t));
  for (std::size_t i = 0; i < param.size(); ++i) {
    const double g = grad[i];
    state.m[i] = h.beta1 * state.m[i] + (1.0 - h.beta1) * g;
    state.v[i] = h.beta2 * state.v[i] + (1.0 - h.beta2) * g * g;
    const double mhat = state.m[i] / bc1;
    const double vhat = state.v[i] / bc2;
    param[i] -= h.lr * mhat / (std::sqrt(vhat) + h.eps);
  }
}

/// Optimizer over a fixed parameter list (canonical model order).
class Adam {
 public:
  explicit Adam(AdamHyper hyper = {}) : hyper_(hyper) { hyper_.validate(); }

  void init(const std::vector<Tensor*>& params) {
    states_.clear();
    states_.reserve(params.size());
    for (const Tensor* p : params)
      states_.push_back(AdamState{Tensor(p->shape()), Tensor(p->shape())});
    t_ = 0;
  }

  void step(const std::vector<Tensor*>& params,
            const std::vector<Tensor>& grads) {
    if (params.size() != states_.size() || grads.size() != params.size())
      throw ContractError("adam: parameter/state count mismatch");
    ++t_;
    for (std::size_t i = 0; i < params.size(); ++i)
      adam_step(*params[i], grads[i], states_[i], hyper_, t_);
  }

  long timestep() const { return t_; }
  const AdamHyper& hyper() const { return hyper_; }
  const std::vector<AdamState>& states() const { return states_; }
  std::vector<AdamState>& states_mut() { return states_; }
  void set_timestep(long t) { t_ = t; }

 private:
  AdamHyper hyper_;
  std::vector<AdamState> states_;
  long t_ = 0;
};

}  // namespace slicemoe
