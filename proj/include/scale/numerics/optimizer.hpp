// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "scale/numerics/autodiff.hpp"

namespace scale {

// Linear warm-up to the peak rate, then linear decay to zero at total_steps.
struct LrSchedule {
  real peak = 1e-3;
  std::size_t warmup_steps = 0;
  std::size_t total_steps = 1;

  real at(std::size_t step) const {
    if (warmup_steps > 0 && step < warmup_steps) {
      return peak * static_cast<real>(step + 1) / static_cast<real>(warmup_steps);
    }
    if (total_steps <= warmup_steps) return peak;
    const real remaining = static_cast<real>(total_steps) - static_cast<real>(step);
    const real span = static_cast<real>(total_steps - warmup_steps);
    return peak * std::clamp(remaining / span, 0.0, 1.0);
  }
};

struct AdamState {
  std::vector<Tensor> m;
  std::vector<Tensor> v;
  std::size_t step = 0;
};

class Adam {
 public:
  Adam(std::vector<Parameter*> params, real beta1 = 0.9, real beta2 = 0.999, real eps = 1e-8)
      : params_(std::move(params)), beta1_(beta1), beta2_(beta2), eps_(eps) {
    for (Parameter* p : params_) {
      state_.m.emplace_back(p->value.shape());
      state_.v.emplace_back(p->value.shape());
    }
  }

  void step(real lr) {
    ++state_.step;
    const real bc1 = 1.0 - std::pow(beta1_, static_cast<real>(state_.step));
    const real bc2 = 1.0 - std::pow(beta2_, static_cast<real>(state_.step));
    for (std::size_t k = 0; k < params_.size(); ++k) {
      Parameter& p = *params_[k];
      Tensor& m = state_.m[k];
      Tensor& v = state_.v[k];
      for (std::size_t i = 0; i < p.value.size(); ++i) {
        const real g = p.grad[i];
        m[i] = beta1_ * m[i] + (1 - beta1_) * g;
        v[i] = beta2_ * v[i] + (1 - beta2_) * g * g;
        p.value[i] -= lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + eps_);
      }
    }
  }

  void zero_grad() {
    for (Parameter* p : params_) p->zero_grad();
  }

  const AdamState& state() const { return state_; }
  AdamState& state() { return state_; }
  const std::vector<Parameter*>& params() const { return params_; }

 private:
  std::vector<Parameter*> params_;
  real beta1_, beta2_, eps_;
  AdamState state_;
};

}  // namespace scale
