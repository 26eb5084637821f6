// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "scale/numerics/autodiff.hpp"

namespace scale {

struct GradCheckResult {
  real max_rel_error = 0;
  std::string worst_param;
  std::size_t worst_index = 0;
  std::size_t checked = 0;
};

inline real relative_error(real analytic, real numeric) {
  const real denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
  return std::abs(analytic - numeric) / denom;
}

// Compares backward() against fourth-order central differences for every
// scalar of the given parameters. `loss_fn` must rebuild the graph from the
// current parameter values on each call and be deterministic.
inline GradCheckResult grad_check(const std::function<Var()>& loss_fn, const std::vector<Parameter*>& params,
                                  real step = 1e-4) {
  std::size_t total = 0;
  for (const Parameter* p : params) total += p->value.size();
  if (total >= 10000) throw std::invalid_argument("grad_check: too many scalars to perturb exhaustively");

  for (Parameter* p : params) p->zero_grad();
  Var loss = loss_fn();
  backward(loss);

  std::vector<Tensor> analytic;
  analytic.reserve(params.size());
  for (Parameter* p : params) analytic.push_back(p->grad);

  GradCheckResult result;
  NoGradGuard no_grad;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Parameter& p = *params[pi];
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const real saved = p.value[i];
      auto at = [&](real offset) {
        p.value[i] = saved + offset;
        const real v = loss_fn().item();
        p.value[i] = saved;
        return v;
      };
      const real numeric = (8 * (at(step) - at(-step)) - (at(2 * step) - at(-2 * step))) / (12 * step);
      const real err = relative_error(analytic[pi][i], numeric);
      ++result.checked;
      if (err > result.max_rel_error) {
        result.max_rel_error = err;
        result.worst_param = p.name;
        result.worst_index = i;
      }
    }
  }
  return result;
}

}  // namespace scale
