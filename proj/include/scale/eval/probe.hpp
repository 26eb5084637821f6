// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <limits>
#include <map>
#include <stdexcept>
#include <vector>

#include "scale/numerics/optimizer.hpp"
#include "scale/numerics/ops.hpp"

namespace scale::eval {

struct ProbeConfig {
  std::size_t max_epochs = 400;
  real lr = 0.05;
  real tolerance = 1e-6;   // train-loss improvement counted as progress
  std::size_t patience = 10;
};

struct ProbeResult {
  real accuracy = 0;
  std::size_t correct = 0;
  std::size_t total = 0;
  std::size_t unseen_class = 0;  // test samples whose class never appears in train
  std::size_t epochs = 0;
  real final_loss = 0;
};

// Softmax regression on fixed features, full batch, zero-initialized, so the
// result is a deterministic function of the data. Trains for at most
// max_epochs and stops once the loss has not improved by `tolerance` for
// `patience` epochs.
inline ProbeResult linear_probe(const Tensor& train_x, const std::vector<std::size_t>& train_y, const Tensor& test_x,
                                const std::vector<std::size_t>& test_y, const ProbeConfig& cfg = {}) {
  if (train_x.rows() != train_y.size() || test_x.rows() != test_y.size()) {
    throw ShapeError("linear_probe: label count mismatch");
  }
  if (train_x.cols() != test_x.cols()) throw ShapeError("linear_probe: feature dims differ");
  if (train_y.empty() || test_y.empty()) throw std::invalid_argument("linear_probe: empty split");

  std::map<std::size_t, std::size_t> class_index;
  for (std::size_t y : train_y) class_index.emplace(y, 0);
  std::vector<std::size_t> classes;
  for (auto& [label, idx] : class_index) {
    idx = classes.size();
    classes.push_back(label);
  }
  const std::size_t C = classes.size();
  std::vector<std::int64_t> targets;
  for (std::size_t y : train_y) targets.push_back(static_cast<std::int64_t>(class_index[y]));

  ParamSet ps;
  Parameter& w = ps.add("probe.weight", Tensor({train_x.cols(), C}));
  Parameter& b = ps.add("probe.bias", Tensor({C}));
  Adam opt(ps.all());
  const Var x = Var::constant(train_x);

  ProbeResult res;
  real best = std::numeric_limits<real>::max();
  std::size_t stale = 0;
  for (std::size_t epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    opt.zero_grad();
    Var loss = ops::cross_entropy(ops::linear(x, Var::param(w), Var::param(b)), targets);
    backward(loss);
    opt.step(cfg.lr);
    res.epochs = epoch + 1;
    res.final_loss = loss.item();
    if (loss.item() < best - cfg.tolerance) {
      best = loss.item();
      stale = 0;
    } else if (++stale >= cfg.patience) {
      break;
    }
  }

  NoGradGuard no_grad;
  const Tensor logits = ops::linear(Var::constant(test_x), Var::param(w), Var::param(b)).value();
  res.total = test_y.size();
  for (std::size_t i = 0; i < test_y.size(); ++i) {
    const auto it = class_index.find(test_y[i]);
    if (it == class_index.end()) {
      ++res.unseen_class;
      continue;
    }
    const auto row = logits.row(i);
    const auto pred = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
    if (pred == it->second) ++res.correct;
  }
  res.accuracy = static_cast<real>(res.correct) / static_cast<real>(res.total);
  return res;
}

}  // namespace scale::eval
