// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <random>
#include <stdexcept>
#include <vector>

#include "scale/data/corpus.hpp"
#include "scale/numerics/tensor.hpp"

namespace scale::eval {

namespace detail {
inline real entropy(const std::map<std::size_t, std::size_t>& counts, real n) {
  real h = 0;
  for (const auto& [_, c] : counts) {
    const real p = static_cast<real>(c) / n;
    if (p > 0) h -= p * std::log(p);
  }
  return h;
}
}  // namespace detail

// I(A;L) / sqrt(H(A) H(L)); zero when either entropy is zero.
inline real nmi(const std::vector<std::size_t>& assignments, const std::vector<std::size_t>& labels) {
  if (assignments.size() != labels.size()) throw std::invalid_argument("nmi: length mismatch");
  if (assignments.empty()) throw std::invalid_argument("nmi: empty input");
  const real n = static_cast<real>(labels.size());
  std::map<std::size_t, std::size_t> ca, cl;
  std::map<std::pair<std::size_t, std::size_t>, std::size_t> joint;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    ++ca[assignments[i]];
    ++cl[labels[i]];
    ++joint[{assignments[i], labels[i]}];
  }
  const real ha = detail::entropy(ca, n);
  const real hl = detail::entropy(cl, n);
  if (ha <= 0 || hl <= 0) return 0.0;
  real mi = 0;
  for (const auto& [key, c] : joint) {
    const real pj = static_cast<real>(c) / n;
    const real pa = static_cast<real>(ca[key.first]) / n;
    const real pl = static_cast<real>(cl[key.second]) / n;
    mi += pj * std::log(pj / (pa * pl));
  }
  return std::clamp(mi / std::sqrt(ha * hl), 0.0, 1.0);
}

// (1/n) * sum over clusters of the largest class count inside the cluster.
inline real purity(const std::vector<std::size_t>& assignments, const std::vector<std::size_t>& labels) {
  if (assignments.size() != labels.size()) throw std::invalid_argument("purity: length mismatch");
  if (assignments.empty()) throw std::invalid_argument("purity: empty input");
  std::map<std::size_t, std::map<std::size_t, std::size_t>> table;
  for (std::size_t i = 0; i < labels.size(); ++i) ++table[assignments[i]][labels[i]];
  std::size_t total = 0;
  for (const auto& [_, classes] : table) {
    std::size_t best = 0;
    for (const auto& [__, c] : classes) best = std::max(best, c);
    total += best;
  }
  return static_cast<real>(total) / static_cast<real>(labels.size());
}

struct ClusterResult {
  std::vector<std::size_t> assignments;
  std::vector<real> objective_trace;  // within-cluster sum of squares per Lloyd iteration
  real nmi = 0;
  real purity = 0;
  std::uint64_t seed = 0;
  std::size_t k = 0;
  std::size_t iterations = 0;
};

class ClusterError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline real squared_distance(const Tensor& x, std::size_t r, const std::vector<real>& c) {
  real s = 0;
  for (std::size_t j = 0; j < c.size(); ++j) {
    const real d = x.at(r, j) - c[j];
    s += d * d;
  }
  return s;
}

// k-means++ seeding then Lloyd iterations until assignments stop changing or
// max_iters. An emptied cluster is re-seeded from the point farthest from its
// current centroid (lowest index on ties). Throws if the objective ever
// increases.
inline ClusterResult kmeans_cluster(const Tensor& features, const std::vector<std::size_t>& labels, std::size_t k,
                                    std::uint64_t seed, std::size_t max_iters = 100) {
  const std::size_t n = features.rows();
  const std::size_t d = features.cols();
  if (k == 0 || k > n) {
    throw ClusterError("k = " + std::to_string(k) + " must lie in [1, " + std::to_string(n) + "]");
  }
  if (labels.size() != n) throw std::invalid_argument("kmeans: label count mismatch");
  std::mt19937_64 rng(derive_seed(seed, 0x4B4D));

  std::vector<std::vector<real>> centers;
  std::vector<real> dist(n, std::numeric_limits<real>::max());
  auto add_center = [&](std::size_t r) {
    centers.emplace_back(features.row(r).begin(), features.row(r).end());
    for (std::size_t i = 0; i < n; ++i) dist[i] = std::min(dist[i], squared_distance(features, i, centers.back()));
  };
  add_center(std::uniform_int_distribution<std::size_t>(0, n - 1)(rng));
  while (centers.size() < k) {
    real total = 0;
    for (real v : dist) total += v;
    std::size_t pick = 0;
    if (total <= 0) {
      pick = centers.size();  // all points coincide with centers; take the next index
    } else {
      real u = std::uniform_real_distribution<real>(0, total)(rng);
      for (pick = 0; pick + 1 < n; ++pick) {
        u -= dist[pick];
        if (u <= 0) break;
      }
    }
    add_center(pick);
  }

  ClusterResult res;
  res.seed = seed;
  res.k = k;
  res.assignments.assign(n, 0);
  std::vector<std::size_t> prev(n, std::numeric_limits<std::size_t>::max());
  for (std::size_t it = 0; it < max_iters; ++it) {
    for (std::size_t i = 0; i < n; ++i) {
      real best = std::numeric_limits<real>::max();
      for (std::size_t c = 0; c < k; ++c) {
        const real dd = squared_distance(features, i, centers[c]);
        if (dd < best) {
          best = dd;
          res.assignments[i] = c;
        }
      }
    }
    // Objective after assignment with the current centers.
    real wcss = 0;
    for (std::size_t i = 0; i < n; ++i) wcss += squared_distance(features, i, centers[res.assignments[i]]);
    if (!res.objective_trace.empty() && wcss > res.objective_trace.back() * (1 + 1e-12) + 1e-12) {
      throw std::logic_error("k-means objective increased");
    }
    res.objective_trace.push_back(wcss);
    res.iterations = it + 1;
    if (res.assignments == prev) break;
    prev = res.assignments;

    std::vector<std::vector<real>> sums(k, std::vector<real>(d, 0.0));
    std::vector<std::size_t> counts(k, 0);
    for (std::size_t i = 0; i < n; ++i) {
      ++counts[res.assignments[i]];
      for (std::size_t j = 0; j < d; ++j) sums[res.assignments[i]][j] += features.at(i, j);
    }
    for (std::size_t c = 0; c < k; ++c) {
      if (counts[c] == 0) {
        std::size_t far = 0;
        real far_d = -1;
        for (std::size_t i = 0; i < n; ++i) {
          const real dd = squared_distance(features, i, centers[res.assignments[i]]);
          if (dd > far_d) {
            far_d = dd;
            far = i;
          }
        }
        centers[c].assign(features.row(far).begin(), features.row(far).end());
        continue;
      }
      for (std::size_t j = 0; j < d; ++j) centers[c][j] = sums[c][j] / static_cast<real>(counts[c]);
    }
  }
  res.nmi = nmi(res.assignments, labels);
  res.purity = purity(res.assignments, labels);
  return res;
}

}  // namespace scale::eval
