// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <optional>
#include <stdexcept>
#include <utility>
#include <vector>

#include "scale/model/model.hpp"
#include "scale/objectives/pretext.hpp"

// Self-harmonized inter-modality contrastive learning: pairwise contrastive
// losses between modality embeddings, weighted together with the masked
// losses by the learnable alignment score matrix S.
namespace scale {

enum class WeightMode { ScoreSoftmax, PaperLiteral };

NLOHMANN_JSON_SERIALIZE_ENUM(WeightMode, {{WeightMode::ScoreSoftmax, "score-softmax"},
                                          {WeightMode::PaperLiteral, "paper-literal"}})

inline constexpr std::size_t kNumPairs = kNumModalities * (kNumModalities - 1) / 2;  // 10
inline constexpr std::size_t kNumScoreEntries = kNumPairs + kNumModalities;          // 15

// Active entries of S in canonical order: row-major upper triangle with the
// diagonal, i.e. (0,0), (0,1), ..., (0,4), (1,1), ..., (4,4).
inline const std::array<std::pair<std::size_t, std::size_t>, kNumScoreEntries>& score_entries() {
  static const auto entries = [] {
    std::array<std::pair<std::size_t, std::size_t>, kNumScoreEntries> e{};
    std::size_t n = 0;
    for (std::size_t i = 0; i < kNumModalities; ++i)
      for (std::size_t j = i; j < kNumModalities; ++j) e[n++] = {i, j};
    return e;
  }();
  return entries;
}

inline std::size_t score_entry_index(std::size_t i, std::size_t j) {
  if (i > j) std::swap(i, j);
  const auto& e = score_entries();
  for (std::size_t n = 0; n < e.size(); ++n) {
    if (e[n].first == i && e[n].second == j) return n;
  }
  throw std::out_of_range("score entry");
}

class ContrastiveError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Cross-modal contrastive loss over N aligned rows of fa and fb. For sample i
// the numerator is exp(cos(fa_i, fb_i) / tau); the denominator sums
// exp(cos(fa_i, fb_k) / tau) and exp(cos(fb_i, fa_k) / tau) over k != i only
// (the positive pair is excluded), so the loss can be negative. Returns the
// mean over samples.
inline Var contrastive_pair_loss(const Var& fa, const Var& fb, real tau) {
  if (!(tau > 0)) throw ContrastiveError("temperature must be positive");
  if (fa.shape() != fb.shape()) throw ShapeError("contrastive_pair_loss: embedding shapes differ");
  const std::size_t n = fa.rows();
  const std::size_t d = fa.cols();
  if (n < 2) throw ContrastiveError("contrastive_pair_loss needs at least 2 samples");

  auto normalize = [&](const Tensor& x, std::vector<real>& norms) {
    Tensor u = x;
    norms.assign(n, 0.0);
    for (std::size_t r = 0; r < n; ++r) {
      real s = 0;
      for (std::size_t c = 0; c < d; ++c) s += x.at(r, c) * x.at(r, c);
      norms[r] = std::sqrt(s);
      if (norms[r] == 0.0) throw NumericError("zero-norm embedding reached cosine similarity");
      for (std::size_t c = 0; c < d; ++c) u.at(r, c) /= norms[r];
    }
    return u;
  };
  std::vector<real> na, nb;
  Tensor ua = normalize(fa.value(), na);
  Tensor ub = normalize(fb.value(), nb);

  // cos[i][k] = cos(fa_i, fb_k)
  std::vector<real> cos(n * n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < n; ++k) {
      real s = 0;
      for (std::size_t c = 0; c < d; ++c) s += ua.at(i, c) * ub.at(k, c);
      cos[i * n + k] = s;
    }

  // Per sample log-denominator; the max shift keeps exp in range.
  std::vector<real> shift(n), z(n);
  real total = 0;
  for (std::size_t i = 0; i < n; ++i) {
    real mx = -1e300;
    for (std::size_t k = 0; k < n; ++k) {
      if (k == i) continue;
      mx = std::max({mx, cos[i * n + k] / tau, cos[k * n + i] / tau});
    }
    real s = 0;
    for (std::size_t k = 0; k < n; ++k) {
      if (k == i) continue;
      s += std::exp(cos[i * n + k] / tau - mx) + std::exp(cos[k * n + i] / tau - mx);
    }
    shift[i] = mx;
    z[i] = s;
    total += -cos[i * n + i] / tau + mx + std::log(s);
  }
  const real inv_n = 1.0 / static_cast<real>(n);

  return make_result(Tensor::scalar(total * inv_n), {fa, fb},
                     [ua, ub, na, nb, cos, shift, z, n, d, tau, inv_n](Node& node) {
    const real gs = node.grad[0] * inv_n / tau;
    // dL/dcos[i][k]
    std::vector<real> dcos(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      dcos[i * n + i] -= gs;
      for (std::size_t k = 0; k < n; ++k) {
        if (k == i) continue;
        // cos[i][k] sits in sample i's denominator (as fa_i . fb_k) and in
        // sample k's denominator (as fb_k . fa_i).
        dcos[i * n + k] += gs * std::exp(cos[i * n + k] / tau - shift[i]) / z[i];
        dcos[i * n + k] += gs * std::exp(cos[i * n + k] / tau - shift[k]) / z[k];
      }
    }
    // cos = ua ub^T; push through row normalization.
    auto back = [&](bool for_a, Tensor& g) {
      const Tensor& self = for_a ? ua : ub;
      const Tensor& other = for_a ? ub : ua;
      const std::vector<real>& norms = for_a ? na : nb;
      std::vector<real> du(d);
      for (std::size_t r = 0; r < n; ++r) {
        std::fill(du.begin(), du.end(), 0.0);
        for (std::size_t q = 0; q < n; ++q) {
          const real w = for_a ? dcos[r * n + q] : dcos[q * n + r];
          if (w == 0.0) continue;
          for (std::size_t c = 0; c < d; ++c) du[c] += w * other.at(q, c);
        }
        real dot = 0;
        for (std::size_t c = 0; c < d; ++c) dot += du[c] * self.at(r, c);
        for (std::size_t c = 0; c < d; ++c) g.at(r, c) += (du[c] - self.at(r, c) * dot) / norms[r];
      }
    };
    if (node.inputs[0]->requires_grad) back(true, node.inputs[0]->grad_buffer());
    if (node.inputs[1]->requires_grad) back(false, node.inputs[1]->grad_buffer());
  }, "contrastive_pair_loss");
}

// Contrastive loss of modality pair (a, b) restricted to samples where both
// are present; nullopt (inactive) when fewer than two samples remain.
inline std::optional<Var> pair_loss_for(const ModalityTokens& a, const ModalityTokens& b, real tau) {
  std::vector<std::int64_t> rows;
  for (std::size_t i = 0; i < a.present.size(); ++i) {
    if (a.present[i] && b.present[i]) rows.push_back(static_cast<std::int64_t>(i));
  }
  if (rows.size() < 2) return std::nullopt;
  return contrastive_pair_loss(ops::gather_rows(a.pooled, rows), ops::gather_rows(b.pooled, rows), tau);
}

// Loss terms in score-entry order: diagonal entries hold masked losses,
// off-diagonal entries hold pair losses. nullopt = inactive.
struct LossBundle {
  std::array<std::optional<Var>, kNumScoreEntries> terms;
  Var weights;  // [1 x 15], zeros at inactive entries
  Var total;

  std::optional<Var>& pair(ModalityKind a, ModalityKind b) { return terms[score_entry_index(index_of(a), index_of(b))]; }
  std::optional<Var>& masked(ModalityKind k) { return terms[score_entry_index(index_of(k), index_of(k))]; }
  std::size_t active_count() const {
    return static_cast<std::size_t>(std::count_if(terms.begin(), terms.end(), [](const auto& t) { return t.has_value(); }));
  }
};

// Effective weights over the 15 active score entries.
//   score-softmax: softmax over the active entries (inactive get 0, so the
//                  remaining weights renormalize to sum 1).
//   paper-literal: v * softmax(v) over all 15 entries, inactive dropped.
inline Var alignment_weights(const Var& scores, WeightMode mode, const std::array<bool, kNumScoreEntries>& active) {
  if (scores.rows() != kNumModalities || scores.cols() != kNumModalities) {
    throw ShapeError("alignment_weights: score matrix must be 5x5");
  }
  const auto& entries = score_entries();
  std::vector<std::int64_t> flat_idx;
  std::vector<std::size_t> active_pos;
  for (std::size_t n = 0; n < kNumScoreEntries; ++n) {
    const bool use = mode == WeightMode::PaperLiteral || active[n];
    if (!use) continue;
    flat_idx.push_back(static_cast<std::int64_t>(entries[n].first * kNumModalities + entries[n].second));
    active_pos.push_back(n);
  }
  if (flat_idx.empty()) throw std::invalid_argument("all loss terms inactive");
  Var column = ops::reshape(scores, {kNumModalities * kNumModalities, 1});
  Var v = ops::reshape(ops::gather_rows(column, flat_idx), {1, flat_idx.size()});
  Var w = ops::softmax(v);
  if (mode == WeightMode::PaperLiteral) w = ops::mul(v, w);
  // Scatter back to the 15 slots, zero where inactive.
  std::vector<std::int64_t> scatter(kNumScoreEntries, -1);
  for (std::size_t i = 0; i < active_pos.size(); ++i) {
    if (active[active_pos[i]]) scatter[active_pos[i]] = static_cast<std::int64_t>(i);
  }
  Var wcol = ops::gather_rows(ops::reshape(w, {flat_idx.size(), 1}), scatter);
  return ops::reshape(wcol, {1, kNumScoreEntries});
}

inline std::array<real, kNumScoreEntries> weight_values(const Var& weights) {
  std::array<real, kNumScoreEntries> out{};
  for (std::size_t i = 0; i < kNumScoreEntries; ++i) out[i] = weights.value()[i];
  return out;
}

// total = sum over active entries of weight * loss.
inline void total_loss(LossBundle& bundle, const Var& scores, WeightMode mode) {
  std::array<bool, kNumScoreEntries> active{};
  std::vector<Var> losses;
  std::vector<std::int64_t> loss_idx(kNumScoreEntries, -1);
  for (std::size_t n = 0; n < kNumScoreEntries; ++n) {
    active[n] = bundle.terms[n].has_value();
    if (active[n]) {
      loss_idx[n] = static_cast<std::int64_t>(losses.size());
      losses.push_back(ops::reshape(*bundle.terms[n], {1, 1}));
    }
  }
  if (losses.empty()) throw std::invalid_argument("all loss terms inactive");
  bundle.weights = alignment_weights(scores, mode, active);
  Var stacked = ops::reshape(ops::gather_rows(ops::concat_rows(losses), loss_idx), {1, kNumScoreEntries});
  bundle.total = ops::sum(ops::mul(bundle.weights, stacked));
}

// Mean cosine similarity between aligned rows of a and b, skipping rows
// where either side is all-zero.
inline real modality_correlation(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) throw ShapeError("modality_correlation: shapes differ");
  real total = 0;
  std::size_t count = 0;
  for (std::size_t r = 0; r < a.rows(); ++r) {
    real dot = 0, na = 0, nb = 0;
    for (std::size_t c = 0; c < a.cols(); ++c) {
      dot += a.at(r, c) * b.at(r, c);
      na += a.at(r, c) * a.at(r, c);
      nb += b.at(r, c) * b.at(r, c);
    }
    if (na == 0 || nb == 0) continue;
    total += dot / std::sqrt(na * nb);
    ++count;
  }
  if (count < 2) throw std::invalid_argument("modality_correlation: no eligible samples");
  return total / static_cast<real>(count);
}

}  // namespace scale
