// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <stdexcept>
#include <vector>

#include "scale/model/model.hpp"

// Masked pretext tasks: MLM (text), MEM (table entities), MRP (image
// regions), MFP (video frames), MAM (audio frames).
namespace scale {

enum class TableMaskMode { Entity, Token };
enum class ContinuousLoss { SquaredError, SmoothL1 };

NLOHMANN_JSON_SERIALIZE_ENUM(TableMaskMode, {{TableMaskMode::Entity, "entity"}, {TableMaskMode::Token, "token"}})
NLOHMANN_JSON_SERIALIZE_ENUM(ContinuousLoss, {{ContinuousLoss::SquaredError, "mse"}, {ContinuousLoss::SmoothL1, "smooth-l1"}})

struct MaskPlan {
  TableMaskMode table_mode = TableMaskMode::Entity;
  // [modality][sample] sorted input positions (0-based, [CLS] excluded).
  std::array<std::vector<std::vector<std::size_t>>, kNumModalities> positions;
  // [modality][sample] token written at each masked discrete position.
  std::array<std::vector<std::vector<std::int64_t>>, kNumModalities> replacement;
  // [sample] masked entity indices (entity mode only).
  std::vector<std::vector<std::size_t>> table_entities;

  std::size_t masked_count(ModalityKind k) const {
    std::size_t n = 0;
    for (const auto& p : positions[index_of(k)]) n += p.size();
    return n;
  }
};

struct MaskedTargets {
  std::array<std::vector<std::vector<std::int64_t>>, kNumModalities> ids;  // discrete originals
  std::array<std::vector<std::vector<real>>, kNumModalities> rows;         // continuous originals, flattened
};

// Number of units to mask: round(rate * maskable), at least one.
inline std::size_t mask_count(std::size_t maskable, real rate) {
  if (maskable == 0) return 0;
  const auto n = static_cast<std::size_t>(std::llround(rate * static_cast<real>(maskable)));
  return std::clamp<std::size_t>(n, 1, maskable);
}

// Maskable input positions of modality k for sample b. Table SEP tokens are
// never maskable; everything else present is.
inline std::vector<std::size_t> maskable_positions(const BatchInputs& batch, ModalityKind k, std::size_t b) {
  std::vector<std::size_t> out;
  if (!batch.present_at(k, b)) return out;
  if (k == ModalityKind::Table) {
    for (const auto& span : batch.entities[b]) {
      for (std::size_t p = span.begin; p < span.end; ++p) out.push_back(p);
    }
    return out;
  }
  const std::size_t n = batch.length(k, b);
  for (std::size_t p = 0; p < n; ++p) out.push_back(p);
  return out;
}

struct MaskOptions {
  real rate = 0.15;
  TableMaskMode table_mode = TableMaskMode::Entity;
  bool bert_replacement = false;  // 80% [MASK] / 10% random / 10% unchanged
  std::size_t vocab_size = 0;     // needed for random replacement
  ModalitySet modalities = ModalitySet::all();
};

inline MaskPlan plan_masks(const BatchInputs& batch, const MaskOptions& opt, std::mt19937_64& rng) {
  if (!(opt.rate > 0.0 && opt.rate < 1.0)) throw std::invalid_argument("rate out of range");
  if (opt.bert_replacement && opt.vocab_size <= static_cast<std::size_t>(tokens::kFirstWord)) {
    throw std::invalid_argument("bert replacement needs the vocabulary size");
  }
  const std::size_t B = batch.size();
  MaskPlan plan;
  plan.table_mode = opt.table_mode;
  plan.table_entities.assign(B, {});
  std::uniform_real_distribution<real> unit;
  std::uniform_int_distribution<std::int64_t> random_token(
      tokens::kFirstWord, std::max<std::int64_t>(tokens::kFirstWord, static_cast<std::int64_t>(opt.vocab_size) - 1));

  for (ModalityKind k : kAllModalities) {
    const std::size_t m = index_of(k);
    plan.positions[m].assign(B, {});
    plan.replacement[m].assign(B, {});
    if (!opt.modalities.contains(k)) continue;
    for (std::size_t b = 0; b < B; ++b) {
      std::vector<std::size_t>& chosen = plan.positions[m][b];
      if (k == ModalityKind::Table && opt.table_mode == TableMaskMode::Entity) {
        const auto& spans = batch.entities[b];
        if (!batch.present_at(k, b) || spans.empty()) continue;
        std::vector<std::size_t> order(spans.size());
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        std::shuffle(order.begin(), order.end(), rng);
        order.resize(mask_count(spans.size(), opt.rate));
        std::sort(order.begin(), order.end());
        plan.table_entities[b] = order;
        for (std::size_t e : order) {
          for (std::size_t p = spans[e].begin; p < spans[e].end; ++p) chosen.push_back(p);
        }
      } else {
        std::vector<std::size_t> cand = maskable_positions(batch, k, b);
        if (cand.empty()) continue;
        std::shuffle(cand.begin(), cand.end(), rng);
        cand.resize(mask_count(cand.size(), opt.rate));
        std::sort(cand.begin(), cand.end());
        chosen = std::move(cand);
      }
      if (is_discrete(k)) {
        auto& rep = plan.replacement[m][b];
        const auto& orig = batch.ids[m][b];
        for (std::size_t p : chosen) {
          std::int64_t tok = tokens::kMask;
          if (opt.bert_replacement) {
            const real u = unit(rng);
            if (u >= 0.9) tok = orig[p];
            else if (u >= 0.8) tok = random_token(rng);
          }
          rep.push_back(tok);
        }
      }
    }
  }
  return plan;
}

inline void check_plan(const BatchInputs& batch, const MaskPlan& plan) {
  for (ModalityKind k : kAllModalities) {
    const std::size_t m = index_of(k);
    if (plan.positions[m].size() != batch.size()) throw std::invalid_argument("plan/batch mismatch: batch size");
    for (std::size_t b = 0; b < batch.size(); ++b) {
      const std::size_t n = batch.length(k, b);
      for (std::size_t p : plan.positions[m][b]) {
        if (p >= n) throw std::invalid_argument("plan/batch mismatch: position outside input");
      }
      if (is_discrete(k) && plan.replacement[m][b].size() != plan.positions[m][b].size()) {
        throw std::invalid_argument("plan/batch mismatch: replacement record");
      }
    }
  }
}

// Discrete positions receive the planned replacement ([MASK] by default);
// continuous positions become zero vectors. Originals go to the targets.
inline std::pair<BatchInputs, MaskedTargets> apply_masks(const BatchInputs& batch, const MaskPlan& plan) {
  check_plan(batch, plan);
  BatchInputs masked = batch;
  MaskedTargets targets;
  for (ModalityKind k : kAllModalities) {
    const std::size_t m = index_of(k);
    targets.ids[m].assign(batch.size(), {});
    targets.rows[m].assign(batch.size(), {});
    for (std::size_t b = 0; b < batch.size(); ++b) {
      const auto& pos = plan.positions[m][b];
      for (std::size_t i = 0; i < pos.size(); ++i) {
        if (is_discrete(k)) {
          targets.ids[m][b].push_back(batch.ids[m][b][pos[i]]);
          masked.ids[m][b][pos[i]] = plan.replacement[m][b][i];
        } else {
          FeatureSeq& f = masked.features[m][b];
          targets.rows[m][b].insert(targets.rows[m][b].end(), f.row(pos[i]), f.row(pos[i]) + f.dim);
          std::fill(f.row(pos[i]), f.row(pos[i]) + f.dim, 0.0);
        }
      }
    }
  }
  return {std::move(masked), std::move(targets)};
}

inline BatchInputs restore_masks(const BatchInputs& masked, const MaskPlan& plan, const MaskedTargets& targets) {
  check_plan(masked, plan);
  BatchInputs out = masked;
  for (ModalityKind k : kAllModalities) {
    const std::size_t m = index_of(k);
    for (std::size_t b = 0; b < masked.size(); ++b) {
      const auto& pos = plan.positions[m][b];
      for (std::size_t i = 0; i < pos.size(); ++i) {
        if (is_discrete(k)) {
          out.ids[m][b][pos[i]] = targets.ids[m][b].at(i);
        } else {
          FeatureSeq& f = out.features[m][b];
          std::copy_n(targets.rows[m][b].begin() + static_cast<std::ptrdiff_t>(i * f.dim), f.dim, f.row(pos[i]));
        }
      }
    }
  }
  return out;
}

// Per-modality masked losses L_{M_i}; nullopt marks an inactive modality
// (absent from the batch or nothing masked).
struct MaskedLosses {
  std::array<std::optional<Var>, kNumModalities> loss;

  bool any() const {
    return std::any_of(loss.begin(), loss.end(), [](const auto& l) { return l.has_value(); });
  }
};

// Prediction heads read the fused (post co-transformer) token states at the
// masked positions. Discrete: mean token NLL over the vocabulary. Continuous:
// mean per-element regression error against the original features.
inline MaskedLosses masked_losses(const ScaleModel& model, const ForwardOutput& fwd, const MaskPlan& plan,
                                  const MaskedTargets& targets, ContinuousLoss reduction = ContinuousLoss::SquaredError) {
  MaskedLosses out;
  const ModalitySet set = model.config().modality_set();
  for (ModalityKind k : set.kinds()) {
    const std::size_t m = index_of(k);
    std::vector<std::int64_t> rows;
    std::vector<std::int64_t> ids;
    std::vector<real> feats;
    for (std::size_t b = 0; b < plan.positions[m].size(); ++b) {
      const auto& pos = plan.positions[m][b];
      for (std::size_t i = 0; i < pos.size(); ++i) {
        rows.push_back(static_cast<std::int64_t>(fwd.fused_row(k, b, pos[i])));
        if (is_discrete(k)) ids.push_back(targets.ids[m][b].at(i));
      }
      if (!is_discrete(k)) feats.insert(feats.end(), targets.rows[m][b].begin(), targets.rows[m][b].end());
    }
    if (rows.empty()) continue;
    Var states = ops::gather_rows(fwd.fused.tokens, rows);
    Var pred = model.head(k)(states);
    if (is_discrete(k)) {
      out.loss[m] = ops::cross_entropy(pred, ids);
    } else {
      Tensor target({rows.size(), pred.cols()}, std::move(feats));
      out.loss[m] = reduction == ContinuousLoss::SquaredError ? ops::squared_error(pred, target)
                                                              : ops::smooth_l1(pred, target);
    }
  }
  return out;
}

}  // namespace scale
