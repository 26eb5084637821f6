// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <array>
#include <filesystem>
#include <optional>
#include <ostream>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "scale/train/checkpoint.hpp"
#include "scale/train/run_config.hpp"

namespace scale {

// "masked:text" for diagonal entries, "pair:text-image" for the rest.
inline std::string score_entry_name(std::size_t n) {
  const auto [i, j] = score_entries().at(n);
  if (i == j) return "masked:" + std::string(modality_name(kAllModalities[i]));
  return "pair:" + std::string(modality_name(kAllModalities[i])) + "-" + std::string(modality_name(kAllModalities[j]));
}

// Runs `fn` and re-throws numeric failures with the loss term named.
template <typename Fn>
auto named_term(const std::string& name, Fn&& fn) -> decltype(fn()) {
  try {
    return fn();
  } catch (const NumericError& e) {
    throw NumericError("non-finite loss term " + name + ": " + e.what());
  }
}

// One forward pass producing every active loss term and the weighted total.
// Masking draws from mask_rng; dropout is on when dropout_rng is given.
inline LossBundle compute_losses(const ScaleModel& model, Parameter& scores, const BatchInputs& batch,
                                 const RunConfig& cfg, std::mt19937_64& mask_rng,
                                 std::mt19937_64* dropout_rng = nullptr) {
  if (!cfg.imcl && !cfg.pretext) throw std::invalid_argument("no active loss terms");
  const ModelConfig& mc = model.config();
  BatchInputs input = batch;
  MaskPlan plan;
  MaskedTargets targets;
  if (cfg.pretext) {
    MaskOptions opt;
    opt.rate = cfg.mask_rate;
    opt.table_mode = cfg.table_mask_mode;
    opt.bert_replacement = cfg.bert_replacement;
    opt.vocab_size = mc.vocab_size;
    opt.modalities = mc.modality_set();
    plan = plan_masks(batch, opt, mask_rng);
    std::tie(input, targets) = apply_masks(batch, plan);
  }
  const ForwardOutput fwd = named_term("forward", [&] { return model.forward(input, dropout_rng); });

  LossBundle bundle;
  if (cfg.imcl) {
    const auto kinds = mc.encoded_modalities();
    for (std::size_t a = 0; a < kinds.size(); ++a) {
      for (std::size_t b = a + 1; b < kinds.size(); ++b) {
        const std::size_t n = score_entry_index(index_of(kinds[a]), index_of(kinds[b]));
        bundle.terms[n] = named_term(score_entry_name(n), [&] {
          return pair_loss_for(*fwd.tokens(kinds[a]), *fwd.tokens(kinds[b]), cfg.temperature);
        });
      }
    }
  }
  if (cfg.pretext) {
    MaskedLosses ml = named_term("masked", [&] { return masked_losses(model, fwd, plan, targets, cfg.continuous_loss); });
    for (ModalityKind k : kAllModalities) {
      if (ml.loss[index_of(k)]) bundle.masked(k) = ml.loss[index_of(k)];
    }
  }
  if (bundle.active_count() == 0) throw std::invalid_argument("no active loss terms in batch");
  total_loss(bundle, Var::param(scores), cfg.simcl_mode);
  return bundle;
}

struct StepRecord {
  std::size_t step = 0;
  std::size_t epoch = 0;
  real lr = 0;
  real total = 0;
  std::array<std::optional<real>, kNumScoreEntries> terms;
  std::array<real, kNumScoreEntries> weights{};
};

inline StepRecord make_step_record(std::size_t step, std::size_t epoch, real lr, const LossBundle& b) {
  StepRecord r;
  r.step = step;
  r.epoch = epoch;
  r.lr = lr;
  r.total = b.total.item();
  for (std::size_t n = 0; n < kNumScoreEntries; ++n) {
    if (b.terms[n]) r.terms[n] = b.terms[n]->item();
  }
  r.weights = weight_values(b.weights);
  return r;
}

inline nlohmann::json to_json(const StepRecord& r) {
  nlohmann::json losses = nlohmann::json::object();
  nlohmann::json weights = nlohmann::json::array();
  for (std::size_t n = 0; n < kNumScoreEntries; ++n) {
    losses[score_entry_name(n)] = r.terms[n] ? nlohmann::json(*r.terms[n]) : nlohmann::json(nullptr);
    weights.push_back(r.weights[n]);
  }
  return {{"record", "step"}, {"step", r.step}, {"epoch", r.epoch}, {"lr", r.lr},
          {"total", r.total}, {"losses", losses}, {"weights", weights}};
}

// Training ids that the run can use: at least one selected modality present,
// and every selected modality present when incomplete samples are excluded.
inline std::vector<std::size_t> usable_ids(const std::vector<ProductSample>& corpus, std::span<const std::size_t> ids,
                                           const ModalitySet& set, bool include_incomplete) {
  std::vector<std::size_t> out;
  for (std::size_t id : ids) {
    const ProductSample& s = corpus.at(id);
    std::size_t have = 0, want = 0;
    for (ModalityKind k : set.kinds()) {
      ++want;
      have += s.present(k) ? 1 : 0;
    }
    if (have == 0) continue;
    if (!include_incomplete && have != want) continue;
    out.push_back(id);
  }
  return out;
}

// Consecutive batches of a per-epoch shuffle; a trailing batch smaller than
// two samples is dropped (contrastive terms need two).
inline std::vector<std::vector<std::size_t>> epoch_batches(std::vector<std::size_t> ids, std::size_t batch_size,
                                                           std::uint64_t seed, std::size_t epoch) {
  std::mt19937_64 rng(derive_seed(seed, 0xE90C, epoch));
  std::shuffle(ids.begin(), ids.end(), rng);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < ids.size(); i += batch_size) {
    const std::size_t end = std::min(ids.size(), i + batch_size);
    if (end - i < 2) break;
    out.emplace_back(ids.begin() + static_cast<std::ptrdiff_t>(i), ids.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return out;
}

struct PretrainResult {
  std::size_t steps = 0;
  std::size_t train_samples = 0;
  real first_total = 0;
  real last_total = 0;
  std::vector<std::filesystem::path> checkpoints;
};

// Minimizes the weighted objective with Adam, linear warm-up then linear
// decay. Writes one JSON line per step to `log` and a checkpoint per epoch
// into `checkpoint_dir` when given.
inline PretrainResult pretrain(ScaleModel& model, const std::vector<ProductSample>& corpus,
                               std::span<const std::size_t> train_ids, const RunConfig& cfg,
                               std::ostream* log = nullptr, const std::filesystem::path& checkpoint_dir = {}) {
  if (!cfg.imcl && !cfg.pretext) throw std::invalid_argument("no active loss terms");
  const ModalitySet set = model.config().modality_set();
  const auto ids = usable_ids(corpus, train_ids, set, cfg.train_incomplete);
  if (ids.size() < 2) throw std::invalid_argument("pretrain: fewer than two usable training samples");

  PretrainResult res;
  res.train_samples = ids.size();
  const std::size_t per_epoch = epoch_batches(ids, cfg.batch_size, cfg.seed, 0).size();
  LrSchedule schedule{cfg.lr, cfg.warmup_steps, std::max<std::size_t>(1, per_epoch * cfg.epochs)};
  Adam opt(model.params().all());
  std::mt19937_64 mask_rng(derive_seed(cfg.seed, 0x3A5C));
  std::mt19937_64 dropout_rng(derive_seed(cfg.seed, 0xD80F));

  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (const auto& batch_ids : epoch_batches(ids, cfg.batch_size, cfg.seed, epoch)) {
      const BatchInputs batch = make_batch(corpus, batch_ids, set);
      opt.zero_grad();
      LossBundle bundle = compute_losses(model, model.scores(), batch, cfg, mask_rng, &dropout_rng);
      named_term("total", [&] {
        backward(bundle.total);
        return 0;
      });
      const real lr = schedule.at(step);
      opt.step(lr);
      if (step == 0) res.first_total = bundle.total.item();
      res.last_total = bundle.total.item();
      if (log) *log << to_json(make_step_record(step, epoch, lr, bundle)).dump() << '\n';
      ++step;
    }
    if (!checkpoint_dir.empty()) {
      const auto path = checkpoint_dir / ("epoch-" + std::to_string(epoch + 1) + ".ckpt");
      save_checkpoint(path, model, step, &opt);
      res.checkpoints.push_back(path);
    }
  }
  res.steps = step;
  return res;
}

// Fused embeddings for the given samples, dropout off, no graph recorded.
inline Tensor extract_features(const ScaleModel& model, const std::vector<ProductSample>& corpus,
                               std::span<const std::size_t> ids, std::size_t batch_size = 64) {
  if (ids.empty()) throw std::invalid_argument("extract_features: empty subset");
  NoGradGuard no_grad;
  const ModalitySet set = model.config().modality_set();
  Tensor out({ids.size(), model.config().hidden});
  for (std::size_t i = 0; i < ids.size(); i += batch_size) {
    const auto part = ids.subspan(i, std::min(batch_size, ids.size() - i));
    const Tensor f = model.forward(make_batch(corpus, part, set)).fused.fused.value();
    std::copy(f.storage().begin(), f.storage().end(), out.storage().begin() + static_cast<std::ptrdiff_t>(i * f.cols()));
  }
  return out;
}

// Post-fusion mean of modality k's own token states per sample ([CLS] slot
// included, stacked table tokens excluded); zero rows where k is absent.
inline Var segment_mean(const ForwardOutput& fwd, ModalityKind k) {
  const ModalityTokens* mt = fwd.tokens(k);
  const auto& off = fwd.fused.segment_offset[index_of(k)];
  if (!mt || !off) throw std::invalid_argument("modality not part of the fused sequence");
  const auto& layout = fwd.fused.layout;
  std::vector<std::vector<std::size_t>> groups(layout.batch);
  for (std::size_t b = 0; b < layout.batch; ++b) {
    if (!mt->present[b]) continue;
    std::size_t len = fwd.fused.segment_len[index_of(k)];
    if (fwd.stacked && k == ModalityKind::Text) len = std::min(len, 1 + fwd.stacked_text_len.at(b));
    for (std::size_t t = 0; t < len; ++t) {
      const std::size_t row = layout.row(b, *off + t);
      if (layout.valid[row]) groups[b].push_back(row);
    }
  }
  return ops::pool_rows(fwd.fused.tokens, groups);
}

// Image/text post-fusion correlation over samples with both present.
inline real image_text_correlation(const ScaleModel& model, const std::vector<ProductSample>& corpus,
                                   std::span<const std::size_t> ids, std::size_t batch_size = 64) {
  NoGradGuard no_grad;
  const ModalitySet set = model.config().modality_set();
  if (!model.has_encoder(ModalityKind::Image) || !model.has_encoder(ModalityKind::Text)) {
    throw std::invalid_argument("modality correlation needs the image and text modalities");
  }
  std::vector<std::size_t> both;
  for (std::size_t id : ids) {
    if (corpus.at(id).present(ModalityKind::Image) && corpus.at(id).present(ModalityKind::Text)) both.push_back(id);
  }
  if (both.size() < 2) throw std::invalid_argument("modality_correlation: no eligible samples");
  std::vector<real> img, txt;
  for (std::size_t i = 0; i < both.size(); i += batch_size) {
    const std::span<const std::size_t> part(both.data() + i, std::min(batch_size, both.size() - i));
    const ForwardOutput fwd = model.forward(make_batch(corpus, part, set));
    const Tensor a = segment_mean(fwd, ModalityKind::Image).value();
    const Tensor t = segment_mean(fwd, ModalityKind::Text).value();
    img.insert(img.end(), a.storage().begin(), a.storage().end());
    txt.insert(txt.end(), t.storage().begin(), t.storage().end());
  }
  const std::size_t h = model.config().hidden;
  return modality_correlation(Tensor({both.size(), h}, img), Tensor({both.size(), h}, txt));
}

struct FinetuneResult {
  real accuracy = 0;
  real untrained_head_accuracy = 0;  // same features, classifier at its initialization
  std::size_t steps = 0;
};

inline real classification_accuracy(const ScaleModel& model, const Linear& head, const std::vector<ProductSample>& corpus,
                                    std::span<const std::size_t> ids, std::size_t batch_size) {
  NoGradGuard no_grad;
  const Tensor f = extract_features(model, corpus, ids, batch_size);
  const Tensor logits = head(Var::constant(f)).value();
  std::size_t correct = 0;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const auto row = logits.row(i);
    const auto pred = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
    correct += pred == corpus.at(ids[i]).category ? 1 : 0;
  }
  return static_cast<real>(correct) / static_cast<real>(ids.size());
}

// Attaches a category classifier to the fused embedding and updates the whole
// model with cross-entropy on the classification train split.
inline FinetuneResult finetune(ScaleModel& model, const std::vector<ProductSample>& corpus,
                               std::span<const std::size_t> train_ids, std::span<const std::size_t> test_ids,
                               std::size_t num_classes, const RunConfig& cfg, std::ostream* log = nullptr) {
  if (train_ids.empty() || test_ids.empty()) throw std::invalid_argument("finetune: classification split is empty");
  const ModalitySet set = model.config().modality_set();
  const Linear& head = model.classifier(num_classes);
  FinetuneResult res;
  res.untrained_head_accuracy = classification_accuracy(model, head, corpus, test_ids, cfg.eval_batch_size);

  const auto ids = usable_ids(corpus, train_ids, set, true);
  const std::size_t per_epoch = epoch_batches(ids, cfg.batch_size, cfg.seed, 0).size();
  LrSchedule schedule{cfg.finetune_lr, std::min(cfg.warmup_steps, per_epoch),
                      std::max<std::size_t>(1, per_epoch * cfg.finetune_epochs)};
  Adam opt(model.params().all());
  std::mt19937_64 dropout_rng(derive_seed(cfg.seed, 0xF17E));
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < cfg.finetune_epochs; ++epoch) {
    for (const auto& batch_ids : epoch_batches(ids, cfg.batch_size, derive_seed(cfg.seed, 0xF1), epoch)) {
      const BatchInputs batch = make_batch(corpus, batch_ids, set);
      std::vector<std::int64_t> labels(batch.categories.begin(), batch.categories.end());
      opt.zero_grad();
      Var loss = named_term("classification", [&] {
        return ops::cross_entropy(head(model.forward(batch, &dropout_rng).fused.fused), labels);
      });
      backward(loss);
      const real lr = schedule.at(step);
      opt.step(lr);
      if (log) {
        *log << nlohmann::json{{"record", "finetune-step"}, {"step", step}, {"epoch", epoch}, {"lr", lr},
                               {"loss", loss.item()}}.dump()
             << '\n';
      }
      ++step;
    }
  }
  res.steps = step;
  res.accuracy = classification_accuracy(model, head, corpus, test_ids, cfg.eval_batch_size);
  return res;
}

}  // namespace scale
