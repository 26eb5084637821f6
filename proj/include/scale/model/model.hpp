// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <memory>
#include <optional>
#include <random>
#include <vector>

#include "scale/model/batch.hpp"
#include "scale/model/fusion.hpp"

namespace scale {

struct ForwardOutput {
  std::array<std::optional<ModalityTokens>, kNumModalities> modalities;
  FusedTokens fused;
  // Stacked mode only: per sample count of text tokens preceding the table.
  std::vector<std::size_t> stacked_text_len;
  bool stacked = false;

  const ModalityTokens* tokens(ModalityKind k) const {
    const auto& m = modalities[index_of(k)];
    return m ? &*m : nullptr;
  }

  // Row of the fused token matrix holding input position `pos` (0-based,
  // excluding [CLS]) of modality k for sample b.
  std::size_t fused_row(ModalityKind k, std::size_t b, std::size_t pos) const {
    std::size_t seg = index_of(k);
    if (stacked && k == ModalityKind::Table) {
      seg = index_of(ModalityKind::Text);
      pos += stacked_text_len.at(b);
    }
    const auto& off = fused.segment_offset[seg];
    if (!off) throw std::invalid_argument("modality not part of the fused sequence");
    return fused.layout.row(b, *off + 1 + pos);
  }
};

// Encoders, joint co-transformer, masked-prediction heads and the alignment
// score matrix. Parameters are created in a fixed order from init_seed.
class ScaleModel {
 public:
  explicit ScaleModel(ModelConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    std::mt19937_64 rng(derive_seed(cfg_.init_seed, 0x30DE1));
    const ModalitySet set = cfg_.modality_set();
    for (ModalityKind k : cfg_.encoded_modalities()) {
      encoders_[index_of(k)] = std::make_unique<ModalityEncoder>(params_, k, cfg_, rng);
    }
    jct_ = JointCoTransformer(params_, cfg_, rng);
    for (ModalityKind k : set.kinds()) {
      const std::size_t out = is_discrete(k) ? cfg_.vocab_size : cfg_.input_dim(k);
      heads_[index_of(k)] = Linear(params_, "head." + std::string(modality_name(k)), cfg_.hidden, out, rng);
    }
    scores_ = &params_.add("simcl.scores", Tensor({kNumModalities, kNumModalities}));
  }

  ScaleModel(const ScaleModel&) = delete;
  ScaleModel& operator=(const ScaleModel&) = delete;

  const ModelConfig& config() const { return cfg_; }
  ParamSet& params() { return params_; }
  const ParamSet& params() const { return params_; }
  Parameter& scores() { return *scores_; }
  const Linear& head(ModalityKind k) const { return heads_[index_of(k)]; }
  bool has_encoder(ModalityKind k) const { return encoders_[index_of(k)] != nullptr; }

  // Classification head on the fused embedding; created once, reused after.
  const Linear& classifier(std::size_t num_classes) {
    if (!classifier_) {
      std::mt19937_64 rng(derive_seed(cfg_.init_seed, 0xC1A55));
      classifier_ = Linear(params_, "head.classifier", cfg_.hidden, num_classes, rng);
    }
    if (classifier_->bias->value.size() != num_classes) {
      throw std::invalid_argument("classifier has " + std::to_string(classifier_->bias->value.size()) +
                                  " classes, requested " + std::to_string(num_classes));
    }
    return *classifier_;
  }
  bool has_classifier() const { return classifier_.has_value(); }

  // Encodes one modality of the batch (embedding + its transformer stack).
  ModalityTokens encode(ModalityKind k, const BatchInputs& batch, std::mt19937_64* rng = nullptr,
                        std::vector<std::size_t>* stacked_text_len = nullptr) const {
    const auto& enc = encoders_[index_of(k)];
    if (!enc) throw std::invalid_argument("model has no encoder for " + std::string(modality_name(k)));
    EncoderInput in;
    const std::size_t B = batch.size();
    in.present = batch.present[index_of(k)];
    if (is_discrete(k)) {
      in.ids = batch.ids[index_of(k)];
      if (k == ModalityKind::Text && cfg_.text_table == TextTableEncoding::Stacked &&
          cfg_.modality_set().contains(ModalityKind::Table)) {
        if (stacked_text_len) stacked_text_len->assign(B, 0);
        for (std::size_t b = 0; b < B; ++b) {
          const std::size_t text_len = in.present[b] ? in.ids[b].size() : 0;
          if (!in.present[b]) in.ids[b].clear();
          if (stacked_text_len) (*stacked_text_len)[b] = text_len;
          if (batch.present_at(ModalityKind::Table, b)) {
            const auto& tab = batch.ids[index_of(ModalityKind::Table)][b];
            in.ids[b].insert(in.ids[b].end(), tab.begin(), tab.end());
            in.present[b] = true;
          }
        }
      }
    } else {
      in.features.resize(B);
      for (std::size_t b = 0; b < B; ++b) in.features[b] = &batch.features[index_of(k)][b];
    }
    return (*enc)(in, cfg_.dropout, rng);
  }

  // Full forward pass. `rng` enables dropout (training); nullptr = eval.
  ForwardOutput forward(const BatchInputs& batch, std::mt19937_64* rng = nullptr) const {
    ForwardOutput out;
    out.stacked = cfg_.text_table == TextTableEncoding::Stacked;
    std::vector<const ModalityTokens*> inputs;
    for (ModalityKind k : cfg_.encoded_modalities()) {
      out.modalities[index_of(k)] = encode(k, batch, rng, k == ModalityKind::Text ? &out.stacked_text_len : nullptr);
    }
    for (ModalityKind k : cfg_.encoded_modalities()) inputs.push_back(&*out.modalities[index_of(k)]);
    out.fused = jct_(inputs, cfg_.dropout, rng);
    return out;
  }

 private:
  ModelConfig cfg_;
  ParamSet params_;
  std::array<std::unique_ptr<ModalityEncoder>, kNumModalities> encoders_;
  JointCoTransformer jct_;
  std::array<Linear, kNumModalities> heads_;
  Parameter* scores_ = nullptr;
  std::optional<Linear> classifier_;
};

}  // namespace scale
