// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "scale/data/corpus.hpp"
#include "scale/model/config.hpp"
#include "scale/model/layers.hpp"

namespace scale {

// Encoded sequence of one modality for a batch. Row b * seq + t holds token t
// of sample b; t = 0 is the modality [CLS] slot.
struct ModalityTokens {
  ModalityKind kind = ModalityKind::Text;
  Var tokens;              // [batch * seq x hidden]
  ops::SeqLayout layout;   // valid = attention mask
  Var pooled;              // [batch x hidden], the modality embedding
  std::vector<bool> present;
};

// One modality's raw input for a batch.
struct EncoderInput {
  std::vector<bool> present;
  std::vector<std::vector<std::int64_t>> ids;  // discrete modalities
  std::vector<const FeatureSeq*> features;     // continuous modalities

  std::size_t batch() const { return present.size(); }
  std::size_t length(std::size_t b, bool discrete) const {
    if (!present[b]) return 0;
    return discrete ? ids[b].size() : features[b]->rows;
  }
};

// Embedding layer + transformer stack for one modality. Discrete inputs use
// a token table; continuous inputs a linear projection. A learned [CLS] row
// is prepended, then per-modality positional and modality-type embeddings.
class ModalityEncoder {
 public:
  ModalityEncoder() = default;
  ModalityEncoder(ParamSet& ps, ModalityKind kind, const ModelConfig& cfg, std::mt19937_64& rng)
      : kind_(kind), discrete_(is_discrete(kind)), max_len_(cfg.max_len(kind)), input_dim_(cfg.input_dim(kind)),
        pooling_(cfg.pooling) {
    const std::string base = "encoder." + std::string(modality_name(kind));
    const std::size_t h = cfg.hidden;
    if (discrete_) {
      token_embedding_ = &ps.add(base + ".token_embedding", random_normal({cfg.vocab_size, h}, 0.1, rng));
    } else {
      projection_ = Linear(ps, base + ".input_projection", input_dim_, h, rng);
    }
    cls_ = &ps.add(base + ".cls", random_normal({1, h}, 0.1, rng));
    position_ = &ps.add(base + ".position_embedding", random_normal({max_len_ + 1, h}, 0.1, rng));
    type_ = &ps.add(base + ".type_embedding", random_normal({h}, 0.1, rng));
    embed_ln_ = LayerNorm(ps, base + ".embed_ln", h);
    stack_ = TransformerStack(ps, base + ".stack", cfg.layers, h, cfg.heads, cfg.ffn, rng);
  }

  ModalityKind kind() const { return kind_; }

  ModalityTokens operator()(const EncoderInput& in, real dropout, std::mt19937_64* rng) const {
    const std::size_t B = in.batch();
    std::size_t longest = 0;
    std::size_t total = 0;
    for (std::size_t b = 0; b < B; ++b) {
      const std::size_t n = in.length(b, discrete_);
      if (n > max_len_) {
        throw std::invalid_argument(std::string(modality_name(kind_)) + " input of length " + std::to_string(n) +
                                    " exceeds maximum " + std::to_string(max_len_));
      }
      longest = std::max(longest, n);
      total += n;
    }
    const std::size_t S = 1 + longest;

    ModalityTokens out;
    out.kind = kind_;
    out.present = in.present;
    out.layout.batch = B;
    out.layout.seq = S;
    out.layout.valid.assign(B * S, false);

    // Content rows for every real token, then the [CLS] row at index `total`.
    std::vector<Var> parts;
    if (total > 0) parts.push_back(content_rows(in, total));
    parts.push_back(Var::param(*cls_));
    Var combined = parts.size() == 1 ? parts[0] : ops::concat_rows(parts);

    std::vector<std::int64_t> gather_idx(B * S, -1), pos_idx(B * S, -1);
    std::size_t offset = 0;
    for (std::size_t b = 0; b < B; ++b) {
      if (!in.present[b]) continue;
      const std::size_t n = in.length(b, discrete_);
      for (std::size_t t = 0; t <= n; ++t) {
        const std::size_t r = out.layout.row(b, t);
        out.layout.valid[r] = true;
        gather_idx[r] = t == 0 ? static_cast<std::int64_t>(total) : static_cast<std::int64_t>(offset + t - 1);
        pos_idx[r] = static_cast<std::int64_t>(t);
      }
      offset += n;
    }

    Var x = ops::gather_rows(combined, gather_idx);
    x = ops::add(x, ops::gather_rows(Var::param(*position_), pos_idx));
    x = ops::add_rowvec(x, Var::param(*type_));
    x = embed_ln_(x);
    if (rng) x = ops::dropout(x, dropout, *rng);
    x = stack_(x, out.layout, dropout, rng);
    out.tokens = ops::mask_rows(x, out.layout.valid);
    out.pooled = pool(out.tokens, out.layout);
    return out;
  }

 private:
  Var content_rows(const EncoderInput& in, std::size_t total) const {
    if (discrete_) {
      std::vector<std::int64_t> flat;
      flat.reserve(total);
      for (std::size_t b = 0; b < in.batch(); ++b) {
        if (in.present[b]) flat.insert(flat.end(), in.ids[b].begin(), in.ids[b].end());
      }
      return ops::embedding(Var::param(*token_embedding_), flat);
    }
    Tensor feats({total, input_dim_});
    std::size_t r = 0;
    for (std::size_t b = 0; b < in.batch(); ++b) {
      if (!in.present[b]) continue;
      const FeatureSeq& f = *in.features[b];
      if (f.dim != input_dim_) {
        throw std::invalid_argument(std::string(modality_name(kind_)) + " feature dim " + std::to_string(f.dim) +
                                    " != expected " + std::to_string(input_dim_));
      }
      std::copy(f.values.begin(), f.values.end(), feats.data() + r * input_dim_);
      r += f.rows;
    }
    return projection_(Var::constant(std::move(feats)));
  }

  Var pool(const Var& tokens, const ops::SeqLayout& layout) const {
    if (pooling_ == Pooling::Cls) {
      std::vector<std::int64_t> idx(layout.batch);
      for (std::size_t b = 0; b < layout.batch; ++b) idx[b] = static_cast<std::int64_t>(layout.row(b, 0));
      return ops::gather_rows(tokens, idx);
    }
    std::vector<std::vector<std::size_t>> groups(layout.batch);
    for (std::size_t b = 0; b < layout.batch; ++b) {
      for (std::size_t t = 0; t < layout.seq; ++t) {
        if (layout.valid[layout.row(b, t)]) groups[b].push_back(layout.row(b, t));
      }
    }
    return ops::pool_rows(tokens, groups);
  }

  ModalityKind kind_ = ModalityKind::Text;
  bool discrete_ = true;
  std::size_t max_len_ = 0;
  std::size_t input_dim_ = 0;
  Pooling pooling_ = Pooling::Cls;
  Parameter* token_embedding_ = nullptr;
  Linear projection_;
  Parameter* cls_ = nullptr;
  Parameter* position_ = nullptr;
  Parameter* type_ = nullptr;
  LayerNorm embed_ln_;
  TransformerStack stack_;
};

}  // namespace scale
