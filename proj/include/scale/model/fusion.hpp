// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <optional>
#include <random>
#include <stdexcept>
#include <vector>

#include "scale/model/encoders.hpp"

namespace scale {

inline constexpr int kFuseSegment = -1;

// Output of the joint co-transformer. Every sample shares one segment
// layout: position 0 is [FUSE], then each encoded modality's padded
// sequence (its [CLS] slot first) in fusion order.
struct FusedTokens {
  Var tokens;                 // [batch * total_seq x hidden]
  ops::SeqLayout layout;
  std::vector<int> segment;   // per position: kFuseSegment or modality index
  std::array<std::optional<std::size_t>, kNumModalities> segment_offset;
  std::array<std::size_t, kNumModalities> segment_len{};
  Var fused;                  // [batch x hidden]

  std::size_t total_seq() const { return layout.seq; }
};

// Single-stream transformer over the concatenation of all modality token
// sequences. Positional information stays per-modality (added inside each
// encoder); the fusion stack adds a learned segment embedding per modality.
class JointCoTransformer {
 public:
  JointCoTransformer() = default;
  JointCoTransformer(ParamSet& ps, const ModelConfig& cfg, std::mt19937_64& rng)
      : pooling_(cfg.fusion_pooling), absent_mode_(cfg.absent_mode) {
    fuse_ = &ps.add("fusion.fuse_token", random_normal({1, cfg.hidden}, 0.1, rng));
    segment_ = &ps.add("fusion.segment_embedding", random_normal({kNumModalities, cfg.hidden}, 0.1, rng));
    stack_ = TransformerStack(ps, "fusion.stack", cfg.layers, cfg.hidden, cfg.heads, cfg.ffn, rng);
  }

  FusedTokens operator()(const std::vector<const ModalityTokens*>& inputs, real dropout, std::mt19937_64* rng) const {
    if (inputs.empty()) throw std::invalid_argument("fuse: no modality tokens");
    const std::size_t B = inputs[0]->layout.batch;
    for (const auto* m : inputs) {
      if (m->layout.batch != B) throw ShapeError("fuse: inconsistent batch sizes");
    }

    FusedTokens out;
    std::size_t T = 1;
    out.segment.push_back(kFuseSegment);
    std::vector<std::size_t> base(inputs.size());
    std::size_t row_base = 1;  // row 0 of the combined matrix is [FUSE]
    std::vector<Var> parts{Var::param(*fuse_)};
    for (std::size_t i = 0; i < inputs.size(); ++i) {
      const ModalityTokens& m = *inputs[i];
      const std::size_t mi = index_of(m.kind);
      out.segment_offset[mi] = T;
      out.segment_len[mi] = m.layout.seq;
      for (std::size_t t = 0; t < m.layout.seq; ++t) out.segment.push_back(static_cast<int>(mi));
      T += m.layout.seq;
      base[i] = row_base;
      row_base += m.layout.rows();
      parts.push_back(m.tokens);
    }
    Var combined = ops::concat_rows(parts);

    out.layout.batch = B;
    out.layout.seq = T;
    out.layout.valid.assign(B * T, false);
    std::vector<std::int64_t> gather_idx(B * T, -1), seg_idx(B * T, -1);
    for (std::size_t b = 0; b < B; ++b) {
      gather_idx[out.layout.row(b, 0)] = 0;
      out.layout.valid[out.layout.row(b, 0)] = true;
      for (std::size_t i = 0; i < inputs.size(); ++i) {
        const ModalityTokens& m = *inputs[i];
        const std::size_t off = *out.segment_offset[index_of(m.kind)];
        for (std::size_t t = 0; t < m.layout.seq; ++t) {
          const std::size_t src = m.layout.row(b, t);
          const std::size_t dst = out.layout.row(b, off + t);
          gather_idx[dst] = static_cast<std::int64_t>(base[i] + src);
          if (m.layout.valid[src]) {
            out.layout.valid[dst] = true;
            seg_idx[dst] = static_cast<std::int64_t>(index_of(m.kind));
          } else if (absent_mode_ == AbsentMode::ZeroToken && t == 0 && !m.present[b]) {
            // Absent modality enters as one attendable all-zero token.
            out.layout.valid[dst] = true;
          }
        }
      }
    }

    Var x = ops::gather_rows(combined, gather_idx);
    x = ops::add(x, ops::gather_rows(Var::param(*segment_), seg_idx));
    if (rng) x = ops::dropout(x, dropout, *rng);
    x = stack_(x, out.layout, dropout, rng);
    out.tokens = ops::mask_rows(x, out.layout.valid);

    if (pooling_ == Pooling::Cls) {
      std::vector<std::int64_t> idx(B);
      for (std::size_t b = 0; b < B; ++b) idx[b] = static_cast<std::int64_t>(out.layout.row(b, 0));
      out.fused = ops::gather_rows(out.tokens, idx);
    } else {
      std::vector<std::vector<std::size_t>> groups(B);
      for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t t = 0; t < T; ++t) {
          if (out.layout.valid[out.layout.row(b, t)]) groups[b].push_back(out.layout.row(b, t));
        }
      }
      out.fused = ops::pool_rows(out.tokens, groups);
    }
    return out;
  }

 private:
  Pooling pooling_ = Pooling::Cls;
  AbsentMode absent_mode_ = AbsentMode::Masked;
  Parameter* fuse_ = nullptr;
  Parameter* segment_ = nullptr;
  TransformerStack stack_;
};

}  // namespace scale
