// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "scale/data/corpus.hpp"
#include "scale/data/modality.hpp"

namespace scale {

enum class TextTableEncoding { Separate, Stacked };
enum class Pooling { Cls, Mean };
enum class AbsentMode { Masked, ZeroToken };

NLOHMANN_JSON_SERIALIZE_ENUM(TextTableEncoding, {{TextTableEncoding::Separate, "separate"},
                                                 {TextTableEncoding::Stacked, "stacked"}})
NLOHMANN_JSON_SERIALIZE_ENUM(Pooling, {{Pooling::Cls, "cls"}, {Pooling::Mean, "mean"}})
NLOHMANN_JSON_SERIALIZE_ENUM(AbsentMode, {{AbsentMode::Masked, "masked"}, {AbsentMode::ZeroToken, "zero-token"}})

// Full-scale reference: hidden 768, 6 encoder layers + 6 fusion layers.
struct ModelConfig {
  std::size_t hidden = 64;
  std::size_t layers = 2;  // per modality encoder; the fusion stack uses the same depth
  std::size_t heads = 4;
  std::size_t ffn = 128;
  real dropout = 0.1;
  std::uint64_t init_seed = 0;

  std::size_t vocab_size = 0;
  std::size_t image_dim = 32;
  std::size_t video_dim = 32;
  std::size_t audio_coeffs = 13;
  std::size_t max_text_len = 16;
  std::size_t max_table_len = 32;
  std::size_t max_image_regions = 36;
  std::size_t max_video_frames = 16;
  std::size_t max_audio_frames = 16;

  std::string modalities = "all";
  TextTableEncoding text_table = TextTableEncoding::Separate;
  Pooling pooling = Pooling::Cls;         // per-modality embedding
  Pooling fusion_pooling = Pooling::Cls;  // Cls = the [FUSE] token
  AbsentMode absent_mode = AbsentMode::Masked;
  std::vector<std::string> fusion_order;  // empty = canonical order

  ModalitySet modality_set() const { return ModalitySet::parse(modalities); }

  // Modalities that own an encoder stack (Table folds into Text when stacked).
  std::vector<ModalityKind> encoded_modalities() const {
    std::vector<ModalityKind> out;
    const ModalitySet set = modality_set();
    std::vector<ModalityKind> order;
    if (fusion_order.empty()) {
      order.assign(kAllModalities.begin(), kAllModalities.end());
    } else {
      for (const auto& s : fusion_order) order.push_back(parse_modality(s));
    }
    for (ModalityKind k : order) {
      if (!set.contains(k)) continue;
      if (k == ModalityKind::Table && text_table == TextTableEncoding::Stacked) continue;
      out.push_back(k);
    }
    if (text_table == TextTableEncoding::Stacked && set.contains(ModalityKind::Table) &&
        !set.contains(ModalityKind::Text)) {
      throw std::invalid_argument("stacked text/table encoding needs the text modality");
    }
    return out;
  }

  std::size_t max_len(ModalityKind k) const {
    switch (k) {
      case ModalityKind::Text:
        return max_text_len + (text_table == TextTableEncoding::Stacked ? max_table_len : 0);
      case ModalityKind::Table: return max_table_len;
      case ModalityKind::Image: return max_image_regions;
      case ModalityKind::Video: return max_video_frames;
      case ModalityKind::Audio: return max_audio_frames;
    }
    return 0;
  }

  std::size_t input_dim(ModalityKind k) const {
    switch (k) {
      case ModalityKind::Image: return image_dim;
      case ModalityKind::Video: return video_dim;
      case ModalityKind::Audio: return audio_coeffs;
      default: return 0;
    }
  }

  void validate() const {
    if (hidden == 0 || heads == 0 || hidden % heads != 0) {
      throw std::invalid_argument("hidden_dim must be divisible by num_heads");
    }
    if (layers == 0 || ffn == 0) throw std::invalid_argument("layers and ffn must be positive");
    if (vocab_size <= static_cast<std::size_t>(tokens::kFirstWord)) throw std::invalid_argument("vocab_size not set");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw std::invalid_argument("dropout must lie in [0, 1)");
    (void)encoded_modalities();
  }

  // Sizes that follow from a corpus configuration.
  void adopt_corpus(const CorpusConfig& c) {
    vocab_size = c.vocab_size();
    image_dim = c.image_dim;
    video_dim = c.video_dim;
    audio_coeffs = c.audio_coeffs;
    max_text_len = c.text_max_len;
    max_table_len = c.table_max_len;
    max_image_regions = c.image_max_regions;
    max_video_frames = c.video_max_frames;
    max_audio_frames = c.audio_max_frames;
  }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(ModelConfig, hidden, layers, heads, ffn, dropout, init_seed, vocab_size,
                                                image_dim, video_dim, audio_coeffs, max_text_len, max_table_len,
                                                max_image_regions, max_video_frames, max_audio_frames, modalities,
                                                text_table, pooling, fusion_pooling, absent_mode, fusion_order)

}  // namespace scale
