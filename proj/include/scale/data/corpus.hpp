// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "scale/data/modality.hpp"
#include "scale/numerics/tensor.hpp"

namespace scale {

// splitmix64 finalizer; used to derive independent stream seeds.
inline std::uint64_t mix_seed(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0) {
  return mix_seed(mix_seed(mix_seed(seed) ^ a) ^ (b * 0x632be59bd9b4e019ULL));
}

// Row-major [rows x dim] feature payload; rows == 0 for an absent modality.
struct FeatureSeq {
  std::size_t rows = 0;
  std::size_t dim = 0;
  std::vector<real> values;

  bool empty() const { return rows == 0; }
  const real* row(std::size_t r) const { return values.data() + r * dim; }
  real* row(std::size_t r) { return values.data() + r * dim; }

  friend bool operator==(const FeatureSeq&, const FeatureSeq&) = default;
};

struct TableEntity {
  std::int64_t property = 0;             // token id in the property range
  std::vector<std::int64_t> value;       // token ids in the word range

  friend bool operator==(const TableEntity&, const TableEntity&) = default;
};

struct ProductSample {
  std::size_t id = 0;
  std::size_t category = 0;
  std::size_t instance = 0;  // globally unique product identity
  std::array<bool, kNumModalities> presence{};
  std::vector<std::int64_t> text;
  std::vector<TableEntity> table;
  FeatureSeq image;
  FeatureSeq video;
  FeatureSeq audio;

  bool present(ModalityKind k) const { return presence[index_of(k)]; }
  std::size_t present_count() const {
    return static_cast<std::size_t>(std::count(presence.begin(), presence.end(), true));
  }
  const FeatureSeq& features(ModalityKind k) const {
    switch (k) {
      case ModalityKind::Image: return image;
      case ModalityKind::Video: return video;
      case ModalityKind::Audio: return audio;
      default: throw std::invalid_argument("features(): not a continuous modality");
    }
  }
  FeatureSeq& features(ModalityKind k) {
    return const_cast<FeatureSeq&>(static_cast<const ProductSample&>(*this).features(k));
  }

  friend bool operator==(const ProductSample&, const ProductSample&) = default;
};

// Serialized length of a table: per entity [property, values..., SEP].
inline std::size_t table_serialized_length(const std::vector<TableEntity>& table) {
  std::size_t n = 0;
  for (const auto& e : table) n += 2 + e.value.size();
  return n;
}

struct CorpusConfig {
  std::uint64_t seed = 0;
  std::size_t num_samples = 2000;
  std::size_t num_categories = 50;
  real zipf_exponent = 1.0;
  std::size_t max_category_size = 0;  // 0 = uncapped
  std::size_t instances_per_category = 8;

  std::size_t latent_dim = 16;
  real instance_spread = 0.6;   // instance offset scale around its category
  real rho = 0.7;               // modality-correlation strength
  real modality_noise = 3.0;    // scale of the per-sample, per-modality noise
  real token_jitter = 0.5;      // per-token / per-row noise
  real feature_noise = 0.05;    // additive noise on continuous payloads
  real token_sharpness = 2.0;   // inverse temperature of token sampling

  std::size_t word_vocab = 128;
  std::size_t num_properties = 64;
  std::size_t text_min_len = 8;
  std::size_t text_max_len = 16;   // L_text
  std::size_t table_min_entities = 3;
  std::size_t table_max_entities = 8;
  std::size_t value_max_tokens = 2;
  std::size_t table_max_len = 32;  // L_table
  std::size_t image_dim = 32;
  std::size_t image_min_regions = 10;
  std::size_t image_max_regions = 14;
  std::size_t video_dim = 32;
  std::size_t video_min_frames = 3;
  std::size_t video_max_frames = 6;
  std::size_t audio_coeffs = 13;
  std::size_t audio_min_frames = 6;
  std::size_t audio_max_frames = 10;

  real incomplete_rate = 0.20;
  real unimodal_rate = 0.05;

  std::size_t vocab_size() const { return static_cast<std::size_t>(tokens::kFirstWord) + word_vocab + num_properties; }
  std::int64_t first_property_token() const { return tokens::kFirstWord + static_cast<std::int64_t>(word_vocab); }

  void validate() const {
    auto fail = [](const std::string& m) { throw std::invalid_argument("invalid corpus config: " + m); };
    if (num_samples == 0 || num_categories == 0 || instances_per_category == 0) fail("counts must be positive");
    if (num_categories > num_samples) fail("more categories than samples");
    if (num_categories * instances_per_category > num_samples) fail("more instances than samples");
    if (!(rho >= 0.0 && rho <= 1.0)) fail("rho must lie in [0, 1]");
    if (!(unimodal_rate >= 0.0 && unimodal_rate <= incomplete_rate && incomplete_rate <= 1.0)) {
      fail("need 0 <= unimodal_rate <= incomplete_rate <= 1");
    }
    if (zipf_exponent < 0.0) fail("zipf exponent must be non-negative");
    if (latent_dim == 0 || word_vocab == 0 || num_properties == 0) fail("dimensions must be positive");
    if (text_min_len == 0 || text_min_len > text_max_len) fail("text length range");
    if (table_min_entities == 0 || table_min_entities > table_max_entities) fail("table entity range");
    if (table_max_entities > num_properties) fail("more entities than properties");
    if (value_max_tokens == 0) fail("value_max_tokens must be positive");
    if (table_max_entities * (2 + value_max_tokens) > table_max_len) fail("table_max_len too small for entity range");
    if (image_min_regions == 0 || image_min_regions > image_max_regions) fail("image region range");
    if (video_min_frames == 0 || video_min_frames > video_max_frames) fail("video frame range");
    if (audio_min_frames == 0 || audio_min_frames > audio_max_frames) fail("audio frame range");
    if (image_dim == 0 || video_dim == 0 || audio_coeffs == 0) fail("feature dims must be positive");
    if (max_category_size != 0 && max_category_size * num_categories < num_samples) fail("category cap too small");
  }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(
    CorpusConfig, seed, num_samples, num_categories, zipf_exponent, max_category_size, instances_per_category,
    latent_dim, instance_spread, rho, modality_noise, token_jitter, feature_noise, token_sharpness, word_vocab,
    num_properties, text_min_len, text_max_len, table_min_entities, table_max_entities, value_max_tokens,
    table_max_len, image_dim, image_min_regions, image_max_regions, video_dim, video_min_frames, video_max_frames,
    audio_coeffs, audio_min_frames, audio_max_frames, incomplete_rate, unimodal_rate)

// Truncated Zipf weights 1/k^s for k = 1..n, normalized.
inline std::vector<real> zipf_weights(std::size_t n, real exponent) {
  std::vector<real> w(n);
  for (std::size_t k = 0; k < n; ++k) w[k] = std::pow(static_cast<real>(k + 1), -exponent);
  const real z = std::accumulate(w.begin(), w.end(), 0.0);
  for (real& v : w) v /= z;
  return w;
}

// Largest-remainder apportionment of `total` items to Zipf weights, each
// category receiving at least `min_size` and at most `cap` (0 = no cap).
inline std::vector<std::size_t> zipf_category_sizes(std::size_t total, std::size_t categories, real exponent,
                                                    std::size_t min_size, std::size_t cap) {
  if (categories * min_size > total) throw std::invalid_argument("zipf sizes: minimum exceeds total");
  const std::vector<real> w = zipf_weights(categories, exponent);
  std::vector<std::size_t> sizes(categories, min_size);
  std::vector<bool> open(categories, true);
  std::size_t remaining = total - categories * min_size;
  while (remaining > 0) {
    real open_mass = 0;
    for (std::size_t k = 0; k < categories; ++k) {
      if (open[k]) open_mass += w[k];
    }
    if (open_mass <= 0) throw std::invalid_argument("zipf sizes: cap leaves no room");
    std::vector<std::pair<real, std::size_t>> remainders;
    std::size_t assigned = 0;
    std::vector<std::size_t> add(categories, 0);
    for (std::size_t k = 0; k < categories; ++k) {
      if (!open[k]) continue;
      const real share = static_cast<real>(remaining) * w[k] / open_mass;
      add[k] = static_cast<std::size_t>(std::floor(share));
      assigned += add[k];
      remainders.emplace_back(share - std::floor(share), k);
    }
    std::stable_sort(remainders.begin(), remainders.end(),
                     [](const auto& a, const auto& b) { return a.first > b.first; });
    for (std::size_t i = 0; assigned < remaining && i < remainders.size(); ++i, ++assigned) {
      ++add[remainders[i].second];
    }
    remaining = 0;
    for (std::size_t k = 0; k < categories; ++k) {
      sizes[k] += add[k];
      if (cap != 0 && sizes[k] >= cap) {
        remaining += sizes[k] - cap;
        sizes[k] = cap;
        open[k] = false;
      }
    }
  }
  return sizes;
}

// Latent-factor generator. Every category owns a latent vector; each product
// instance is its category latent plus an offset; every present modality is a
// modality-specific projection of rho * instance + (1 - rho) * noise.
class CorpusGenerator {
 public:
  explicit CorpusGenerator(CorpusConfig config) : cfg_(std::move(config)) {
    cfg_.validate();
    std::mt19937_64 rng(derive_seed(cfg_.seed, 0xC0DE));
    std::normal_distribution<real> normal;
    const std::size_t dz = cfg_.latent_dim;
    const real inv = 1.0 / std::sqrt(static_cast<real>(dz));
    auto random_matrix = [&](std::size_t rows, real s) {
      std::vector<real> m(rows * dz);
      for (real& v : m) v = normal(rng) * s;
      return m;
    };
    text_proj_ = random_matrix(cfg_.word_vocab, inv);
    property_proj_ = random_matrix(cfg_.num_properties, inv);
    property_offset_ = random_matrix(cfg_.num_properties, 1.0);
    value_proj_ = random_matrix(cfg_.word_vocab, inv);
    image_proj_ = random_matrix(cfg_.image_dim, inv);
    video_proj_ = random_matrix(cfg_.video_dim, inv);
    audio_proj_ = random_matrix(cfg_.audio_coeffs, inv);
    category_latent_ = random_matrix(cfg_.num_categories, 1.0);
  }

  const CorpusConfig& config() const { return cfg_; }

  std::vector<ProductSample> generate() const {
    const std::size_t min_size = 1;
    const auto sizes = zipf_category_sizes(cfg_.num_samples, cfg_.num_categories, cfg_.zipf_exponent, min_size,
                                           cfg_.max_category_size);
    std::vector<ProductSample> out;
    out.reserve(cfg_.num_samples);
    for (std::size_t c = 0; c < cfg_.num_categories; ++c) {
      std::mt19937_64 rng(derive_seed(cfg_.seed, 1, c));
      std::uniform_int_distribution<std::size_t> pick_instance(0, cfg_.instances_per_category - 1);
      for (std::size_t j = 0; j < sizes[c]; ++j) {
        ProductSample s;
        s.id = out.size();
        s.category = c;
        // The first samples of a category cover every instance once.
        const std::size_t local = j < cfg_.instances_per_category ? j : pick_instance(rng);
        s.instance = c * cfg_.instances_per_category + local;
        s.presence.fill(true);
        out.push_back(std::move(s));
      }
    }
    assign_presence(out);
    for (ProductSample& s : out) fill_payloads(s);
    return out;
  }

  // Latent vector of an instance (category latent + instance offset).
  std::vector<real> instance_latent(std::size_t instance) const {
    const std::size_t c = instance / cfg_.instances_per_category;
    std::mt19937_64 rng(derive_seed(cfg_.seed, 2, instance));
    std::normal_distribution<real> normal;
    std::vector<real> z(cfg_.latent_dim);
    for (std::size_t d = 0; d < z.size(); ++d) {
      z[d] = category_latent_[c * cfg_.latent_dim + d] + cfg_.instance_spread * normal(rng);
    }
    return z;
  }

  // Maps a continuous payload back to latent space (transpose projection of
  // its mean row). Used to probe cross-modal correlation of the raw data.
  std::vector<real> latent_readout(const ProductSample& s, ModalityKind k) const {
    const FeatureSeq& f = s.features(k);
    const std::vector<real>& proj = projection(k);
    std::vector<real> z(cfg_.latent_dim, 0.0);
    if (f.empty()) return z;
    for (std::size_t r = 0; r < f.rows; ++r) {
      for (std::size_t i = 0; i < f.dim; ++i) {
        for (std::size_t d = 0; d < cfg_.latent_dim; ++d) z[d] += f.row(r)[i] * proj[i * cfg_.latent_dim + d];
      }
    }
    return z;
  }

 private:
  const std::vector<real>& projection(ModalityKind k) const {
    switch (k) {
      case ModalityKind::Image: return image_proj_;
      case ModalityKind::Video: return video_proj_;
      case ModalityKind::Audio: return audio_proj_;
      default: throw std::invalid_argument("projection(): not a continuous modality");
    }
  }

  // Exactly round(unimodal_rate * n) unimodal samples and
  // round(incomplete_rate * n) incomplete ones in total.
  void assign_presence(std::vector<ProductSample>& samples) const {
    const std::size_t n = samples.size();
    const std::size_t n_incomplete = static_cast<std::size_t>(std::llround(cfg_.incomplete_rate * static_cast<real>(n)));
    const std::size_t n_unimodal = static_cast<std::size_t>(std::llround(cfg_.unimodal_rate * static_cast<real>(n)));
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 rng(derive_seed(cfg_.seed, 3));
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t i = 0; i < n_incomplete && i < n; ++i) {
      ProductSample& s = samples[order[i]];
      std::array<std::size_t, kNumModalities> perm{0, 1, 2, 3, 4};
      std::shuffle(perm.begin(), perm.end(), rng);
      std::size_t keep = 1;
      if (i >= n_unimodal) keep = std::uniform_int_distribution<std::size_t>(2, kNumModalities - 1)(rng);
      s.presence.fill(false);
      for (std::size_t m = 0; m < keep; ++m) s.presence[perm[m]] = true;
    }
  }

  void fill_payloads(ProductSample& s) const {
    const std::size_t dz = cfg_.latent_dim;
    const std::vector<real> z = instance_latent(s.instance);
    // Payload structure (lengths, entity counts) is a property of the instance.
    std::mt19937_64 shape_rng(derive_seed(cfg_.seed, 4, s.instance));
    auto draw = [&](std::size_t lo, std::size_t hi) {
      return std::uniform_int_distribution<std::size_t>(lo, hi)(shape_rng);
    };
    const std::size_t text_len = draw(cfg_.text_min_len, cfg_.text_max_len);
    const std::size_t n_entities = draw(cfg_.table_min_entities, cfg_.table_max_entities);
    std::vector<std::size_t> value_lens(n_entities);
    for (auto& v : value_lens) v = draw(1, cfg_.value_max_tokens);
    const std::size_t n_regions = draw(cfg_.image_min_regions, cfg_.image_max_regions);
    const std::size_t n_frames = draw(cfg_.video_min_frames, cfg_.video_max_frames);
    const std::size_t n_audio = draw(cfg_.audio_min_frames, cfg_.audio_max_frames);

    std::mt19937_64 rng(derive_seed(cfg_.seed, 5, s.id));
    std::normal_distribution<real> normal;
    const real rho = cfg_.rho;

    // Per-modality source: rho * z + (1 - rho) * modality noise.
    auto modality_source = [&]() {
      std::vector<real> src(dz);
      for (std::size_t d = 0; d < dz; ++d) src[d] = rho * z[d] + (1.0 - rho) * cfg_.modality_noise * normal(rng);
      return src;
    };
    auto jittered = [&](const std::vector<real>& src) {
      std::vector<real> v(src);
      for (real& x : v) x += cfg_.token_jitter * normal(rng);
      return v;
    };
    auto project = [&](const std::vector<real>& proj, std::size_t rows, const std::vector<real>& v,
                       std::vector<real>& out, real bias_scale = 0.0, const real* bias = nullptr) {
      out.assign(rows, 0.0);
      for (std::size_t r = 0; r < rows; ++r) {
        real acc = 0;
        for (std::size_t d = 0; d < dz; ++d) acc += proj[r * dz + d] * (v[d] + (bias ? bias_scale * bias[d] : 0.0));
        out[r] = acc;
      }
    };
    auto sample_token = [&](const std::vector<real>& logits) {
      // Gumbel-max sampling from softmax(sharpness * logits).
      std::uniform_real_distribution<real> u(1e-12, 1.0);
      std::size_t best = 0;
      real best_v = -1e300;
      for (std::size_t i = 0; i < logits.size(); ++i) {
        const real v = cfg_.token_sharpness * logits[i] - std::log(-std::log(u(rng)));
        if (v > best_v) {
          best_v = v;
          best = i;
        }
      }
      return best;
    };
    auto continuous = [&](const std::vector<real>& proj, std::size_t rows, std::size_t dim) {
      FeatureSeq f;
      f.rows = rows;
      f.dim = dim;
      f.values.resize(rows * dim);
      const std::vector<real> src = modality_source();
      std::vector<real> tmp;
      for (std::size_t r = 0; r < rows; ++r) {
        project(proj, dim, jittered(src), tmp);
        for (std::size_t i = 0; i < dim; ++i) f.values[r * dim + i] = tmp[i] + cfg_.feature_noise * normal(rng);
      }
      return f;
    };

    std::vector<real> logits;
    // Text
    {
      const std::vector<real> src = modality_source();
      std::vector<std::int64_t> text(text_len);
      for (auto& t : text) {
        project(text_proj_, cfg_.word_vocab, jittered(src), logits);
        t = tokens::kFirstWord + static_cast<std::int64_t>(sample_token(logits));
      }
      if (s.present(ModalityKind::Text)) s.text = std::move(text);
    }
    // Table: distinct properties ranked by affinity, then value tokens.
    {
      const std::vector<real> src = modality_source();
      std::vector<TableEntity> table;
      project(property_proj_, cfg_.num_properties, jittered(src), logits);
      std::vector<bool> used(cfg_.num_properties, false);
      for (std::size_t e = 0; e < n_entities; ++e) {
        std::vector<real> masked = logits;
        for (std::size_t p = 0; p < masked.size(); ++p) {
          if (used[p]) masked[p] = -1e6;
        }
        const std::size_t prop = sample_token(masked);
        used[prop] = true;
        TableEntity ent;
        ent.property = cfg_.first_property_token() + static_cast<std::int64_t>(prop);
        for (std::size_t v = 0; v < value_lens[e]; ++v) {
          std::vector<real> vl;
          project(value_proj_, cfg_.word_vocab, jittered(src), vl, 0.5, &property_offset_[prop * dz]);
          ent.value.push_back(tokens::kFirstWord + static_cast<std::int64_t>(sample_token(vl)));
        }
        table.push_back(std::move(ent));
      }
      if (s.present(ModalityKind::Table)) s.table = std::move(table);
    }
    {
      FeatureSeq f = continuous(image_proj_, n_regions, cfg_.image_dim);
      if (s.present(ModalityKind::Image)) s.image = std::move(f);
    }
    {
      FeatureSeq f = continuous(video_proj_, n_frames, cfg_.video_dim);
      if (s.present(ModalityKind::Video)) s.video = std::move(f);
    }
    {
      FeatureSeq f = continuous(audio_proj_, n_audio, cfg_.audio_coeffs);
      if (s.present(ModalityKind::Audio)) s.audio = std::move(f);
    }
  }

  CorpusConfig cfg_;
  std::vector<real> text_proj_, property_proj_, property_offset_, value_proj_;
  std::vector<real> image_proj_, video_proj_, audio_proj_;
  std::vector<real> category_latent_;
};

inline std::vector<ProductSample> generate_corpus(const CorpusConfig& config) {
  return CorpusGenerator(config).generate();
}

}  // namespace scale
