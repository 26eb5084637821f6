// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

#include "scale/data/corpus.hpp"

namespace scale {

// Half-open range of serialized table positions covering one entity
// (property token plus value tokens; the trailing SEP is excluded).
struct EntitySpan {
  std::size_t begin = 0;
  std::size_t end = 0;
  std::size_t size() const { return end - begin; }
  friend bool operator==(const EntitySpan&, const EntitySpan&) = default;
};

// Model-ready view of a batch: per modality and sample either a token id
// sequence (text, table) or a feature matrix (image, video, audio).
struct BatchInputs {
  std::vector<std::size_t> sample_ids;
  std::vector<std::size_t> categories;
  std::vector<std::size_t> instances;
  std::array<std::vector<bool>, kNumModalities> present;
  std::array<std::vector<std::vector<std::int64_t>>, kNumModalities> ids;  // text, table
  std::array<std::vector<FeatureSeq>, kNumModalities> features;            // image, video, audio
  std::vector<std::vector<EntitySpan>> entities;                           // per sample table entities

  std::size_t size() const { return sample_ids.size(); }

  bool present_at(ModalityKind k, std::size_t b) const { return present[index_of(k)][b]; }

  // Input length of modality k for sample b (0 when absent).
  std::size_t length(ModalityKind k, std::size_t b) const {
    if (!present_at(k, b)) return 0;
    return is_discrete(k) ? ids[index_of(k)][b].size() : features[index_of(k)][b].rows;
  }

  friend bool operator==(const BatchInputs&, const BatchInputs&) = default;
};

inline void serialize_table(const std::vector<TableEntity>& table, std::vector<std::int64_t>& ids,
                            std::vector<EntitySpan>& spans) {
  ids.clear();
  spans.clear();
  for (const auto& e : table) {
    EntitySpan span;
    span.begin = ids.size();
    ids.push_back(e.property);
    ids.insert(ids.end(), e.value.begin(), e.value.end());
    span.end = ids.size();
    ids.push_back(tokens::kSep);
    spans.push_back(span);
  }
}

// `drop` removes modalities from every sample (used for subset runs).
inline BatchInputs make_batch(const std::vector<ProductSample>& corpus, std::span<const std::size_t> ids,
                              const ModalitySet& keep = ModalitySet::all()) {
  BatchInputs b;
  const std::size_t n = ids.size();
  b.entities.resize(n);
  for (std::size_t m = 0; m < kNumModalities; ++m) {
    b.present[m].assign(n, false);
    b.ids[m].resize(n);
    b.features[m].resize(n);
  }
  for (std::size_t i = 0; i < n; ++i) {
    const ProductSample& s = corpus.at(ids[i]);
    b.sample_ids.push_back(s.id);
    b.categories.push_back(s.category);
    b.instances.push_back(s.instance);
    for (ModalityKind k : kAllModalities) {
      const std::size_t m = index_of(k);
      if (!keep.contains(k) || !s.present(k)) continue;
      b.present[m][i] = true;
      switch (k) {
        case ModalityKind::Text: b.ids[m][i] = s.text; break;
        case ModalityKind::Table:
          if (s.table.empty()) throw std::invalid_argument("table marked present but empty");
          serialize_table(s.table, b.ids[m][i], b.entities[i]);
          break;
        default: b.features[m][i] = s.features(k); break;
      }
    }
  }
  return b;
}

}  // namespace scale
