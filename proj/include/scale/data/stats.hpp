// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <array>
#include <map>
#include <vector>

#include <nlohmann/json.hpp>

#include "scale/data/corpus.hpp"

namespace scale {

struct LengthSummary {
  std::size_t count = 0;  // samples with the modality present
  std::size_t min = 0;
  std::size_t max = 0;
  real mean = 0;
};

struct CorpusStats {
  std::size_t num_samples = 0;
  std::map<std::size_t, std::size_t> category_histogram;
  std::size_t complete = 0;
  std::size_t incomplete = 0;
  std::size_t unimodal = 0;
  real incomplete_rate = 0;
  real unimodal_rate = 0;
  std::array<real, kNumModalities> missing_rate{};  // per modality absent fraction
  std::array<LengthSummary, kNumModalities> lengths{};
};

inline std::size_t payload_length(const ProductSample& s, ModalityKind k) {
  switch (k) {
    case ModalityKind::Text: return s.text.size();
    case ModalityKind::Table: return table_serialized_length(s.table);
    default: return s.features(k).rows;
  }
}

inline CorpusStats corpus_stats(const std::vector<ProductSample>& corpus) {
  CorpusStats st;
  st.num_samples = corpus.size();
  std::array<std::size_t, kNumModalities> missing{};
  std::array<std::size_t, kNumModalities> len_sum{};
  for (const auto& s : corpus) {
    ++st.category_histogram[s.category];
    const std::size_t present = s.present_count();
    if (present == kNumModalities) ++st.complete;
    else ++st.incomplete;
    if (present == 1) ++st.unimodal;
    for (ModalityKind k : kAllModalities) {
      const std::size_t i = index_of(k);
      if (!s.present(k)) {
        ++missing[i];
        continue;
      }
      const std::size_t len = payload_length(s, k);
      LengthSummary& ls = st.lengths[i];
      ls.min = ls.count == 0 ? len : std::min(ls.min, len);
      ls.max = std::max(ls.max, len);
      ++ls.count;
      len_sum[i] += len;
    }
  }
  if (!corpus.empty()) {
    const real n = static_cast<real>(corpus.size());
    st.incomplete_rate = static_cast<real>(st.incomplete) / n;
    st.unimodal_rate = static_cast<real>(st.unimodal) / n;
    for (std::size_t i = 0; i < kNumModalities; ++i) {
      st.missing_rate[i] = static_cast<real>(missing[i]) / n;
      if (st.lengths[i].count) st.lengths[i].mean = static_cast<real>(len_sum[i]) / static_cast<real>(st.lengths[i].count);
    }
  }
  return st;
}

inline nlohmann::json to_json(const CorpusStats& st) {
  nlohmann::json j;
  j["num_samples"] = st.num_samples;
  nlohmann::json hist = nlohmann::json::object();
  for (const auto& [c, n] : st.category_histogram) hist[std::to_string(c)] = n;
  j["category_histogram"] = hist;
  j["complete"] = st.complete;
  j["incomplete"] = st.incomplete;
  j["unimodal"] = st.unimodal;
  j["incomplete_rate"] = st.incomplete_rate;
  j["unimodal_rate"] = st.unimodal_rate;
  for (ModalityKind k : kAllModalities) {
    const std::size_t i = index_of(k);
    const std::string name(modality_name(k));
    j["missing_rate"][name] = st.missing_rate[i];
    j["lengths"][name] = {{"count", st.lengths[i].count},
                          {"min", st.lengths[i].min},
                          {"max", st.lengths[i].max},
                          {"mean", st.lengths[i].mean}};
  }
  return j;
}

}  // namespace scale
