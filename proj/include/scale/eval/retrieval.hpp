// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <stdexcept>
#include <vector>

#include "scale/numerics/tensor.hpp"

namespace scale::eval {

// AP@K normalized by min(R, K), where R is the number of relevant gallery
// items. `relevant` is the relevance of the ranked list (at least K long or
// the whole gallery).
inline real average_precision_at(const std::vector<bool>& relevant, std::size_t total_relevant, std::size_t k) {
  if (k == 0) throw std::invalid_argument("K must be at least 1");
  if (total_relevant == 0) return 0;
  std::size_t hits = 0;
  real sum = 0;
  for (std::size_t r = 0; r < std::min(k, relevant.size()); ++r) {
    if (!relevant[r]) continue;
    ++hits;
    sum += static_cast<real>(hits) / static_cast<real>(r + 1);
  }
  return sum / static_cast<real>(std::min(total_relevant, k));
}

inline real precision_at(const std::vector<bool>& relevant, std::size_t k) {
  if (k == 0) throw std::invalid_argument("K must be at least 1");
  std::size_t hits = 0;
  for (std::size_t r = 0; r < std::min(k, relevant.size()); ++r) hits += relevant[r] ? 1 : 0;
  return static_cast<real>(hits) / static_cast<real>(k);
}

struct RetrievalResult {
  std::vector<std::size_t> ks;
  std::vector<std::vector<std::size_t>> ranked;  // per scored query: top max(K) gallery ids
  std::vector<std::vector<real>> ap;             // [query][k index]
  std::vector<std::vector<real>> precision;      // [query][k index]
  std::map<std::size_t, real> mean_ap;           // K -> mAP@K
  std::map<std::size_t, real> mean_precision;    // K -> Prec@K
  std::size_t scored_queries = 0;
  std::size_t skipped_queries = 0;               // queries with no relevant gallery item
};

inline std::vector<real> row_norms(const Tensor& x) {
  std::vector<real> n(x.rows());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    real s = 0;
    for (real v : x.row(r)) s += v * v;
    n[r] = std::sqrt(s);
  }
  return n;
}

// Ranks the gallery by cosine similarity to each query (descending, ties by
// ascending gallery id). A gallery item is relevant when its label equals
// the query label (category for coarse, instance for fine-grained).
inline RetrievalResult retrieve(const Tensor& queries, const std::vector<std::size_t>& query_labels,
                                const Tensor& gallery, const std::vector<std::size_t>& gallery_labels,
                                const std::vector<std::size_t>& gallery_ids, std::vector<std::size_t> ks = {1, 5, 10}) {
  if (queries.cols() != gallery.cols()) throw ShapeError("retrieve: feature dims differ");
  if (query_labels.size() != queries.rows() || gallery_labels.size() != gallery.rows() ||
      gallery_ids.size() != gallery.rows()) {
    throw ShapeError("retrieve: label/id counts do not match features");
  }
  if (ks.empty() || *std::min_element(ks.begin(), ks.end()) == 0) throw std::invalid_argument("K must be at least 1");
  const std::size_t kmax = *std::max_element(ks.begin(), ks.end());

  std::map<std::size_t, std::size_t> label_count;
  for (std::size_t l : gallery_labels) ++label_count[l];
  const auto qn = row_norms(queries);
  const auto gn = row_norms(gallery);
  const std::size_t d = queries.cols();

  RetrievalResult res;
  res.ks = ks;
  std::vector<std::size_t> order(gallery.rows());
  std::vector<real> sim(gallery.rows());
  for (std::size_t q = 0; q < queries.rows(); ++q) {
    const std::size_t R = label_count.count(query_labels[q]) ? label_count[query_labels[q]] : 0;
    if (R == 0) {
      ++res.skipped_queries;
      continue;
    }
    for (std::size_t g = 0; g < gallery.rows(); ++g) {
      real dot = 0;
      for (std::size_t c = 0; c < d; ++c) dot += queries.at(q, c) * gallery.at(g, c);
      const real denom = qn[q] * gn[g];
      sim[g] = denom > 0 ? dot / denom : 0.0;
    }
    std::iota(order.begin(), order.end(), 0);
    const std::size_t top = std::min(kmax, order.size());
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(top), order.end(),
                      [&](std::size_t a, std::size_t b) {
                        if (sim[a] != sim[b]) return sim[a] > sim[b];
                        return gallery_ids[a] < gallery_ids[b];
                      });
    std::vector<bool> rel(top);
    std::vector<std::size_t> ranked(top);
    for (std::size_t r = 0; r < top; ++r) {
      rel[r] = gallery_labels[order[r]] == query_labels[q];
      ranked[r] = gallery_ids[order[r]];
    }
    std::vector<real> ap, pr;
    for (std::size_t k : ks) {
      ap.push_back(average_precision_at(rel, R, k));
      pr.push_back(precision_at(rel, k));
    }
    res.ranked.push_back(std::move(ranked));
    res.ap.push_back(std::move(ap));
    res.precision.push_back(std::move(pr));
  }
  res.scored_queries = res.ap.size();
  for (std::size_t i = 0; i < ks.size(); ++i) {
    real sa = 0, sp = 0;
    for (std::size_t q = 0; q < res.scored_queries; ++q) {
      sa += res.ap[q][i];
      sp += res.precision[q][i];
    }
    const real n = res.scored_queries ? static_cast<real>(res.scored_queries) : 1.0;
    res.mean_ap[ks[i]] = sa / n;
    res.mean_precision[ks[i]] = sp / n;
  }
  return res;
}

// Expected Prec@1 of a random ranking: mean over queries of R_q / |gallery|.
inline real chance_precision_at_1(const std::vector<std::size_t>& query_labels,
                                  const std::vector<std::size_t>& gallery_labels) {
  std::map<std::size_t, std::size_t> count;
  for (std::size_t l : gallery_labels) ++count[l];
  real total = 0;
  std::size_t n = 0;
  for (std::size_t l : query_labels) {
    if (!count.count(l)) continue;
    total += static_cast<real>(count[l]) / static_cast<real>(gallery_labels.size());
    ++n;
  }
  return n ? total / static_cast<real>(n) : 0.0;
}

}  // namespace scale::eval
