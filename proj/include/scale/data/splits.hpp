// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <random>
#include <set>
#include <stdexcept>
#include <vector>

#include <nlohmann/json.hpp>

#include "scale/data/corpus.hpp"

namespace scale {

struct SplitFractions {
  real train = 0.55;
  real coarse = 0.25;          // pool for query_c + gallery_c
  real fine = 0.10;            // pool for query_fg + gallery_fg
  real classification_test = 0.10;
  real query_share = 0.3;      // share of an eligible category's coarse pool used as queries
  real classification_train_share = 0.5;  // share of train reused as the classification train set
  std::size_t min_gallery_members = 10;

  void validate() const {
    const real total = train + coarse + fine + classification_test;
    if (train < 0 || coarse < 0 || fine < 0 || classification_test < 0 || total > 1.0 + 1e-12) {
      throw std::invalid_argument("split fractions must be non-negative and sum to at most 1");
    }
    if (!(query_share > 0 && query_share < 1)) throw std::invalid_argument("query_share must lie in (0, 1)");
    if (!(classification_train_share > 0 && classification_train_share <= 1)) {
      throw std::invalid_argument("classification_train_share must lie in (0, 1]");
    }
  }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(SplitFractions, train, coarse, fine, classification_test, query_share,
                                                classification_train_share, min_gallery_members)

struct Splits {
  std::vector<std::size_t> train;
  std::vector<std::size_t> gallery_c;
  std::vector<std::size_t> query_c;
  std::vector<std::size_t> gallery_fg;
  std::vector<std::size_t> query_fg;
  std::vector<std::size_t> classification_train;
  std::vector<std::size_t> classification_test;

  friend bool operator==(const Splits&, const Splits&) = default;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(Splits, train, gallery_c, query_c, gallery_fg, query_fg, classification_train,
                                   classification_test)

class SplitError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Stratified per category: each category's samples are shuffled and dealt
// into the train / coarse / fine / classification-test pools by fraction.
inline Splits make_splits(const std::vector<ProductSample>& corpus, const SplitFractions& fr, std::uint64_t seed) {
  fr.validate();
  if (corpus.empty()) throw SplitError("too-small corpus: empty");
  std::mt19937_64 rng(derive_seed(seed, 0x5917));

  std::map<std::size_t, std::vector<std::size_t>> by_category;
  for (const auto& s : corpus) by_category[s.category].push_back(s.id);

  Splits out;
  std::map<std::size_t, std::vector<std::size_t>> coarse_pool;
  std::vector<std::size_t> fine_pool;
  for (auto& [cat, ids] : by_category) {
    std::shuffle(ids.begin(), ids.end(), rng);
    const real n = static_cast<real>(ids.size());
    const std::size_t n_coarse = static_cast<std::size_t>(std::llround(fr.coarse * n));
    const std::size_t n_fine = static_cast<std::size_t>(std::llround(fr.fine * n));
    const std::size_t n_test = static_cast<std::size_t>(std::llround(fr.classification_test * n));
    std::size_t pos = 0;
    auto take = [&](std::size_t count, auto&& sink) {
      for (std::size_t i = 0; i < count && pos < ids.size(); ++i) sink(ids[pos++]);
    };
    take(n_coarse, [&](std::size_t id) { coarse_pool[cat].push_back(id); });
    take(n_fine, [&](std::size_t id) { fine_pool.push_back(id); });
    take(n_test, [&](std::size_t id) { out.classification_test.push_back(id); });
    const std::size_t n_train = std::min(ids.size() - pos, static_cast<std::size_t>(std::llround(fr.train * n)));
    take(n_train, [&](std::size_t id) { out.train.push_back(id); });
  }

  // Coarse retrieval: queries only from categories whose gallery share keeps
  // at least min_gallery_members; other categories become distractors.
  std::vector<std::size_t> eligible;
  for (const auto& [cat, ids] : coarse_pool) {
    const std::size_t nq = std::max<std::size_t>(1, static_cast<std::size_t>(std::floor(fr.query_share * ids.size())));
    if (ids.size() >= nq + fr.min_gallery_members && ids.size() > nq) eligible.push_back(cat);
  }
  if (eligible.empty()) throw SplitError("no eligible query category");
  if (eligible.size() == coarse_pool.size()) {
    if (eligible.size() < 2) throw SplitError("too-small corpus: no distractor category available");
    // Keep the smallest eligible category as a distractor.
    auto smallest = std::min_element(eligible.begin(), eligible.end(), [&](std::size_t a, std::size_t b) {
      return coarse_pool[a].size() < coarse_pool[b].size();
    });
    eligible.erase(smallest);
  }
  const std::set<std::size_t> query_cats(eligible.begin(), eligible.end());
  for (const auto& [cat, ids] : coarse_pool) {
    std::size_t nq = 0;
    if (query_cats.count(cat)) {
      nq = std::max<std::size_t>(1, static_cast<std::size_t>(std::floor(fr.query_share * ids.size())));
    }
    for (std::size_t i = 0; i < ids.size(); ++i) (i < nq ? out.query_c : out.gallery_c).push_back(ids[i]);
  }

  // Fine-grained retrieval: one query per instance with at least two pool
  // members; the rest (and singleton instances) go to the gallery.
  std::map<std::size_t, std::vector<std::size_t>> by_instance;
  for (std::size_t id : fine_pool) by_instance[corpus[id].instance].push_back(id);
  for (const auto& [inst, ids] : by_instance) {
    for (std::size_t i = 0; i < ids.size(); ++i) {
      (i == 0 && ids.size() >= 2 ? out.query_fg : out.gallery_fg).push_back(ids[i]);
    }
  }
  if (out.query_fg.empty()) throw SplitError("no eligible query instance");

  std::vector<std::size_t> train_shuffled = out.train;
  std::shuffle(train_shuffled.begin(), train_shuffled.end(), rng);
  const std::size_t n_cls = std::max<std::size_t>(
      1, static_cast<std::size_t>(std::llround(fr.classification_train_share * static_cast<real>(train_shuffled.size()))));
  out.classification_train.assign(train_shuffled.begin(),
                                  train_shuffled.begin() + static_cast<std::ptrdiff_t>(std::min(n_cls, train_shuffled.size())));
  if (out.train.empty() || out.classification_test.empty()) throw SplitError("too-small corpus: empty train or test split");

  for (auto* v : {&out.train, &out.gallery_c, &out.query_c, &out.gallery_fg, &out.query_fg, &out.classification_train,
                  &out.classification_test}) {
    std::sort(v->begin(), v->end());
  }
  return out;
}

// Returns an empty string when every invariant holds, else the first violation.
inline std::string check_split_invariants(const std::vector<ProductSample>& corpus, const Splits& s) {
  const std::set<std::size_t> train(s.train.begin(), s.train.end());
  for (const auto* v : {&s.gallery_c, &s.query_c, &s.gallery_fg, &s.query_fg, &s.classification_test}) {
    for (std::size_t id : *v) {
      if (train.count(id)) return "train overlaps an evaluation split at id " + std::to_string(id);
    }
  }
  std::set<std::size_t> gallery_cats, query_cats, gallery_insts;
  for (std::size_t id : s.gallery_c) gallery_cats.insert(corpus[id].category);
  for (std::size_t id : s.query_c) query_cats.insert(corpus[id].category);
  for (std::size_t id : s.gallery_fg) gallery_insts.insert(corpus[id].instance);
  for (std::size_t id : s.query_c) {
    if (!gallery_cats.count(corpus[id].category)) return "query_c sample without category match";
  }
  for (std::size_t id : s.query_fg) {
    if (!gallery_insts.count(corpus[id].instance)) return "query_fg sample without instance match";
  }
  bool distractor = false;
  for (std::size_t id : s.gallery_c) distractor = distractor || !query_cats.count(corpus[id].category);
  if (!distractor) return "gallery_c has no distractors";
  return {};
}

}  // namespace scale
