// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

#include <unistd.h>

#include "scale/data/corpus_io.hpp"
#include "scale/data/splits.hpp"
#include "scale/data/stats.hpp"

using namespace scale;
namespace fs = std::filesystem;

namespace {

CorpusConfig small_config(std::uint64_t seed = 0) {
  CorpusConfig c;
  c.seed = seed;
  c.num_samples = 1000;
  c.num_categories = 20;
  c.instances_per_category = 4;
  return c;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

fs::path temp_dir(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("scale_datagen_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(p);
  return p;
}

real cosine(const std::vector<real>& a, const std::vector<real>& b) {
  real ab = 0, aa = 0, bb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  return ab / std::sqrt(aa * bb);
}

}  // namespace

TEST(Generate, ByteIdenticalAcrossRuns) {
  const CorpusConfig cfg = small_config(7);
  const fs::path a = temp_dir("a"), b = temp_dir("b");
  save_corpus(a, cfg, generate_corpus(cfg));
  save_corpus(b, cfg, generate_corpus(cfg));
  for (const char* f : {"manifest.json", "payloads.bin", "stats.json"}) {
    EXPECT_EQ(slurp(a / f), slurp(b / f)) << f;
  }
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST(Generate, DifferentSeedsDiffer) {
  EXPECT_NE(generate_corpus(small_config(1)), generate_corpus(small_config(2)));
}

TEST(Generate, ZeroIncompleteRateMeansAllPresent) {
  CorpusConfig cfg = small_config();
  cfg.incomplete_rate = 0;
  cfg.unimodal_rate = 0;
  for (const auto& s : generate_corpus(cfg)) EXPECT_EQ(s.present_count(), kNumModalities);
}

TEST(Generate, ZipfHeadDominatesTail) {
  const auto sizes = zipf_category_sizes(10000, 50, 1.0, 1, 0);
  ASSERT_EQ(sizes.size(), 50u);
  EXPECT_EQ(std::accumulate(sizes.begin(), sizes.end(), std::size_t{0}), 10000u);
  EXPECT_GE(sizes.front(), 10 * sizes.back());
  // Oracle: one guaranteed member plus the Zipf share of the remainder.
  real harmonic = 0;
  for (int k = 1; k <= 50; ++k) harmonic += 1.0 / k;
  for (std::size_t k = 0; k < 50; ++k) {
    const real ideal = 1.0 + 9950.0 / (static_cast<real>(k + 1) * harmonic);
    EXPECT_LT(std::abs(static_cast<real>(sizes[k]) - ideal), 1.0) << "category " << k;
  }
}

TEST(Generate, CorpusCategorySizesFollowZipf) {
  CorpusConfig cfg;
  cfg.num_samples = 10000;
  cfg.num_categories = 50;
  cfg.zipf_exponent = 1.0;
  const CorpusStats st = corpus_stats(generate_corpus(cfg));
  EXPECT_GE(st.category_histogram.at(0), 10 * st.category_histogram.at(49));
}

TEST(Generate, CapIsRespected) {
  const auto sizes = zipf_category_sizes(1000, 10, 1.0, 1, 150);
  EXPECT_EQ(std::accumulate(sizes.begin(), sizes.end(), std::size_t{0}), 1000u);
  for (std::size_t s : sizes) EXPECT_LE(s, 150u);
}

TEST(Generate, InfeasibleConfigErrors) {
  CorpusConfig cfg;
  cfg.num_samples = 100;
  cfg.num_categories = 50;
  cfg.instances_per_category = 8;
  try {
    generate_corpus(cfg);
    FAIL() << "expected error";
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find("more instances than samples"), std::string::npos);
  }
  cfg = CorpusConfig{};
  cfg.unimodal_rate = 0.5;
  cfg.incomplete_rate = 0.2;
  EXPECT_THROW(generate_corpus(cfg), std::invalid_argument);
  cfg = CorpusConfig{};
  cfg.rho = 1.5;
  EXPECT_THROW(generate_corpus(cfg), std::invalid_argument);
}

TEST(Generate, SampleInvariants) {
  const CorpusConfig cfg = small_config(3);
  const auto corpus = generate_corpus(cfg);
  ASSERT_EQ(corpus.size(), cfg.num_samples);
  const auto vocab = static_cast<std::int64_t>(cfg.vocab_size());
  std::set<std::size_t> instances;
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    const auto& s = corpus[i];
    EXPECT_EQ(s.id, i);
    EXPECT_GE(s.present_count(), 1u);
    EXPECT_EQ(s.instance / cfg.instances_per_category, s.category);
    instances.insert(s.instance);
    if (!s.present(ModalityKind::Text)) {
      EXPECT_TRUE(s.text.empty());
    }
    if (!s.present(ModalityKind::Table)) {
      EXPECT_TRUE(s.table.empty());
    }
    EXPECT_LE(s.text.size(), cfg.text_max_len);
    EXPECT_LE(table_serialized_length(s.table), cfg.table_max_len);
    for (auto t : s.text) {
      EXPECT_GE(t, tokens::kFirstWord);
      EXPECT_LT(t, vocab);
    }
    for (const auto& e : s.table) {
      EXPECT_GE(e.property, cfg.first_property_token());
      EXPECT_LT(e.property, vocab);
      for (auto t : e.value) EXPECT_LT(t, cfg.first_property_token());
    }
    for (ModalityKind k : {ModalityKind::Image, ModalityKind::Video, ModalityKind::Audio}) {
      const FeatureSeq& f = s.features(k);
      if (!s.present(k)) {
        EXPECT_TRUE(f.empty());
        EXPECT_TRUE(f.values.empty());
        continue;
      }
      EXPECT_EQ(f.values.size(), f.rows * f.dim);
      for (real v : f.values) EXPECT_TRUE(std::isfinite(v));
    }
    if (s.present(ModalityKind::Image)) {
      EXPECT_GE(s.image.rows, cfg.image_min_regions);
      EXPECT_LE(s.image.rows, cfg.image_max_regions);
      EXPECT_EQ(s.image.dim, cfg.image_dim);
    }
    if (s.present(ModalityKind::Audio)) {
      EXPECT_EQ(s.audio.dim, cfg.audio_coeffs);
    }
  }
  EXPECT_EQ(instances.size(), cfg.num_categories * cfg.instances_per_category);
}

TEST(Generate, RhoOneZeroNoiseSameInstanceIdentical) {
  CorpusConfig cfg = small_config(11);
  cfg.rho = 1.0;
  cfg.token_jitter = 0;
  cfg.feature_noise = 0;
  const auto corpus = generate_corpus(cfg);
  std::map<std::size_t, std::vector<std::size_t>> by_instance;
  for (const auto& s : corpus) by_instance[s.instance].push_back(s.id);
  std::size_t compared = 0;
  for (const auto& [inst, ids] : by_instance) {
    for (std::size_t i = 1; i < ids.size(); ++i) {
      const auto& a = corpus[ids[0]];
      const auto& b = corpus[ids[i]];
      for (ModalityKind k : {ModalityKind::Image, ModalityKind::Video, ModalityKind::Audio}) {
        if (!a.present(k) || !b.present(k)) continue;
        EXPECT_EQ(a.features(k), b.features(k));
        ++compared;
      }
    }
  }
  EXPECT_GT(compared, 100u);
}

TEST(Generate, RhoZeroDecorrelatesModalities) {
  CorpusConfig cfg = small_config(5);
  cfg.num_samples = 1500;
  cfg.rho = 0.0;
  cfg.incomplete_rate = 0;
  cfg.unimodal_rate = 0;
  const auto corpus = generate_corpus(cfg);
  const CorpusGenerator gen(cfg);
  real sum = 0;
  std::size_t pairs = 0;
  for (const auto& s : corpus) {
    sum += cosine(gen.latent_readout(s, ModalityKind::Image), gen.latent_readout(s, ModalityKind::Video));
    ++pairs;
  }
  ASSERT_GE(pairs, 1000u);
  EXPECT_NEAR(sum / static_cast<real>(pairs), 0.0, 0.05);
}

TEST(Generate, RhoHighCorrelatesModalities) {
  CorpusConfig cfg = small_config(5);
  cfg.rho = 0.9;
  cfg.incomplete_rate = 0;
  cfg.unimodal_rate = 0;
  const auto corpus = generate_corpus(cfg);
  const CorpusGenerator gen(cfg);
  real sum = 0;
  for (const auto& s : corpus) {
    sum += cosine(gen.latent_readout(s, ModalityKind::Image), gen.latent_readout(s, ModalityKind::Video));
  }
  EXPECT_GT(sum / static_cast<real>(corpus.size()), 0.3);
}

TEST(Splits, InvariantsHoldOverSeeds) {
  const auto corpus = generate_corpus(small_config(0));
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const Splits s = make_splits(corpus, SplitFractions{}, seed);
    EXPECT_EQ(check_split_invariants(corpus, s), "") << "seed " << seed;
    // Independent re-check of the same laws.
    std::set<std::size_t> train(s.train.begin(), s.train.end());
    std::set<std::size_t> eval;
    for (const auto* v : {&s.gallery_c, &s.query_c, &s.gallery_fg, &s.query_fg, &s.classification_test}) {
      for (std::size_t id : *v) {
        EXPECT_EQ(train.count(id), 0u);
        EXPECT_TRUE(eval.insert(id).second) << "id in two evaluation splits";
      }
    }
    for (std::size_t id : s.classification_train) EXPECT_EQ(train.count(id), 1u);
    for (std::size_t q : s.query_c) {
      bool match = false;
      for (std::size_t g : s.gallery_c) match = match || corpus[g].category == corpus[q].category;
      EXPECT_TRUE(match);
    }
    for (std::size_t q : s.query_fg) {
      bool match = false;
      for (std::size_t g : s.gallery_fg) match = match || corpus[g].instance == corpus[q].instance;
      EXPECT_TRUE(match);
    }
    std::set<std::size_t> query_cats;
    for (std::size_t q : s.query_c) query_cats.insert(corpus[q].category);
    std::size_t distractors = 0;
    for (std::size_t g : s.gallery_c) distractors += query_cats.count(corpus[g].category) == 0;
    EXPECT_GT(distractors, 0u);
  }
}

TEST(Splits, Deterministic) {
  const auto corpus = generate_corpus(small_config(0));
  EXPECT_EQ(make_splits(corpus, SplitFractions{}, 9), make_splits(corpus, SplitFractions{}, 9));
  EXPECT_NE(make_splits(corpus, SplitFractions{}, 9).query_c, make_splits(corpus, SplitFractions{}, 10).query_c);
}

TEST(Splits, NoEligibleQueryCategory) {
  const auto corpus = generate_corpus(small_config(0));
  const CorpusStats st = corpus_stats(corpus);
  std::size_t max_cat = 0;
  for (const auto& [c, n] : st.category_histogram) max_cat = std::max(max_cat, n);
  SplitFractions fr;
  fr.min_gallery_members = max_cat + 1;
  try {
    make_splits(corpus, fr, 0);
    FAIL() << "expected SplitError";
  } catch (const SplitError& e) {
    EXPECT_STREQ(e.what(), "no eligible query category");
  }
}

TEST(Splits, BadFractionsAndEmptyCorpus) {
  SplitFractions fr;
  fr.train = 0.9;
  EXPECT_THROW(make_splits(generate_corpus(small_config()), fr, 0), std::invalid_argument);
  EXPECT_THROW(make_splits({}, SplitFractions{}, 0), SplitError);
}

TEST(Stats, AllPresentHasZeroIncompleteRate) {
  CorpusConfig cfg = small_config();
  cfg.incomplete_rate = 0;
  cfg.unimodal_rate = 0;
  const CorpusStats st = corpus_stats(generate_corpus(cfg));
  EXPECT_EQ(st.incomplete_rate, 0.0);
  EXPECT_EQ(st.complete, cfg.num_samples);
}

TEST(Stats, HandCountedAudioMissing) {
  std::vector<ProductSample> corpus(100);
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    corpus[i].id = i;
    corpus[i].presence.fill(true);
    if (i < 20) corpus[i].presence[index_of(ModalityKind::Audio)] = false;
  }
  const CorpusStats st = corpus_stats(corpus);
  EXPECT_DOUBLE_EQ(st.incomplete_rate, 0.20);
  EXPECT_DOUBLE_EQ(st.unimodal_rate, 0.0);
  EXPECT_DOUBLE_EQ(st.missing_rate[index_of(ModalityKind::Audio)], 0.20);
  EXPECT_DOUBLE_EQ(st.missing_rate[index_of(ModalityKind::Text)], 0.0);
  EXPECT_NO_THROW(to_json(st).dump());
}

TEST(Stats, GeneratedRatesNearTargets) {
  CorpusConfig cfg;
  cfg.num_samples = 5000;
  cfg.incomplete_rate = 0.20;
  cfg.unimodal_rate = 0.05;
  const CorpusStats st = corpus_stats(generate_corpus(cfg));
  EXPECT_NEAR(st.incomplete_rate, 0.20, 0.02);
  EXPECT_NEAR(st.unimodal_rate, 0.05, 0.02);
}

TEST(CorpusIo, RoundTrip) {
  const CorpusConfig cfg = small_config(4);
  const auto corpus = generate_corpus(cfg);
  const fs::path dir = temp_dir("rt");
  save_corpus(dir, cfg, corpus);
  const LoadedCorpus lc = load_corpus(dir);
  EXPECT_EQ(lc.samples, corpus);
  EXPECT_EQ(nlohmann::json(lc.config), nlohmann::json(cfg));
  fs::remove_all(dir);
}

TEST(CorpusIo, BadMagicRejected) {
  const CorpusConfig cfg = small_config(4);
  const fs::path dir = temp_dir("magic");
  save_corpus(dir, cfg, generate_corpus(cfg));
  {
    std::fstream f(dir / "payloads.bin", std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(0);
    f.write("XXXXXXXX", 8);
  }
  EXPECT_THROW(load_corpus(dir), FormatError);
  fs::remove_all(dir);
}
