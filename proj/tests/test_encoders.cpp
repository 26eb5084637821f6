// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <set>

#include "test_util.hpp"

using namespace scale;
using namespace scale::testing;

namespace {

const std::vector<ModalityKind> kAll(kAllModalities.begin(), kAllModalities.end());

struct Fixture {
  CorpusConfig cc = tiny_corpus_config();
  ModelConfig mc = tiny_model_config(cc);
  std::vector<ProductSample> corpus;

  explicit Fixture(std::size_t n = 3, std::uint64_t seed = 5) {
    std::mt19937_64 rng(seed);
    for (std::size_t i = 0; i < n; ++i) corpus.push_back(make_sample(cc, i, rng, 3 + i, 2 + i, 4 + i, 2 + i, 3 + i));
  }

  BatchInputs batch(const std::vector<std::size_t>& ids) const { return make_batch(corpus, ids); }
};

}  // namespace

TEST(Encoders, AbsentModalityIsZeroAndMasked) {
  Fixture f;
  for (ModalityKind k : kAll) drop_modality(f.corpus[1], k);
  f.corpus[1].presence[index_of(ModalityKind::Text)] = true;
  f.corpus[1].text = {tokens::kFirstWord};
  ScaleModel model(f.mc);
  const BatchInputs b = f.batch({0, 1, 2});
  for (ModalityKind k : kAll) {
    if (k == ModalityKind::Text) continue;
    const ModalityTokens mt = model.encode(k, b);
    EXPECT_TRUE(row_is_zero(mt.pooled.value(), 1)) << modality_name(k);
    EXPECT_FALSE(row_is_zero(mt.pooled.value(), 0)) << modality_name(k);
    for (std::size_t t = 0; t < mt.layout.seq; ++t) {
      EXPECT_FALSE(mt.layout.valid[mt.layout.row(1, t)]);
      EXPECT_TRUE(row_is_zero(mt.tokens.value(), mt.layout.row(1, t)));
    }
  }
}

TEST(Encoders, ShapeLawOnePlusLength) {
  const CorpusConfig cc = tiny_corpus_config();
  ModelConfig mc = tiny_model_config(cc);
  mc.max_image_regions = 36;
  ScaleModel model(mc);
  std::mt19937_64 rng(1);
  ProductSample s = make_sample(cc, 0, rng, 1, 1, 10, 1, 8);
  const std::vector<ProductSample> corpus{s};
  const BatchInputs b = make_batch(corpus, std::vector<std::size_t>{0});
  EXPECT_EQ(model.encode(ModalityKind::Text, b).layout.seq, 2u);
  EXPECT_EQ(model.encode(ModalityKind::Image, b).layout.seq, 11u);
  EXPECT_EQ(model.encode(ModalityKind::Video, b).layout.seq, 2u);
  EXPECT_EQ(model.encode(ModalityKind::Audio, b).layout.seq, 9u);
  const ModalityTokens text = model.encode(ModalityKind::Text, b);
  EXPECT_EQ(text.tokens.rows(), 2u);
  EXPECT_EQ(text.tokens.cols(), mc.hidden);
  EXPECT_EQ(text.pooled.rows(), 1u);
}

TEST(Encoders, BatchPermutationPermutesOutputs) {
  Fixture f(4);
  ScaleModel model(f.mc);
  const std::vector<std::size_t> ids{0, 1, 2, 3}, perm{2, 0, 3, 1};
  const BatchInputs a = f.batch(ids), b = f.batch(perm);
  for (ModalityKind k : kAll) {
    const Tensor pa = model.encode(k, a).pooled.value();
    const Tensor pb = model.encode(k, b).pooled.value();
    for (std::size_t i = 0; i < perm.size(); ++i) EXPECT_LT(max_row_diff(pb, i, pa, perm[i]), 1e-12);
  }
}

TEST(Encoders, PerSamplePurity) {
  Fixture f(3);
  ScaleModel model(f.mc);
  const BatchInputs before = f.batch({0, 1, 2});
  for (real& v : f.corpus[2].image.values) v += 3.0;
  f.corpus[2].text[0] = tokens::kFirstWord + 1;
  const BatchInputs after = f.batch({0, 1, 2});
  for (ModalityKind k : {ModalityKind::Image, ModalityKind::Text}) {
    const Tensor pa = model.encode(k, before).pooled.value();
    const Tensor pb = model.encode(k, after).pooled.value();
    EXPECT_EQ(max_row_diff(pa, 0, pb, 0), 0.0);
    EXPECT_EQ(max_row_diff(pa, 1, pb, 1), 0.0);
    EXPECT_GT(max_row_diff(pa, 2, pb, 2), 0.0);
  }
}

TEST(Encoders, TablePresentButEmptyErrors) {
  Fixture f(1);
  f.corpus[0].table.clear();
  try {
    f.batch({0});
    FAIL() << "expected error";
  } catch (const std::invalid_argument& e) {
    EXPECT_STREQ(e.what(), "table marked present but empty");
  }
}

TEST(Encoders, TableSerializationCountsAndBoundaries) {
  Fixture f(1);
  ScaleModel model(f.mc);
  std::vector<TableEntity> table(3);
  for (std::size_t e = 0; e < 3; ++e) {
    table[e].property = f.cc.first_property_token() + static_cast<std::int64_t>(e);
    table[e].value = {tokens::kFirstWord + static_cast<std::int64_t>(e)};
  }
  f.corpus[0].table = table;
  const BatchInputs b = f.batch({0});
  // Each entity: property + one value token + a SEP boundary.
  EXPECT_EQ(b.ids[index_of(ModalityKind::Table)][0].size(), 9u);
  EXPECT_EQ(model.encode(ModalityKind::Table, b).layout.seq, 1u + 3u * 3u);
  const std::vector<EntitySpan> expected{{0, 2}, {3, 5}, {6, 8}};
  EXPECT_EQ(b.entities[0], expected);
  for (std::size_t i : {2u, 5u, 8u}) EXPECT_EQ(b.ids[index_of(ModalityKind::Table)][0][i], tokens::kSep);
}

TEST(Encoders, StackedModeBypassesTableEncoder) {
  Fixture f(2);
  f.mc.text_table = TextTableEncoding::Stacked;
  ScaleModel model(f.mc);
  EXPECT_FALSE(model.has_encoder(ModalityKind::Table));
  EXPECT_TRUE(model.params().with_prefix("encoder.table").empty());
  const BatchInputs b = f.batch({0, 1});
  const ForwardOutput out = model.forward(b);
  EXPECT_EQ(out.tokens(ModalityKind::Text)->layout.seq,
            1 + std::max(b.length(ModalityKind::Text, 0) + b.length(ModalityKind::Table, 0),
                         b.length(ModalityKind::Text, 1) + b.length(ModalityKind::Table, 1)));
  model.params().zero_grad();
  backward(probe_loss(out.fused.fused));
  EXPECT_EQ(grad_abs_sum(model.params(), "encoder.table"), 0.0);
  EXPECT_GT(grad_abs_sum(model.params(), "encoder.text"), 0.0);
}

TEST(Encoders, ImageAtMinimumRegions) {
  Fixture f(1);
  ScaleModel model(f.mc);
  std::mt19937_64 rng(3);
  f.corpus[0].image = random_features(f.cc.image_min_regions, f.cc.image_dim, rng);
  EXPECT_EQ(model.encode(ModalityKind::Image, f.batch({0})).layout.seq, f.cc.image_min_regions + 1);
}

TEST(Encoders, DuplicateRegionsDifferOnlyByPosition) {
  Fixture f(1);
  ScaleModel model(f.mc);
  std::mt19937_64 rng(3);
  FeatureSeq img = random_features(3, f.cc.image_dim, rng);
  std::copy(img.row(0), img.row(0) + img.dim, img.row(1));
  f.corpus[0].image = img;
  const BatchInputs b = f.batch({0});
  const ModalityTokens distinct = model.encode(ModalityKind::Image, b);
  EXPECT_GT(max_row_diff(distinct.tokens.value(), 1, distinct.tokens.value(), 2), 1e-9);
  // Equal positional rows leave nothing to tell the duplicates apart.
  Tensor& pos = model.params().get("encoder.image.position_embedding").value;
  for (std::size_t h = 0; h < f.mc.hidden; ++h) pos.at(2, h) = pos.at(1, h);
  const ModalityTokens tied = model.encode(ModalityKind::Image, b);
  EXPECT_LT(max_row_diff(tied.tokens.value(), 1, tied.tokens.value(), 2), 1e-12);
  EXPECT_GT(max_row_diff(tied.tokens.value(), 1, tied.tokens.value(), 3), 1e-9);
}

TEST(Encoders, ReversedFramesChangePooledOutput) {
  Fixture f(1);
  ScaleModel model(f.mc);
  const Tensor a = model.encode(ModalityKind::Video, f.batch({0})).pooled.value();
  FeatureSeq& v = f.corpus[0].video;
  FeatureSeq rev = v;
  for (std::size_t r = 0; r < v.rows; ++r) std::copy(v.row(r), v.row(r) + v.dim, rev.row(v.rows - 1 - r));
  v = rev;
  const Tensor b = model.encode(ModalityKind::Video, f.batch({0})).pooled.value();
  EXPECT_GT(max_row_diff(a, 0, b, 0), 1e-6);
}

TEST(Encoders, SilentAudioIsValidAndNonzero) {
  Fixture f(1);
  ScaleModel model(f.mc);
  std::fill(f.corpus[0].audio.values.begin(), f.corpus[0].audio.values.end(), 0.0);
  const ModalityTokens mt = model.encode(ModalityKind::Audio, f.batch({0}));
  EXPECT_FALSE(row_is_zero(mt.pooled.value(), 0));
}

TEST(Encoders, WrongFeatureDimErrors) {
  Fixture f(1);
  ScaleModel model(f.mc);
  std::mt19937_64 rng(3);
  f.corpus[0].image = random_features(4, f.cc.image_dim + 1, rng);
  EXPECT_THROW(model.encode(ModalityKind::Image, f.batch({0})), std::invalid_argument);
}

TEST(Encoders, OutOfVocabularyAndOverLengthError) {
  Fixture f(1);
  ScaleModel model(f.mc);
  f.corpus[0].text[0] = static_cast<std::int64_t>(f.mc.vocab_size);
  EXPECT_THROW(model.encode(ModalityKind::Text, f.batch({0})), std::out_of_range);
  f.corpus[0].text.assign(f.mc.max_text_len + 1, tokens::kFirstWord);
  EXPECT_THROW(model.encode(ModalityKind::Text, f.batch({0})), std::invalid_argument);
}

TEST(Encoders, TypeEmbeddingsAreDistinctParameters) {
  Fixture f(1);
  ScaleModel model(f.mc);
  std::set<std::string> names;
  std::vector<const Tensor*> values;
  for (ModalityKind k : kAll) {
    const std::string name = "encoder." + std::string(modality_name(k)) + ".type_embedding";
    ASSERT_TRUE(model.params().contains(name)) << name;
    EXPECT_TRUE(names.insert(name).second);
    values.push_back(&model.params().get(name).value);
  }
  for (std::size_t i = 0; i < values.size(); ++i) {
    for (std::size_t j = i + 1; j < values.size(); ++j) EXPECT_FALSE(*values[i] == *values[j]);
  }
}

TEST(Encoders, NoGradientIntoAbsentModalityEncoder) {
  Fixture f(2);
  drop_modality(f.corpus[1], ModalityKind::Image);
  ScaleModel model(f.mc);
  const ForwardOutput out = model.forward(f.batch({0, 1}));
  model.params().zero_grad();
  backward(probe_loss(ops::slice_rows(out.fused.fused, 1, 2)));
  EXPECT_EQ(grad_abs_sum(model.params(), "encoder.image"), 0.0);
  EXPECT_GT(grad_abs_sum(model.params(), "encoder.video"), 0.0);
  model.params().zero_grad();
  backward(probe_loss(ops::slice_rows(out.fused.fused, 0, 1)));
  EXPECT_GT(grad_abs_sum(model.params(), "encoder.image"), 0.0);
}

TEST(Encoders, MeanPoolingFlag) {
  Fixture f(2);
  f.mc.pooling = Pooling::Mean;
  drop_modality(f.corpus[1], ModalityKind::Audio);
  ScaleModel model(f.mc);
  const ModalityTokens mt = model.encode(ModalityKind::Audio, f.batch({0, 1}));
  EXPECT_TRUE(row_is_zero(mt.pooled.value(), 1));
  std::vector<real> mean(f.mc.hidden, 0.0);
  std::size_t n = 0;
  for (std::size_t t = 0; t < mt.layout.seq; ++t) {
    if (!mt.layout.valid[mt.layout.row(0, t)]) continue;
    ++n;
    for (std::size_t h = 0; h < f.mc.hidden; ++h) mean[h] += mt.tokens.value().at(mt.layout.row(0, t), h);
  }
  for (std::size_t h = 0; h < f.mc.hidden; ++h) EXPECT_NEAR(mt.pooled.value().at(0, h), mean[h] / n, 1e-12);
}
