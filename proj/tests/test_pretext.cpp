// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <chrono>
#include <cmath>
#include <set>

#include "overfit.hpp"

using namespace scale;
using namespace scale::testing;

namespace {

constexpr auto kText = ModalityKind::Text;
constexpr auto kTable = ModalityKind::Table;
constexpr auto kImage = ModalityKind::Image;

// Batch holding only what the planner reads.
BatchInputs text_batch(const std::vector<std::size_t>& lengths) {
  BatchInputs b;
  const std::size_t n = lengths.size();
  for (std::size_t i = 0; i < n; ++i) b.sample_ids.push_back(i);
  b.categories.assign(n, 0);
  b.instances.assign(n, 0);
  b.entities.assign(n, {});
  for (std::size_t m = 0; m < kNumModalities; ++m) {
    b.present[m].assign(n, false);
    b.ids[m].assign(n, {});
    b.features[m].assign(n, {});
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (lengths[i] == 0) continue;
    b.present[index_of(kText)][i] = true;
    for (std::size_t t = 0; t < lengths[i]; ++t) {
      b.ids[index_of(kText)][i].push_back(tokens::kFirstWord + static_cast<std::int64_t>(t % 7));
    }
  }
  return b;
}

// Adds a table to sample i with entities of the given position counts.
void set_table(BatchInputs& b, std::size_t i, const std::vector<std::size_t>& entity_sizes) {
  std::vector<TableEntity> table;
  for (std::size_t s : entity_sizes) {
    TableEntity e;
    e.property = 200;
    e.value.assign(s - 1, tokens::kFirstWord);
    table.push_back(e);
  }
  b.present[index_of(kTable)][i] = true;
  serialize_table(table, b.ids[index_of(kTable)][i], b.entities[i]);
}

MaskOptions options(real rate = 0.15, TableMaskMode mode = TableMaskMode::Entity) {
  MaskOptions o;
  o.rate = rate;
  o.table_mode = mode;
  return o;
}

MaskPlan empty_plan(std::size_t batch) {
  MaskPlan p;
  p.table_entities.assign(batch, {});
  for (std::size_t m = 0; m < kNumModalities; ++m) {
    p.positions[m].assign(batch, {});
    p.replacement[m].assign(batch, {});
  }
  return p;
}

struct ModelFixture {
  CorpusConfig cc;
  ModelConfig mc;
  std::vector<ProductSample> corpus;

  ModelFixture() {
    cc = tiny_corpus_config();
    cc.image_dim = 4;
    mc = tiny_model_config(cc);
    std::mt19937_64 rng(12);
    for (std::size_t i = 0; i < 3; ++i) corpus.push_back(make_sample(cc, i, rng, 4, 3, 4, 3, 4));
  }
};

void zero_head_weight(ScaleModel& model, ModalityKind k) {
  model.params().get("head." + std::string(modality_name(k)) + ".weight").value.fill(0.0);
}

}  // namespace

TEST(MaskCount, RoundWithMinimumOne) {
  EXPECT_EQ(mask_count(100, 0.15), 15u);
  EXPECT_EQ(mask_count(3, 0.15), 1u);
  EXPECT_EQ(mask_count(10, 0.15), 2u);  // 1.5 rounds half away from zero
  EXPECT_EQ(mask_count(0, 0.15), 0u);
  EXPECT_EQ(mask_count(1, 0.9), 1u);
}

TEST(PlanMasks, ExactlyFifteenOfHundred) {
  const BatchInputs b = text_batch({100});
  std::mt19937_64 rng(1);
  const MaskPlan plan = plan_masks(b, options(), rng);
  EXPECT_EQ(plan.positions[index_of(kText)][0].size(), 15u);
  std::set<std::size_t> unique(plan.positions[index_of(kText)][0].begin(), plan.positions[index_of(kText)][0].end());
  EXPECT_EQ(unique.size(), 15u);
}

TEST(PlanMasks, EntitySizesTwoThreeFiveMaskOneWholeEntity) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    BatchInputs b = text_batch({0});
    set_table(b, 0, {2, 3, 5});
    std::mt19937_64 rng(seed);
    const MaskPlan plan = plan_masks(b, options(), rng);
    ASSERT_EQ(plan.table_entities[0].size(), 1u);
    const EntitySpan span = b.entities[0][plan.table_entities[0][0]];
    std::vector<std::size_t> expected;
    for (std::size_t p = span.begin; p < span.end; ++p) expected.push_back(p);
    EXPECT_EQ(plan.positions[index_of(kTable)][0], expected);
  }
}

TEST(PlanMasks, RateBoundsError) {
  const BatchInputs b = text_batch({10});
  std::mt19937_64 rng(1);
  for (real r : {1.0, 0.0, -0.1, 1.5}) {
    try {
      plan_masks(b, options(r), rng);
      FAIL() << "rate " << r;
    } catch (const std::invalid_argument& e) {
      EXPECT_STREQ(e.what(), "rate out of range");
    }
  }
}

TEST(PlanMasks, DeterministicPerSeed) {
  const BatchInputs b = text_batch({40, 30, 20});
  std::mt19937_64 r1(5), r2(5);
  EXPECT_EQ(plan_masks(b, options(), r1).positions, plan_masks(b, options(), r2).positions);
}

TEST(PlanMasks, EntityAtomicityOnRandomTables) {
  std::mt19937_64 gen(2024);
  std::uniform_int_distribution<std::size_t> n_ent(1, 10), ent_size(2, 6), n_samples(1, 4);
  std::uniform_real_distribution<real> rate(0.05, 0.95);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = n_samples(gen);
    BatchInputs b = text_batch(std::vector<std::size_t>(n, 0));
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<std::size_t> sizes(n_ent(gen));
      for (auto& s : sizes) s = ent_size(gen);
      set_table(b, i, sizes);
    }
    const real r = rate(gen);
    const MaskPlan plan = plan_masks(b, options(r), gen);
    for (std::size_t i = 0; i < n; ++i) {
      const auto& pos = plan.positions[index_of(kTable)][i];
      const std::set<std::size_t> masked(pos.begin(), pos.end());
      const std::set<std::size_t> chosen(plan.table_entities[i].begin(), plan.table_entities[i].end());
      const auto& spans = b.entities[i];
      std::size_t expected_entities = std::llround(r * static_cast<real>(spans.size()));
      expected_entities = std::clamp<std::size_t>(expected_entities, 1, spans.size());
      EXPECT_EQ(chosen.size(), expected_entities);
      std::size_t covered = 0;
      for (std::size_t e = 0; e < spans.size(); ++e) {
        std::size_t hit = 0;
        for (std::size_t p = spans[e].begin; p < spans[e].end; ++p) hit += masked.count(p);
        ASSERT_TRUE(hit == 0 || hit == spans[e].size()) << "entity partially masked";
        EXPECT_EQ(hit > 0, chosen.count(e) == 1);
        covered += hit;
      }
      EXPECT_EQ(covered, masked.size()) << "masked a boundary position";
    }
  }
}

TEST(PlanMasks, TokenModeMasksTablePositionsIndividually) {
  BatchInputs b = text_batch({0});
  set_table(b, 0, {4, 4, 4, 4, 4});  // 20 maskable positions
  std::mt19937_64 rng(3);
  const MaskPlan plan = plan_masks(b, options(0.15, TableMaskMode::Token), rng);
  EXPECT_EQ(plan.positions[index_of(kTable)][0].size(), 3u);
  EXPECT_TRUE(plan.table_entities[0].empty());
  for (std::size_t p : plan.positions[index_of(kTable)][0]) {
    EXPECT_NE(b.ids[index_of(kTable)][0][p], tokens::kSep);
  }
}

TEST(PlanMasks, NeverTouchesPaddingOrAbsentPositions) {
  const BatchInputs b = text_batch({12, 0, 3, 30});
  std::mt19937_64 rng(9);
  for (int rep = 0; rep < 50; ++rep) {
    const MaskPlan plan = plan_masks(b, options(0.5), rng);
    for (std::size_t i = 0; i < b.size(); ++i) {
      for (std::size_t p : plan.positions[index_of(kText)][i]) EXPECT_LT(p, b.length(kText, i));
    }
    EXPECT_TRUE(plan.positions[index_of(kText)][1].empty());
    for (ModalityKind k : {kImage, ModalityKind::Video, ModalityKind::Audio, kTable}) {
      for (const auto& v : plan.positions[index_of(k)]) EXPECT_TRUE(v.empty());
    }
  }
}

TEST(PlanMasks, BertReplacementSplit) {
  const BatchInputs b = text_batch({1000});
  MaskOptions o = options(0.5);
  o.bert_replacement = true;
  o.vocab_size = 50;
  std::mt19937_64 rng(4);
  const MaskPlan plan = plan_masks(b, o, rng);
  std::size_t mask = 0, kept = 0, other = 0;
  const auto& pos = plan.positions[index_of(kText)][0];
  for (std::size_t i = 0; i < pos.size(); ++i) {
    const auto tok = plan.replacement[index_of(kText)][0][i];
    if (tok == tokens::kMask) ++mask;
    else if (tok == b.ids[index_of(kText)][0][pos[i]]) ++kept;
    else ++other;
  }
  const real n = static_cast<real>(pos.size());
  EXPECT_NEAR(mask / n, 0.8, 0.05);
  EXPECT_GT(kept / n, 0.05);
  EXPECT_GT(other / n, 0.05);
  o.bert_replacement = false;
  const MaskPlan plain = plan_masks(b, o, rng);
  for (auto tok : plain.replacement[index_of(kText)][0]) EXPECT_EQ(tok, tokens::kMask);
}

TEST(ApplyMasks, EmptyPlanIsIdentity) {
  ModelFixture f;
  const BatchInputs b = make_batch(f.corpus, iota_ids(3));
  const auto [masked, targets] = apply_masks(b, empty_plan(3));
  EXPECT_EQ(masked, b);
  for (std::size_t m = 0; m < kNumModalities; ++m) {
    for (const auto& v : targets.ids[m]) EXPECT_TRUE(v.empty());
    for (const auto& v : targets.rows[m]) EXPECT_TRUE(v.empty());
  }
}

TEST(ApplyMasks, AllPositionsZeroOneImage) {
  ModelFixture f;
  const BatchInputs b = make_batch(f.corpus, iota_ids(3));
  MaskPlan plan = empty_plan(3);
  for (std::size_t p = 0; p < b.length(kImage, 1); ++p) plan.positions[index_of(kImage)][1].push_back(p);
  const auto [masked, targets] = apply_masks(b, plan);
  for (real v : masked.features[index_of(kImage)][1].values) EXPECT_EQ(v, 0.0);
  EXPECT_EQ(targets.rows[index_of(kImage)][1], b.features[index_of(kImage)][1].values);
  EXPECT_EQ(masked.features[index_of(kImage)][0], b.features[index_of(kImage)][0]);
}

TEST(ApplyMasks, RoundTripIsExact) {
  ModelFixture f;
  const BatchInputs b = make_batch(f.corpus, iota_ids(3));
  std::mt19937_64 rng(6);
  for (real r : {0.15, 0.5, 0.9}) {
    for (auto mode : {TableMaskMode::Entity, TableMaskMode::Token}) {
      const MaskPlan plan = plan_masks(b, options(r, mode), rng);
      const auto [masked, targets] = apply_masks(b, plan);
      EXPECT_FALSE(masked == b);
      for (std::size_t i = 0; i < 3; ++i) {
        for (std::size_t p : plan.positions[index_of(kText)][i]) EXPECT_EQ(masked.ids[index_of(kText)][i][p], tokens::kMask);
      }
      EXPECT_EQ(restore_masks(masked, plan, targets), b);
    }
  }
}

TEST(ApplyMasks, PlanBatchMismatchErrors) {
  const BatchInputs b = text_batch({5});
  MaskPlan plan = empty_plan(1);
  plan.positions[index_of(kText)][0] = {7};
  plan.replacement[index_of(kText)][0] = {tokens::kMask};
  EXPECT_THROW(apply_masks(b, plan), std::invalid_argument);
  EXPECT_THROW(apply_masks(b, empty_plan(2)), std::invalid_argument);
}

TEST(MaskedLosses, UniformLogitsGiveLogVocab) {
  ModelFixture f;
  ScaleModel model(f.mc);
  zero_head_weight(model, kText);
  const BatchInputs b = make_batch(f.corpus, iota_ids(3));
  MaskPlan plan = empty_plan(3);
  plan.positions[index_of(kText)][0] = {1};
  plan.replacement[index_of(kText)][0] = {tokens::kMask};
  const auto [masked, targets] = apply_masks(b, plan);
  const MaskedLosses ml = masked_losses(model, model.forward(masked), plan, targets);
  ASSERT_TRUE(ml.loss[index_of(kText)].has_value());
  EXPECT_NEAR(ml.loss[index_of(kText)]->item(), std::log(static_cast<real>(f.mc.vocab_size)), 1e-12);
  for (ModalityKind k : {kImage, kTable, ModalityKind::Video, ModalityKind::Audio}) {
    EXPECT_FALSE(ml.loss[index_of(k)].has_value());
  }
}

TEST(MaskedLosses, RegressionReductionIsMeanPerElement) {
  ModelFixture f;
  ScaleModel model(f.mc);
  zero_head_weight(model, kImage);
  Tensor& bias = model.params().get("head.image.bias").value;
  const std::vector<real> bvec{0.5, -1.0, 2.0, 0.25};
  for (std::size_t i = 0; i < 4; ++i) bias[i] = bvec[i];
  // Residual rows with squared norms 1 and 3.
  FeatureSeq& img = f.corpus[0].image;
  const std::vector<std::vector<real>> residual{{1, 0, 0, 0}, {1, 1, 1, 0}};
  for (std::size_t r = 0; r < 2; ++r) {
    for (std::size_t i = 0; i < 4; ++i) img.row(r)[i] = bvec[i] + residual[r][i];
  }
  const BatchInputs b = make_batch(f.corpus, iota_ids(3));
  MaskPlan plan = empty_plan(3);
  plan.positions[index_of(kImage)][0] = {0, 1};
  const auto [masked, targets] = apply_masks(b, plan);
  const MaskedLosses ml = masked_losses(model, model.forward(masked), plan, targets);
  EXPECT_NEAR(ml.loss[index_of(kImage)]->item(), (1.0 + 3.0) / (2.0 * 4.0), 1e-12);
}

TEST(MaskedLosses, ExactTargetsGiveZero) {
  ModelFixture f;
  ScaleModel model(f.mc);
  for (ModalityKind k : {kImage, ModalityKind::Video, ModalityKind::Audio}) {
    zero_head_weight(model, k);
    const Tensor& bias = model.params().get("head." + std::string(modality_name(k)) + ".bias").value;
    for (auto& s : f.corpus) {
      FeatureSeq& fs = s.features(k);
      for (std::size_t r = 0; r < fs.rows; ++r) std::copy(bias.storage().begin(), bias.storage().end(), fs.row(r));
    }
  }
  const BatchInputs b = make_batch(f.corpus, iota_ids(3));
  std::mt19937_64 rng(2);
  const MaskPlan plan = plan_masks(b, options(0.5), rng);
  const auto [masked, targets] = apply_masks(b, plan);
  const MaskedLosses ml = masked_losses(model, model.forward(masked), plan, targets);
  for (ModalityKind k : {kImage, ModalityKind::Video, ModalityKind::Audio}) {
    EXPECT_EQ(ml.loss[index_of(k)]->item(), 0.0) << modality_name(k);
  }
  EXPECT_GT(ml.loss[index_of(kText)]->item(), 0.0);
  const MaskedLosses sl = masked_losses(model, model.forward(masked), plan, targets, ContinuousLoss::SmoothL1);
  EXPECT_EQ(sl.loss[index_of(kImage)]->item(), 0.0);
}

TEST(MaskedLosses, NothingMaskedGivesNoActiveLoss) {
  ModelFixture f;
  ScaleModel model(f.mc);
  const BatchInputs b = make_batch(f.corpus, iota_ids(3));
  const auto [masked, targets] = apply_masks(b, empty_plan(3));
  EXPECT_FALSE(masked_losses(model, model.forward(masked), empty_plan(3), targets).any());
}

TEST(MaskedLosses, CrossModalConditioningIsLive) {
  ModelFixture f;
  ScaleModel model(f.mc);
  MaskPlan plan = empty_plan(3);
  plan.positions[index_of(kText)][0] = {0};
  plan.replacement[index_of(kText)][0] = {tokens::kMask};
  auto prediction = [&](const std::vector<ProductSample>& corpus) {
    const auto [masked, targets] = apply_masks(make_batch(corpus, iota_ids(3)), plan);
    const ForwardOutput fwd = model.forward(masked);
    const Var state = ops::gather_rows(fwd.fused.tokens, {static_cast<std::int64_t>(fwd.fused_row(kText, 0, 0))});
    return model.head(kText)(state).value();
  };
  const Tensor before = prediction(f.corpus);
  for (real& v : f.corpus[0].image.values) v = -v;
  const Tensor after = prediction(f.corpus);
  EXPECT_GT(max_row_diff(before, 0, after, 0), 1e-9);
}

TEST(MaskedLosses, StackedTablePositionsMapIntoTextSegment) {
  ModelFixture f;
  f.mc.text_table = TextTableEncoding::Stacked;
  ScaleModel model(f.mc);
  const BatchInputs b = make_batch(f.corpus, iota_ids(3));
  std::mt19937_64 rng(5);
  const MaskPlan plan = plan_masks(b, options(0.3), rng);
  const auto [masked, targets] = apply_masks(b, plan);
  const ForwardOutput fwd = model.forward(masked);
  const std::size_t text_off = *fwd.fused.segment_offset[index_of(kText)];
  EXPECT_EQ(fwd.fused_row(kTable, 0, 0), fwd.fused.layout.row(0, text_off + 1 + b.length(kText, 0)));
  EXPECT_TRUE(masked_losses(model, fwd, plan, targets).loss[index_of(kTable)].has_value());
}

TEST(Overfit, FixedBatchLossesDrop) {
  const auto start = std::chrono::steady_clock::now();
  const OverfitResult r = overfit_fixed_batch(200);
  const auto secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  EXPECT_LT(secs, 60.0);
  std::size_t masked_terms = 0;
  for (std::size_t n = 0; n < kNumScoreEntries; ++n) {
    ASSERT_TRUE(r.first[n].has_value()) << score_entry_name(n);
    const auto [i, j] = score_entries()[n];
    if (i == j) {
      ++masked_terms;
      EXPECT_LE(*r.last[n], 0.7 * *r.first[n]) << score_entry_name(n);
    } else {
      EXPECT_LT(*r.last[n], *r.first[n]) << score_entry_name(n);
    }
  }
  EXPECT_EQ(masked_terms, kNumModalities);
}
