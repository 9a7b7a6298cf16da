#include <gtest/gtest.h>

#include <cmath>

#include "evcc/errors.hpp"
#include "evcc/flops.hpp"

using namespace evcc;

namespace {

ModelConfig toy() {
  ModelConfig c;
  c.finalize();
  return c;
}

ModelConfig scaled(Index s) {
  ModelConfig c;
  auto& b = c.branches;
  b.d_v *= s;
  b.d_x *= s;
  b.d *= s;
  for (auto& v : b.conv_stage_dims) v *= s;
  b.d_c = b.conv_stage_dims.back();
  c.finalize();
  return c;
}

}  // namespace

TEST(CrossAttentionMacs, AttentionProductAtReferenceSizes) {
  const auto m = cross_attention_macs(196, 49, 384, 6);
  EXPECT_EQ(m.attention_product, 7375872);
  EXPECT_EQ(m.attention_product, 2LL * 196 * 49 * 384);
  // Q and output projections over the 196 queries, K and V over the 49 sources.
  EXPECT_EQ(m.projections, 2LL * 196 * 384 * 384 + 2LL * 49 * 384 * 384);
  EXPECT_EQ(m.total(), m.attention_product + m.projections);
}

TEST(CrossAttentionMacs, HeadCountDoesNotChangeCost) {
  EXPECT_EQ(cross_attention_macs(33, 17, 64, 1).total(), cross_attention_macs(33, 17, 64, 8).total());
}

TEST(CrossAttentionMacs, WidthScaling) {
  const auto a = cross_attention_macs(40, 20, 32, 4), b = cross_attention_macs(40, 20, 64, 4);
  EXPECT_EQ(b.attention_product, 2 * a.attention_product);
  EXPECT_EQ(b.projections, 4 * a.projections);
}

TEST(PruningReduction, IdealRatiosAreExact) {
  const auto r2 = pruning_reduction(196, 49, 384, 2, 8);
  EXPECT_EQ(r2.ideal_ratio, 0.25);
  EXPECT_EQ(r2.ideal_reduction(), 0.75);
  // Continuous halving (98, 24.5) gives exactly the ideal ratio.
  EXPECT_DOUBLE_EQ(98.0 * 24.5 / (196.0 * 49.0), r2.ideal_ratio);
  const auto r4 = pruning_reduction(196, 49, 384, 4, 8);
  EXPECT_EQ(r4.ideal_ratio, 1.0 / 16.0);
  EXPECT_EQ(r4.ideal_reduction(), 0.9375);
}

TEST(PruningReduction, ExactRatioWithFloorsAndSummaryToken) {
  const auto r2 = pruning_reduction(196, 49, 384, 2, 8);
  EXPECT_EQ(r2.k_v, 98);
  EXPECT_EQ(r2.k_c, 24);
  EXPECT_DOUBLE_EQ(r2.exact_ratio, 99.0 * 25.0 / (196.0 * 49.0));
  EXPECT_NEAR(r2.exact_ratio, 0.2577, 5e-5);
  EXPECT_LT(std::abs(r2.exact_reduction() - r2.ideal_reduction()), 0.015);

  const auto r4 = pruning_reduction(196, 49, 384, 4, 8);
  EXPECT_EQ(r4.k_v, 49);
  EXPECT_EQ(r4.k_c, 12);
  EXPECT_DOUBLE_EQ(r4.exact_ratio, 50.0 * 13.0 / (196.0 * 49.0));
  EXPECT_NEAR(r4.exact_ratio, 0.0677, 5e-5);
  EXPECT_LT(std::abs(r4.exact_reduction() - r4.ideal_reduction()), 0.015);
}

TEST(PruningReduction, NoPruneKeepsEverythingPlusSummary) {
  const auto r1 = pruning_reduction(196, 49, 384, 1, 8);
  EXPECT_EQ(r1.k_v, 196);
  EXPECT_EQ(r1.k_c, 49);
  EXPECT_DOUBLE_EQ(r1.exact_ratio, 197.0 * 50.0 / (196.0 * 49.0));
  EXPECT_GT(r1.exact_ratio, 1.0);
  EXPECT_EQ(r1.ideal_reduction(), 0.0);
}

TEST(PruningReduction, ConvergesToInverseSquare) {
  for (Index r : {2, 3, 4, 8}) {
    double previous_gap = 1e9;
    for (Index n : {100, 1000, 10000}) {
      const auto red = pruning_reduction(n, n, 64, r, 8);
      const double gap = std::abs(red.exact_ratio - red.ideal_ratio);
      EXPECT_LT(gap, previous_gap) << "r=" << r << " n=" << n;
      previous_gap = gap;
    }
    EXPECT_LT(previous_gap / (1.0 / static_cast<double>(r * r)), 2e-3) << "r=" << r;
  }
}

TEST(PruningReduction, InvalidFactorIsAConfigError) {
  EXPECT_THROW(pruning_reduction(196, 49, 384, 0, 8), ConfigError);
}

TEST(FlopReport, ToyConfigMatchesHandCount) {
  const auto r = model_flop_report(toy());
  // 32x32 image, 4x4 patches: 64 ViT tokens of width 64, two blocks, MLP ratio 4.
  const Macs vit_block = 64 * 64 * 192 + 2 * 64 * 64 * 64 + 64 * 64 * 64 + 2 * 64 * 64 * 256;
  const Macs vit = 64 * 48 * 64 + 2 * vit_block;
  // Conv stage 0: 16x16 grid, 32 channels; stage 1: 8x8 grid, 64 channels; two blocks each.
  const Macs conv_block0 = 256 * 9 * 32 + 2 * 256 * 32 * 128;
  const Macs conv_block1 = 64 * 9 * 64 + 2 * 64 * 64 * 256;
  const Macs stage0 = 256 * 12 * 32 + 2 * conv_block0;
  const Macs stage1 = 64 * 128 * 64 + 2 * conv_block1;
  const Macs conv = stage0 + stage1;
  // Hybrid: conv stage 0, transition to an 8x8 grid of width 64, one attention block.
  const Macs hybrid = stage0 + 64 * 128 * 64 + vit_block;
  const Macs projection = 64 * 64 * 64 + 64 * 64 * 64 + 64 * 64;
  // Scorer 64 -> 32 -> 1 per token plus one summary projection, per branch.
  const Macs pruning = 2 * (64 * 64 * 32 + 64 * 32 + 64 * 64);
  // r = 2 keeps 32 + 1 tokens per stream.
  const Macs direction = 2 * 33 * 33 * 64 + 4 * 33 * 64 * 64 + 33 * 64 * 64;
  const Macs fusion_block = 2 * direction;
  const Macs router = 192 * 64 + 64 * 3 + 64 + 3 * 64 * 64;
  const Macs heads = 4 * 64 * 4;

  EXPECT_EQ(r.component("vit"), vit);
  EXPECT_EQ(r.component("conv"), conv);
  EXPECT_EQ(r.component("hybrid"), hybrid);
  EXPECT_EQ(r.component("projection"), projection);
  EXPECT_EQ(r.component("pruning"), pruning);
  for (int l = 0; l < 3; ++l) EXPECT_EQ(r.component("fusion.block" + std::to_string(l)), fusion_block);
  EXPECT_EQ(r.component("router"), router);
  EXPECT_EQ(r.component("heads"), heads);
  EXPECT_EQ(r.total, vit + conv + hybrid + projection + pruning + 3 * fusion_block + router + heads);
  EXPECT_EQ(r.total, 31123456);
  EXPECT_EQ(r.tokens_v, 33);
  EXPECT_EQ(r.tokens_c, 33);

  const Macs raw_direction = 2 * 64 * 64 * 64 + 4 * 64 * 64 * 64 + 64 * 64 * 64;
  EXPECT_EQ(r.unpruned_fusion_total, 3 * 2 * raw_direction);
  EXPECT_EQ(r.unpruned_total, r.total - pruning - 3 * fusion_block + 3 * 2 * raw_direction);
}

TEST(FlopReport, TotalsEqualSumOfComponents) {
  for (Index depth : {0, 1, 3, 5})
    for (Index r : {1, 2, 4}) {
      auto c = toy();
      c.fusion.depth = depth;
      c.prune.r = r;
      const auto rep = model_flop_report(c);
      Macs sum = 0;
      for (const auto& comp : rep.components) sum += comp.macs;
      EXPECT_EQ(sum, rep.total);
      Macs fusion = 0;
      for (const auto& b : rep.fusion_blocks) fusion += b.total();
      EXPECT_EQ(fusion, rep.fusion_total);
    }
}

TEST(FlopReport, NoFusionNoPruneHasZeroCrossAttention) {
  auto c = toy();
  c.fusion.depth = 0;
  c.prune.r = 1;
  const auto rep = model_flop_report(c);
  EXPECT_EQ(rep.fusion_total, 0);
  EXPECT_EQ(rep.fusion_attention_product, 0);
  EXPECT_TRUE(rep.fusion_blocks.empty());
  for (const auto& comp : rep.components) EXPECT_NE(comp.name.rfind("fusion", 0), 0u) << comp.name;
}

TEST(FlopReport, MonotoneInPruningFactor) {
  for (Index image : {32, 64}) {
    Macs prev_product = -1, prev_total = -1;
    for (Index r = 1; r <= 16; ++r) {
      auto c = toy();
      c.branches.image_size = image;
      c.prune.r = r;
      const auto rep = model_flop_report(c);
      if (prev_product >= 0) {
        EXPECT_LE(rep.fusion_attention_product, prev_product) << "r=" << r;
        EXPECT_LE(rep.fusion_total, prev_total) << "r=" << r;
      }
      prev_product = rep.fusion_attention_product;
      prev_total = rep.fusion_total;
    }
  }
}

TEST(FlopReport, QuadraticInWidth) {
  // Token counts are fixed, so the total is c2 s^2 + c1 s + c0 in the width
  // multiplier s. The only width-free term is the scorer's output layer
  // (n x score_hidden x 1 per branch).
  const Macs f1 = model_flop_report(scaled(1)).total;
  const Macs f2 = model_flop_report(scaled(2)).total;
  const Macs f3 = model_flop_report(scaled(3)).total;
  const Macs c2 = (f3 - 2 * f2 + f1) / 2;
  const Macs c1 = f2 - f1 - 3 * c2;
  const Macs c0 = f1 - c2 - c1;
  EXPECT_EQ(c0, 2 * 64 * 32);
  EXPECT_EQ(model_flop_report(scaled(4)).total, 16 * c2 + 4 * c1 + c0);

  // Per block: attention products double, projections and gates quadruple.
  const auto a = model_flop_report(scaled(1)).fusion_blocks[0];
  const auto b = model_flop_report(scaled(2)).fusion_blocks[0];
  EXPECT_EQ(b.vit_to_conv.attention_product, 2 * a.vit_to_conv.attention_product);
  EXPECT_EQ(b.vit_to_conv.projections, 4 * a.vit_to_conv.projections);
  EXPECT_EQ(b.gates, 4 * a.gates);
}

TEST(FlopReport, ToyReductionFigures) {
  auto c = toy();
  const auto r2 = model_flop_report(c);
  c.prune.r = 1;
  const auto r1 = model_flop_report(c);
  // 33 x 33 against the unpruned 64 x 64 product.
  EXPECT_DOUBLE_EQ(r2.attention_product_reduction(), 1.0 - (33.0 * 33.0) / (64.0 * 64.0));
  // Against the r = 1 configuration (65 tokens per stream, summary included).
  const double vs_r1 = 1.0 - static_cast<double>(r2.fusion_attention_product) / r1.fusion_attention_product;
  EXPECT_DOUBLE_EQ(vs_r1, 1.0 - (33.0 * 33.0) / (65.0 * 65.0));
  EXPECT_GE(vs_r1, 0.70);
  EXPECT_GT(r2.model_reduction(), 0.0);
  EXPECT_LT(r2.model_reduction(), r2.fusion_reduction());
}

TEST(FlopReport, PruningDisabledMatchesUnpruned) {
  auto c = toy();
  c.prune_enabled = false;
  const auto rep = model_flop_report(c);
  EXPECT_EQ(rep.component("pruning"), 0);
  EXPECT_EQ(rep.total, rep.unpruned_total);
  EXPECT_EQ(rep.model_reduction(), 0.0);
}

TEST(FlopReport, RecordsCarryMacsAndFlops) {
  const auto rep = model_flop_report(toy());
  const auto text = rep.records();
  EXPECT_NE(text.find("component=vit macs=7536640 flops=15073280"), std::string::npos);
  EXPECT_NE(text.find("total_macs=31123456 total_flops=62246912"), std::string::npos);
  Index component_lines = 0;
  for (std::size_t pos = 0; (pos = text.find("component=", pos)) != std::string::npos; ++pos) ++component_lines;
  EXPECT_EQ(component_lines, static_cast<Index>(rep.components.size()));
  EXPECT_NE(rep.table().find("total"), std::string::npos);
}

TEST(FlopReport, InvalidConfigThrows) {
  auto c = toy();
  c.fusion.heads = 5;  // does not divide d = 64
  EXPECT_THROW(model_flop_report(c), ConfigError);
  EXPECT_THROW(model_flop_report(toy()).component("nope"), ArgumentError);
}
