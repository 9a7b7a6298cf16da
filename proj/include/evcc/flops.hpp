#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "evcc/model.hpp"

namespace evcc {

/// Counting convention: one multiply-accumulate is one MAC and FLOPs = 2 x MACs.
/// Linear layers, attention products and depthwise convolutions are counted;
/// normalization, activations, softmax and elementwise arithmetic are not.
/// All counts are per sample.
using Macs = std::int64_t;

struct CrossAttentionMacs {
  Macs attention_product = 0;  // 2 * Nq * Nk * d (scores plus weighted values)
  Macs projections = 0;        // Q and output over Nq tokens, K and V over Nk tokens
  Macs total() const { return attention_product + projections; }
};

/// One direction of cross-attention with Nq queries reading Nk sources.
CrossAttentionMacs cross_attention_macs(Index nq, Index nk, Index d, Index heads);

struct PruningReduction {
  Index k_v = 0, k_c = 0;
  /// (k_v + 1)(k_c + 1) / (N_v N_c), with the summary token counted.
  double exact_ratio = 1.0;
  /// Continuous 1 / r^2.
  double ideal_ratio = 1.0;
  double exact_reduction() const { return 1.0 - exact_ratio; }
  double ideal_reduction() const { return 1.0 - ideal_ratio; }
};

PruningReduction pruning_reduction(Index n_v, Index n_c, Index d, Index r, Index n_min);

struct FusionBlockMacs {
  CrossAttentionMacs vit_to_conv, conv_to_vit;
  Macs gates = 0;  // one d x d gate per direction
  Macs total() const { return vit_to_conv.total() + conv_to_vit.total() + gates; }
};

struct FlopComponent {
  std::string name;
  Macs macs = 0;
};

struct FlopReport {
  /// Flat list whose sum is `total`: vit, conv, hybrid, projection, pruning,
  /// fusion.blockI (one per block), router, heads.
  std::vector<FlopComponent> components;
  std::vector<FusionBlockMacs> fusion_blocks;
  Index tokens_v = 0, tokens_c = 0;        // entering fusion
  Macs fusion_attention_product = 0;
  Macs fusion_total = 0;
  Macs total = 0;

  // Same architecture with pruning disabled.
  Macs unpruned_fusion_attention_product = 0;
  Macs unpruned_fusion_total = 0;
  Macs unpruned_total = 0;

  double attention_product_reduction() const;
  double fusion_reduction() const;
  double model_reduction() const;

  Macs component(const std::string& name) const;

  /// One key=value record per component and per summary figure.
  std::string records() const;
  /// Aligned human-readable table.
  std::string table() const;
};

/// Walks the configured architecture. Throws ConfigError on an invalid config.
FlopReport model_flop_report(ModelConfig config);

}  // namespace evcc
