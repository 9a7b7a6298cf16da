#pragma once

#include <utility>
#include <vector>

#include "evcc/layers.hpp"

namespace evcc {

struct FusionConfig {
  Index depth = 3;
  Index heads = 4;
  Index d = 64;

  void validate() const;
};

template <typename S>
struct FusionState {
  Tensor<S> zv;  // [B, N_v', d]
  Tensor<S> zc;  // [B, N_c', d]
};

/// Pre-norm cross-attention: both inputs pass through their own LayerNorm
/// before projection.
template <typename S>
struct CrossAttention {
  LayerNorm<S> query_norm, source_norm;
  MultiheadAttention<S> attention;

  static CrossAttention create(ParameterStore<S>& store, const std::string& name, const std::string& group,
                               const FusionConfig& config, Rng& rng);
};

/// G = sigmoid(Z W + b), one d x d linear layer.
template <typename S>
struct Gate {
  Linear<S> linear;

  static Gate create(ParameterStore<S>& store, const std::string& name, const std::string& group, Index d, Rng& rng);
};

template <typename S>
struct BidirectionalBlock {
  CrossAttention<S> vit_to_conv, conv_to_vit;
  Gate<S> vit_gate, conv_gate;
};

template <typename S>
struct FusionParams {
  std::vector<BidirectionalBlock<S>> blocks;

  static FusionParams create(ParameterStore<S>& store, const FusionConfig& config, Rng& rng);
};

/// Optional diagnostics captured while fusing: per-direction attention
/// weights [B, heads, Nq, Nk] and gate activations [B, N, d], in block order.
template <typename S>
struct FusionTrace {
  std::vector<Tensor<S>> attention;
  std::vector<Tensor<S>> gates;
};

template <typename S>
Tensor<S> multihead_cross_attention(const Tensor<S>& queries, const Tensor<S>& sources,
                                    const CrossAttention<S>& params, Tensor<S>* probs = nullptr);

/// Z + sigmoid(Z W + b) * attended; the gate reads the un-normalized stream.
template <typename S>
Tensor<S> gated_update(const Tensor<S>& stream, const Tensor<S>& attended, const Gate<S>& gate,
                       Tensor<S>* gate_values = nullptr);

/// Both directions read the block input (simultaneous update).
template <typename S>
FusionState<S> bidirectional_block(const FusionState<S>& state, const BidirectionalBlock<S>& params,
                                   FusionTrace<S>* trace = nullptr);

template <typename S>
FusionState<S> fuse(const FusionState<S>& state, const FusionParams<S>& params, FusionTrace<S>* trace = nullptr);

/// Token-axis mean of each stream: (F_v, F_c), each [B, d].
template <typename S>
std::pair<Tensor<S>, Tensor<S>> global_pool(const FusionState<S>& state);

}  // namespace evcc
