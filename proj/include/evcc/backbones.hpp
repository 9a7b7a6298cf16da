#pragma once

#include <vector>

#include "evcc/layers.hpp"

namespace evcc {

/// Shapes of the three stand-in branches. Every conv stage opens with a
/// stride-2 patchify (the stem for stage 0), so the conv grid is
/// image_size / 2^stages on a side.
struct BranchConfig {
  Index image_size = 32;
  Index patch_size = 4;
  Index vit_blocks = 2;
  Index vit_heads = 4;
  std::vector<Index> conv_stage_depths{2, 2};
  std::vector<Index> conv_stage_dims{32, 64};
  Index hybrid_blocks = 1;
  Index d_v = 64;
  Index d_c = 64;  // must equal conv_stage_dims.back()
  Index d_x = 64;
  Index d = 64;
  Index frozen_vit_blocks = 0;
  Index frozen_conv_stages = 0;
  Index mlp_ratio = 4;
  bool vit_positional = true;
  Padding padding = Padding::kZero;

  /// Throws ConfigError on an inconsistent configuration.
  void validate() const;

  Index vit_grid() const { return image_size / patch_size; }
  Index vit_tokens() const { return vit_grid() * vit_grid(); }
  Index conv_stages() const { return static_cast<Index>(conv_stage_dims.size()); }
  Index conv_grid() const { return image_size >> conv_stages(); }
  Index conv_tokens() const { return conv_grid() * conv_grid(); }
  /// Conv stages in the hybrid branch before its attention stage.
  Index hybrid_conv_stages() const { return conv_stages() > 1 ? conv_stages() - 1 : 1; }
  Index hybrid_grid() const { return image_size >> (hybrid_conv_stages() + 1); }
};

template <typename S>
struct BranchOutputs {
  Tensor<S> zv;  // [B, N_v, d]
  Tensor<S> zc;  // [B, N_c, d]
  Tensor<S> zx;  // [B, d]
};

/// Patch embedding + learned positional embedding + pre-norm blocks. No class token.
template <typename S>
struct VitBranch {
  Linear<S> patch_embed;
  Tensor<S> positional;  // [N_v, d_v]
  std::vector<TransformerBlock<S>> blocks;
  LayerNorm<S> final_norm;
  Index patch = 4;
  bool use_positional = true;

  static VitBranch create(ParameterStore<S>& store, const BranchConfig& config, Rng& rng);
  /// [B, 3, H, W] -> [B, N_v, d_v]
  Tensor<S> operator()(const Tensor<S>& images) const;
};

/// Depthwise 3x3 -> LayerNorm -> pointwise expansion -> GELU -> pointwise contraction, residual.
template <typename S>
struct ConvBlock {
  Tensor<S> kernel;  // [3, 3, C]
  Tensor<S> kernel_bias;
  LayerNorm<S> norm;
  Linear<S> expand, contract;

  static ConvBlock create(ParameterStore<S>& store, const std::string& name, const std::string& group, Index c,
                          Index ratio, Rng& rng);
  Tensor<S> operator()(const Tensor<S>& x, Padding padding) const;
};

/// Stride-2 patchify (optionally preceded by LayerNorm) followed by a stack of ConvBlocks.
template <typename S>
struct ConvStage {
  LayerNorm<S> pre_norm;  // undefined gain for the stem
  Linear<S> downsample;
  LayerNorm<S> post_norm;  // stem only
  std::vector<ConvBlock<S>> blocks;

  static ConvStage create(ParameterStore<S>& store, const std::string& name, const std::string& group,
                          Index in_channels, Index out_channels, Index depth, Index ratio, bool stem, Rng& rng);
  Tensor<S> operator()(const Tensor<S>& x, Padding padding) const;
};

template <typename S>
struct ConvBranch {
  std::vector<ConvStage<S>> stages;
  Padding padding = Padding::kZero;

  static ConvBranch create(ParameterStore<S>& store, const BranchConfig& config, Rng& rng);
  /// Spatial map before flattening: [B, G, G, d_c].
  Tensor<S> feature_map(const Tensor<S>& images) const;
  /// [B, 3, H, W] -> [B, N_c, d_c]
  Tensor<S> operator()(const Tensor<S>& images) const;
};

/// Conv stem stages, a stride-2 transition to d_x, attention blocks on the
/// token grid, then mean pooling.
template <typename S>
struct HybridBranch {
  std::vector<ConvStage<S>> conv_stages;
  LayerNorm<S> transition_norm;
  Linear<S> transition;
  std::vector<TransformerBlock<S>> blocks;
  LayerNorm<S> final_norm;
  Padding padding = Padding::kZero;

  static HybridBranch create(ParameterStore<S>& store, const BranchConfig& config, Rng& rng);
  /// [B, 3, H, W] -> [B, d_x]
  Tensor<S> operator()(const Tensor<S>& images) const;
};

template <typename S>
struct SharedProjection {
  Linear<S> vit, conv, hybrid;

  static SharedProjection create(ParameterStore<S>& store, const BranchConfig& config, Rng& rng);
  BranchOutputs<S> operator()(const Tensor<S>& vit_tokens, const Tensor<S>& conv_tokens,
                              const Tensor<S>& hybrid_vector) const;
};

/// Marks the first frozen_vit_blocks ViT blocks (plus the patch/positional
/// embedding when any block is frozen) and the first frozen_conv_stages
/// stages of the conv and hybrid branches as non-trainable.
template <typename S>
void apply_freeze_masks(ParameterStore<S>& store, const BranchConfig& config);

}  // namespace evcc
