#include "evcc/backbones.hpp"

#include <string>

namespace evcc {

namespace {
std::string str(Index v) { return std::to_string(v); }

template <typename S>
Tensor<S> to_nhwc(const Tensor<S>& images, Index image_size) {
  if (images.rank() != 4 || images.dim(1) != 3 || images.dim(2) != image_size || images.dim(3) != image_size)
    throw DimensionError("expected images [B,3," + str(image_size) + "," + str(image_size) + "], got " +
                         images.shape().str());
  return permute(images, {0, 2, 3, 1});
}

/// [B, G, G, C] -> [B, G*G, C]
template <typename S>
Tensor<S> flatten_grid(const Tensor<S>& map) {
  return reshape(map, Shape{map.dim(0), map.dim(1) * map.dim(2), map.dim(3)});
}
}  // namespace

void BranchConfig::validate() const {
  if (image_size <= 0 || patch_size <= 0 || image_size % patch_size != 0)
    throw ConfigError("image_size " + str(image_size) + " is not divisible by patch_size " + str(patch_size));
  if (d <= 0 || d_v <= 0 || d_x <= 0) throw ConfigError("branch and shared dims must be positive");
  if (conv_stage_dims.empty() || conv_stage_dims.size() != conv_stage_depths.size())
    throw ConfigError("conv_stage_depths and conv_stage_dims must be non-empty and of equal length");
  if (d_c != conv_stage_dims.back())
    throw ConfigError("d_c (" + str(d_c) + ") must equal the last conv stage dim (" + str(conv_stage_dims.back()) + ")");
  for (Index v : conv_stage_dims)
    if (v <= 0) throw ConfigError("conv stage dims must be positive");
  for (Index v : conv_stage_depths)
    if (v < 0) throw ConfigError("conv stage depths must be non-negative");
  if (conv_stages() >= 31 || (image_size >> conv_stages()) < 1 || image_size % (Index(1) << conv_stages()) != 0)
    throw ConfigError("conv downsampling by 2^" + str(conv_stages()) + " does not tile image_size " + str(image_size));
  if (image_size % (Index(1) << (hybrid_conv_stages() + 1)) != 0)
    throw ConfigError("hybrid downsampling does not tile image_size " + str(image_size));
  if (vit_heads <= 0 || d_v % vit_heads != 0 || d_x % vit_heads != 0)
    throw ConfigError("vit_heads must divide d_v and d_x");
  if (vit_blocks < 0 || hybrid_blocks < 0) throw ConfigError("block counts must be non-negative");
  if (frozen_vit_blocks < 0 || frozen_vit_blocks > vit_blocks)
    throw ConfigError("frozen_vit_blocks exceeds vit_blocks");
  if (frozen_conv_stages < 0 || frozen_conv_stages > conv_stages())
    throw ConfigError("frozen_conv_stages exceeds the number of conv stages");
  if (mlp_ratio <= 0) throw ConfigError("mlp_ratio must be positive");
}

template <typename S>
VitBranch<S> VitBranch<S>::create(ParameterStore<S>& store, const BranchConfig& config, Rng& rng) {
  VitBranch v;
  v.patch = config.patch_size;
  v.use_positional = config.vit_positional;
  const Index patch_dim = config.patch_size * config.patch_size * 3;
  v.patch_embed = Linear<S>::create(store, "vit.patch_embed", "vit.embed", patch_dim, config.d_v, rng);
  v.positional = store.add("vit.positional", "vit.embed", Shape{config.vit_tokens(), config.d_v}, Init::kZeros, rng);
  for (auto& x : v.positional.mutable_data()) x = static_cast<S>(0.5 * rng.normal());
  for (Index i = 0; i < config.vit_blocks; ++i)
    v.blocks.push_back(TransformerBlock<S>::create(store, "vit.block" + str(i), "vit.block" + str(i), config.d_v,
                                                   config.vit_heads, config.mlp_ratio, rng));
  const std::string last = config.vit_blocks > 0 ? "vit.block" + str(config.vit_blocks - 1) : "vit.embed";
  v.final_norm = LayerNorm<S>::create(store, "vit.final_norm", last, config.d_v, rng);
  return v;
}

template <typename S>
Tensor<S> VitBranch<S>::operator()(const Tensor<S>& images) const {
  const Index image_size = images.dim(-1);
  auto patches = space_to_depth(to_nhwc(images, image_size), patch);
  auto tokens = patch_embed(flatten_grid(patches));
  if (use_positional) tokens = add(tokens, positional);
  for (const auto& block : blocks) tokens = block(tokens);
  return final_norm(tokens);
}

template <typename S>
ConvBlock<S> ConvBlock<S>::create(ParameterStore<S>& store, const std::string& name, const std::string& group,
                                  Index c, Index ratio, Rng& rng) {
  ConvBlock b;
  // Depthwise kernels have fan-in 9; scale like LeCun init over the taps.
  b.kernel = store.add(name + ".dw.kernel", group, Shape{3, 3, c}, Init::kZeros, rng);
  {
    auto k = b.kernel.mutable_data();
    for (auto& v : k) v = static_cast<S>(rng.normal() / 3.0);
  }
  b.kernel_bias = store.add(name + ".dw.bias", group, Shape{c}, Init::kZeros, rng);
  b.norm = LayerNorm<S>::create(store, name + ".norm", group, c, rng);
  b.expand = Linear<S>::create(store, name + ".expand", group, c, c * ratio, rng);
  b.contract = Linear<S>::create(store, name + ".contract", group, c * ratio, c, rng);
  return b;
}

template <typename S>
Tensor<S> ConvBlock<S>::operator()(const Tensor<S>& x, Padding padding) const {
  auto h = depthwise_conv3x3(x, kernel, kernel_bias, padding);
  return add(x, contract(gelu(expand(norm(h)))));
}

template <typename S>
ConvStage<S> ConvStage<S>::create(ParameterStore<S>& store, const std::string& name, const std::string& group,
                                  Index in_channels, Index out_channels, Index depth, Index ratio, bool stem,
                                  Rng& rng) {
  ConvStage s;
  if (!stem) s.pre_norm = LayerNorm<S>::create(store, name + ".down_norm", group, in_channels, rng);
  s.downsample = Linear<S>::create(store, name + ".down", group, 4 * in_channels, out_channels, rng);
  if (stem) s.post_norm = LayerNorm<S>::create(store, name + ".stem_norm", group, out_channels, rng);
  for (Index i = 0; i < depth; ++i)
    s.blocks.push_back(ConvBlock<S>::create(store, name + ".block" + str(i), group, out_channels, ratio, rng));
  return s;
}

template <typename S>
Tensor<S> ConvStage<S>::operator()(const Tensor<S>& x, Padding padding) const {
  auto h = pre_norm.gain.defined() ? pre_norm(x) : x;
  h = downsample(space_to_depth(h, 2));
  if (post_norm.gain.defined()) h = post_norm(h);
  for (const auto& block : blocks) h = block(h, padding);
  return h;
}

template <typename S>
ConvBranch<S> ConvBranch<S>::create(ParameterStore<S>& store, const BranchConfig& config, Rng& rng) {
  ConvBranch c;
  c.padding = config.padding;
  Index in = 3;
  for (Index i = 0; i < config.conv_stages(); ++i) {
    const auto name = "conv.stage" + str(i);
    c.stages.push_back(ConvStage<S>::create(store, name, name, in, config.conv_stage_dims[i],
                                            config.conv_stage_depths[i], config.mlp_ratio, i == 0, rng));
    in = config.conv_stage_dims[i];
  }
  return c;
}

template <typename S>
Tensor<S> ConvBranch<S>::feature_map(const Tensor<S>& images) const {
  auto h = to_nhwc(images, images.dim(-1));
  for (const auto& stage : stages) h = stage(h, padding);
  return h;
}

template <typename S>
Tensor<S> ConvBranch<S>::operator()(const Tensor<S>& images) const {
  return flatten_grid(feature_map(images));
}

template <typename S>
HybridBranch<S> HybridBranch<S>::create(ParameterStore<S>& store, const BranchConfig& config, Rng& rng) {
  HybridBranch h;
  h.padding = config.padding;
  Index in = 3;
  const Index conv_count = config.hybrid_conv_stages();
  for (Index i = 0; i < conv_count; ++i) {
    const auto name = "hybrid.stage" + str(i);
    h.conv_stages.push_back(ConvStage<S>::create(store, name, name, in, config.conv_stage_dims[i],
                                                 config.conv_stage_depths[i], config.mlp_ratio, i == 0, rng));
    in = config.conv_stage_dims[i];
  }
  const auto attn_group = "hybrid.stage" + str(conv_count);
  h.transition_norm = LayerNorm<S>::create(store, attn_group + ".down_norm", attn_group, in, rng);
  h.transition = Linear<S>::create(store, attn_group + ".down", attn_group, 4 * in, config.d_x, rng);
  for (Index i = 0; i < config.hybrid_blocks; ++i)
    h.blocks.push_back(TransformerBlock<S>::create(store, attn_group + ".block" + str(i), attn_group, config.d_x,
                                                   config.vit_heads, config.mlp_ratio, rng));
  h.final_norm = LayerNorm<S>::create(store, attn_group + ".final_norm", attn_group, config.d_x, rng);
  return h;
}

template <typename S>
Tensor<S> HybridBranch<S>::operator()(const Tensor<S>& images) const {
  auto h = to_nhwc(images, images.dim(-1));
  for (const auto& stage : conv_stages) h = stage(h, padding);
  auto tokens = flatten_grid(transition(space_to_depth(transition_norm(h), 2)));
  for (const auto& block : blocks) tokens = block(tokens);
  return mean_axis(final_norm(tokens), 1);
}

template <typename S>
SharedProjection<S> SharedProjection<S>::create(ParameterStore<S>& store, const BranchConfig& config, Rng& rng) {
  return {Linear<S>::create(store, "proj.vit", "proj", config.d_v, config.d, rng),
          Linear<S>::create(store, "proj.conv", "proj", config.d_c, config.d, rng),
          Linear<S>::create(store, "proj.hybrid", "proj", config.d_x, config.d, rng)};
}

template <typename S>
BranchOutputs<S> SharedProjection<S>::operator()(const Tensor<S>& vit_tokens, const Tensor<S>& conv_tokens,
                                                 const Tensor<S>& hybrid_vector) const {
  try {
    return {vit(vit_tokens), conv(conv_tokens), hybrid(hybrid_vector)};
  } catch (const DimensionError& e) {
    throw ConfigError(std::string("project_to_shared: ") + e.what());
  }
}

template <typename S>
void apply_freeze_masks(ParameterStore<S>& store, const BranchConfig& config) {
  auto frozen = [&](const std::string& group) {
    auto index_after = [&](const std::string& prefix) -> Index {
      if (group.rfind(prefix, 0) != 0) return -1;
      const std::string rest = group.substr(prefix.size());
      if (rest.empty() || rest.find_first_not_of("0123456789") != std::string::npos) return -1;
      return std::stoll(rest);
    };
    if (group == "vit.embed") return config.frozen_vit_blocks > 0;
    if (Index i = index_after("vit.block"); i >= 0) return i < config.frozen_vit_blocks;
    if (Index i = index_after("conv.stage"); i >= 0) return i < config.frozen_conv_stages;
    if (Index i = index_after("hybrid.stage"); i >= 0) return i < config.frozen_conv_stages;
    return false;
  };
  for (auto& e : store.entries()) {
    e.trainable = !frozen(e.group);
    e.tensor.set_requires_grad(e.trainable);
  }
}

template struct VitBranch<float>;
template struct VitBranch<double>;
template struct ConvBlock<float>;
template struct ConvBlock<double>;
template struct ConvStage<float>;
template struct ConvStage<double>;
template struct ConvBranch<float>;
template struct ConvBranch<double>;
template struct HybridBranch<float>;
template struct HybridBranch<double>;
template struct SharedProjection<float>;
template struct SharedProjection<double>;
template void apply_freeze_masks(ParameterStore<float>&, const BranchConfig&);
template void apply_freeze_masks(ParameterStore<double>&, const BranchConfig&);

}  // namespace evcc
