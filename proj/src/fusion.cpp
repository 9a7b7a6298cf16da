#include "evcc/fusion.hpp"

#include <string>

namespace evcc {

void FusionConfig::validate() const {
  if (depth < 0) throw ConfigError("fusion.depth must be >= 0");
  if (heads <= 0 || d % heads != 0)
    throw ConfigError("fusion.heads (" + std::to_string(heads) + ") must divide d (" + std::to_string(d) + ")");
}

template <typename S>
CrossAttention<S> CrossAttention<S>::create(ParameterStore<S>& store, const std::string& name,
                                            const std::string& group, const FusionConfig& config, Rng& rng) {
  CrossAttention c;
  c.query_norm = LayerNorm<S>::create(store, name + ".query_norm", group, config.d, rng);
  c.source_norm = LayerNorm<S>::create(store, name + ".source_norm", group, config.d, rng);
  c.attention = MultiheadAttention<S>::create(store, name + ".attn", group, config.d, config.heads, rng);
  return c;
}

template <typename S>
Gate<S> Gate<S>::create(ParameterStore<S>& store, const std::string& name, const std::string& group, Index d,
                        Rng& rng) {
  return {Linear<S>::create(store, name, group, d, d, rng)};
}

template <typename S>
FusionParams<S> FusionParams<S>::create(ParameterStore<S>& store, const FusionConfig& config, Rng& rng) {
  config.validate();
  FusionParams f;
  for (Index i = 0; i < config.depth; ++i) {
    const std::string g = "fusion.block" + std::to_string(i);
    BidirectionalBlock<S> b;
    b.vit_to_conv = CrossAttention<S>::create(store, g + ".v2c", g, config, rng);
    b.conv_to_vit = CrossAttention<S>::create(store, g + ".c2v", g, config, rng);
    b.vit_gate = Gate<S>::create(store, g + ".gate_v", g, config.d, rng);
    b.conv_gate = Gate<S>::create(store, g + ".gate_c", g, config.d, rng);
    f.blocks.push_back(std::move(b));
  }
  return f;
}

template <typename S>
Tensor<S> multihead_cross_attention(const Tensor<S>& queries, const Tensor<S>& sources,
                                    const CrossAttention<S>& params, Tensor<S>* probs) {
  const auto kv = params.source_norm(sources);
  return params.attention(params.query_norm(queries), kv, probs);
}

template <typename S>
Tensor<S> gated_update(const Tensor<S>& stream, const Tensor<S>& attended, const Gate<S>& gate,
                       Tensor<S>* gate_values) {
  if (stream.shape() != attended.shape())
    throw DimensionError("gated_update: stream " + stream.shape().str() + " vs attended " + attended.shape().str());
  auto g = sigmoid(gate.linear(stream));
  if (gate_values) *gate_values = g;
  return add(stream, mul(g, attended));
}

template <typename S>
FusionState<S> bidirectional_block(const FusionState<S>& state, const BidirectionalBlock<S>& params,
                                   FusionTrace<S>* trace) {
  Tensor<S> p_v, p_c, g_v, g_c;
  auto to_conv = multihead_cross_attention(state.zv, state.zc, params.vit_to_conv, trace ? &p_v : nullptr);
  auto to_vit = multihead_cross_attention(state.zc, state.zv, params.conv_to_vit, trace ? &p_c : nullptr);
  FusionState<S> next{gated_update(state.zv, to_conv, params.vit_gate, trace ? &g_v : nullptr),
                      gated_update(state.zc, to_vit, params.conv_gate, trace ? &g_c : nullptr)};
  if (trace) {
    trace->attention.push_back(p_v);
    trace->attention.push_back(p_c);
    trace->gates.push_back(g_v);
    trace->gates.push_back(g_c);
  }
  return next;
}

template <typename S>
FusionState<S> fuse(const FusionState<S>& state, const FusionParams<S>& params, FusionTrace<S>* trace) {
  FusionState<S> s = state;
  for (const auto& block : params.blocks) s = bidirectional_block(s, block, trace);
  return s;
}

template <typename S>
std::pair<Tensor<S>, Tensor<S>> global_pool(const FusionState<S>& state) {
  return {mean_axis(state.zv, 1), mean_axis(state.zc, 1)};
}

#define EVCC_INSTANTIATE_FUSION(S)                                                                             \
  template struct CrossAttention<S>;                                                                           \
  template struct Gate<S>;                                                                                     \
  template struct FusionParams<S>;                                                                             \
  template Tensor<S> multihead_cross_attention(const Tensor<S>&, const Tensor<S>&, const CrossAttention<S>&,  \
                                               Tensor<S>*);                                                    \
  template Tensor<S> gated_update(const Tensor<S>&, const Tensor<S>&, const Gate<S>&, Tensor<S>*);             \
  template FusionState<S> bidirectional_block(const FusionState<S>&, const BidirectionalBlock<S>&,             \
                                              FusionTrace<S>*);                                                \
  template FusionState<S> fuse(const FusionState<S>&, const FusionParams<S>&, FusionTrace<S>*);                \
  template std::pair<Tensor<S>, Tensor<S>> global_pool(const FusionState<S>&);

EVCC_INSTANTIATE_FUSION(float)
EVCC_INSTANTIATE_FUSION(double)

}  // namespace evcc
