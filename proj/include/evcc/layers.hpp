#pragma once

#include <string>
#include <string_view>
#include <vector>

#include "evcc/autograd.hpp"
#include "evcc/ops.hpp"
#include "evcc/rng.hpp"
#include "evcc/tensor.hpp"

namespace evcc {

enum class Init { kZeros, kOnes, kLeCunNormal, kSmallNormal, kUnitNormal };

/// Ordered registry of named, grouped parameters. Registration order is the
/// initialization order and the checkpoint order.
template <typename S>
class ParameterStore {
 public:
  Tensor<S> add(const std::string& name, const std::string& group, const Shape& shape, Init init, Rng& rng);

  std::vector<NamedTensor<S>>& entries() { return entries_; }
  const std::vector<NamedTensor<S>>& entries() const { return entries_; }

  const NamedTensor<S>* find(std::string_view name) const;
  NamedTensor<S>* find(std::string_view name);

  /// Scalar count, optionally restricted to trainable entries and/or a group prefix.
  Index count(bool trainable_only = false, std::string_view group_prefix = {}) const;

  void set_trainable(std::string_view group_prefix, bool trainable);
  void zero_grad();

 private:
  std::vector<NamedTensor<S>> entries_;
};

template <typename S>
struct Linear {
  Tensor<S> weight;  // [in, out]
  Tensor<S> bias;    // [out], undefined when the layer has no bias
  Index in = 0;
  Index out = 0;

  static Linear create(ParameterStore<S>& store, const std::string& name, const std::string& group, Index in,
                       Index out, Rng& rng, bool with_bias = true);

  Tensor<S> operator()(const Tensor<S>& x) const;
};

template <typename S>
struct LayerNorm {
  Tensor<S> gain;
  Tensor<S> bias;
  S eps = S(1e-5);

  static LayerNorm create(ParameterStore<S>& store, const std::string& name, const std::string& group, Index width,
                          Rng& rng);

  Tensor<S> operator()(const Tensor<S>& x) const { return layer_norm(x, gain, bias, eps); }
};

/// Scaled dot-product attention with `heads` heads of width d / heads.
/// No normalization is applied here; callers pass already-normalized inputs.
template <typename S>
struct MultiheadAttention {
  Linear<S> query, key, value, output;
  Index heads = 1;

  static MultiheadAttention create(ParameterStore<S>& store, const std::string& name, const std::string& group,
                                   Index d, Index heads, Rng& rng);

  /// [B, Nq, d] x [B, Nk, d] -> [B, Nq, d]. When `probs` is non-null it
  /// receives the attention weights [B, heads, Nq, Nk].
  Tensor<S> operator()(const Tensor<S>& queries, const Tensor<S>& keys_values, Tensor<S>* probs = nullptr) const;
};

template <typename S>
struct Mlp {
  Linear<S> fc1, fc2;

  static Mlp create(ParameterStore<S>& store, const std::string& name, const std::string& group, Index d,
                    Index hidden, Rng& rng);

  Tensor<S> operator()(const Tensor<S>& x) const { return fc2(gelu(fc1(x))); }
};

/// Pre-norm transformer block: x + MHSA(LN(x)), then x + MLP(LN(x)).
template <typename S>
struct TransformerBlock {
  LayerNorm<S> norm1, norm2;
  MultiheadAttention<S> attention;
  Mlp<S> mlp;

  static TransformerBlock create(ParameterStore<S>& store, const std::string& name, const std::string& group,
                                 Index d, Index heads, Index mlp_ratio, Rng& rng);

  Tensor<S> operator()(const Tensor<S>& x) const;
};

}  // namespace evcc
