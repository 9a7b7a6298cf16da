#include "evcc/layers.hpp"

#include <cmath>

namespace evcc {

template <typename S>
Tensor<S> ParameterStore<S>::add(const std::string& name, const std::string& group, const Shape& shape, Init init,
                                 Rng& rng) {
  if (find(name)) throw ConfigError("duplicate parameter name: " + name);
  std::vector<S> values(static_cast<std::size_t>(shape.numel()));
  const Index fan_in = shape.rank() >= 2 ? shape[0] : 1;
  switch (init) {
    case Init::kZeros: break;
    case Init::kOnes:
      for (auto& v : values) v = S(1);
      break;
    case Init::kLeCunNormal: {
      const double std = 1.0 / std::sqrt(static_cast<double>(fan_in));
      for (auto& v : values) v = static_cast<S>(std * rng.normal());
      break;
    }
    case Init::kSmallNormal:
      for (auto& v : values) v = static_cast<S>(0.02 * rng.normal());
      break;
    case Init::kUnitNormal:
      for (auto& v : values) v = static_cast<S>(rng.normal());
      break;
  }
  Tensor<S> t(shape, std::move(values));
  t.set_requires_grad(true);
  entries_.push_back({name, group, t, true});
  return t;
}

template <typename S>
const NamedTensor<S>* ParameterStore<S>::find(std::string_view name) const {
  for (const auto& e : entries_)
    if (e.name == name) return &e;
  return nullptr;
}

template <typename S>
NamedTensor<S>* ParameterStore<S>::find(std::string_view name) {
  for (auto& e : entries_)
    if (e.name == name) return &e;
  return nullptr;
}

template <typename S>
Index ParameterStore<S>::count(bool trainable_only, std::string_view group_prefix) const {
  Index total = 0;
  for (const auto& e : entries_) {
    if (trainable_only && !e.trainable) continue;
    if (!group_prefix.empty() && e.group.rfind(group_prefix, 0) != 0) continue;
    total += e.tensor.numel();
  }
  return total;
}

template <typename S>
void ParameterStore<S>::set_trainable(std::string_view group_prefix, bool trainable) {
  for (auto& e : entries_)
    if (e.group.rfind(group_prefix, 0) == 0) {
      e.trainable = trainable;
      e.tensor.set_requires_grad(trainable);
    }
}

template <typename S>
void ParameterStore<S>::zero_grad() {
  for (auto& e : entries_) e.tensor.zero_grad();
}

template <typename S>
Linear<S> Linear<S>::create(ParameterStore<S>& store, const std::string& name, const std::string& group, Index in,
                            Index out, Rng& rng, bool with_bias) {
  Linear l;
  l.in = in;
  l.out = out;
  l.weight = store.add(name + ".weight", group, Shape{in, out}, Init::kLeCunNormal, rng);
  if (with_bias) l.bias = store.add(name + ".bias", group, Shape{out}, Init::kZeros, rng);
  return l;
}

template <typename S>
Tensor<S> Linear<S>::operator()(const Tensor<S>& x) const {
  if (x.dim(-1) != in)
    throw DimensionError("Linear: input " + x.shape().str() + " does not end in width " + std::to_string(in));
  auto y = matmul(x, weight);
  return bias.defined() ? add(y, bias) : y;
}

template <typename S>
LayerNorm<S> LayerNorm<S>::create(ParameterStore<S>& store, const std::string& name, const std::string& group,
                                  Index width, Rng& rng) {
  LayerNorm n;
  n.gain = store.add(name + ".gain", group, Shape{width}, Init::kOnes, rng);
  n.bias = store.add(name + ".bias", group, Shape{width}, Init::kZeros, rng);
  return n;
}

template <typename S>
MultiheadAttention<S> MultiheadAttention<S>::create(ParameterStore<S>& store, const std::string& name,
                                                    const std::string& group, Index d, Index heads, Rng& rng) {
  if (heads <= 0 || d % heads != 0)
    throw ConfigError("attention width " + std::to_string(d) + " is not divisible by " + std::to_string(heads) +
                      " heads");
  MultiheadAttention a;
  a.heads = heads;
  a.query = Linear<S>::create(store, name + ".query", group, d, d, rng);
  a.key = Linear<S>::create(store, name + ".key", group, d, d, rng);
  a.value = Linear<S>::create(store, name + ".value", group, d, d, rng);
  a.output = Linear<S>::create(store, name + ".output", group, d, d, rng);
  return a;
}

template <typename S>
Tensor<S> MultiheadAttention<S>::operator()(const Tensor<S>& queries, const Tensor<S>& keys_values,
                                            Tensor<S>* probs) const {
  const Index batch = queries.dim(0), nq = queries.dim(1), nk = keys_values.dim(1), d = queries.dim(2);
  if (keys_values.dim(0) != batch || keys_values.dim(2) != d)
    throw DimensionError("attention: query " + queries.shape().str() + " and key/value " +
                         keys_values.shape().str() + " disagree");
  const Index dh = d / heads;
  auto split = [&](const Tensor<S>& t, Index n) { return permute(reshape(t, Shape{batch, n, heads, dh}), {0, 2, 1, 3}); };
  auto q = split(query(queries), nq);
  auto k = split(key(keys_values), nk);
  auto v = split(value(keys_values), nk);
  auto scores = scale(matmul(q, transpose(k)), S(1.0 / std::sqrt(static_cast<double>(dh))));
  auto weights = softmax(scores, -1);
  if (probs) *probs = weights;
  auto mixed = reshape(permute(matmul(weights, v), {0, 2, 1, 3}), Shape{batch, nq, d});
  return output(mixed);
}

template <typename S>
Mlp<S> Mlp<S>::create(ParameterStore<S>& store, const std::string& name, const std::string& group, Index d,
                      Index hidden, Rng& rng) {
  return {Linear<S>::create(store, name + ".fc1", group, d, hidden, rng),
          Linear<S>::create(store, name + ".fc2", group, hidden, d, rng)};
}

template <typename S>
TransformerBlock<S> TransformerBlock<S>::create(ParameterStore<S>& store, const std::string& name,
                                                const std::string& group, Index d, Index heads, Index mlp_ratio,
                                                Rng& rng) {
  TransformerBlock b;
  b.norm1 = LayerNorm<S>::create(store, name + ".norm1", group, d, rng);
  b.attention = MultiheadAttention<S>::create(store, name + ".attn", group, d, heads, rng);
  b.norm2 = LayerNorm<S>::create(store, name + ".norm2", group, d, rng);
  b.mlp = Mlp<S>::create(store, name + ".mlp", group, d, d * mlp_ratio, rng);
  return b;
}

template <typename S>
Tensor<S> TransformerBlock<S>::operator()(const Tensor<S>& x) const {
  auto h = norm1(x);
  auto y = add(x, attention(h, h));
  return add(y, mlp(norm2(y)));
}

template class ParameterStore<float>;
template class ParameterStore<double>;
template struct Linear<float>;
template struct Linear<double>;
template struct LayerNorm<float>;
template struct LayerNorm<double>;
template struct MultiheadAttention<float>;
template struct MultiheadAttention<double>;
template struct Mlp<float>;
template struct Mlp<double>;
template struct TransformerBlock<float>;
template struct TransformerBlock<double>;

}  // namespace evcc
