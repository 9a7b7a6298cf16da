#include "evcc/pruning.hpp"

#include <algorithm>

namespace evcc {

void PruningConfig::validate() const {
  if (r < 1) throw ConfigError("prune.r must be >= 1");
  if (n_min < 1) throw ConfigError("prune.n_min must be >= 1");
  if (score_hidden < 1) throw ConfigError("prune.score_hidden must be >= 1");
}

Index compute_k(Index n, const PruningConfig& config) {
  if (n < 1) throw ArgumentError("compute_k: n must be >= 1");
  return std::min(n, std::max(config.n_min, n / config.r));
}

template <typename S>
TokenPruner<S> TokenPruner<S>::create(ParameterStore<S>& store, const std::string& name, Index d,
                                      const PruningConfig& config, Rng& rng) {
  config.validate();
  TokenPruner p;
  p.config = config;
  p.norm = LayerNorm<S>::create(store, name + ".norm", name, d, rng);
  p.score_in = Linear<S>::create(store, name + ".score_in", name, d, config.score_hidden, rng);
  p.score_out = Linear<S>::create(store, name + ".score_out", name, config.score_hidden, 1, rng);
  p.pool_proj = Linear<S>::create(store, name + ".pool_proj", name, d, d, rng);
  p.gamma = store.add(name + ".gamma", name, Shape{1}, Init::kZeros, rng);
  p.gamma.mutable_data()[0] = static_cast<S>(config.gamma_init);
  return p;
}

template <typename S>
Tensor<S> importance_scores(const Tensor<S>& tokens, const TokenPruner<S>& params) {
  if (tokens.rank() != 3) throw DimensionError("importance_scores: expected [B,n,d], got " + tokens.shape().str());
  auto s = params.score_out(gelu(params.score_in(params.norm(tokens))));
  return reshape(s, Shape{tokens.dim(0), tokens.dim(1)});
}

template <typename S>
Tensor<S> summarize_dropped(const Tensor<S>& tokens, const std::vector<std::vector<Index>>& dropped,
                            const Tensor<S>& gamma, const Linear<S>& pool_proj) {
  const Index batch = tokens.dim(0), d = tokens.dim(2);
  const bool any_empty = std::any_of(dropped.begin(), dropped.end(), [](const auto& v) { return v.empty(); });
  if (any_empty) {
    // k depends only on n, so emptiness is uniform across the batch.
    if (!std::all_of(dropped.begin(), dropped.end(), [](const auto& v) { return v.empty(); }))
      throw ArgumentError("summarize_dropped: ragged dropped sets");
    return Tensor<S>(Shape{batch, d});
  }
  auto pooled = mean_axis(gather_axis1(tokens, dropped), 1);
  return mul(pool_proj(pooled), gamma);
}

template <typename S>
PrunedSequence<S> prune(const Tensor<S>& tokens, const TokenPruner<S>& params) {
  if (tokens.rank() != 3) throw DimensionError("prune: expected [B,n,d], got " + tokens.shape().str());
  const Index batch = tokens.dim(0), n = tokens.dim(1), d = tokens.dim(2);
  const Index k = compute_k(n, params.config);

  PrunedSequence<S> out;
  out.scores = importance_scores(tokens, params);
  out.gamma = params.gamma;
  std::vector<std::vector<Index>> dropped(static_cast<std::size_t>(batch));
  const auto all_scores = out.scores.data();
  for (Index b = 0; b < batch; ++b) {
    auto kept = topk_indices<S>(all_scores.subspan(static_cast<std::size_t>(b * n), static_cast<std::size_t>(n)), k);
    auto& drop = dropped[static_cast<std::size_t>(b)];
    std::size_t next = 0;
    for (Index i = 0; i < n; ++i) {
      if (next < kept.size() && kept[next] == i)
        ++next;
      else
        drop.push_back(i);
    }
    out.kept_indices.push_back(std::move(kept));
  }

  auto kept_tokens = gather_axis1(tokens, out.kept_indices);
  if (params.config.score_scaling) {
    auto weights = sigmoid(reshape(gather_axis1(out.scores, out.kept_indices), Shape{batch, k, 1}));
    kept_tokens = mul(kept_tokens, weights);
  }
  auto summary = reshape(summarize_dropped(tokens, dropped, params.gamma, params.pool_proj), Shape{batch, 1, d});
  out.tokens = concat({kept_tokens, summary}, 1);
  return out;
}

template struct TokenPruner<float>;
template struct TokenPruner<double>;
template Tensor<float> importance_scores(const Tensor<float>&, const TokenPruner<float>&);
template Tensor<double> importance_scores(const Tensor<double>&, const TokenPruner<double>&);
template Tensor<float> summarize_dropped(const Tensor<float>&, const std::vector<std::vector<Index>>&,
                                         const Tensor<float>&, const Linear<float>&);
template Tensor<double> summarize_dropped(const Tensor<double>&, const std::vector<std::vector<Index>>&,
                                          const Tensor<double>&, const Linear<double>&);
template PrunedSequence<float> prune(const Tensor<float>&, const TokenPruner<float>&);
template PrunedSequence<double> prune(const Tensor<double>&, const TokenPruner<double>&);

}  // namespace evcc
