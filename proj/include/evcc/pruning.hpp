#pragma once

#include <vector>

#include "evcc/layers.hpp"

namespace evcc {

struct PruningConfig {
  Index r = 2;
  Index n_min = 8;
  double gamma_init = 0.1;
  Index score_hidden = 32;
  /// Multiply kept tokens by sigmoid(score) so the scorer receives gradient.
  bool score_scaling = true;

  void validate() const;
};

/// k = max(N_min, floor(n / r)), clamped to n.
Index compute_k(Index n, const PruningConfig& config);

template <typename S>
struct PrunedSequence {
  Tensor<S> tokens;  // [B, k + 1, d]; summary token last
  std::vector<std::vector<Index>> kept_indices;
  Tensor<S> scores;  // [B, n]
  Tensor<S> gamma;   // [1]
};

/// LayerNorm -> Linear(d, hidden) -> GELU -> Linear(hidden, 1) per token,
/// plus the summary projection and its learnable weight.
template <typename S>
struct TokenPruner {
  LayerNorm<S> norm;
  Linear<S> score_in, score_out;
  Linear<S> pool_proj;
  Tensor<S> gamma;
  PruningConfig config;

  static TokenPruner create(ParameterStore<S>& store, const std::string& name, Index d, const PruningConfig& config,
                            Rng& rng);
};

/// [B, n, d] -> [B, n]
template <typename S>
Tensor<S> importance_scores(const Tensor<S>& tokens, const TokenPruner<S>& params);

/// gamma * pool_proj(mean of the dropped tokens) per sample, [B, d]. Samples
/// with no dropped tokens get the zero vector.
template <typename S>
Tensor<S> summarize_dropped(const Tensor<S>& tokens, const std::vector<std::vector<Index>>& dropped,
                            const Tensor<S>& gamma, const Linear<S>& pool_proj);

template <typename S>
PrunedSequence<S> prune(const Tensor<S>& tokens, const TokenPruner<S>& params);

}  // namespace evcc
