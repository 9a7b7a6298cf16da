#pragma once

#include <array>
#include <span>

#include "evcc/layers.hpp"

namespace evcc {

/// Main classifier on the routed feature plus one auxiliary linear head per
/// branch feature (F_v, F_c, Z_x).
template <typename S>
struct Heads {
  Linear<S> main;
  std::array<Linear<S>, 3> aux;

  static Heads create(ParameterStore<S>& store, Index d, Index classes, Rng& rng);
};

template <typename S>
struct LossBreakdown {
  Tensor<S> total;
  Tensor<S> main_ce;
  std::array<Tensor<S>, 3> aux_ce;
  double lambda = 0.1;
};

/// total = CE(main) + lambda * mean(CE(aux_v), CE(aux_c), CE(aux_x)), each a batch mean.
template <typename S>
LossBreakdown<S> multitask_loss(const Tensor<S>& main_logits, const std::array<Tensor<S>, 3>& aux_logits,
                                std::span<const int> labels, double lambda);

/// Fraction of rows whose argmax (ties to the lower class) equals the label.
template <typename S>
double accuracy(const Tensor<S>& logits, std::span<const int> labels);

/// Row-wise argmax with ties to the lower index.
template <typename S>
std::vector<int> argmax_rows(const Tensor<S>& logits);

}  // namespace evcc
