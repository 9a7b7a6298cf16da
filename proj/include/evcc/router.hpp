#pragma once

#include <array>

#include "evcc/layers.hpp"

namespace evcc {

/// Shared-trunk router. `trunk` (W1) feeds both the routing head (W2) and
/// the confidence head (Wc); there is exactly one instance of it.
template <typename S>
struct RouterParams {
  LayerNorm<S> norm;  // width 3d
  Linear<S> trunk;    // 3d -> h
  Linear<S> routing;  // h -> 3
  Linear<S> confidence;  // h -> 1
  std::array<Linear<S>, 3> branch_proj;  // d -> d each, order (vit, conv, hybrid)

  static RouterParams create(ParameterStore<S>& store, Index d, Index hidden, Rng& rng);
};

template <typename S>
struct RoutingDecision {
  Tensor<S> pi;        // [B, 3]
  Tensor<S> conf;      // [B, 1]
  Tensor<S> pi_final;  // [B, 3]
  Tensor<S> fused;     // [B, d], set by aggregate
};

/// pi = softmax(W2 GELU(W1 LN([F_v; F_c; Z_x]) + b1) + b2)
/// conf = sigmoid(Wc GELU(W1 LN([F_v; F_c; Z_x]) + b1) + bc)
/// pi_final = conf * pi + (1 - conf) / 3
/// The GELU trunk activation is computed once and shared by both heads.
template <typename S>
RoutingDecision<S> route(const Tensor<S>& f_v, const Tensor<S>& f_c, const Tensor<S>& z_x,
                         const RouterParams<S>& params);

/// sum_i pi_final[:, i] * Proj_i(feature_i)
template <typename S>
Tensor<S> aggregate(const Tensor<S>& pi_final, const Tensor<S>& f_v, const Tensor<S>& f_c, const Tensor<S>& z_x,
                    const RouterParams<S>& params);

struct RouterParamReport {
  Index shared_trunk = 0;      // W1, W2, Wc with their biases
  Index duplicated_trunk = 0;  // same, with a second copy of W1 for the confidence head
  Index projections = 0;       // three d x d branch projections with biases
  Index shared_total = 0;
  Index duplicated_total = 0;
  /// 1 - shared_trunk / duplicated_trunk
  double reduction_fraction = 0.0;
};

RouterParamReport router_param_report(Index d, Index hidden);

}  // namespace evcc
