#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>

#include "evcc/backbones.hpp"
#include "evcc/fusion.hpp"
#include "evcc/objective.hpp"
#include "evcc/pruning.hpp"
#include "evcc/router.hpp"

namespace evcc {

struct ModelConfig {
  BranchConfig branches;
  PruningConfig prune;
  /// When false the token sequences go to fusion untouched (no scorer, no summary token).
  bool prune_enabled = true;
  FusionConfig fusion;
  /// Router trunk width; 0 means "same as d".
  Index router_hidden = 0;
  Index n_classes = 4;
  double lambda = 0.1;
  /// Single-branch reference classifier: ViT branch, mean pooling, linear head.
  bool vit_only = false;

  Index hidden() const { return router_hidden > 0 ? router_hidden : branches.d; }
  /// Propagates the shared width into the fusion config and validates everything.
  void finalize();
  /// Canonical key=value text of every architecture-defining field.
  std::string architecture() const;
};

template <typename S>
struct ModelOutput {
  BranchOutputs<S> branches;
  std::optional<PrunedSequence<S>> pruned_v, pruned_c;
  FusionState<S> fused;
  Tensor<S> f_v, f_c;
  RoutingDecision<S> routing;
  Tensor<S> main_logits;
  std::array<Tensor<S>, 3> aux_logits;
};

template <typename S>
class EvccModel {
 public:
  EvccModel(ModelConfig config, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }
  ParameterStore<S>& parameters() { return store_; }
  const ParameterStore<S>& parameters() const { return store_; }

  /// images [B, 3, H, W]
  ModelOutput<S> forward(const Tensor<S>& images, FusionTrace<S>* trace = nullptr) const;
  LossBreakdown<S> loss(const ModelOutput<S>& out, std::span<const int> labels) const;

  /// Learned summary weights (gamma_v, gamma_c); zero when pruning is disabled.
  std::pair<double, double> gammas() const;

  // Components are public so tests can reach individual parameters.
  VitBranch<S> vit;
  ConvBranch<S> conv;
  HybridBranch<S> hybrid;
  SharedProjection<S> projection;
  TokenPruner<S> prune_v, prune_c;
  FusionParams<S> fusion;
  RouterParams<S> router;
  Heads<S> heads;
  Linear<S> baseline_proj;  // vit_only mode

 private:
  ModelConfig config_;
  ParameterStore<S> store_;
};

}  // namespace evcc
