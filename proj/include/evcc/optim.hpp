#pragma once

#include <string>
#include <vector>

#include "evcc/layers.hpp"

namespace evcc {

enum class OptimizerKind { kSgd, kAdam };

struct OptimConfig {
  OptimizerKind kind = OptimizerKind::kSgd;
  double lr = 0.05;
  double min_lr = 0.0;
  Index warmup_steps = 0;
  double weight_decay = 0.0;  // decoupled
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  /// Global gradient-norm clip; 0 disables.
  double clip_norm = 0.0;

  void validate() const;
};

/// Linear warmup then cosine annealing from lr to min_lr over total_steps.
double cosine_lr(Index step, Index total_steps, const OptimConfig& config);

/// Updates trainable entries of a ParameterStore in registration order.
/// Frozen entries are never touched.
template <typename S>
class Optimizer {
 public:
  explicit Optimizer(OptimConfig config) : config_(config) {}

  void step(ParameterStore<S>& store, double lr);

  Index steps_taken() const { return t_; }
  const OptimConfig& config() const { return config_; }

  /// Adam moments as named tensors ("adam.m.<name>", "adam.v.<name>") for checkpointing.
  std::vector<NamedTensor<S>> state(const ParameterStore<S>& store) const;
  void load_state(const ParameterStore<S>& store, const std::vector<NamedTensor<S>>& state, Index steps_taken);

 private:
  void ensure_state(const ParameterStore<S>& store);

  OptimConfig config_;
  Index t_ = 0;
  std::vector<std::vector<S>> m_, v_;
};

}  // namespace evcc
