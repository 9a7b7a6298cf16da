#include "evcc/optim.hpp"

#include <cmath>
#include <numbers>

namespace evcc {

void OptimConfig::validate() const {
  if (!(lr > 0.0)) throw ConfigError("train.lr must be > 0");
  if (min_lr < 0.0 || min_lr > lr) throw ConfigError("train.min_lr must lie in [0, train.lr]");
  if (warmup_steps < 0) throw ConfigError("train.warmup_steps must be >= 0");
  if (weight_decay < 0.0) throw ConfigError("train.weight_decay must be >= 0");
  if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0) throw ConfigError("adam betas must lie in [0, 1)");
  if (clip_norm < 0.0) throw ConfigError("train.clip_norm must be >= 0");
}

double cosine_lr(Index step, Index total_steps, const OptimConfig& c) {
  if (c.warmup_steps > 0 && step < c.warmup_steps)
    return c.lr * static_cast<double>(step + 1) / static_cast<double>(c.warmup_steps);
  const Index span = total_steps - c.warmup_steps;
  if (span <= 0) return c.lr;
  const double progress = static_cast<double>(step - c.warmup_steps) / static_cast<double>(span);
  return c.min_lr + 0.5 * (c.lr - c.min_lr) * (1.0 + std::cos(std::numbers::pi * progress));
}

template <typename S>
void Optimizer<S>::ensure_state(const ParameterStore<S>& store) {
  if (config_.kind != OptimizerKind::kAdam || m_.size() == store.entries().size()) return;
  m_.clear();
  v_.clear();
  for (const auto& e : store.entries()) {
    m_.emplace_back(static_cast<std::size_t>(e.tensor.numel()), S(0));
    v_.emplace_back(static_cast<std::size_t>(e.tensor.numel()), S(0));
  }
}

template <typename S>
void Optimizer<S>::step(ParameterStore<S>& store, double lr) {
  ensure_state(store);
  ++t_;
  double scale = 1.0;
  if (config_.clip_norm > 0.0) {
    double sq = 0.0;
    for (const auto& e : store.entries())
      if (e.trainable && e.tensor.has_grad())
        for (S g : e.tensor.grad()) sq += static_cast<double>(g) * static_cast<double>(g);
    const double norm = std::sqrt(sq);
    if (norm > config_.clip_norm) scale = config_.clip_norm / norm;
  }
  const S slr = static_cast<S>(lr);
  const S sscale = static_cast<S>(scale);
  const S decay = static_cast<S>(1.0 - lr * config_.weight_decay);
  const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
  const S b1 = static_cast<S>(config_.beta1), b2 = static_cast<S>(config_.beta2);
  const S step_size = static_cast<S>(lr / bc1), inv_bc2 = static_cast<S>(1.0 / bc2), eps = static_cast<S>(config_.eps);

  auto& entries = store.entries();
  for (std::size_t idx = 0; idx < entries.size(); ++idx) {
    auto& e = entries[idx];
    if (!e.trainable || !e.tensor.has_grad()) continue;
    auto w = e.tensor.mutable_data();
    const auto g = e.tensor.grad();
    if (config_.weight_decay > 0.0)
      for (auto& x : w) x *= decay;
    if (config_.kind == OptimizerKind::kSgd) {
      for (std::size_t i = 0; i < w.size(); ++i) w[i] -= slr * (sscale * g[i]);
    } else {
      auto& m = m_[idx];
      auto& v = v_[idx];
      for (std::size_t i = 0; i < w.size(); ++i) {
        const S gi = sscale * g[i];
        m[i] = b1 * m[i] + (S(1) - b1) * gi;
        v[i] = b2 * v[i] + (S(1) - b2) * gi * gi;
        w[i] -= step_size * m[i] / (std::sqrt(v[i] * inv_bc2) + eps);
      }
    }
  }
}

template <typename S>
std::vector<NamedTensor<S>> Optimizer<S>::state(const ParameterStore<S>& store) const {
  std::vector<NamedTensor<S>> out;
  if (config_.kind != OptimizerKind::kAdam || m_.empty()) return out;
  const auto& entries = store.entries();
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const auto& shape = entries[i].tensor.shape();
    out.push_back({"adam.m." + entries[i].name, "optim", Tensor<S>(shape, m_[i]), false});
    out.push_back({"adam.v." + entries[i].name, "optim", Tensor<S>(shape, v_[i]), false});
  }
  return out;
}

template <typename S>
void Optimizer<S>::load_state(const ParameterStore<S>& store, const std::vector<NamedTensor<S>>& state,
                              Index steps_taken) {
  t_ = steps_taken;
  if (config_.kind != OptimizerKind::kAdam) return;
  m_.clear();
  v_.clear();
  ensure_state(store);
  if (state.empty()) return;  // moments start from zero
  const auto& entries = store.entries();
  auto find = [&](const std::string& name) -> const NamedTensor<S>* {
    for (const auto& s : state)
      if (s.name == name) return &s;
    return nullptr;
  };
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const auto* m = find("adam.m." + entries[i].name);
    const auto* v = find("adam.v." + entries[i].name);
    if (!m || !v) throw FormatError("checkpoint lacks optimizer state for " + entries[i].name);
    if (m->tensor.numel() != entries[i].tensor.numel() || v->tensor.numel() != entries[i].tensor.numel())
      throw FormatError("optimizer state shape mismatch for " + entries[i].name);
    m_[i].assign(m->tensor.data().begin(), m->tensor.data().end());
    v_[i].assign(v->tensor.data().begin(), v->tensor.data().end());
  }
}

template class Optimizer<float>;
template class Optimizer<double>;

}  // namespace evcc
