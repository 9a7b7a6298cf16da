#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "evcc/tensor.hpp"

namespace evcc {

/// Operations reachable from a root, in topological order (inputs first).
template <typename Scalar>
class Tape {
 public:
  static Tape record(const Tensor<Scalar>& root);

  std::span<Node<Scalar>* const> nodes() const { return order_; }
  std::size_t size() const { return order_.size(); }

 private:
  std::vector<Node<Scalar>*> order_;
};

/// Reverse pass from a scalar loss. Gradients accumulate into every reachable
/// requires-grad leaf; the graph is released afterwards, so a second call on
/// the same loss throws ArgumentError.
template <typename Scalar>
void backward(const Tensor<Scalar>& loss);

namespace fault_injection {

/// Fault injection for negative controls: every gradient flowing back through
/// ops named `op` is multiplied by `factor`. An empty name disables it.
void set_backward_fault(std::string op, double factor = 1.5);

}  // namespace fault_injection

/// A tensor registered for gradient checking or optimization.
template <typename Scalar>
struct NamedTensor {
  std::string name;
  std::string group;
  Tensor<Scalar> tensor;
  bool trainable = true;
};

struct GradCheckOptions {
  double step = 1e-5;
  double tolerance = 1e-4;
  /// Denominator floor for the relative error |a - n| / max(|a|, |n|, floor).
  double scale_floor = 1e-6;
  /// 0 checks every scalar; otherwise a seeded sample of this many per tensor.
  Index max_per_tensor = 0;
  std::uint64_t seed = 0;
};

struct GradCheckEntry {
  std::string name;
  std::string group;
  Index checked = 0;
  double max_rel_error = 0.0;
  Index worst_index = -1;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  bool finite = true;
  bool skipped = false;
  bool passed = true;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;

  bool passed() const;
  double max_rel_error() const;
  /// Group names with at least one failing entry, in first-seen order.
  std::vector<std::string> failing_groups() const;
};

/// Compares reverse-mode gradients of `loss_fn` against central differences
/// (f(p + h) - f(p - h)) / 2h for each parameter scalar. Non-trainable
/// entries are reported as skipped.
GradCheckReport grad_check(const std::function<Tensor<double>()>& loss_fn,
                           std::span<NamedTensor<double>> params,
                           const GradCheckOptions& options = {});

extern template class Tape<float>;
extern template class Tape<double>;

}  // namespace evcc
