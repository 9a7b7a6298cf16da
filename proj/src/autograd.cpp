#include "evcc/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <unordered_set>

#include "evcc/rng.hpp"

namespace evcc {

namespace {
struct Fault {
  std::string op;
  double factor = 1.0;
};
Fault g_fault;
}  // namespace

namespace fault_injection {
void set_backward_fault(std::string op, double factor) { g_fault = {std::move(op), factor}; }
}  // namespace fault_injection

template <typename Scalar>
Tape<Scalar> Tape<Scalar>::record(const Tensor<Scalar>& root) {
  Tape tape;
  if (!root.defined()) return tape;
  std::unordered_set<Node<Scalar>*> visited;
  // Iterative post-order DFS; a node is emitted after all of its inputs.
  std::vector<std::pair<Node<Scalar>*, std::size_t>> stack;
  stack.emplace_back(root.node(), 0);
  visited.insert(root.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node<Scalar>* child = node->inputs[next++].get();
      if (child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
      continue;
    }
    tape.order_.push_back(node);
    stack.pop_back();
  }
  return tape;
}

template <typename Scalar>
void backward(const Tensor<Scalar>& loss) {
  if (!loss.defined()) throw ArgumentError("backward: undefined loss");
  if (loss.numel() != 1) throw ArgumentError("backward: loss must be a scalar, got shape " + loss.shape().str());
  Node<Scalar>* root = loss.node();
  if (root->consumed) throw ArgumentError("backward: graph already released by a previous backward call");
  if (!root->requires_grad) throw ArgumentError("backward: loss does not depend on any tensor requiring grad");

  const Tape<Scalar> tape = Tape<Scalar>::record(loss);
  root->grad_buffer()[0] = Scalar(1);
  auto nodes = tape.nodes();
  for (auto it = nodes.rbegin(); it != nodes.rend(); ++it) {
    Node<Scalar>* node = *it;
    if (node->is_leaf()) continue;
    node->grad_buffer();
    if (!g_fault.op.empty() && node->op == g_fault.op)
      for (auto& g : node->grad) g = static_cast<Scalar>(g * g_fault.factor);
    node->backward(*node);
  }
  for (Node<Scalar>* node : nodes) {
    if (node->is_leaf()) continue;
    node->backward = nullptr;
    node->inputs.clear();
    node->consumed = true;
  }
  // Interior nodes stay marked as requiring grad so that reuse is detected above.
  root->consumed = true;
}

bool GradCheckReport::passed() const {
  return std::all_of(entries.begin(), entries.end(), [](const GradCheckEntry& e) { return e.skipped || e.passed; });
}

double GradCheckReport::max_rel_error() const {
  double worst = 0.0;
  for (const auto& e : entries)
    if (!e.skipped) worst = std::max(worst, e.max_rel_error);
  return worst;
}

std::vector<std::string> GradCheckReport::failing_groups() const {
  std::vector<std::string> groups;
  for (const auto& e : entries)
    if (!e.skipped && !e.passed && std::find(groups.begin(), groups.end(), e.group) == groups.end())
      groups.push_back(e.group);
  return groups;
}

GradCheckReport grad_check(const std::function<Tensor<double>()>& loss_fn, std::span<NamedTensor<double>> params,
                           const GradCheckOptions& options) {
  for (auto& p : params) {
    p.tensor.zero_grad();
    p.tensor.set_requires_grad(p.trainable);
  }
  if (const auto loss = loss_fn(); loss.requires_grad()) backward(loss);

  GradCheckReport report;
  Rng rng(options.seed, 0x67726164ULL);
  for (auto& p : params) {
    GradCheckEntry entry;
    entry.name = p.name;
    entry.group = p.group;
    if (!p.trainable) {
      entry.skipped = true;
      report.entries.push_back(entry);
      continue;
    }
    const Index n = p.tensor.numel();
    std::vector<Index> picks(static_cast<std::size_t>(n));
    std::iota(picks.begin(), picks.end(), Index(0));
    if (options.max_per_tensor > 0 && n > options.max_per_tensor) {
      rng.shuffle(std::span<Index>(picks));
      picks.resize(static_cast<std::size_t>(options.max_per_tensor));
      std::sort(picks.begin(), picks.end());
    }
    std::vector<double> analytic(static_cast<std::size_t>(n), 0.0);
    if (p.tensor.has_grad()) std::copy(p.tensor.grad().begin(), p.tensor.grad().end(), analytic.begin());

    auto values = p.tensor.mutable_data();
    for (Index i : picks) {
      const double original = values[i];
      double plus = 0.0, minus = 0.0;
      bool finite = true;
      {
        NoGradGuard no_grad;
        try {
          values[i] = original + options.step;
          plus = loss_fn().item();
          values[i] = original - options.step;
          minus = loss_fn().item();
        } catch (const NumericError&) {
          finite = false;
        }
      }
      values[i] = original;
      ++entry.checked;
      if (!finite || !std::isfinite(plus) || !std::isfinite(minus)) {
        entry.finite = false;
        entry.passed = false;
        entry.worst_index = i;
        continue;
      }
      const double numeric = (plus - minus) / (2.0 * options.step);
      const double a = analytic[static_cast<std::size_t>(i)];
      const double denom = std::max({std::abs(a), std::abs(numeric), options.scale_floor});
      const double rel = std::abs(a - numeric) / denom;
      if (entry.worst_index < 0 || rel > entry.max_rel_error) {
        entry.max_rel_error = rel;
        entry.worst_index = i;
        entry.worst_analytic = a;
        entry.worst_numeric = numeric;
      }
    }
    entry.passed = entry.passed && entry.max_rel_error < options.tolerance;
    report.entries.push_back(entry);
  }
  return report;
}

template class Tape<float>;
template class Tape<double>;
template void backward(const Tensor<float>&);
template void backward(const Tensor<double>&);

}  // namespace evcc
