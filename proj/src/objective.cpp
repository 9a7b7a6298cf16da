#include "evcc/objective.hpp"

namespace evcc {

template <typename S>
Heads<S> Heads<S>::create(ParameterStore<S>& store, Index d, Index classes, Rng& rng) {
  if (classes < 2) throw ConfigError("model.n_classes must be >= 2");
  return {Linear<S>::create(store, "heads.main", "heads", d, classes, rng),
          {Linear<S>::create(store, "heads.aux_vit", "heads", d, classes, rng),
           Linear<S>::create(store, "heads.aux_conv", "heads", d, classes, rng),
           Linear<S>::create(store, "heads.aux_hybrid", "heads", d, classes, rng)}};
}

template <typename S>
LossBreakdown<S> multitask_loss(const Tensor<S>& main_logits, const std::array<Tensor<S>, 3>& aux_logits,
                                std::span<const int> labels, double lambda) {
  if (lambda < 0.0) throw ArgumentError("multitask_loss: lambda must be >= 0");
  LossBreakdown<S> out;
  out.lambda = lambda;
  out.main_ce = cross_entropy(main_logits, labels);
  for (std::size_t i = 0; i < 3; ++i) out.aux_ce[i] = cross_entropy(aux_logits[i], labels);
  if (lambda == 0.0) {
    out.total = out.main_ce;
    return out;
  }
  auto aux_sum = add(add(out.aux_ce[0], out.aux_ce[1]), out.aux_ce[2]);
  out.total = add(out.main_ce, scale(aux_sum, static_cast<S>(lambda / 3.0)));
  return out;
}

template <typename S>
std::vector<int> argmax_rows(const Tensor<S>& logits) {
  if (logits.rank() != 2) throw DimensionError("argmax_rows: expected [B,C], got " + logits.shape().str());
  const Index batch = logits.dim(0), classes = logits.dim(1);
  const auto z = logits.data();
  std::vector<int> out(static_cast<std::size_t>(batch));
  for (Index b = 0; b < batch; ++b) {
    Index best = 0;
    for (Index c = 1; c < classes; ++c)
      if (z[b * classes + c] > z[b * classes + best]) best = c;
    out[b] = static_cast<int>(best);
  }
  return out;
}

template <typename S>
double accuracy(const Tensor<S>& logits, std::span<const int> labels) {
  const auto pred = argmax_rows(logits);
  if (pred.size() != labels.size()) throw DimensionError("accuracy: label count does not match batch");
  if (pred.empty()) return 0.0;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hits += pred[i] == labels[i];
  return static_cast<double>(hits) / static_cast<double>(pred.size());
}

template struct Heads<float>;
template struct Heads<double>;
template LossBreakdown<float> multitask_loss(const Tensor<float>&, const std::array<Tensor<float>, 3>&,
                                             std::span<const int>, double);
template LossBreakdown<double> multitask_loss(const Tensor<double>&, const std::array<Tensor<double>, 3>&,
                                              std::span<const int>, double);
template double accuracy(const Tensor<float>&, std::span<const int>);
template double accuracy(const Tensor<double>&, std::span<const int>);
template std::vector<int> argmax_rows(const Tensor<float>&);
template std::vector<int> argmax_rows(const Tensor<double>&);

}  // namespace evcc
