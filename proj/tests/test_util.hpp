#pragma once

#include <cstring>
#include <functional>
#include <string>
#include <vector>

#include "evcc/autograd.hpp"
#include "evcc/config.hpp"
#include "evcc/ops.hpp"
#include "evcc/rng.hpp"
#include "evcc/tensor.hpp"

namespace evcc::test {

template <typename S = double>
Tensor<S> random_tensor(const Shape& shape, Rng& rng, double lo = -1.0, double hi = 1.0, bool grad = false) {
  std::vector<S> v(static_cast<std::size_t>(shape.numel()));
  for (auto& x : v) x = static_cast<S>(rng.uniform(lo, hi));
  Tensor<S> t(shape, std::move(v));
  t.set_requires_grad(grad);
  return t;
}

/// Finite-difference check of `f` with respect to the given leaf tensors.
inline GradCheckReport check_inputs(const std::function<Tensor<double>()>& f, std::vector<Tensor<double>> inputs,
                                    double tol = 1e-4) {
  std::vector<NamedTensor<double>> named;
  for (std::size_t i = 0; i < inputs.size(); ++i)
    named.push_back({"input" + std::to_string(i), "inputs", inputs[i], true});
  GradCheckOptions opt;
  opt.tolerance = tol;
  return grad_check(f, named, opt);
}

/// Weighted sum with fixed pseudo-random weights, so every output element
/// contributes a distinct coefficient to the scalar probe.
inline Tensor<double> probe(const Tensor<double>& y, std::uint64_t seed = 7) {
  Rng rng(seed);
  return sum(mul(y, random_tensor<double>(y.shape(), rng)));
}

/// Small enough that a training step takes milliseconds.
inline RunConfig tiny_config() {
  return parse_config(
      "model.image_size=16\n"
      "model.vit_blocks=1\n"
      "model.vit_heads=2\n"
      "model.conv_depths=1,1\n"
      "model.conv_dims=8,16\n"
      "model.d_v=16\n"
      "model.d_x=16\n"
      "model.d=16\n"
      "prune.n_min=4\n"
      "prune.score_hidden=8\n"
      "fusion.depth=2\n"
      "fusion.heads=2\n"
      "data.samples_per_class=8\n"
      "data.test_samples_per_class=4\n"
      "train.steps=6\n"
      "train.batch_size=4\n"
      "train.eval_batch_size=16\n");
}

/// Same length and identical bytes.
template <typename T>
bool bit_equal(const std::vector<T>& a, const std::vector<T>& b) {
  return a.size() == b.size() && (a.empty() || std::memcmp(a.data(), b.data(), a.size() * sizeof(T)) == 0);
}

}  // namespace evcc::test
