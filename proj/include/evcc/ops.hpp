#pragma once

#include <span>
#include <vector>

#include "evcc/tensor.hpp"

namespace evcc {

// Differentiable operations. Every op records itself for reverse mode when
// grad is enabled and any input requires grad, and throws NumericError if it
// produces a non-finite value. Reductions run in a fixed sequential order.

// Elementwise binary ops with right-aligned broadcasting.
template <typename S> Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b);
template <typename S> Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b);
template <typename S> Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b);

template <typename S> Tensor<S> scale(const Tensor<S>& x, S factor);
template <typename S> Tensor<S> add_scalar(const Tensor<S>& x, S offset);

/// Tanh-approximation GELU: 0.5 x (1 + tanh(0.7978845608 (x + 0.044715 x^3))).
template <typename S> Tensor<S> gelu(const Tensor<S>& x);
template <typename S> Tensor<S> sigmoid(const Tensor<S>& x);

/// Batched matrix product over the last two axes; batch axes broadcast.
template <typename S> Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b);

template <typename S> Tensor<S> reshape(const Tensor<S>& x, const Shape& shape);
template <typename S> Tensor<S> permute(const Tensor<S>& x, std::span<const int> order);
template <typename S> Tensor<S> permute(const Tensor<S>& x, std::initializer_list<int> order) {
  return permute(x, std::span<const int>(order.begin(), order.size()));
}
/// Swap the last two axes.
template <typename S> Tensor<S> transpose(const Tensor<S>& x);

template <typename S> Tensor<S> softmax(const Tensor<S>& x, int axis);
template <typename S> Tensor<S> log_softmax(const Tensor<S>& x, int axis);

/// Normalizes over the last axis, then applies gain and bias of that width.
template <typename S>
Tensor<S> layer_norm(const Tensor<S>& x, const Tensor<S>& gain, const Tensor<S>& bias,
                     S eps = S(1e-5));

/// Full reductions to a rank-0 tensor.
template <typename S> Tensor<S> sum(const Tensor<S>& x);
template <typename S> Tensor<S> mean(const Tensor<S>& x);
/// Mean over one axis; the axis is removed from the result.
template <typename S> Tensor<S> mean_axis(const Tensor<S>& x, int axis);

template <typename S> Tensor<S> concat(std::span<const Tensor<S>> parts, int axis);
template <typename S> Tensor<S> concat(std::initializer_list<Tensor<S>> parts, int axis) {
  return concat(std::span<const Tensor<S>>(parts.begin(), parts.size()), axis);
}
template <typename S> Tensor<S> slice(const Tensor<S>& x, int axis, Index start, Index length);

/// Per-sample selection along axis 1: out[b, j, ...] = x[b, indices[b][j], ...].
/// Every sample must select the same number of entries.
template <typename S>
Tensor<S> gather_axis1(const Tensor<S>& x, const std::vector<std::vector<Index>>& indices);

enum class Padding { kZero, kCircular };

/// 3x3 depthwise convolution, stride 1, same-size output, on NHWC input.
/// kernel is [3, 3, C], bias is [C].
template <typename S>
Tensor<S> depthwise_conv3x3(const Tensor<S>& x, const Tensor<S>& kernel, const Tensor<S>& bias,
                            Padding padding = Padding::kZero);

/// [B, H, W, C] -> [B, H/p, W/p, p*p*C]; each output cell holds its p x p
/// block in (row, column, channel) order.
template <typename S> Tensor<S> space_to_depth(const Tensor<S>& x, Index block);

/// Batch-mean cross-entropy of logits [B, C] against integer labels.
template <typename S> Tensor<S> cross_entropy(const Tensor<S>& logits, std::span<const int> labels);

/// Indices of the k largest scores, ties to the lower index, returned ascending.
template <typename S> std::vector<Index> topk_indices(std::span<const S> scores, Index k);
template <typename S> std::vector<Index> topk_indices(const Tensor<S>& scores, Index k) {
  if (scores.rank() != 1) throw DimensionError("topk_indices: expected rank-1 scores, got " + scores.shape().str());
  return topk_indices(scores.data(), k);
}

}  // namespace evcc
