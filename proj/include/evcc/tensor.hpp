#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "evcc/errors.hpp"

namespace evcc {

using Index = std::int64_t;

/// Extents of a dense row-major tensor of rank 0..4.
class Shape {
 public:
  static constexpr int kMaxRank = 4;

  Shape() = default;
  Shape(std::initializer_list<Index> dims);
  explicit Shape(std::span<const Index> dims);

  int rank() const { return rank_; }
  Index numel() const;

  /// Extent along `axis`; negative axes count from the back.
  Index operator[](int axis) const { return dims_[static_cast<std::size_t>(normalize(axis))]; }
  int normalize(int axis) const;

  std::span<const Index> dims() const { return {dims_.data(), static_cast<std::size_t>(rank_)}; }
  std::array<Index, kMaxRank> strides() const;

  std::string str() const;

  friend bool operator==(const Shape& a, const Shape& b) {
    if (a.rank_ != b.rank_) return false;
    for (int i = 0; i < a.rank_; ++i)
      if (a.dims_[i] != b.dims_[i]) return false;
    return true;
  }

 private:
  std::array<Index, kMaxRank> dims_{};
  int rank_ = 0;
};

template <typename Scalar>
struct Node;

template <typename Scalar>
using BackwardFn = std::function<void(Node<Scalar>&)>;

/// Graph vertex. Leaves have no backward rule; interior nodes hold their
/// inputs until a backward pass releases them.
template <typename Scalar>
struct Node {
  Shape shape;
  std::vector<Scalar> value;
  std::vector<Scalar> grad;
  bool requires_grad = false;
  bool consumed = false;
  std::string_view op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  BackwardFn<Scalar> backward;

  bool is_leaf() const { return !backward; }

  Scalar* grad_buffer() {
    if (grad.empty()) grad.assign(value.size(), Scalar(0));
    return grad.data();
  }
};

/// Handle to a shared graph node. Copies alias the same node.
template <typename Scalar>
class Tensor {
 public:
  using scalar_type = Scalar;
  using NodePtr = std::shared_ptr<Node<Scalar>>;

  Tensor() = default;
  explicit Tensor(NodePtr node) : node_(std::move(node)) {}
  explicit Tensor(const Shape& shape, Scalar fill = Scalar(0));
  Tensor(const Shape& shape, std::vector<Scalar> values);

  static Tensor zeros(const Shape& shape) { return Tensor(shape); }
  static Tensor scalar(Scalar v) { return Tensor(Shape{}, std::vector<Scalar>{v}); }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int rank() const { return node_->shape.rank(); }
  Index dim(int axis) const { return node_->shape[axis]; }
  Index numel() const { return static_cast<Index>(node_->value.size()); }

  std::span<const Scalar> data() const { return node_->value; }
  /// In-place access for leaves (optimizer updates, perturbation in gradient checks).
  std::span<Scalar> mutable_data();

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const Scalar> grad() const { return node_->grad; }
  std::span<Scalar> mutable_grad() { return {node_->grad_buffer(), node_->value.size()}; }
  void zero_grad() { node_->grad.clear(); }

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool on);
  bool is_leaf() const { return node_->is_leaf(); }

  Scalar item() const;
  Scalar at(std::initializer_list<Index> index) const;

  /// Same values, no graph history.
  Tensor detach() const;

  template <typename To>
  Tensor<To> cast() const {
    std::vector<To> out(node_->value.begin(), node_->value.end());
    return Tensor<To>(shape(), std::move(out));
  }

  Node<Scalar>* node() const { return node_.get(); }
  const NodePtr& node_ptr() const { return node_; }

 private:
  NodePtr node_;
};

/// True unless a NoGradGuard is alive on this thread.
bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

extern template class Tensor<float>;
extern template class Tensor<double>;

}  // namespace evcc
