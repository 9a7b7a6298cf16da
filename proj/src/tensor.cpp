#include "evcc/tensor.hpp"

#include <sstream>

namespace evcc {

Shape::Shape(std::initializer_list<Index> dims) : Shape(std::span<const Index>(dims.begin(), dims.size())) {}

Shape::Shape(std::span<const Index> dims) {
  if (dims.size() > static_cast<std::size_t>(kMaxRank))
    throw DimensionError("Shape: rank " + std::to_string(dims.size()) + " exceeds 4");
  rank_ = static_cast<int>(dims.size());
  for (int i = 0; i < rank_; ++i) {
    if (dims[i] <= 0) throw DimensionError("Shape: extents must be positive");
    dims_[i] = dims[i];
  }
}

Index Shape::numel() const {
  Index n = 1;
  for (int i = 0; i < rank_; ++i) n *= dims_[i];
  return n;
}

int Shape::normalize(int axis) const {
  const int a = axis < 0 ? axis + rank_ : axis;
  if (a < 0 || a >= rank_)
    throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " + str());
  return a;
}

std::array<Index, Shape::kMaxRank> Shape::strides() const {
  std::array<Index, kMaxRank> s{};
  Index acc = 1;
  for (int i = rank_ - 1; i >= 0; --i) {
    s[i] = acc;
    acc *= dims_[i];
  }
  return s;
}

std::string Shape::str() const {
  std::ostringstream os;
  os << '[';
  for (int i = 0; i < rank_; ++i) os << (i ? "," : "") << dims_[i];
  os << ']';
  return os.str();
}

namespace {
thread_local bool g_grad_enabled = true;
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

template <typename Scalar>
Tensor<Scalar>::Tensor(const Shape& shape, Scalar fill) : node_(std::make_shared<Node<Scalar>>()) {
  node_->shape = shape;
  node_->value.assign(static_cast<std::size_t>(shape.numel()), fill);
}

template <typename Scalar>
Tensor<Scalar>::Tensor(const Shape& shape, std::vector<Scalar> values) : node_(std::make_shared<Node<Scalar>>()) {
  if (static_cast<Index>(values.size()) != shape.numel())
    throw DimensionError("Tensor: " + std::to_string(values.size()) + " values for shape " + shape.str());
  node_->shape = shape;
  node_->value = std::move(values);
}

template <typename Scalar>
std::span<Scalar> Tensor<Scalar>::mutable_data() {
  if (!node_->is_leaf()) throw ArgumentError("mutable_data: only leaf tensors may be modified in place");
  return node_->value;
}

template <typename Scalar>
Tensor<Scalar>& Tensor<Scalar>::set_requires_grad(bool on) {
  if (!node_->is_leaf()) throw ArgumentError("set_requires_grad: only valid on leaf tensors");
  node_->requires_grad = on;
  if (!on) node_->grad.clear();
  return *this;
}

template <typename Scalar>
Scalar Tensor<Scalar>::item() const {
  if (numel() != 1) throw ArgumentError("item: tensor of shape " + shape().str() + " is not a scalar");
  return node_->value[0];
}

template <typename Scalar>
Scalar Tensor<Scalar>::at(std::initializer_list<Index> index) const {
  const Shape& s = shape();
  if (static_cast<int>(index.size()) != s.rank())
    throw DimensionError("at: index rank does not match shape " + s.str());
  const auto strides = s.strides();
  Index offset = 0;
  int axis = 0;
  for (Index i : index) {
    if (i < 0 || i >= s[axis]) throw DimensionError("at: index out of range for shape " + s.str());
    offset += i * strides[axis++];
  }
  return node_->value[static_cast<std::size_t>(offset)];
}

template <typename Scalar>
Tensor<Scalar> Tensor<Scalar>::detach() const {
  return Tensor(shape(), node_->value);
}

template class Tensor<float>;
template class Tensor<double>;

}  // namespace evcc
