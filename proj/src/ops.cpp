#include "evcc/ops.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <type_traits>

namespace evcc {
namespace {

/// Exponent-field test so the scan vectorizes; an all-ones exponent is Inf or NaN.
template <typename S>
void check_finite(std::string_view op, const std::vector<S>& values) {
  using Bits = std::conditional_t<sizeof(S) == 4, std::uint32_t, std::uint64_t>;
  constexpr Bits mask = sizeof(S) == 4 ? Bits(0x7f800000u) : Bits(0x7ff0000000000000ull);
  Bits bad = 0;
  for (const S v : values) bad |= Bits((std::bit_cast<Bits>(v) & mask) == mask);
  if (bad) throw NumericError(std::string(op) + ": forward produced a non-finite value");
}

template <typename S>
Tensor<S> finish(std::string_view op, const Shape& shape, std::vector<S> value,
                 std::span<const Tensor<S>* const> inputs, BackwardFn<S> fn) {
  check_finite(op, value);
  auto node = std::make_shared<Node<S>>();
  node->shape = shape;
  node->value = std::move(value);
  bool needs_grad = false;
  if (grad_enabled())
    for (const auto* in : inputs) needs_grad = needs_grad || in->requires_grad();
  if (needs_grad) {
    node->requires_grad = true;
    node->op = op;
    node->inputs.reserve(inputs.size());
    for (const auto* in : inputs) node->inputs.push_back(in->node_ptr());
    node->backward = std::move(fn);
  }
  return Tensor<S>(std::move(node));
}

template <typename S>
Tensor<S> make_op(std::string_view op, const Shape& shape, std::vector<S> value,
                  std::initializer_list<const Tensor<S>*> inputs, BackwardFn<S> fn) {
  return finish<S>(op, shape, std::move(value), std::span<const Tensor<S>* const>(inputs.begin(), inputs.size()),
                   std::move(fn));
}

/// Grad buffer of input i, or nullptr when that input does not need one.
template <typename S>
S* input_grad(Node<S>& self, std::size_t i) {
  auto& in = *self.inputs[i];
  return in.requires_grad ? in.grad_buffer() : nullptr;
}

std::string pair_str(const Shape& a, const Shape& b) { return a.str() + " and " + b.str(); }

// ---------------------------------------------------------------------------
// Broadcasting

struct BroadcastPlan {
  Shape shape;
  std::array<Index, 4> extent{1, 1, 1, 1};
  std::array<Index, 4> stride_a{0, 0, 0, 0};
  std::array<Index, 4> stride_b{0, 0, 0, 0};
};

std::array<Index, 4> padded_dims(const Shape& s) {
  std::array<Index, 4> d{1, 1, 1, 1};
  const int off = 4 - s.rank();
  for (int i = 0; i < s.rank(); ++i) d[off + i] = s[i];
  return d;
}

std::array<Index, 4> padded_strides(const std::array<Index, 4>& dims) {
  std::array<Index, 4> st{};
  Index acc = 1;
  for (int i = 3; i >= 0; --i) {
    st[i] = acc;
    acc *= dims[i];
  }
  return st;
}

BroadcastPlan plan_broadcast(const Shape& a, const Shape& b, std::string_view op) {
  BroadcastPlan p;
  const auto da = padded_dims(a);
  const auto db = padded_dims(b);
  const auto sa = padded_strides(da);
  const auto sb = padded_strides(db);
  const int rank = std::max(a.rank(), b.rank());
  std::vector<Index> out;
  for (int i = 0; i < 4; ++i) {
    if (da[i] != db[i] && da[i] != 1 && db[i] != 1)
      throw DimensionError(std::string(op) + ": cannot broadcast shapes " + pair_str(a, b));
    p.extent[i] = std::max(da[i], db[i]);
    p.stride_a[i] = da[i] == 1 ? 0 : sa[i];
    p.stride_b[i] = db[i] == 1 ? 0 : sb[i];
    if (i >= 4 - rank) out.push_back(p.extent[i]);
  }
  p.shape = Shape(std::span<const Index>(out));
  return p;
}

template <typename F>
void for_each_broadcast(const BroadcastPlan& p, F&& f) {
  Index o = 0;
  for (Index i0 = 0; i0 < p.extent[0]; ++i0)
    for (Index i1 = 0; i1 < p.extent[1]; ++i1)
      for (Index i2 = 0; i2 < p.extent[2]; ++i2) {
        const Index ba = i0 * p.stride_a[0] + i1 * p.stride_a[1] + i2 * p.stride_a[2];
        const Index bb = i0 * p.stride_b[0] + i1 * p.stride_b[1] + i2 * p.stride_b[2];
        for (Index i3 = 0; i3 < p.extent[3]; ++i3) f(ba + i3 * p.stride_a[3], bb + i3 * p.stride_b[3], o++);
      }
}

enum class BinaryKind { kAdd, kSub, kMul };

template <typename S>
Tensor<S> binary(const Tensor<S>& a, const Tensor<S>& b, BinaryKind kind, std::string_view op) {
  const BroadcastPlan plan = plan_broadcast(a.shape(), b.shape(), op);
  const bool same = a.shape() == b.shape();
  const auto n = static_cast<std::size_t>(plan.shape.numel());
  std::vector<S> out(n);
  const S* __restrict__ pa = a.data().data();
  const S* __restrict__ pb = b.data().data();
  S* __restrict__ po = out.data();
  switch (kind) {
    case BinaryKind::kAdd:
      if (same)
        for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i];
      else
        for_each_broadcast(plan, [&](Index ia, Index ib, Index o) { po[o] = pa[ia] + pb[ib]; });
      break;
    case BinaryKind::kSub:
      if (same)
        for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] - pb[i];
      else
        for_each_broadcast(plan, [&](Index ia, Index ib, Index o) { po[o] = pa[ia] - pb[ib]; });
      break;
    case BinaryKind::kMul:
      if (same)
        for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] * pb[i];
      else
        for_each_broadcast(plan, [&](Index ia, Index ib, Index o) { po[o] = pa[ia] * pb[ib]; });
      break;
  }
  return make_op<S>(op, plan.shape, std::move(out), {&a, &b}, [plan, kind, same](Node<S>& self) {
    const S* __restrict__ g = self.grad.data();
    const S* __restrict__ va = self.inputs[0]->value.data();
    const S* __restrict__ vb = self.inputs[1]->value.data();
    const std::size_t n = self.grad.size();
    // Each input is accumulated in its own pass, in output order.
    if (S* __restrict__ ga = input_grad(self, 0)) {
      if (kind == BinaryKind::kMul) {
        if (same)
          for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * vb[i];
        else
          for_each_broadcast(plan, [&](Index ia, Index ib, Index o) { ga[ia] += g[o] * vb[ib]; });
      } else if (same) {
        for (std::size_t i = 0; i < n; ++i) ga[i] += g[i];
      } else {
        for_each_broadcast(plan, [&](Index ia, Index, Index o) { ga[ia] += g[o]; });
      }
    }
    if (S* __restrict__ gb = input_grad(self, 1)) {
      if (kind == BinaryKind::kMul) {
        if (same)
          for (std::size_t i = 0; i < n; ++i) gb[i] += g[i] * va[i];
        else
          for_each_broadcast(plan, [&](Index ia, Index ib, Index o) { gb[ib] += g[o] * va[ia]; });
      } else if (kind == BinaryKind::kSub) {
        if (same)
          for (std::size_t i = 0; i < n; ++i) gb[i] -= g[i];
        else
          for_each_broadcast(plan, [&](Index, Index ib, Index o) { gb[ib] -= g[o]; });
      } else if (same) {
        for (std::size_t i = 0; i < n; ++i) gb[i] += g[i];
      } else {
        for_each_broadcast(plan, [&](Index, Index ib, Index o) { gb[ib] += g[o]; });
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Fixed-order GEMM kernels. Each output element accumulates its k terms in
// ascending order; vectorization runs across output columns only.

/// Register tile: MR rows of c, NR columns, accumulated over p in order.
/// Every c[i][j] sees the same sequential sum regardless of tiling, so the
/// blocked and remainder paths agree bit for bit.
template <typename S, Index MR, Index NR>
inline void gemm_tile(Index n, Index k, const S* __restrict__ a, const S* __restrict__ b, S* __restrict__ c) {
  S acc[MR][NR];
  for (Index r = 0; r < MR; ++r)
    for (Index j = 0; j < NR; ++j) acc[r][j] = c[r * n + j];
  for (Index p = 0; p < k; ++p) {
    const S* __restrict__ brow = b + p * n;
    for (Index r = 0; r < MR; ++r) {
      const S ap = a[r * k + p];
      for (Index j = 0; j < NR; ++j) acc[r][j] += ap * brow[j];
    }
  }
  for (Index r = 0; r < MR; ++r)
    for (Index j = 0; j < NR; ++j) c[r * n + j] = acc[r][j];
}

/// c[m, n] += a[m, k] b[k, n]
template <typename S>
void gemm_nn(Index m, Index n, Index k, const S* __restrict__ a, const S* __restrict__ b, S* __restrict__ c) {
  // GCC only vectorizes the tile cleanly at 32 columns, for float and double alike.
  constexpr Index MR = 4, NR = 32;
  const Index m_main = m - m % MR, n_main = n - n % NR;
  for (Index i = 0; i < m_main; i += MR)
    for (Index j = 0; j < n_main; j += NR) gemm_tile<S, MR, NR>(n, k, a + i * k, b + j, c + i * n + j);
  // Remainders keep the same per-element order: sequential over p.
  for (Index i = 0; i < m; ++i) {
    const Index j0 = i < m_main ? n_main : 0;
    if (j0 == n) continue;
    S* __restrict__ crow = c + i * n;
    const S* arow = a + i * k;
    for (Index p = 0; p < k; ++p) {
      const S ap = arow[p];
      const S* __restrict__ brow = b + p * n;
      for (Index j = j0; j < n; ++j) crow[j] += ap * brow[j];
    }
  }
}

/// d[k, n] += a[m, k]^T g[m, n]
template <typename S>
void gemm_tn(Index m, Index n, Index k, const S* a, const S* g, S* d) {
  std::vector<S> at(static_cast<std::size_t>(m * k));
  for (Index i = 0; i < m; ++i)
    for (Index p = 0; p < k; ++p) at[p * m + i] = a[i * k + p];
  gemm_nn(k, n, m, at.data(), g, d);
}

/// d[m, k] += g[m, n] b[k, n]^T
template <typename S>
void gemm_nt(Index m, Index n, Index k, const S* g, const S* b, S* d) {
  std::vector<S> bt(static_cast<std::size_t>(n * k));
  for (Index p = 0; p < k; ++p)
    for (Index j = 0; j < n; ++j) bt[j * k + p] = b[p * n + j];
  gemm_nn(m, k, n, g, bt.data(), d);
}

// ---------------------------------------------------------------------------

struct AxisSplit {
  Index outer = 1;
  Index len = 1;
  Index inner = 1;
};

AxisSplit split_axis(const Shape& s, int axis) {
  AxisSplit r;
  const int a = s.normalize(axis);
  for (int i = 0; i < a; ++i) r.outer *= s[i];
  r.len = s[a];
  for (int i = a + 1; i < s.rank(); ++i) r.inner *= s[i];
  return r;
}

}  // namespace

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) { return binary(a, b, BinaryKind::kAdd, "add"); }
template <typename S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) { return binary(a, b, BinaryKind::kSub, "sub"); }
template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) { return binary(a, b, BinaryKind::kMul, "mul"); }

template <typename S>
Tensor<S> scale(const Tensor<S>& x, S factor) {
  std::vector<S> out(x.data().begin(), x.data().end());
  for (auto& v : out) v *= factor;
  return make_op<S>("scale", x.shape(), std::move(out), {&x}, [factor](Node<S>& self) {
    if (S* gx = input_grad(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) gx[i] += self.grad[i] * factor;
  });
}

template <typename S>
Tensor<S> add_scalar(const Tensor<S>& x, S offset) {
  std::vector<S> out(x.data().begin(), x.data().end());
  for (auto& v : out) v += offset;
  return make_op<S>("add_scalar", x.shape(), std::move(out), {&x}, [](Node<S>& self) {
    if (S* gx = input_grad(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) gx[i] += self.grad[i];
  });
}

namespace {
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2 / pi)
constexpr double kGeluA = 0.044715;

/// Branch-free single-precision exp (range reduction plus a degree-6
/// polynomial, about 2 ulp) that the compiler can vectorize.
inline float exp_poly(float x) {
  x = x < -87.0f ? -87.0f : x;
  x = x > 88.0f ? 88.0f : x;
  // Round to nearest through the 1.5 * 2^23 shifter.
  const float n = (x * 1.44269504088896341f + 12582912.0f) - 12582912.0f;
  const float r = x - n * 0.693359375f + n * 2.12194440e-4f;
  float p = 1.9875691500e-4f;
  p = p * r + 1.3981999507e-3f;
  p = p * r + 8.3334519073e-3f;
  p = p * r + 4.1665795894e-2f;
  p = p * r + 1.6666665459e-1f;
  p = p * r + 5.0000001201e-1f;
  p = p * r * r + r + 1.0f;
  const auto bits = static_cast<std::uint32_t>(static_cast<std::int32_t>(n) + 127) << 23;
  return p * std::bit_cast<float>(bits);
}

inline float tanh_fast(float u) {
  const float t = exp_poly(-2.0f * std::fabs(u));
  return std::copysign((1.0f - t) / (1.0f + t), u);
}
inline double tanh_fast(double u) { return std::tanh(u); }

inline float sigmoid_fast(float v) { return 1.0f / (1.0f + exp_poly(-v)); }
inline double sigmoid_fast(double v) {
  return v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
}

}  // namespace

template <typename S>
Tensor<S> gelu(const Tensor<S>& x) {
  const auto in = x.data();
  std::vector<S> out(in.size());
  auto tanh_values = std::make_shared<std::vector<S>>(in.size());
  S* th = tanh_values->data();
  for (std::size_t i = 0; i < in.size(); ++i) {
    const S v = in[i];
    th[i] = tanh_fast(S(kGeluC) * (v + S(kGeluA) * v * v * v));
    out[i] = S(0.5) * v * (S(1) + th[i]);
  }
  return make_op<S>("gelu", x.shape(), std::move(out), {&x}, [tanh_values](Node<S>& self) {
    S* gx = input_grad(self, 0);
    if (!gx) return;
    const S* v = self.inputs[0]->value.data();
    const S* th = tanh_values->data();
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      const S xv = v[i];
      const S t = th[i];
      const S d = S(0.5) * (S(1) + t) + S(0.5) * xv * (S(1) - t * t) * S(kGeluC) * (S(1) + S(3 * kGeluA) * xv * xv);
      gx[i] += self.grad[i] * d;
    }
  });
}

template <typename S>
Tensor<S> sigmoid(const Tensor<S>& x) {
  const auto in = x.data();
  std::vector<S> out(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = sigmoid_fast(in[i]);
  return make_op<S>("sigmoid", x.shape(), std::move(out), {&x}, [](Node<S>& self) {
    if (S* gx = input_grad(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) {
        const S y = self.value[i];
        gx[i] += self.grad[i] * y * (S(1) - y);
      }
  });
}

template <typename S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.rank() < 2 || sb.rank() < 2) throw DimensionError("matmul: operands must have rank >= 2, got " + pair_str(sa, sb));
  const Index m = sa[-2], k = sa[-1], kb = sb[-2], n = sb[-1];
  if (k != kb) throw DimensionError("matmul: inner extents differ for shapes " + pair_str(sa, sb));

  if (sb.rank() == 2) {
    // Shared right operand: one GEMM over all rows of a.
    const Index rows = sa.numel() / k;
    std::vector<Index> dims(sa.dims().begin(), sa.dims().end());
    dims.back() = n;
    const Shape out_shape{std::span<const Index>(dims)};
    std::vector<S> out(static_cast<std::size_t>(rows * n), S(0));
    gemm_nn(rows, n, k, a.data().data(), b.data().data(), out.data());
    return make_op<S>("matmul", out_shape, std::move(out), {&a, &b}, [rows, n, k](Node<S>& self) {
      const S* g = self.grad.data();
      if (S* ga = input_grad(self, 0)) gemm_nt(rows, n, k, g, self.inputs[1]->value.data(), ga);
      if (S* gb = input_grad(self, 1)) gemm_tn(rows, n, k, self.inputs[0]->value.data(), g, gb);
    });
  }

  // Batched: broadcast the leading (batch) axes as matrices.
  std::vector<Index> batch_a(sa.dims().begin(), sa.dims().end() - 2);
  std::vector<Index> batch_b(sb.dims().begin(), sb.dims().end() - 2);
  std::array<Index, 2> ea{1, 1}, eb{1, 1};
  for (std::size_t i = 0; i < batch_a.size(); ++i) ea[2 - batch_a.size() + i] = batch_a[i];
  for (std::size_t i = 0; i < batch_b.size(); ++i) eb[2 - batch_b.size() + i] = batch_b[i];
  std::array<Index, 2> extent{}, stride_a{}, stride_b{};
  for (int i = 0; i < 2; ++i) {
    if (ea[i] != eb[i] && ea[i] != 1 && eb[i] != 1)
      throw DimensionError("matmul: batch extents not broadcastable for shapes " + pair_str(sa, sb));
    extent[i] = std::max(ea[i], eb[i]);
  }
  stride_a = {ea[0] == 1 ? 0 : ea[1], ea[1] == 1 ? 0 : 1};
  stride_b = {eb[0] == 1 ? 0 : eb[1], eb[1] == 1 ? 0 : 1};
  const std::size_t batch_rank = std::max(batch_a.size(), batch_b.size());
  std::vector<Index> dims;
  for (std::size_t i = 2 - batch_rank; i < 2; ++i) dims.push_back(extent[i]);
  dims.push_back(m);
  dims.push_back(n);
  const Shape out_shape{std::span<const Index>(dims)};
  std::vector<S> out(static_cast<std::size_t>(out_shape.numel()), S(0));
  const S* pa = a.data().data();
  const S* pb = b.data().data();
  Index o = 0;
  for (Index i0 = 0; i0 < extent[0]; ++i0)
    for (Index i1 = 0; i1 < extent[1]; ++i1, ++o) {
      const Index ma = i0 * stride_a[0] + i1 * stride_a[1];
      const Index mb = i0 * stride_b[0] + i1 * stride_b[1];
      gemm_nn(m, n, k, pa + ma * m * k, pb + mb * k * n, out.data() + o * m * n);
    }
  return make_op<S>("matmul", out_shape, std::move(out), {&a, &b}, [=](Node<S>& self) {
    const S* g = self.grad.data();
    const S* va = self.inputs[0]->value.data();
    const S* vb = self.inputs[1]->value.data();
    S* ga = input_grad(self, 0);
    S* gb = input_grad(self, 1);
    Index idx = 0;
    for (Index i0 = 0; i0 < extent[0]; ++i0)
      for (Index i1 = 0; i1 < extent[1]; ++i1, ++idx) {
        const Index ma = i0 * stride_a[0] + i1 * stride_a[1];
        const Index mb = i0 * stride_b[0] + i1 * stride_b[1];
        const S* gc = g + idx * m * n;
        if (ga) gemm_nt(m, n, k, gc, vb + mb * k * n, ga + ma * m * k);
        if (gb) gemm_tn(m, n, k, va + ma * m * k, gc, gb + mb * k * n);
      }
  });
}

template <typename S>
Tensor<S> reshape(const Tensor<S>& x, const Shape& shape) {
  if (shape.numel() != x.numel())
    throw DimensionError("reshape: cannot view " + x.shape().str() + " as " + shape.str());
  std::vector<S> out(x.data().begin(), x.data().end());
  return make_op<S>("reshape", shape, std::move(out), {&x}, [](Node<S>& self) {
    if (S* gx = input_grad(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) gx[i] += self.grad[i];
  });
}

template <typename S>
Tensor<S> permute(const Tensor<S>& x, std::span<const int> order) {
  const Shape& s = x.shape();
  const int r = s.rank();
  if (static_cast<int>(order.size()) != r) throw DimensionError("permute: order length does not match shape " + s.str());
  std::vector<bool> seen(static_cast<std::size_t>(r), false);
  for (int ax : order) {
    if (ax < 0 || ax >= r || seen[static_cast<std::size_t>(ax)])
      throw DimensionError("permute: invalid axis order for shape " + s.str());
    seen[static_cast<std::size_t>(ax)] = true;
  }
  const auto in_strides = s.strides();
  std::array<Index, 4> extent{1, 1, 1, 1}, stride{0, 0, 0, 0};
  std::vector<Index> dims;
  for (int i = 0; i < r; ++i) {
    extent[4 - r + i] = s[order[i]];
    stride[4 - r + i] = in_strides[order[i]];
    dims.push_back(s[order[i]]);
  }
  const Shape out_shape{std::span<const Index>(dims)};
  auto walk = [extent, stride](auto&& f) {
    Index o = 0;
    for (Index i0 = 0; i0 < extent[0]; ++i0)
      for (Index i1 = 0; i1 < extent[1]; ++i1)
        for (Index i2 = 0; i2 < extent[2]; ++i2) {
          const Index base = i0 * stride[0] + i1 * stride[1] + i2 * stride[2];
          for (Index i3 = 0; i3 < extent[3]; ++i3) f(base + i3 * stride[3], o++);
        }
  };
  std::vector<S> out(static_cast<std::size_t>(s.numel()));
  const S* in = x.data().data();
  walk([&](Index src, Index o) { out[o] = in[src]; });
  return make_op<S>("permute", out_shape, std::move(out), {&x}, [walk](Node<S>& self) {
    S* gx = input_grad(self, 0);
    if (!gx) return;
    const S* g = self.grad.data();
    walk([&](Index src, Index o) { gx[src] += g[o]; });
  });
}

template <typename S>
Tensor<S> transpose(const Tensor<S>& x) {
  const int r = x.rank();
  if (r < 2) throw DimensionError("transpose: rank must be >= 2, got " + x.shape().str());
  std::vector<int> order(static_cast<std::size_t>(r));
  std::iota(order.begin(), order.end(), 0);
  std::swap(order[order.size() - 1], order[order.size() - 2]);
  return permute(x, std::span<const int>(order));
}

template <typename S>
Tensor<S> softmax(const Tensor<S>& x, int axis) {
  if (x.rank() == 0) throw DimensionError("softmax: scalar input has no axis");
  const AxisSplit sp = split_axis(x.shape(), axis);
  const S* in = x.data().data();
  std::vector<S> out(static_cast<std::size_t>(x.numel()));
  for (Index o = 0; o < sp.outer; ++o)
    for (Index i = 0; i < sp.inner; ++i) {
      const Index base = o * sp.len * sp.inner + i;
      S mx = in[base];
      for (Index j = 1; j < sp.len; ++j) mx = std::max(mx, in[base + j * sp.inner]);
      S total = 0;
      for (Index j = 0; j < sp.len; ++j) {
        const S e = std::exp(in[base + j * sp.inner] - mx);
        out[base + j * sp.inner] = e;
        total += e;
      }
      for (Index j = 0; j < sp.len; ++j) out[base + j * sp.inner] /= total;
    }
  return make_op<S>("softmax", x.shape(), std::move(out), {&x}, [sp](Node<S>& self) {
    S* gx = input_grad(self, 0);
    if (!gx) return;
    const S* y = self.value.data();
    const S* g = self.grad.data();
    for (Index o = 0; o < sp.outer; ++o)
      for (Index i = 0; i < sp.inner; ++i) {
        const Index base = o * sp.len * sp.inner + i;
        S dot = 0;
        for (Index j = 0; j < sp.len; ++j) dot += g[base + j * sp.inner] * y[base + j * sp.inner];
        for (Index j = 0; j < sp.len; ++j) {
          const Index t = base + j * sp.inner;
          gx[t] += y[t] * (g[t] - dot);
        }
      }
  });
}

template <typename S>
Tensor<S> log_softmax(const Tensor<S>& x, int axis) {
  if (x.rank() == 0) throw DimensionError("log_softmax: scalar input has no axis");
  const AxisSplit sp = split_axis(x.shape(), axis);
  const S* in = x.data().data();
  std::vector<S> out(static_cast<std::size_t>(x.numel()));
  for (Index o = 0; o < sp.outer; ++o)
    for (Index i = 0; i < sp.inner; ++i) {
      const Index base = o * sp.len * sp.inner + i;
      S mx = in[base];
      for (Index j = 1; j < sp.len; ++j) mx = std::max(mx, in[base + j * sp.inner]);
      S total = 0;
      for (Index j = 0; j < sp.len; ++j) total += std::exp(in[base + j * sp.inner] - mx);
      const S lse = mx + std::log(total);
      for (Index j = 0; j < sp.len; ++j) out[base + j * sp.inner] = in[base + j * sp.inner] - lse;
    }
  return make_op<S>("log_softmax", x.shape(), std::move(out), {&x}, [sp](Node<S>& self) {
    S* gx = input_grad(self, 0);
    if (!gx) return;
    const S* y = self.value.data();
    const S* g = self.grad.data();
    for (Index o = 0; o < sp.outer; ++o)
      for (Index i = 0; i < sp.inner; ++i) {
        const Index base = o * sp.len * sp.inner + i;
        S total = 0;
        for (Index j = 0; j < sp.len; ++j) total += g[base + j * sp.inner];
        for (Index j = 0; j < sp.len; ++j) {
          const Index t = base + j * sp.inner;
          gx[t] += g[t] - std::exp(y[t]) * total;
        }
      }
  });
}

template <typename S>
Tensor<S> layer_norm(const Tensor<S>& x, const Tensor<S>& gain, const Tensor<S>& bias, S eps) {
  if (x.rank() == 0) throw DimensionError("layer_norm: scalar input");
  const Index d = x.dim(-1);
  if (gain.numel() != d || bias.numel() != d)
    throw DimensionError("layer_norm: gain/bias " + pair_str(gain.shape(), bias.shape()) + " vs input " +
                         x.shape().str());
  const Index rows = x.numel() / d;
  const S* in = x.data().data();
  const S* gp = gain.data().data();
  const S* bp = bias.data().data();
  std::vector<S> out(static_cast<std::size_t>(x.numel()));
  auto xhat = std::make_shared<std::vector<S>>(out.size());
  auto inv_std = std::make_shared<std::vector<S>>(static_cast<std::size_t>(rows));
  for (Index r = 0; r < rows; ++r) {
    const S* row = in + r * d;
    S mu = 0;
    for (Index j = 0; j < d; ++j) mu += row[j];
    mu /= S(d);
    S var = 0;
    for (Index j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= S(d);
    const S is = S(1) / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    for (Index j = 0; j < d; ++j) {
      const S h = (row[j] - mu) * is;
      (*xhat)[r * d + j] = h;
      out[r * d + j] = h * gp[j] + bp[j];
    }
  }
  return make_op<S>("layer_norm", x.shape(), std::move(out), {&x, &gain, &bias},
                    [xhat, inv_std, rows, d](Node<S>& self) {
    const S* g = self.grad.data();
    const S* gp = self.inputs[1]->value.data();
    S* gx = input_grad(self, 0);
    S* ggain = input_grad(self, 1);
    S* gbias = input_grad(self, 2);
    const S* h = xhat->data();
    for (Index r = 0; r < rows; ++r) {
      const S* gr = g + r * d;
      const S* hr = h + r * d;
      if (ggain || gbias)
        for (Index j = 0; j < d; ++j) {
          if (ggain) ggain[j] += gr[j] * hr[j];
          if (gbias) gbias[j] += gr[j];
        }
      if (gx) {
        S sum_dh = 0, sum_dh_h = 0;
        for (Index j = 0; j < d; ++j) {
          const S dh = gr[j] * gp[j];
          sum_dh += dh;
          sum_dh_h += dh * hr[j];
        }
        const S is = (*inv_std)[r];
        for (Index j = 0; j < d; ++j) {
          const S dh = gr[j] * gp[j];
          gx[r * d + j] += is * (dh - sum_dh / S(d) - hr[j] * sum_dh_h / S(d));
        }
      }
    }
  });
}

template <typename S>
Tensor<S> sum(const Tensor<S>& x) {
  S total = 0;
  for (const S v : x.data()) total += v;
  return make_op<S>("sum", Shape{}, std::vector<S>{total}, {&x}, [](Node<S>& self) {
    if (S* gx = input_grad(self, 0)) {
      const S g = self.grad[0];
      const std::size_t n = self.inputs[0]->value.size();
      for (std::size_t i = 0; i < n; ++i) gx[i] += g;
    }
  });
}

template <typename S>
Tensor<S> mean(const Tensor<S>& x) {
  S total = 0;
  for (const S v : x.data()) total += v;
  const S inv = S(1) / S(x.numel());
  return make_op<S>("mean", Shape{}, std::vector<S>{total * inv}, {&x}, [inv](Node<S>& self) {
    if (S* gx = input_grad(self, 0)) {
      const S g = self.grad[0] * inv;
      const std::size_t n = self.inputs[0]->value.size();
      for (std::size_t i = 0; i < n; ++i) gx[i] += g;
    }
  });
}

template <typename S>
Tensor<S> mean_axis(const Tensor<S>& x, int axis) {
  const AxisSplit sp = split_axis(x.shape(), axis);
  const int a = x.shape().normalize(axis);
  std::vector<Index> dims;
  for (int i = 0; i < x.rank(); ++i)
    if (i != a) dims.push_back(x.dim(i));
  const Shape out_shape{std::span<const Index>(dims)};
  std::vector<S> out(static_cast<std::size_t>(sp.outer * sp.inner), S(0));
  const S* in = x.data().data();
  for (Index o = 0; o < sp.outer; ++o)
    for (Index j = 0; j < sp.len; ++j) {
      const S* src = in + (o * sp.len + j) * sp.inner;
      S* dst = out.data() + o * sp.inner;
      for (Index i = 0; i < sp.inner; ++i) dst[i] += src[i];
    }
  const S inv = S(1) / S(sp.len);
  for (auto& v : out) v *= inv;
  return make_op<S>("mean_axis", out_shape, std::move(out), {&x}, [sp, inv](Node<S>& self) {
    S* gx = input_grad(self, 0);
    if (!gx) return;
    const S* g = self.grad.data();
    for (Index o = 0; o < sp.outer; ++o)
      for (Index j = 0; j < sp.len; ++j) {
        S* dst = gx + (o * sp.len + j) * sp.inner;
        const S* src = g + o * sp.inner;
        for (Index i = 0; i < sp.inner; ++i) dst[i] += src[i] * inv;
      }
  });
}

template <typename S>
Tensor<S> concat(std::span<const Tensor<S>> parts, int axis) {
  if (parts.empty()) throw ArgumentError("concat: no inputs");
  const Shape& first = parts[0].shape();
  const int a = first.normalize(axis);
  std::vector<Index> lens;
  Index total = 0;
  for (const auto& p : parts) {
    if (p.rank() != first.rank()) throw DimensionError("concat: rank mismatch " + pair_str(first, p.shape()));
    for (int i = 0; i < first.rank(); ++i)
      if (i != a && p.dim(i) != first[i]) throw DimensionError("concat: shape mismatch " + pair_str(first, p.shape()));
    lens.push_back(p.dim(a));
    total += p.dim(a);
  }
  const AxisSplit sp = split_axis(first, a);
  std::vector<Index> dims(first.dims().begin(), first.dims().end());
  dims[static_cast<std::size_t>(a)] = total;
  const Shape out_shape{std::span<const Index>(dims)};
  std::vector<S> out(static_cast<std::size_t>(out_shape.numel()));
  const Index row = total * sp.inner;
  Index offset = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const Index chunk = lens[p] * sp.inner;
    const S* src = parts[p].data().data();
    for (Index o = 0; o < sp.outer; ++o) std::copy_n(src + o * chunk, chunk, out.data() + o * row + offset);
    offset += chunk;
  }
  std::vector<const Tensor<S>*> inputs;
  for (const auto& p : parts) inputs.push_back(&p);
  return finish<S>("concat", out_shape, std::move(out), inputs, [lens, sp, row](Node<S>& self) {
    Index offset = 0;
    for (std::size_t p = 0; p < lens.size(); ++p) {
      const Index chunk = lens[p] * sp.inner;
      if (S* gp = input_grad(self, p))
        for (Index o = 0; o < sp.outer; ++o) {
          const S* src = self.grad.data() + o * row + offset;
          for (Index i = 0; i < chunk; ++i) gp[o * chunk + i] += src[i];
        }
      offset += chunk;
    }
  });
}

template <typename S>
Tensor<S> slice(const Tensor<S>& x, int axis, Index start, Index length) {
  const int a = x.shape().normalize(axis);
  if (start < 0 || length <= 0 || start + length > x.dim(a))
    throw DimensionError("slice: range [" + std::to_string(start) + ", " + std::to_string(start + length) +
                         ") out of bounds for shape " + x.shape().str());
  const AxisSplit sp = split_axis(x.shape(), a);
  std::vector<Index> dims(x.shape().dims().begin(), x.shape().dims().end());
  dims[static_cast<std::size_t>(a)] = length;
  const Shape out_shape{std::span<const Index>(dims)};
  const Index chunk = length * sp.inner;
  const Index row = sp.len * sp.inner;
  const Index skip = start * sp.inner;
  std::vector<S> out(static_cast<std::size_t>(out_shape.numel()));
  const S* in = x.data().data();
  for (Index o = 0; o < sp.outer; ++o) std::copy_n(in + o * row + skip, chunk, out.data() + o * chunk);
  return make_op<S>("slice", out_shape, std::move(out), {&x}, [=](Node<S>& self) {
    S* gx = input_grad(self, 0);
    if (!gx) return;
    for (Index o = 0; o < sp.outer; ++o)
      for (Index i = 0; i < chunk; ++i) gx[o * row + skip + i] += self.grad[static_cast<std::size_t>(o * chunk + i)];
  });
}

template <typename S>
Tensor<S> gather_axis1(const Tensor<S>& x, const std::vector<std::vector<Index>>& indices) {
  if (x.rank() < 2) throw DimensionError("gather_axis1: rank must be >= 2, got " + x.shape().str());
  const Index batch = x.dim(0), n = x.dim(1);
  if (static_cast<Index>(indices.size()) != batch)
    throw DimensionError("gather_axis1: " + std::to_string(indices.size()) + " index lists for batch " +
                         std::to_string(batch));
  const Index k = indices.empty() ? 0 : static_cast<Index>(indices[0].size());
  if (k == 0) throw ArgumentError("gather_axis1: empty selection");
  for (const auto& row : indices) {
    if (static_cast<Index>(row.size()) != k) throw ArgumentError("gather_axis1: ragged selection");
    for (Index i : row)
      if (i < 0 || i >= n) throw ArgumentError("gather_axis1: index " + std::to_string(i) + " out of range");
  }
  const Index inner = x.numel() / (batch * n);
  std::vector<Index> dims(x.shape().dims().begin(), x.shape().dims().end());
  dims[1] = k;
  const Shape out_shape{std::span<const Index>(dims)};
  std::vector<S> out(static_cast<std::size_t>(out_shape.numel()));
  const S* in = x.data().data();
  for (Index b = 0; b < batch; ++b)
    for (Index j = 0; j < k; ++j)
      std::copy_n(in + (b * n + indices[b][j]) * inner, inner, out.data() + (b * k + j) * inner);
  return make_op<S>("gather_axis1", out_shape, std::move(out), {&x}, [indices, batch, n, k, inner](Node<S>& self) {
    S* gx = input_grad(self, 0);
    if (!gx) return;
    for (Index b = 0; b < batch; ++b)
      for (Index j = 0; j < k; ++j) {
        S* dst = gx + (b * n + indices[b][j]) * inner;
        const S* src = self.grad.data() + (b * k + j) * inner;
        for (Index i = 0; i < inner; ++i) dst[i] += src[i];
      }
  });
}

template <typename S>
Tensor<S> depthwise_conv3x3(const Tensor<S>& x, const Tensor<S>& kernel, const Tensor<S>& bias, Padding padding) {
  if (x.rank() != 4) throw DimensionError("depthwise_conv3x3: expected NHWC input, got " + x.shape().str());
  const Index batch = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
  if (kernel.shape() != Shape{3, 3, c} || bias.numel() != c)
    throw DimensionError("depthwise_conv3x3: kernel/bias " + pair_str(kernel.shape(), bias.shape()) +
                         " do not match channels of " + x.shape().str());
  // Source row/column for each output position and tap, or -1 when it falls in zero padding.
  auto source = [padding](Index pos, Index tap, Index extent) -> Index {
    Index s = pos + tap - 1;
    if (s >= 0 && s < extent) return s;
    if (padding == Padding::kZero) return -1;
    return (s + extent) % extent;
  };
  std::vector<S> out(static_cast<std::size_t>(x.numel()));
  const S* in = x.data().data();
  const S* kp = kernel.data().data();
  const S* bp = bias.data().data();
  for (Index b = 0; b < batch; ++b)
    for (Index yy = 0; yy < h; ++yy)
      for (Index xx = 0; xx < w; ++xx) {
        S* o = out.data() + ((b * h + yy) * w + xx) * c;
        std::copy_n(bp, c, o);
        for (Index dy = 0; dy < 3; ++dy) {
          const Index sy = source(yy, dy, h);
          if (sy < 0) continue;
          for (Index dx = 0; dx < 3; ++dx) {
            const Index sx = source(xx, dx, w);
            if (sx < 0) continue;
            const S* src = in + ((b * h + sy) * w + sx) * c;
            const S* kk = kp + (dy * 3 + dx) * c;
            for (Index ch = 0; ch < c; ++ch) o[ch] += src[ch] * kk[ch];
          }
        }
      }
  return make_op<S>("depthwise_conv3x3", x.shape(), std::move(out), {&x, &kernel, &bias},
                    [=](Node<S>& self) {
    const S* g = self.grad.data();
    const S* vin = self.inputs[0]->value.data();
    const S* vk = self.inputs[1]->value.data();
    S* gx = input_grad(self, 0);
    S* gk = input_grad(self, 1);
    S* gb = input_grad(self, 2);
    for (Index b = 0; b < batch; ++b)
      for (Index yy = 0; yy < h; ++yy)
        for (Index xx = 0; xx < w; ++xx) {
          const S* go = g + ((b * h + yy) * w + xx) * c;
          if (gb)
            for (Index ch = 0; ch < c; ++ch) gb[ch] += go[ch];
          for (Index dy = 0; dy < 3; ++dy) {
            const Index sy = source(yy, dy, h);
            if (sy < 0) continue;
            for (Index dx = 0; dx < 3; ++dx) {
              const Index sx = source(xx, dx, w);
              if (sx < 0) continue;
              const Index src = ((b * h + sy) * w + sx) * c;
              const Index tap = (dy * 3 + dx) * c;
              if (gx)
                for (Index ch = 0; ch < c; ++ch) gx[src + ch] += go[ch] * vk[tap + ch];
              if (gk)
                for (Index ch = 0; ch < c; ++ch) gk[tap + ch] += go[ch] * vin[src + ch];
            }
          }
        }
  });
}

template <typename S>
Tensor<S> space_to_depth(const Tensor<S>& x, Index block) {
  if (x.rank() != 4) throw DimensionError("space_to_depth: expected NHWC input, got " + x.shape().str());
  const Index batch = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
  if (block <= 0 || h % block != 0 || w % block != 0)
    throw DimensionError("space_to_depth: block " + std::to_string(block) + " does not tile " + x.shape().str());
  const Index oh = h / block, ow = w / block;
  const Shape out_shape{batch, oh, ow, block * block * c};
  auto walk = [=](auto&& f) {
    Index o = 0;
    for (Index b = 0; b < batch; ++b)
      for (Index Y = 0; Y < oh; ++Y)
        for (Index X = 0; X < ow; ++X)
          for (Index dy = 0; dy < block; ++dy)
            for (Index dx = 0; dx < block; ++dx) {
              const Index src = ((b * h + Y * block + dy) * w + X * block + dx) * c;
              f(src, o);
              o += c;
            }
  };
  std::vector<S> out(static_cast<std::size_t>(x.numel()));
  const S* in = x.data().data();
  walk([&](Index src, Index o) { std::copy_n(in + src, c, out.data() + o); });
  return make_op<S>("space_to_depth", out_shape, std::move(out), {&x}, [walk, c](Node<S>& self) {
    S* gx = input_grad(self, 0);
    if (!gx) return;
    const S* g = self.grad.data();
    walk([&](Index src, Index o) {
      for (Index ch = 0; ch < c; ++ch) gx[src + ch] += g[o + ch];
    });
  });
}

template <typename S>
Tensor<S> cross_entropy(const Tensor<S>& logits, std::span<const int> labels) {
  if (logits.rank() != 2) throw DimensionError("cross_entropy: expected [B, C] logits, got " + logits.shape().str());
  const Index batch = logits.dim(0), classes = logits.dim(1);
  if (static_cast<Index>(labels.size()) != batch)
    throw DimensionError("cross_entropy: " + std::to_string(labels.size()) + " labels for batch " + std::to_string(batch));
  for (int y : labels)
    if (y < 0 || y >= classes)
      throw ArgumentError("cross_entropy: label " + std::to_string(y) + " outside [0, " + std::to_string(classes) + ")");
  const S* z = logits.data().data();
  auto probs = std::make_shared<std::vector<S>>(static_cast<std::size_t>(logits.numel()));
  S total = 0;
  for (Index b = 0; b < batch; ++b) {
    const S* row = z + b * classes;
    S mx = row[0];
    for (Index c = 1; c < classes; ++c) mx = std::max(mx, row[c]);
    S se = 0;
    for (Index c = 0; c < classes; ++c) se += std::exp(row[c] - mx);
    const S lse = mx + std::log(se);
    for (Index c = 0; c < classes; ++c) (*probs)[b * classes + c] = std::exp(row[c] - lse);
    total += lse - row[labels[b]];
  }
  std::vector<int> ys(labels.begin(), labels.end());
  return make_op<S>("cross_entropy", Shape{}, std::vector<S>{total / S(batch)}, {&logits},
                    [probs, ys, batch, classes](Node<S>& self) {
    S* gz = input_grad(self, 0);
    if (!gz) return;
    const S g = self.grad[0] / S(batch);
    for (Index b = 0; b < batch; ++b)
      for (Index c = 0; c < classes; ++c) {
        const S target = c == ys[b] ? S(1) : S(0);
        gz[b * classes + c] += g * ((*probs)[b * classes + c] - target);
      }
  });
}

template <typename S>
std::vector<Index> topk_indices(std::span<const S> scores, Index k) {
  const Index n = static_cast<Index>(scores.size());
  if (k < 1 || k > n)
    throw ArgumentError("topk_indices: k=" + std::to_string(k) + " outside [1, " + std::to_string(n) + "]");
  std::vector<Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Index(0));
  std::partial_sort(order.begin(), order.begin() + k, order.end(), [&](Index a, Index b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return a < b;
  });
  order.resize(static_cast<std::size_t>(k));
  std::sort(order.begin(), order.end());
  return order;
}

#define EVCC_INSTANTIATE_OPS(S)                                                                         \
  template Tensor<S> add(const Tensor<S>&, const Tensor<S>&);                                           \
  template Tensor<S> sub(const Tensor<S>&, const Tensor<S>&);                                           \
  template Tensor<S> mul(const Tensor<S>&, const Tensor<S>&);                                           \
  template Tensor<S> scale(const Tensor<S>&, S);                                                        \
  template Tensor<S> add_scalar(const Tensor<S>&, S);                                                   \
  template Tensor<S> gelu(const Tensor<S>&);                                                            \
  template Tensor<S> sigmoid(const Tensor<S>&);                                                         \
  template Tensor<S> matmul(const Tensor<S>&, const Tensor<S>&);                                        \
  template Tensor<S> reshape(const Tensor<S>&, const Shape&);                                           \
  template Tensor<S> permute(const Tensor<S>&, std::span<const int>);                                   \
  template Tensor<S> transpose(const Tensor<S>&);                                                       \
  template Tensor<S> softmax(const Tensor<S>&, int);                                                    \
  template Tensor<S> log_softmax(const Tensor<S>&, int);                                                \
  template Tensor<S> layer_norm(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&, S);               \
  template Tensor<S> sum(const Tensor<S>&);                                                             \
  template Tensor<S> mean(const Tensor<S>&);                                                            \
  template Tensor<S> mean_axis(const Tensor<S>&, int);                                                  \
  template Tensor<S> concat(std::span<const Tensor<S>>, int);                                           \
  template Tensor<S> slice(const Tensor<S>&, int, Index, Index);                                        \
  template Tensor<S> gather_axis1(const Tensor<S>&, const std::vector<std::vector<Index>>&);            \
  template Tensor<S> depthwise_conv3x3(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&, Padding);  \
  template Tensor<S> space_to_depth(const Tensor<S>&, Index);                                           \
  template Tensor<S> cross_entropy(const Tensor<S>&, std::span<const int>);                             \
  template std::vector<Index> topk_indices(std::span<const S>, Index);

EVCC_INSTANTIATE_OPS(float)
EVCC_INSTANTIATE_OPS(double)

}  // namespace evcc
