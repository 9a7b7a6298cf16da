#include "evcc/router.hpp"

namespace evcc {

template <typename S>
RouterParams<S> RouterParams<S>::create(ParameterStore<S>& store, Index d, Index hidden, Rng& rng) {
  if (d < 1 || hidden < 1) throw ConfigError("router dims must be positive");
  RouterParams r;
  r.norm = LayerNorm<S>::create(store, "router.norm", "router", 3 * d, rng);
  r.trunk = Linear<S>::create(store, "router.trunk", "router", 3 * d, hidden, rng);
  r.routing = Linear<S>::create(store, "router.routing", "router", hidden, 3, rng);
  r.confidence = Linear<S>::create(store, "router.confidence", "router", hidden, 1, rng);
  r.branch_proj = {Linear<S>::create(store, "router.proj_vit", "router", d, d, rng),
                   Linear<S>::create(store, "router.proj_conv", "router", d, d, rng),
                   Linear<S>::create(store, "router.proj_hybrid", "router", d, d, rng)};
  return r;
}

template <typename S>
RoutingDecision<S> route(const Tensor<S>& f_v, const Tensor<S>& f_c, const Tensor<S>& z_x,
                         const RouterParams<S>& params) {
  if (f_v.rank() != 2 || f_v.shape() != f_c.shape() || f_v.shape() != z_x.shape())
    throw DimensionError("route: expected three [B,d] features, got " + f_v.shape().str() + ", " +
                         f_c.shape().str() + ", " + z_x.shape().str());
  auto hidden = gelu(params.trunk(params.norm(concat({f_v, f_c, z_x}, 1))));
  RoutingDecision<S> out;
  out.pi = softmax(params.routing(hidden), 1);
  out.conf = sigmoid(params.confidence(hidden));
  auto uniform_share = scale(add_scalar(scale(out.conf, S(-1)), S(1)), S(1.0 / 3.0));
  out.pi_final = add(mul(out.conf, out.pi), uniform_share);
  return out;
}

template <typename S>
Tensor<S> aggregate(const Tensor<S>& pi_final, const Tensor<S>& f_v, const Tensor<S>& f_c, const Tensor<S>& z_x,
                    const RouterParams<S>& params) {
  const std::array<const Tensor<S>*, 3> features{&f_v, &f_c, &z_x};
  Tensor<S> total;
  for (int i = 0; i < 3; ++i) {
    auto term = mul(slice(pi_final, 1, i, 1), params.branch_proj[static_cast<std::size_t>(i)](*features[i]));
    total = total.defined() ? add(total, term) : term;
  }
  return total;
}

RouterParamReport router_param_report(Index d, Index hidden) {
  if (d < 1 || hidden < 1) throw ArgumentError("router_param_report: d and h must be >= 1");
  RouterParamReport r;
  const Index w1 = 3 * d * hidden + hidden;
  const Index w2 = hidden * 3 + 3;
  const Index wc = hidden * 1 + 1;
  r.shared_trunk = w1 + w2 + wc;
  r.duplicated_trunk = r.shared_trunk + w1;
  r.projections = 3 * (d * d + d);
  r.shared_total = r.shared_trunk + r.projections;
  r.duplicated_total = r.duplicated_trunk + r.projections;
  r.reduction_fraction = 1.0 - static_cast<double>(r.shared_trunk) / static_cast<double>(r.duplicated_trunk);
  return r;
}

template struct RouterParams<float>;
template struct RouterParams<double>;
template RoutingDecision<float> route(const Tensor<float>&, const Tensor<float>&, const Tensor<float>&,
                                      const RouterParams<float>&);
template RoutingDecision<double> route(const Tensor<double>&, const Tensor<double>&, const Tensor<double>&,
                                       const RouterParams<double>&);
template Tensor<float> aggregate(const Tensor<float>&, const Tensor<float>&, const Tensor<float>&,
                                 const Tensor<float>&, const RouterParams<float>&);
template Tensor<double> aggregate(const Tensor<double>&, const Tensor<double>&, const Tensor<double>&,
                                  const Tensor<double>&, const RouterParams<double>&);

}  // namespace evcc
