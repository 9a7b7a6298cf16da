#include "evcc/model.hpp"

#include <sstream>

namespace evcc {

void ModelConfig::finalize() {
  branches.validate();
  fusion.d = branches.d;
  fusion.validate();
  prune.validate();
  if (n_classes < 2) throw ConfigError("model.n_classes must be >= 2");
  if (lambda < 0.0) throw ConfigError("loss.lambda must be >= 0");
  if (router_hidden < 0) throw ConfigError("router.hidden must be >= 0");
}

std::string ModelConfig::architecture() const {
  std::ostringstream os;
  auto list = [](const std::vector<Index>& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
    return s;
  };
  const auto& b = branches;
  os << "model.image_size=" << b.image_size << "\nmodel.patch_size=" << b.patch_size
     << "\nmodel.vit_blocks=" << b.vit_blocks << "\nmodel.vit_heads=" << b.vit_heads
     << "\nmodel.conv_depths=" << list(b.conv_stage_depths) << "\nmodel.conv_dims=" << list(b.conv_stage_dims)
     << "\nmodel.hybrid_blocks=" << b.hybrid_blocks << "\nmodel.d_v=" << b.d_v << "\nmodel.d_x=" << b.d_x
     << "\nmodel.d=" << b.d << "\nmodel.mlp_ratio=" << b.mlp_ratio
     << "\nmodel.vit_positional=" << (b.vit_positional ? 1 : 0) << "\nmodel.n_classes=" << n_classes
     << "\nmodel.vit_only=" << (vit_only ? 1 : 0) << "\nprune.enabled=" << (prune_enabled ? 1 : 0)
     << "\nprune.score_hidden=" << prune.score_hidden << "\nfusion.depth=" << fusion.depth
     << "\nfusion.heads=" << fusion.heads << "\nrouter.hidden=" << hidden() << "\n";
  return os.str();
}

template <typename S>
EvccModel<S>::EvccModel(ModelConfig config, std::uint64_t seed) : config_(std::move(config)) {
  config_.finalize();
  Rng rng(seed, /*stream=*/1);
  const auto& b = config_.branches;
  vit = VitBranch<S>::create(store_, b, rng);
  if (config_.vit_only) {
    baseline_proj = Linear<S>::create(store_, "proj.vit", "proj", b.d_v, b.d, rng);
    heads.main = Linear<S>::create(store_, "heads.main", "heads", b.d, config_.n_classes, rng);
  } else {
    conv = ConvBranch<S>::create(store_, b, rng);
    hybrid = HybridBranch<S>::create(store_, b, rng);
    projection = SharedProjection<S>::create(store_, b, rng);
    if (config_.prune_enabled) {
      prune_v = TokenPruner<S>::create(store_, "prune.vit", b.d, config_.prune, rng);
      prune_c = TokenPruner<S>::create(store_, "prune.conv", b.d, config_.prune, rng);
    }
    fusion = FusionParams<S>::create(store_, config_.fusion, rng);
    router = RouterParams<S>::create(store_, b.d, config_.hidden(), rng);
    heads = Heads<S>::create(store_, b.d, config_.n_classes, rng);
  }
  apply_freeze_masks(store_, b);
}

template <typename S>
ModelOutput<S> EvccModel<S>::forward(const Tensor<S>& images, FusionTrace<S>* trace) const {
  ModelOutput<S> out;
  if (config_.vit_only) {
    out.f_v = mean_axis(baseline_proj(vit(images)), 1);
    out.main_logits = heads.main(out.f_v);
    return out;
  }
  out.branches = projection(vit(images), conv(images), hybrid(images));
  FusionState<S> state{out.branches.zv, out.branches.zc};
  if (config_.prune_enabled) {
    out.pruned_v = prune(out.branches.zv, prune_v);
    out.pruned_c = prune(out.branches.zc, prune_c);
    state = {out.pruned_v->tokens, out.pruned_c->tokens};
  }
  out.fused = fuse(state, fusion, trace);
  std::tie(out.f_v, out.f_c) = global_pool(out.fused);
  const auto& zx = out.branches.zx;
  out.routing = route(out.f_v, out.f_c, zx, router);
  out.routing.fused = aggregate(out.routing.pi_final, out.f_v, out.f_c, zx, router);
  out.main_logits = heads.main(out.routing.fused);
  out.aux_logits = {heads.aux[0](out.f_v), heads.aux[1](out.f_c), heads.aux[2](zx)};
  return out;
}

template <typename S>
LossBreakdown<S> EvccModel<S>::loss(const ModelOutput<S>& out, std::span<const int> labels) const {
  if (config_.vit_only) {
    LossBreakdown<S> l;
    l.lambda = 0.0;
    l.main_ce = l.total = cross_entropy(out.main_logits, labels);
    return l;
  }
  return multitask_loss(out.main_logits, out.aux_logits, labels, config_.lambda);
}

template <typename S>
std::pair<double, double> EvccModel<S>::gammas() const {
  if (config_.vit_only || !config_.prune_enabled) return {0.0, 0.0};
  return {static_cast<double>(prune_v.gamma.data()[0]), static_cast<double>(prune_c.gamma.data()[0])};
}

template class EvccModel<float>;
template class EvccModel<double>;

}  // namespace evcc
