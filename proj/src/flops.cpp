#include "evcc/flops.hpp"

#include <cstdio>
#include <sstream>

#include "evcc/errors.hpp"

namespace evcc {

CrossAttentionMacs cross_attention_macs(Index nq, Index nk, Index d, Index heads) {
  (void)heads;  // heads split d, the product count does not depend on them
  CrossAttentionMacs m;
  m.attention_product = 2 * nq * nk * d;
  m.projections = nq * d * d + 2 * nk * d * d + nq * d * d;
  return m;
}

PruningReduction pruning_reduction(Index n_v, Index n_c, Index d, Index r, Index n_min) {
  (void)d;
  PruningConfig config;
  config.r = r;
  config.n_min = n_min;
  config.validate();
  PruningReduction out;
  out.k_v = compute_k(n_v, config);
  out.k_c = compute_k(n_c, config);
  out.exact_ratio = static_cast<double>((out.k_v + 1) * (out.k_c + 1)) / static_cast<double>(n_v * n_c);
  out.ideal_ratio = 1.0 / static_cast<double>(r * r);
  return out;
}

namespace {

Macs linear(Index tokens, Index in, Index out) { return tokens * in * out; }

Macs transformer_block(Index tokens, Index d, Index mlp_ratio) {
  return linear(tokens, d, 3 * d) + 2 * tokens * tokens * d + linear(tokens, d, d) +
         2 * linear(tokens, d, mlp_ratio * d);
}

Macs conv_block(Index positions, Index c, Index ratio) { return positions * 9 * c + 2 * linear(positions, c, ratio * c); }

/// Conv stages applied from the raw image; returns MACs and updates grid/channels.
Macs conv_stages(const BranchConfig& b, Index count, Index& grid, Index& channels) {
  Macs m = 0;
  grid = b.image_size;
  channels = 3;
  for (Index s = 0; s < count; ++s) {
    grid /= 2;
    const Index out = b.conv_stage_dims[static_cast<std::size_t>(s)];
    m += linear(grid * grid, 4 * channels, out);
    for (Index i = 0; i < b.conv_stage_depths[static_cast<std::size_t>(s)]; ++i) m += conv_block(grid * grid, out, b.mlp_ratio);
    channels = out;
  }
  return m;
}

struct FusionCost {
  std::vector<FusionBlockMacs> blocks;
  Macs attention_product = 0, total = 0;
};

FusionCost fusion_cost(Index nv, Index nc, const FusionConfig& f) {
  FusionCost c;
  for (Index l = 0; l < f.depth; ++l) {
    FusionBlockMacs b;
    b.vit_to_conv = cross_attention_macs(nv, nc, f.d, f.heads);
    b.conv_to_vit = cross_attention_macs(nc, nv, f.d, f.heads);
    b.gates = linear(nv, f.d, f.d) + linear(nc, f.d, f.d);
    c.attention_product += b.vit_to_conv.attention_product + b.conv_to_vit.attention_product;
    c.total += b.total();
    c.blocks.push_back(b);
  }
  return c;
}

double reduction(Macs configured, Macs baseline) {
  return baseline == 0 ? 0.0 : 1.0 - static_cast<double>(configured) / static_cast<double>(baseline);
}

}  // namespace

FlopReport model_flop_report(ModelConfig config) {
  config.finalize();
  const BranchConfig& b = config.branches;
  const Index d = b.d;
  FlopReport r;
  auto add = [&](const std::string& name, Macs m) { r.components.push_back({name, m}); };

  const Index nv = b.vit_tokens();
  Macs vit = linear(nv, b.patch_size * b.patch_size * 3, b.d_v);
  for (Index i = 0; i < b.vit_blocks; ++i) vit += transformer_block(nv, b.d_v, b.mlp_ratio);
  add("vit", vit);

  if (config.vit_only) {
    add("projection", linear(nv, b.d_v, d));
    add("heads", linear(1, d, config.n_classes));
    for (const auto& c : r.components) r.total += c.macs;
    r.unpruned_total = r.total;
    r.tokens_v = nv;
    return r;
  }

  Index grid = 0, channels = 0;
  add("conv", conv_stages(b, b.conv_stages(), grid, channels));
  const Index nc = grid * grid;

  Macs hybrid = conv_stages(b, b.hybrid_conv_stages(), grid, channels);
  grid /= 2;
  const Index nx = grid * grid;
  hybrid += linear(nx, 4 * channels, b.d_x);
  for (Index i = 0; i < b.hybrid_blocks; ++i) hybrid += transformer_block(nx, b.d_x, b.mlp_ratio);
  add("hybrid", hybrid);

  add("projection", linear(nv, b.d_v, d) + linear(nc, b.d_c, d) + linear(1, b.d_x, d));

  Index fv = nv, fc = nc;
  Macs pruning = 0;
  if (config.prune_enabled) {
    const Index h = config.prune.score_hidden;
    for (Index n : {nv, nc}) pruning += linear(n, d, h) + linear(n, h, 1) + linear(1, d, d);
    fv = compute_k(nv, config.prune) + 1;
    fc = compute_k(nc, config.prune) + 1;
  }
  add("pruning", pruning);

  const FusionCost fused = fusion_cost(fv, fc, config.fusion);
  for (std::size_t l = 0; l < fused.blocks.size(); ++l) add("fusion.block" + std::to_string(l), fused.blocks[l].total());
  r.fusion_blocks = fused.blocks;
  r.fusion_attention_product = fused.attention_product;
  r.fusion_total = fused.total;
  r.tokens_v = fv;
  r.tokens_c = fc;

  const Index h = config.hidden();
  add("router", linear(1, 3 * d, h) + linear(1, h, 3) + linear(1, h, 1) + 3 * linear(1, d, d));
  add("heads", 4 * linear(1, d, config.n_classes));

  for (const auto& c : r.components) r.total += c.macs;

  const FusionCost raw = fusion_cost(nv, nc, config.fusion);
  r.unpruned_fusion_attention_product = raw.attention_product;
  r.unpruned_fusion_total = raw.total;
  r.unpruned_total = r.total - pruning - fused.total + raw.total;
  return r;
}

double FlopReport::attention_product_reduction() const {
  return reduction(fusion_attention_product, unpruned_fusion_attention_product);
}
double FlopReport::fusion_reduction() const { return reduction(fusion_total, unpruned_fusion_total); }
double FlopReport::model_reduction() const { return reduction(total, unpruned_total); }

Macs FlopReport::component(const std::string& name) const {
  for (const auto& c : components)
    if (c.name == name) return c.macs;
  throw ArgumentError("no FLOP component named " + name);
}

std::string FlopReport::records() const {
  std::ostringstream os;
  for (const auto& c : components)
    os << "component=" << c.name << " macs=" << c.macs << " flops=" << 2 * c.macs << "\n";
  for (std::size_t l = 0; l < fusion_blocks.size(); ++l) {
    const auto& b = fusion_blocks[l];
    os << "fusion_block=" << l << " attention_product=" << b.vit_to_conv.attention_product + b.conv_to_vit.attention_product
       << " projections=" << b.vit_to_conv.projections + b.conv_to_vit.projections << " gates=" << b.gates << "\n";
  }
  char buf[64];
  auto frac = [&](double v) {
    std::snprintf(buf, sizeof buf, "%.6f", v);
    return std::string(buf);
  };
  os << "summary=configured tokens_v=" << tokens_v << " tokens_c=" << tokens_c << " fusion_attention_product_macs="
     << fusion_attention_product << " fusion_macs=" << fusion_total << " total_macs=" << total
     << " total_flops=" << 2 * total << "\n";
  os << "summary=unpruned fusion_attention_product_macs=" << unpruned_fusion_attention_product
     << " fusion_macs=" << unpruned_fusion_total << " total_macs=" << unpruned_total
     << " total_flops=" << 2 * unpruned_total << "\n";
  os << "summary=reduction attention_product=" << frac(attention_product_reduction())
     << " fusion=" << frac(fusion_reduction()) << " model=" << frac(model_reduction()) << "\n";
  return os.str();
}

std::string FlopReport::table() const {
  std::ostringstream os;
  char line[128];
  std::snprintf(line, sizeof line, "%-16s %16s %16s\n", "component", "MACs", "FLOPs");
  os << line;
  for (const auto& c : components) {
    std::snprintf(line, sizeof line, "%-16s %16lld %16lld\n", c.name.c_str(), static_cast<long long>(c.macs),
                  static_cast<long long>(2 * c.macs));
    os << line;
  }
  std::snprintf(line, sizeof line, "%-16s %16lld %16lld\n", "total", static_cast<long long>(total),
                static_cast<long long>(2 * total));
  os << line;
  std::snprintf(line, sizeof line, "%-16s %16lld %16lld\n", "total unpruned", static_cast<long long>(unpruned_total),
                static_cast<long long>(2 * unpruned_total));
  os << line;
  std::snprintf(line, sizeof line, "cross-attention product reduction %.2f%%, fusion %.2f%%, model %.2f%%\n",
                100.0 * attention_product_reduction(), 100.0 * fusion_reduction(), 100.0 * model_reduction());
  os << line;
  return os.str();
}

}  // namespace evcc
