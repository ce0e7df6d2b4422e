#pragma once

#include <array>
#include <string>
#include <string_view>

namespace tstab {

enum class VariantKind {
  baseline,
  soft_temp,
  soft_cap,
  soft_clip,
  sigma_reparam,
  layer_scale,
  qk_norm,
  qk_norm_cap,
  qkv_norm,
  qk_fc_norm,
};

constexpr int kVariantCount = 10;

// A block topology / softmax mechanism plus its hyperparameters. Immutable
// once a run starts; shareable across threads.
struct StabilityVariant {
  VariantKind kind = VariantKind::baseline;
  float beta = 0.5f;             // soft_temp
  float capping = 50.0f;         // soft_cap, qk_norm_cap
  float zeta = 1.03f;            // soft_clip
  float gamma_clip = -0.03f;     // soft_clip
  float layerscale_init = 0.1f;  // layer_scale

  void validate() const;

  bool uses_qk_ln() const {
    return kind == VariantKind::qk_norm || kind == VariantKind::qk_norm_cap ||
           kind == VariantKind::qk_fc_norm;
  }
  bool uses_qkv_ln() const { return kind == VariantKind::qkv_norm; }
  bool has_pre_attn_ln() const { return kind != VariantKind::qkv_norm; }
  bool uses_post_proj_fc2_ln() const { return kind == VariantKind::qk_fc_norm; }
  bool uses_capped_softmax() const {
    return kind == VariantKind::soft_cap || kind == VariantKind::qk_norm_cap;
  }
  bool uses_sigma_reparam() const { return kind == VariantKind::sigma_reparam; }
  bool uses_layer_scale() const { return kind == VariantKind::layer_scale; }
};

std::string_view variant_name(VariantKind kind);
VariantKind variant_from_name(std::string_view name);
const std::array<VariantKind, kVariantCount>& all_variant_kinds();

}  // namespace tstab
