#include "tstab/variant.hpp"

#include <stdexcept>

namespace tstab {

void StabilityVariant::validate() const {
  if (beta <= 0.0f) throw std::invalid_argument("variant: beta must be > 0");
  if (capping <= 0.0f) throw std::invalid_argument("variant: capping must be > 0");
  if (zeta < 1.0f) throw std::invalid_argument("variant: zeta must be >= 1");
  if (gamma_clip > 0.0f) throw std::invalid_argument("variant: gamma_clip must be <= 0");
}

namespace {
constexpr std::array<std::string_view, kVariantCount> kNames = {
    "baseline",    "soft_temp",   "soft_cap", "soft_clip",   "sigma_reparam",
    "layer_scale", "qk_norm",     "qk_norm_cap", "qkv_norm", "qk_fc_norm",
};
constexpr std::array<VariantKind, kVariantCount> kKinds = {
    VariantKind::baseline,      VariantKind::soft_temp,   VariantKind::soft_cap,
    VariantKind::soft_clip,     VariantKind::sigma_reparam, VariantKind::layer_scale,
    VariantKind::qk_norm,       VariantKind::qk_norm_cap, VariantKind::qkv_norm,
    VariantKind::qk_fc_norm,
};
}  // namespace

std::string_view variant_name(VariantKind kind) {
  return kNames[static_cast<size_t>(kind)];
}

VariantKind variant_from_name(std::string_view name) {
  for (size_t i = 0; i < kNames.size(); ++i) {
    if (kNames[i] == name) return kKinds[i];
  }
  throw std::invalid_argument("unknown variant: " + std::string(name));
}

const std::array<VariantKind, kVariantCount>& all_variant_kinds() { return kKinds; }

}  // namespace tstab
