#include "tstab/stability.hpp"

#include <cmath>
#include <stdexcept>

namespace tstab {

Tensor softmax_temp(const Tensor& logit, float beta) {
  if (beta <= 0.0f) throw std::invalid_argument("softmax_temp: beta must be > 0");
  return softmax(scale(logit, beta));
}

Tensor capped_softmax(const Tensor& logit, float capping) {
  return softmax(tanh_cap(logit, capping));
}

Tensor clipped_softmax(const Tensor& logit, float zeta, float gamma) {
  return affine_clip01(softmax(logit), zeta, gamma);
}

Tensor sigma_reparam_weight(const Tensor& w, const Tensor& gamma, SpectralState& state,
                            int iters, double tol) {
  if (w.rank() != 2) throw std::invalid_argument("sigma_reparam_weight: need a 2-d weight");
  if (gamma.size() != 1) throw std::invalid_argument("sigma_reparam_weight: gamma must be scalar");
  const double sigma = spectral_norm(w, state, iters, tol);
  if (sigma == 0.0) {
    throw std::domain_error("sigma_reparam_weight: zero weight matrix (division undefined)");
  }
  const float g = gamma.item();
  const float coef = static_cast<float>(g / sigma);
  Tensor out(w.shape());
  auto wv = w.value();
  auto ov = out.value();
  for (long i = 0; i < w.size(); ++i) ov[i] = coef * wv[i];
  bool need = w.requires_grad() || gamma.requires_grad();
  out.set_requires_grad(need);
  if (auto* tape = GradientTape::active(); tape && need) {
    // sigma is differentiated as u^T W v with u, v frozen at their final
    // power-iteration values: d(sigma)/dW = u v^T.
    Tensor wc = w, gc = gamma, oc = out;
    auto u = std::make_shared<std::vector<float>>(state.u);
    auto v = std::make_shared<std::vector<float>>(state.v);
    tape->record([wc, gc, oc, u, v, sigma, g]() mutable {
      auto og = oc.grad();
      auto wv = wc.value();
      double dot_gw = 0.0;
      for (size_t i = 0; i < og.size(); ++i) dot_gw += static_cast<double>(og[i]) * wv[i];
      if (wc.requires_grad()) {
        auto wg = wc.grad();
        const long m = wc.dim(0), n = wc.dim(1);
        const float direct = static_cast<float>(g / sigma);
        const float through_sigma = static_cast<float>(g / (sigma * sigma) * dot_gw);
        for (long i = 0; i < m; ++i) {
          const float ui = (*u)[static_cast<size_t>(i)];
          for (long j = 0; j < n; ++j) {
            wg[i * n + j] += direct * og[i * n + j] - through_sigma * ui * (*v)[static_cast<size_t>(j)];
          }
        }
      }
      if (gc.requires_grad()) {
        gc.grad()[0] += static_cast<float>(dot_gw / sigma);
      }
    });
  }
  return out;
}

Tensor layer_scale_apply(const Tensor& branch_out, const Tensor& scale) {
  return channel_mul(branch_out, scale);
}

Tensor attn_softmax(const Tensor& logits, const StabilityVariant& variant, bool causal) {
  Tensor t = logits;
  switch (variant.kind) {
    case VariantKind::soft_temp:
      t = scale(t, variant.beta);
      break;
    case VariantKind::soft_cap:
    case VariantKind::qk_norm_cap:
      t = tanh_cap(t, variant.capping);
      break;
    default:
      break;
  }
  if (causal) t = causal_mask_add(t);
  Tensor p = softmax(t);
  if (variant.kind == VariantKind::soft_clip) {
    p = affine_clip01(p, variant.zeta, variant.gamma_clip);
  }
  return p;
}

}  // namespace tstab
