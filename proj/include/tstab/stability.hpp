#pragma once

#include "tstab/numeric.hpp"
#include "tstab/tensor.hpp"
#include "tstab/variant.hpp"

namespace tstab {

// softmax(beta * logit)
Tensor softmax_temp(const Tensor& logit, float beta);

// softmax(tanh(logit / capping) * capping)
Tensor capped_softmax(const Tensor& logit, float capping);

// clip((zeta - gamma) * softmax(logit) + gamma, 0, 1)
Tensor clipped_softmax(const Tensor& logit, float zeta, float gamma);

// W_hat = (gamma / sigma(W)) * W with sigma estimated by power iteration on
// the persistent state. Gradients flow to both w and gamma; the power
// iteration vectors are held constant in the backward pass.
Tensor sigma_reparam_weight(const Tensor& w, const Tensor& gamma, SpectralState& state,
                            int iters = 16, double tol = 1e-5);

// Per-channel scaling of a residual branch output.
Tensor layer_scale_apply(const Tensor& branch_out, const Tensor& scale);

// The variant's softmax pipeline for attention logits:
//   pre-transform (temperature / capping) -> causal mask -> softmax ->
//   post-transform (clipping).
// The mask is applied after capping so masked positions stay fully
// suppressed.
Tensor attn_softmax(const Tensor& logits, const StabilityVariant& variant, bool causal);

}  // namespace tstab
