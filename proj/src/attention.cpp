#include "tstab/attention.hpp"

#include <cmath>
#include <stdexcept>

namespace tstab {

void AttentionConfig::validate() const {
  if (hidden_size != num_heads * head_dim) {
    throw std::invalid_argument("attention: hidden_size " + std::to_string(hidden_size) +
                                " != num_heads * head_dim");
  }
  if (rope_base > 0.0f && head_dim % 2 != 0) {
    throw std::invalid_argument("attention: rotary embeddings need an even head_dim, got " +
                                std::to_string(head_dim));
  }
}

std::string_view layer_id_name(LayerId id) {
  switch (id) {
    case LayerId::QKV: return "QKV";
    case LayerId::Proj: return "Proj";
    case LayerId::FC1: return "FC1";
    case LayerId::FC2: return "FC2";
    case LayerId::Out: return "Out";
  }
  return "?";
}

LayerNormParams LayerNormParams::make(int width, float eps) {
  LayerNormParams p;
  p.gain = Tensor({width}, 1.0f);
  p.bias = Tensor({width}, 0.0f);
  p.gain.set_requires_grad(true);
  p.bias.set_requires_grad(true);
  p.eps = eps;
  return p;
}

LinearLayer LinearLayer::make(LayerId id, int out, int in, bool sigma_reparam) {
  LinearLayer l;
  l.id = id;
  l.weight = Tensor({out, in});
  l.weight.set_requires_grad(true);
  if (sigma_reparam) {
    l.reparam_gamma = Tensor::scalar(1.0f);
    l.reparam_gamma->set_requires_grad(true);
  }
  return l;
}

Tensor LinearLayer::effective_weight() {
  if (!reparam_gamma) return weight;
  return sigma_reparam_weight(weight, *reparam_gamma, spec_state, power_iters, power_tol);
}

Tensor LinearLayer::apply(const Tensor& x, LinearTrace* trace) {
  Tensor w = effective_weight();
  Tensor y = matmul_nt(x, w);
  if (trace) {
    trace->x = x;
    trace->y = y;
    trace->w = w;
  }
  return y;
}

Tensor apply_rotary(const Tensor& q_or_k, float base, std::span<const int> positions) {
  return rotary(q_or_k, base, positions);
}

Tensor attention_logits_qk(Tensor q, Tensor k, const AttentionConfig& cfg,
                           const LayerNormParams* ln_q, const LayerNormParams* ln_k) {
  if (ln_q) q = ln_q->apply(q);
  if (ln_k) k = ln_k->apply(k);
  if (cfg.rope_base > 0.0f) {
    q = apply_rotary(q, cfg.rope_base);
    k = apply_rotary(k, cfg.rope_base);
  }
  const float inv_sqrt_d = 1.0f / std::sqrt(static_cast<float>(cfg.head_dim));
  return scale(bmm_nt(q, k), inv_sqrt_d);
}

Tensor attention_logits(const Tensor& x, LinearLayer& wq, LinearLayer& wk,
                        const AttentionConfig& cfg, const LayerNormParams* ln_q,
                        const LayerNormParams* ln_k) {
  Tensor q = heads_split(wq.apply(x), cfg.num_heads);
  Tensor k = heads_split(wk.apply(x), cfg.num_heads);
  return attention_logits_qk(std::move(q), std::move(k), cfg, ln_q, ln_k);
}

Tensor attention_forward(const Tensor& x, AttentionParams& p, const StabilityVariant& variant,
                         AttnBranchTrace* trace) {
  const int h = p.cfg.hidden_size;
  Tensor fused = p.qkv.apply(x, trace ? &trace->qkv : nullptr);
  if (p.ln_qkv) {
    fused = p.ln_qkv->apply(fused);
    if (trace) trace->qkv_ln_out = fused;
  }
  Tensor q = heads_split(slice_last(fused, 0, h), p.cfg.num_heads);
  Tensor k = heads_split(slice_last(fused, h, h), p.cfg.num_heads);
  Tensor v = heads_split(slice_last(fused, 2 * h, h), p.cfg.num_heads);
  Tensor logits = attention_logits_qk(std::move(q), std::move(k), p.cfg,
                                      p.ln_q ? &*p.ln_q : nullptr, p.ln_k ? &*p.ln_k : nullptr);
  Tensor weights = attn_softmax(logits, variant, p.cfg.causal);
  if (trace) trace->attn_weights = weights;
  Tensor ctx = heads_merge(bmm_nn(weights, v));
  Tensor out = p.proj.apply(ctx, trace ? &trace->proj : nullptr);
  if (p.ln_post_proj) {
    out = p.ln_post_proj->apply(out);
    if (trace) trace->proj_ln_out = out;
  }
  return out;
}

}  // namespace tstab
