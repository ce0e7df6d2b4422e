#pragma once

#include <optional>
#include <string>

#include "tstab/numeric.hpp"
#include "tstab/stability.hpp"
#include "tstab/tensor.hpp"
#include "tstab/variant.hpp"

namespace tstab {

struct AttentionConfig {
  int hidden_size = 128;
  int num_heads = 4;
  int head_dim = 32;
  float rope_base = 10000.0f;  // 0 disables rotary embeddings
  bool causal = true;

  void validate() const;
};

enum class LayerId { QKV, Proj, FC1, FC2, Out };
std::string_view layer_id_name(LayerId id);

// Input/output/effective-weight handles stashed during the forward pass so
// telemetry can read values and, after backward, input gradients.
struct LinearTrace {
  Tensor x;
  Tensor y;
  Tensor w;
};

struct LayerNormParams {
  Tensor gain;
  Tensor bias;
  float eps = 1e-5f;

  static LayerNormParams make(int width, float eps = 1e-5f);
  Tensor apply(const Tensor& x) const { return layer_norm(x, gain, bias, eps); }
  int width() const { return gain.dim(0); }
};

// Bias-free linear layer, weight stored [out, in]. With reparam_gamma set the
// effective weight is (gamma / sigma(W)) W.
struct LinearLayer {
  LayerId id = LayerId::QKV;
  Tensor weight;
  std::optional<Tensor> reparam_gamma;
  SpectralState spec_state;
  int power_iters = 16;
  double power_tol = 1e-5;

  static LinearLayer make(LayerId id, int out, int in, bool sigma_reparam);
  Tensor effective_weight();
  Tensor apply(const Tensor& x, LinearTrace* trace = nullptr);
  int out_features() const { return weight.dim(0); }
  int in_features() const { return weight.dim(1); }
};

// Rotates consecutive pairs of q-or-k features by position-dependent angles
// theta_i = pos * base^(-2i/head_dim).
Tensor apply_rotary(const Tensor& q_or_k, float base, std::span<const int> positions = {});

// Scaled dot-product logits (1/sqrt(d)) from pre-split q, k [B,h,S,d].
// QK layer norm, when present, runs before rotary.
Tensor attention_logits_qk(Tensor q, Tensor k, const AttentionConfig& cfg,
                           const LayerNormParams* ln_q, const LayerNormParams* ln_k);

// Same, starting from the token stream and separate query/key projections.
Tensor attention_logits(const Tensor& x, LinearLayer& wq, LinearLayer& wk,
                        const AttentionConfig& cfg, const LayerNormParams* ln_q = nullptr,
                        const LayerNormParams* ln_k = nullptr);

struct AttnBranchTrace {
  LinearTrace qkv;
  LinearTrace proj;
  Tensor attn_weights;  // [B,h,S,S] post-softmax
  Tensor qkv_ln_out;    // defined for qkv_norm
  Tensor proj_ln_out;   // defined for qk_fc_norm
};

// Attention-side parameters of one transformer block; optional members exist
// only for the variants that place them.
struct AttentionParams {
  AttentionConfig cfg;
  LinearLayer qkv;  // [3H, H] fused, split after projection
  std::optional<LayerNormParams> ln_qkv;
  std::optional<LayerNormParams> ln_q;
  std::optional<LayerNormParams> ln_k;
  LinearLayer proj;  // [H, H]
  std::optional<LayerNormParams> ln_post_proj;
};

// Causal multi-head attention from branch input through Proj (residual is
// added by the caller).
Tensor attention_forward(const Tensor& x, AttentionParams& p, const StabilityVariant& variant,
                         AttnBranchTrace* trace = nullptr);

}  // namespace tstab
