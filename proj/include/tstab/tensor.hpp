#pragma once

#include <cassert>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace tstab {

using Shape = std::vector<int>;

long numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// Dense float32 tensor with an optional gradient buffer. Value-semantic
// handle over shared storage: copies alias the same data.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, float fill = 0.0f);
  Tensor(Shape shape, std::vector<float> values);

  static Tensor scalar(float v) { return Tensor({1}, {v}); }

  bool defined() const { return d_ != nullptr; }
  const Shape& shape() const { return d_->shape; }
  int rank() const { return static_cast<int>(d_->shape.size()); }
  // dim(-1) is the last extent.
  int dim(int i) const;
  long size() const { return static_cast<long>(d_->value.size()); }

  std::span<float> value() { return d_->value; }
  std::span<const float> value() const { return d_->value; }
  float item() const;

  bool requires_grad() const { return d_ && d_->requires_grad; }
  void set_requires_grad(bool v) { d_->requires_grad = v; }

  bool has_grad() const { return d_ && !d_->grad.empty(); }
  // Allocates a zeroed gradient buffer on first use.
  std::span<float> grad();
  std::span<const float> grad() const;
  void zero_grad();

  // Deep copy of values (gradient buffer not copied).
  Tensor clone() const;

  bool all_finite() const;

  const void* id() const { return d_.get(); }

 private:
  struct Data {
    Shape shape;
    std::vector<float> value;
    std::vector<float> grad;
    bool requires_grad = false;
  };
  std::shared_ptr<Data> d_;
};

// Token index matrix, batch major: ids[b * length + t].
struct TokenBatch {
  int batch = 0;
  int length = 0;
  std::vector<int> ids;
  int at(int b, int t) const { return ids[static_cast<size_t>(b) * length + t]; }
};

// Reverse-mode tape. Ops executed while a tape is active append a backward
// closure; recording order is a topological order, so backward() is a single
// reverse sweep visiting each node once. Rebuilt every training step.
class GradientTape {
 public:
  GradientTape() = default;
  GradientTape(const GradientTape&) = delete;
  GradientTape& operator=(const GradientTape&) = delete;

  void record(std::function<void()> backward_fn);
  // Seeds d(loss)/d(loss) = 1 and replays all closures in reverse.
  void backward(Tensor& loss);
  size_t node_count() const { return nodes_.size(); }

  static GradientTape* active();

 private:
  std::vector<std::function<void()>> nodes_;
  friend class TapeScope;
};

// RAII activation of a tape on the current thread.
class TapeScope {
 public:
  explicit TapeScope(GradientTape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  GradientTape* prev_;
};

// ---- differentiable ops -------------------------------------------------
// All ops are eager: they compute the forward value immediately and, when a
// tape is active and an input requires grad, record the backward closure.

Tensor add(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, float c);
// x[...,d] * s[d], broadcast over leading axes.
Tensor channel_mul(const Tensor& x, const Tensor& s);

// a[...,m,k] x b[k,n] -> [...,m,n]
Tensor matmul(const Tensor& a, const Tensor& b);
// a[...,m,k] x b[n,k]^T -> [...,m,n]  (linear layers store weights [out,in])
Tensor matmul_nt(const Tensor& a, const Tensor& b);
// a[B,H,S,D] x b[B,H,T,D]^T -> [B,H,S,T]
Tensor bmm_nt(const Tensor& a, const Tensor& b);
// a[B,H,S,T] x b[B,H,T,D] -> [B,H,S,D]
Tensor bmm_nn(const Tensor& a, const Tensor& b);

// Normalizes the last axis to mean 0 / variance 1, then gain*x + bias.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, float eps);
// Row softmax over the last axis, max-subtracted.
Tensor softmax(const Tensor& x);
Tensor squared_relu(const Tensor& x);
// capping * tanh(x / capping); output strictly inside (-capping, capping).
Tensor tanh_cap(const Tensor& x, float capping);
// clamp((zeta - gamma) * p + gamma, 0, 1); clipped entries get zero gradient.
Tensor affine_clip01(const Tensor& p, float zeta, float gamma);
// Adds -1e9 above the diagonal of the trailing [S,S] planes.
Tensor causal_mask_add(const Tensor& logits);

// x[...,w] -> x[...,start:start+len]
Tensor slice_last(const Tensor& x, int start, int len);
// [B,S,H] -> [B,h,S,H/h]
Tensor heads_split(const Tensor& x, int n_heads);
// [B,h,S,d] -> [B,S,h*d]
Tensor heads_merge(const Tensor& x);
// Rotates consecutive pairs of the last axis by pos * base^(-2i/d).
// positions.size() must be S or 0 (0 means 0..S-1). Requires d even.
Tensor rotary(const Tensor& x, float base, std::span<const int> positions = {});

// table[V,H] gathered by ids -> [B,S,H]
Tensor embedding(const Tensor& table, const TokenBatch& ids, int seq_len);
// logits[B,S,V] vs targets (batch*seq ints) -> scalar mean cross-entropy.
Tensor cross_entropy_mean(const Tensor& logits, std::span<const int> targets);

Tensor sum(const Tensor& x);

}  // namespace tstab
