#include "tstab/tensor.hpp"

#include <algorithm>
#include <cmath>

namespace tstab {

long numel(const Shape& shape) {
  long n = 1;
  for (int d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

Tensor::Tensor(Shape shape, float fill) : d_(std::make_shared<Data>()) {
  for (int d : shape) {
    if (d <= 0) throw std::invalid_argument("Tensor: non-positive extent in " + shape_str(shape));
  }
  d_->shape = std::move(shape);
  d_->value.assign(static_cast<size_t>(numel(d_->shape)), fill);
}

Tensor::Tensor(Shape shape, std::vector<float> values) : d_(std::make_shared<Data>()) {
  if (numel(shape) != static_cast<long>(values.size())) {
    throw std::invalid_argument("Tensor: " + shape_str(shape) + " does not hold " +
                                std::to_string(values.size()) + " values");
  }
  d_->shape = std::move(shape);
  d_->value = std::move(values);
}

int Tensor::dim(int i) const {
  int r = rank();
  if (i < 0) i += r;
  assert(i >= 0 && i < r);
  return d_->shape[static_cast<size_t>(i)];
}

float Tensor::item() const {
  if (size() != 1) throw std::invalid_argument("Tensor::item on tensor of size " + std::to_string(size()));
  return d_->value[0];
}

std::span<float> Tensor::grad() {
  if (d_->grad.empty()) d_->grad.assign(d_->value.size(), 0.0f);
  return d_->grad;
}

std::span<const float> Tensor::grad() const {
  assert(!d_->grad.empty());
  return d_->grad;
}

void Tensor::zero_grad() {
  if (d_ && !d_->grad.empty()) std::fill(d_->grad.begin(), d_->grad.end(), 0.0f);
}

Tensor Tensor::clone() const {
  Tensor out;
  out.d_ = std::make_shared<Data>();
  out.d_->shape = d_->shape;
  out.d_->value = d_->value;
  out.d_->requires_grad = d_->requires_grad;
  return out;
}

bool Tensor::all_finite() const {
  for (float v : d_->value) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

// ---- tape ----------------------------------------------------------------

namespace {
thread_local GradientTape* g_active_tape = nullptr;
}

GradientTape* GradientTape::active() { return g_active_tape; }

void GradientTape::record(std::function<void()> backward_fn) {
  nodes_.push_back(std::move(backward_fn));
}

void GradientTape::backward(Tensor& loss) {
  if (loss.size() != 1) throw std::invalid_argument("backward: loss must be scalar");
  loss.grad()[0] += 1.0f;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
}

TapeScope::TapeScope(GradientTape& tape) : prev_(g_active_tape) { g_active_tape = &tape; }
TapeScope::~TapeScope() { g_active_tape = prev_; }

// ---- kernels ---------------------------------------------------------------

namespace {

// c[m,n] += a[m,k] * b[k,n]; ikj order so the inner loop is contiguous and
// the per-output summation order is fixed (sequential in k).
void mm_acc(const float* a, const float* b, float* c, long m, long k, long n) {
  for (long i = 0; i < m; ++i) {
    const float* ai = a + i * k;
    float* ci = c + i * n;
    for (long p = 0; p < k; ++p) {
      const float aip = ai[p];
      const float* bp = b + p * n;
      for (long j = 0; j < n; ++j) ci[j] += aip * bp[j];
    }
  }
}

// c[k,n] += a[m,k]^T * g[m,n]
void mm_t_acc(const float* a, const float* g, float* c, long m, long k, long n) {
  for (long i = 0; i < m; ++i) {
    const float* ai = a + i * k;
    const float* gi = g + i * n;
    for (long p = 0; p < k; ++p) {
      const float aip = ai[p];
      float* cp = c + p * n;
      for (long j = 0; j < n; ++j) cp[j] += aip * gi[j];
    }
  }
}

void transpose_into(const float* src, float* dst, long rows, long cols) {
  for (long r = 0; r < rows; ++r) {
    for (long c = 0; c < cols; ++c) dst[c * rows + r] = src[r * cols + c];
  }
}

bool want_grad(const Tensor& a) { return a.requires_grad(); }

void mark_out(Tensor& out, bool need) { out.set_requires_grad(need); }

long leading_rows(const Tensor& t) { return t.size() / t.dim(-1); }

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                " vs " + shape_str(b.shape()));
  }
}

}  // namespace

// ---- elementwise -----------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "add");
  Tensor out(a.shape());
  auto av = a.value(), bv = b.value();
  auto ov = out.value();
  for (long i = 0; i < out.size(); ++i) ov[i] = av[i] + bv[i];
  bool need = want_grad(a) || want_grad(b);
  mark_out(out, need);
  if (auto* tape = GradientTape::active(); tape && need) {
    Tensor ac = a, bc = b, oc = out;
    tape->record([ac, bc, oc]() mutable {
      auto og = oc.grad();
      if (ac.requires_grad()) {
        auto ag = ac.grad();
        for (size_t i = 0; i < og.size(); ++i) ag[i] += og[i];
      }
      if (bc.requires_grad()) {
        auto bg = bc.grad();
        for (size_t i = 0; i < og.size(); ++i) bg[i] += og[i];
      }
    });
  }
  return out;
}

Tensor scale(const Tensor& a, float c) {
  Tensor out(a.shape());
  auto av = a.value();
  auto ov = out.value();
  for (long i = 0; i < out.size(); ++i) ov[i] = av[i] * c;
  bool need = want_grad(a);
  mark_out(out, need);
  if (auto* tape = GradientTape::active(); tape && need) {
    Tensor ac = a, oc = out;
    tape->record([ac, oc, c]() mutable {
      auto og = oc.grad();
      auto ag = ac.grad();
      for (size_t i = 0; i < og.size(); ++i) ag[i] += og[i] * c;
    });
  }
  return out;
}

Tensor channel_mul(const Tensor& x, const Tensor& s) {
  if (s.rank() != 1 || s.dim(0) != x.dim(-1)) {
    throw std::invalid_argument("channel_mul: scale " + shape_str(s.shape()) +
                                " does not match last axis of " + shape_str(x.shape()));
  }
  const long d = x.dim(-1);
  const long rows = leading_rows(x);
  Tensor out(x.shape());
  auto xv = x.value(), sv = s.value();
  auto ov = out.value();
  for (long r = 0; r < rows; ++r) {
    for (long j = 0; j < d; ++j) ov[r * d + j] = xv[r * d + j] * sv[j];
  }
  bool need = want_grad(x) || want_grad(s);
  mark_out(out, need);
  if (auto* tape = GradientTape::active(); tape && need) {
    Tensor xc = x, sc = s, oc = out;
    tape->record([xc, sc, oc, rows, d]() mutable {
      auto og = oc.grad();
      auto xv = xc.value(), sv = sc.value();
      if (xc.requires_grad()) {
        auto xg = xc.grad();
        for (long r = 0; r < rows; ++r) {
          for (long j = 0; j < d; ++j) xg[r * d + j] += og[r * d + j] * sv[j];
        }
      }
      if (sc.requires_grad()) {
        auto sg = sc.grad();
        for (long r = 0; r < rows; ++r) {
          for (long j = 0; j < d; ++j) sg[j] += og[r * d + j] * xv[r * d + j];
        }
      }
    });
  }
  return out;
}

// ---- matmul family ----------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() < 2 || b.rank() != 2) {
    throw std::invalid_argument("matmul: need a[...,m,k], b[k,n], got " + shape_str(a.shape()) +
                                " x " + shape_str(b.shape()));
  }
  const long k = a.dim(-1);
  if (b.dim(0) != k) {
    throw std::invalid_argument("matmul: inner extents differ: " + shape_str(a.shape()) + " x " +
                                shape_str(b.shape()));
  }
  const long n = b.dim(1);
  const long rows = leading_rows(a);
  Shape out_shape = a.shape();
  out_shape.back() = static_cast<int>(n);
  Tensor out(out_shape);
  mm_acc(a.value().data(), b.value().data(), out.value().data(), rows, k, n);
  bool need = want_grad(a) || want_grad(b);
  mark_out(out, need);
  if (auto* tape = GradientTape::active(); tape && need) {
    Tensor ac = a, bc = b, oc = out;
    tape->record([ac, bc, oc, rows, k, n]() mutable {
      auto og = oc.grad();
      if (ac.requires_grad()) {
        std::vector<float> bt(static_cast<size_t>(k * n));
        transpose_into(bc.value().data(), bt.data(), k, n);
        mm_acc(og.data(), bt.data(), ac.grad().data(), rows, n, k);
      }
      if (bc.requires_grad()) {
        mm_t_acc(ac.value().data(), og.data(), bc.grad().data(), rows, k, n);
      }
    });
  }
  return out;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  if (a.rank() < 2 || b.rank() != 2) {
    throw std::invalid_argument("matmul_nt: need a[...,m,k], b[n,k], got " + shape_str(a.shape()) +
                                " x " + shape_str(b.shape()));
  }
  const long k = a.dim(-1);
  if (b.dim(1) != k) {
    throw std::invalid_argument("matmul_nt: inner extents differ: " + shape_str(a.shape()) +
                                " x " + shape_str(b.shape()) + "^T");
  }
  const long n = b.dim(0);
  const long rows = leading_rows(a);
  Shape out_shape = a.shape();
  out_shape.back() = static_cast<int>(n);
  Tensor out(out_shape);
  std::vector<float> bt(static_cast<size_t>(k * n));
  transpose_into(b.value().data(), bt.data(), n, k);
  mm_acc(a.value().data(), bt.data(), out.value().data(), rows, k, n);
  bool need = want_grad(a) || want_grad(b);
  mark_out(out, need);
  if (auto* tape = GradientTape::active(); tape && need) {
    Tensor ac = a, bc = b, oc = out;
    tape->record([ac, bc, oc, rows, k, n]() mutable {
      auto og = oc.grad();
      // y = x b^T: dx = g b; db = g^T x
      if (ac.requires_grad()) {
        mm_acc(og.data(), bc.value().data(), ac.grad().data(), rows, n, k);
      }
      if (bc.requires_grad()) {
        mm_t_acc(og.data(), ac.value().data(), bc.grad().data(), rows, n, k);
      }
    });
  }
  return out;
}

namespace {

void check_bmm(const Tensor& a, const Tensor& b, const char* op) {
  if (a.rank() != 4 || b.rank() != 4 || a.dim(0) != b.dim(0) || a.dim(1) != b.dim(1)) {
    throw std::invalid_argument(std::string(op) + ": need matching [B,H,...] 4-d tensors, got " +
                                shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
}

}  // namespace

Tensor bmm_nt(const Tensor& a, const Tensor& b) {
  check_bmm(a, b, "bmm_nt");
  const long s = a.dim(2), d = a.dim(3), t = b.dim(2);
  if (b.dim(3) != d) {
    throw std::invalid_argument("bmm_nt: inner extents differ: " + shape_str(a.shape()) + " x " +
                                shape_str(b.shape()) + "^T");
  }
  const long slabs = static_cast<long>(a.dim(0)) * a.dim(1);
  Tensor out({a.dim(0), a.dim(1), static_cast<int>(s), static_cast<int>(t)});
  {
    std::vector<float> bt(static_cast<size_t>(d * t));
    for (long g = 0; g < slabs; ++g) {
      transpose_into(b.value().data() + g * t * d, bt.data(), t, d);
      mm_acc(a.value().data() + g * s * d, bt.data(), out.value().data() + g * s * t, s, d, t);
    }
  }
  bool need = want_grad(a) || want_grad(b);
  mark_out(out, need);
  if (auto* tape = GradientTape::active(); tape && need) {
    Tensor ac = a, bc = b, oc = out;
    tape->record([ac, bc, oc, slabs, s, d, t]() mutable {
      auto og = oc.grad();
      for (long g = 0; g < slabs; ++g) {
        const float* gg = og.data() + g * s * t;
        if (ac.requires_grad()) {
          mm_acc(gg, bc.value().data() + g * t * d, ac.grad().data() + g * s * d, s, t, d);
        }
        if (bc.requires_grad()) {
          mm_t_acc(gg, ac.value().data() + g * s * d, bc.grad().data() + g * t * d, s, t, d);
        }
      }
    });
  }
  return out;
}

Tensor bmm_nn(const Tensor& a, const Tensor& b) {
  check_bmm(a, b, "bmm_nn");
  const long s = a.dim(2), t = a.dim(3), d = b.dim(3);
  if (b.dim(2) != t) {
    throw std::invalid_argument("bmm_nn: inner extents differ: " + shape_str(a.shape()) + " x " +
                                shape_str(b.shape()));
  }
  const long slabs = static_cast<long>(a.dim(0)) * a.dim(1);
  Tensor out({a.dim(0), a.dim(1), static_cast<int>(s), static_cast<int>(d)});
  for (long g = 0; g < slabs; ++g) {
    mm_acc(a.value().data() + g * s * t, b.value().data() + g * t * d,
           out.value().data() + g * s * d, s, t, d);
  }
  bool need = want_grad(a) || want_grad(b);
  mark_out(out, need);
  if (auto* tape = GradientTape::active(); tape && need) {
    Tensor ac = a, bc = b, oc = out;
    tape->record([ac, bc, oc, slabs, s, t, d]() mutable {
      auto og = oc.grad();
      std::vector<float> bt(static_cast<size_t>(t * d));
      for (long g = 0; g < slabs; ++g) {
        const float* gg = og.data() + g * s * d;
        if (ac.requires_grad()) {
          transpose_into(bc.value().data() + g * t * d, bt.data(), t, d);
          mm_acc(gg, bt.data(), ac.grad().data() + g * s * t, s, d, t);
        }
        if (bc.requires_grad()) {
          mm_t_acc(ac.value().data() + g * s * t, gg, bc.grad().data() + g * t * d, s, t, d);
        }
      }
    });
  }
  return out;
}

// ---- normalization / activations ------------------------------------------

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, float eps) {
  const long d = x.dim(-1);
  if (d < 2) throw std::invalid_argument("layer_norm: last axis must be >= 2");
  if (eps <= 0.0f) throw std::invalid_argument("layer_norm: eps must be > 0");
  if (gain.rank() != 1 || gain.dim(0) != d || bias.rank() != 1 || bias.dim(0) != d) {
    throw std::invalid_argument("layer_norm: gain/bias must be [d] with d = " + std::to_string(d));
  }
  const long rows = leading_rows(x);
  Tensor out(x.shape());
  // normalized activations are kept for the backward pass
  auto xhat = std::make_shared<std::vector<float>>(static_cast<size_t>(x.size()));
  auto inv_std = std::make_shared<std::vector<float>>(static_cast<size_t>(rows));
  auto xv = x.value();
  auto gv = gain.value(), bv = bias.value();
  auto ov = out.value();
  for (long r = 0; r < rows; ++r) {
    const float* xr = xv.data() + r * d;
    double mu = 0.0;
    for (long j = 0; j < d; ++j) mu += xr[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (long j = 0; j < d; ++j) {
      const double c = xr[j] - mu;
      var += c * c;
    }
    var /= static_cast<double>(d);
    const float inv = static_cast<float>(1.0 / std::sqrt(var + static_cast<double>(eps)));
    (*inv_std)[static_cast<size_t>(r)] = inv;
    float* hr = xhat->data() + r * d;
    float* yr = ov.data() + r * d;
    const float muf = static_cast<float>(mu);
    for (long j = 0; j < d; ++j) {
      hr[j] = (xr[j] - muf) * inv;
      yr[j] = gv[j] * hr[j] + bv[j];
    }
  }
  bool need = want_grad(x) || want_grad(gain) || want_grad(bias);
  mark_out(out, need);
  if (auto* tape = GradientTape::active(); tape && need) {
    Tensor xc = x, gc = gain, bc = bias, oc = out;
    tape->record([xc, gc, bc, oc, xhat, inv_std, rows, d]() mutable {
      auto og = oc.grad();
      auto gv = gc.value();
      for (long r = 0; r < rows; ++r) {
        const float* gr = og.data() + r * d;
        const float* hr = xhat->data() + r * d;
        if (xc.requires_grad()) {
          // dx = inv * (dh - mean(dh) - xhat * mean(dh .* xhat)), dh = g .* gain
          double mean_dh = 0.0, mean_dh_h = 0.0;
          for (long j = 0; j < d; ++j) {
            const double dh = static_cast<double>(gr[j]) * gv[j];
            mean_dh += dh;
            mean_dh_h += dh * hr[j];
          }
          mean_dh /= static_cast<double>(d);
          mean_dh_h /= static_cast<double>(d);
          const float inv = (*inv_std)[static_cast<size_t>(r)];
          auto xg = xc.grad();
          float* xgr = xg.data() + r * d;
          for (long j = 0; j < d; ++j) {
            const double dh = static_cast<double>(gr[j]) * gv[j];
            xgr[j] += inv * static_cast<float>(dh - mean_dh - hr[j] * mean_dh_h);
          }
        }
        if (gc.requires_grad()) {
          auto gg = gc.grad();
          for (long j = 0; j < d; ++j) gg[j] += gr[j] * hr[j];
        }
        if (bc.requires_grad()) {
          auto bg = bc.grad();
          for (long j = 0; j < d; ++j) bg[j] += gr[j];
        }
      }
    });
  }
  return out;
}

Tensor softmax(const Tensor& x) {
  const long d = x.dim(-1);
  const long rows = leading_rows(x);
  Tensor out(x.shape());
  auto xv = x.value();
  auto ov = out.value();
  for (long r = 0; r < rows; ++r) {
    const float* xr = xv.data() + r * d;
    float* pr = ov.data() + r * d;
    float m = xr[0];
    for (long j = 1; j < d; ++j) m = std::max(m, xr[j]);
    double z = 0.0;
    for (long j = 0; j < d; ++j) {
      const double e = std::exp(static_cast<double>(xr[j]) - m);
      pr[j] = static_cast<float>(e);
      z += e;
    }
    const double inv = 1.0 / z;
    for (long j = 0; j < d; ++j) pr[j] = static_cast<float>(pr[j] * inv);
  }
  bool need = want_grad(x);
  mark_out(out, need);
  if (auto* tape = GradientTape::active(); tape && need) {
    Tensor xc = x, oc = out;
    tape->record([xc, oc, rows, d]() mutable {
      auto og = oc.grad();
      auto pv = oc.value();
      auto xg = xc.grad();
      for (long r = 0; r < rows; ++r) {
        const float* gr = og.data() + r * d;
        const float* pr = pv.data() + r * d;
        float* xr = xg.data() + r * d;
        double dot = 0.0;
        for (long j = 0; j < d; ++j) dot += static_cast<double>(gr[j]) * pr[j];
        for (long j = 0; j < d; ++j) {
          xr[j] += pr[j] * static_cast<float>(gr[j] - dot);
        }
      }
    });
  }
  return out;
}

Tensor squared_relu(const Tensor& x) {
  Tensor out(x.shape());
  auto xv = x.value();
  auto ov = out.value();
  for (long i = 0; i < x.size(); ++i) {
    const float r = xv[i] > 0.0f ? xv[i] : 0.0f;
    ov[i] = r * r;
  }
  bool need = want_grad(x);
  mark_out(out, need);
  if (auto* tape = GradientTape::active(); tape && need) {
    Tensor xc = x, oc = out;
    tape->record([xc, oc]() mutable {
      auto og = oc.grad();
      auto xv = xc.value();
      auto xg = xc.grad();
      for (size_t i = 0; i < og.size(); ++i) {
        if (xv[i] > 0.0f) xg[i] += 2.0f * xv[i] * og[i];
      }
    });
  }
  return out;
}

Tensor tanh_cap(const Tensor& x, float capping) {
  if (capping <= 0.0f) throw std::invalid_argument("tanh_cap: capping must be > 0");
  Tensor out(x.shape());
  auto xv = x.value();
  auto ov = out.value();
  const double c = capping;
  for (long i = 0; i < x.size(); ++i) {
    float y = static_cast<float>(c * std::tanh(xv[i] / c));
    // keep the image strictly inside (-c, c) even when tanh rounds to +-1
    if (y >= capping) y = std::nextafterf(capping, 0.0f);
    if (y <= -capping) y = std::nextafterf(-capping, 0.0f);
    ov[i] = y;
  }
  bool need = want_grad(x);
  mark_out(out, need);
  if (auto* tape = GradientTape::active(); tape && need) {
    Tensor xc = x, oc = out;
    tape->record([xc, oc, capping]() mutable {
      auto og = oc.grad();
      auto yv = oc.value();
      auto xg = xc.grad();
      for (size_t i = 0; i < og.size(); ++i) {
        const float th = yv[i] / capping;
        xg[i] += og[i] * (1.0f - th * th);
      }
    });
  }
  return out;
}

Tensor affine_clip01(const Tensor& p, float zeta, float gamma) {
  if (zeta < 1.0f || gamma > 0.0f) {
    throw std::invalid_argument("affine_clip01: requires zeta >= 1 and gamma <= 0");
  }
  Tensor out(p.shape());
  auto pv = p.value();
  auto ov = out.value();
  const float span = zeta - gamma;
  for (long i = 0; i < p.size(); ++i) {
    const float pre = span * pv[i] + gamma;
    ov[i] = std::clamp(pre, 0.0f, 1.0f);
  }
  bool need = want_grad(p);
  mark_out(out, need);
  if (auto* tape = GradientTape::active(); tape && need) {
    Tensor pc = p, oc = out;
    tape->record([pc, oc, span, gamma]() mutable {
      auto og = oc.grad();
      auto pv = pc.value();
      auto pg = pc.grad();
      for (size_t i = 0; i < og.size(); ++i) {
        const float pre = span * pv[i] + gamma;
        if (pre >= 0.0f && pre <= 1.0f) pg[i] += span * og[i];
      }
    });
  }
  return out;
}

Tensor causal_mask_add(const Tensor& logits) {
  if (logits.rank() < 2 || logits.dim(-1) != logits.dim(-2)) {
    throw std::invalid_argument("causal_mask_add: trailing axes must be square, got " +
                                shape_str(logits.shape()));
  }
  const long s = logits.dim(-1);
  const long planes = logits.size() / (s * s);
  constexpr float kMask = -1e9f;
  Tensor out(logits.shape());
  auto xv = logits.value();
  auto ov = out.value();
  for (long g = 0; g < planes; ++g) {
    const float* xp = xv.data() + g * s * s;
    float* op = ov.data() + g * s * s;
    for (long i = 0; i < s; ++i) {
      for (long j = 0; j <= i; ++j) op[i * s + j] = xp[i * s + j];
      for (long j = i + 1; j < s; ++j) op[i * s + j] = xp[i * s + j] + kMask;
    }
  }
  bool need = want_grad(logits);
  mark_out(out, need);
  if (auto* tape = GradientTape::active(); tape && need) {
    Tensor xc = logits, oc = out;
    tape->record([xc, oc]() mutable {
      auto og = oc.grad();
      auto xg = xc.grad();
      for (size_t i = 0; i < og.size(); ++i) xg[i] += og[i];
    });
  }
  return out;
}

// ---- data movement ----------------------------------------------------------

Tensor slice_last(const Tensor& x, int start, int len) {
  const long w = x.dim(-1);
  if (start < 0 || len <= 0 || start + len > w) {
    throw std::invalid_argument("slice_last: [" + std::to_string(start) + "," +
                                std::to_string(start + len) + ") out of width " + std::to_string(w));
  }
  const long rows = leading_rows(x);
  Shape out_shape = x.shape();
  out_shape.back() = len;
  Tensor out(out_shape);
  auto xv = x.value();
  auto ov = out.value();
  for (long r = 0; r < rows; ++r) {
    std::copy_n(xv.data() + r * w + start, len, ov.data() + r * len);
  }
  bool need = want_grad(x);
  mark_out(out, need);
  if (auto* tape = GradientTape::active(); tape && need) {
    Tensor xc = x, oc = out;
    tape->record([xc, oc, rows, w, start, len]() mutable {
      auto og = oc.grad();
      auto xg = xc.grad();
      for (long r = 0; r < rows; ++r) {
        const float* gr = og.data() + r * len;
        float* xr = xg.data() + r * w + start;
        for (long j = 0; j < len; ++j) xr[j] += gr[j];
      }
    });
  }
  return out;
}

Tensor heads_split(const Tensor& x, int n_heads) {
  if (x.rank() != 3) throw std::invalid_argument("heads_split: need [B,S,H], got " + shape_str(x.shape()));
  const int b = x.dim(0), s = x.dim(1), h = x.dim(2);
  if (h % n_heads != 0) {
    throw std::invalid_argument("heads_split: width " + std::to_string(h) + " not divisible by " +
                                std::to_string(n_heads) + " heads");
  }
  const int d = h / n_heads;
  Tensor out({b, n_heads, s, d});
  auto xv = x.value();
  auto ov = out.value();
  for (long bi = 0; bi < b; ++bi) {
    for (long hi = 0; hi < n_heads; ++hi) {
      for (long si = 0; si < s; ++si) {
        const float* src = xv.data() + (bi * s + si) * h + hi * d;
        float* dst = ov.data() + ((bi * n_heads + hi) * s + si) * d;
        std::copy_n(src, d, dst);
      }
    }
  }
  bool need = want_grad(x);
  mark_out(out, need);
  if (auto* tape = GradientTape::active(); tape && need) {
    Tensor xc = x, oc = out;
    tape->record([xc, oc, b, s, h, n_heads, d]() mutable {
      auto og = oc.grad();
      auto xg = xc.grad();
      for (long bi = 0; bi < b; ++bi) {
        for (long hi = 0; hi < n_heads; ++hi) {
          for (long si = 0; si < s; ++si) {
            const float* gsrc = og.data() + ((bi * n_heads + hi) * s + si) * d;
            float* gdst = xg.data() + (bi * s + si) * h + hi * d;
            for (long j = 0; j < d; ++j) gdst[j] += gsrc[j];
          }
        }
      }
    });
  }
  return out;
}

Tensor heads_merge(const Tensor& x) {
  if (x.rank() != 4) throw std::invalid_argument("heads_merge: need [B,h,S,d], got " + shape_str(x.shape()));
  const int b = x.dim(0), nh = x.dim(1), s = x.dim(2), d = x.dim(3);
  const int h = nh * d;
  Tensor out({b, s, h});
  auto xv = x.value();
  auto ov = out.value();
  for (long bi = 0; bi < b; ++bi) {
    for (long hi = 0; hi < nh; ++hi) {
      for (long si = 0; si < s; ++si) {
        const float* src = xv.data() + ((bi * nh + hi) * s + si) * d;
        float* dst = ov.data() + (bi * s + si) * h + hi * d;
        std::copy_n(src, d, dst);
      }
    }
  }
  bool need = want_grad(x);
  mark_out(out, need);
  if (auto* tape = GradientTape::active(); tape && need) {
    Tensor xc = x, oc = out;
    tape->record([xc, oc, b, s, h, nh, d]() mutable {
      auto og = oc.grad();
      auto xg = xc.grad();
      for (long bi = 0; bi < b; ++bi) {
        for (long hi = 0; hi < nh; ++hi) {
          for (long si = 0; si < s; ++si) {
            const float* gsrc = og.data() + (bi * s + si) * h + hi * d;
            float* gdst = xg.data() + ((bi * nh + hi) * s + si) * d;
            for (long j = 0; j < d; ++j) gdst[j] += gsrc[j];
          }
        }
      }
    });
  }
  return out;
}

namespace {

void rotate_pairs(const float* src, float* dst, long n_heads, long s, long d,
                  std::span<const int> positions, float base, bool inverse) {
  // slab layout: [head][seq][d]; positions indexed by seq
  for (long hi = 0; hi < n_heads; ++hi) {
    for (long si = 0; si < s; ++si) {
      const double pos = positions.empty() ? static_cast<double>(si)
                                           : static_cast<double>(positions[static_cast<size_t>(si)]);
      const float* xr = src + (hi * s + si) * d;
      float* yr = dst + (hi * s + si) * d;
      for (long i = 0; i < d / 2; ++i) {
        const double theta = pos * std::pow(static_cast<double>(base), -2.0 * i / static_cast<double>(d));
        const float c = static_cast<float>(std::cos(theta));
        const float sn = static_cast<float>(inverse ? -std::sin(theta) : std::sin(theta));
        const float x0 = xr[2 * i], x1 = xr[2 * i + 1];
        yr[2 * i] = x0 * c - x1 * sn;
        yr[2 * i + 1] = x0 * sn + x1 * c;
      }
    }
  }
}

}  // namespace

Tensor rotary(const Tensor& x, float base, std::span<const int> positions) {
  if (x.rank() != 4) throw std::invalid_argument("rotary: need [B,h,S,d], got " + shape_str(x.shape()));
  const int b = x.dim(0), nh = x.dim(1), s = x.dim(2), d = x.dim(3);
  if (d % 2 != 0) throw std::invalid_argument("rotary: head_dim must be even, got " + std::to_string(d));
  if (!positions.empty() && static_cast<int>(positions.size()) != s) {
    throw std::invalid_argument("rotary: positions size must equal seq length");
  }
  Tensor out(x.shape());
  std::vector<int> pos_copy(positions.begin(), positions.end());
  for (long bi = 0; bi < b; ++bi) {
    rotate_pairs(x.value().data() + bi * nh * s * d, out.value().data() + bi * nh * s * d, nh, s, d,
                 pos_copy, base, false);
  }
  bool need = want_grad(x);
  mark_out(out, need);
  if (auto* tape = GradientTape::active(); tape && need) {
    Tensor xc = x, oc = out;
    tape->record([xc, oc, b, nh, s, d, base, pos_copy = std::move(pos_copy)]() mutable {
      auto og = oc.grad();
      // rotation is orthogonal: grad rotates by the inverse angle, accumulated
      std::vector<float> tmp(static_cast<size_t>(nh) * s * d);
      auto xg = xc.grad();
      for (long bi = 0; bi < b; ++bi) {
        rotate_pairs(og.data() + bi * nh * s * d, tmp.data(), nh, s, d, pos_copy, base, true);
        float* dst = xg.data() + bi * nh * s * d;
        for (size_t i = 0; i < tmp.size(); ++i) dst[i] += tmp[i];
      }
    });
  }
  return out;
}

// ---- embedding / loss --------------------------------------------------------

Tensor embedding(const Tensor& table, const TokenBatch& ids, int seq_len) {
  if (table.rank() != 2) throw std::invalid_argument("embedding: table must be [V,H]");
  const int v = table.dim(0), h = table.dim(1);
  if (seq_len > ids.length) throw std::invalid_argument("embedding: seq_len exceeds batch length");
  Tensor out({ids.batch, seq_len, h});
  auto tv = table.value();
  auto ov = out.value();
  for (long b = 0; b < ids.batch; ++b) {
    for (long t = 0; t < seq_len; ++t) {
      const int id = ids.at(static_cast<int>(b), static_cast<int>(t));
      if (id < 0 || id >= v) {
        throw std::out_of_range("embedding: token " + std::to_string(id) + " outside vocab " +
                                std::to_string(v));
      }
      std::copy_n(tv.data() + static_cast<long>(id) * h, h, ov.data() + (b * seq_len + t) * h);
    }
  }
  bool need = want_grad(table);
  mark_out(out, need);
  if (auto* tape = GradientTape::active(); tape && need) {
    Tensor tc = table, oc = out;
    TokenBatch idc = ids;
    tape->record([tc, oc, idc, seq_len, h]() mutable {
      auto og = oc.grad();
      auto tg = tc.grad();
      for (long b = 0; b < idc.batch; ++b) {
        for (long t = 0; t < seq_len; ++t) {
          const int id = idc.at(static_cast<int>(b), static_cast<int>(t));
          const float* gr = og.data() + (b * seq_len + t) * h;
          float* dst = tg.data() + static_cast<long>(id) * h;
          for (long j = 0; j < h; ++j) dst[j] += gr[j];
        }
      }
    });
  }
  return out;
}

Tensor cross_entropy_mean(const Tensor& logits, std::span<const int> targets) {
  if (logits.rank() < 2) throw std::invalid_argument("cross_entropy_mean: need [...,V] logits");
  const long v = logits.dim(-1);
  const long rows = leading_rows(logits);
  if (static_cast<long>(targets.size()) != rows) {
    throw std::invalid_argument("cross_entropy_mean: " + std::to_string(targets.size()) +
                                " targets for " + std::to_string(rows) + " rows");
  }
  auto xv = logits.value();
  double total = 0.0;
  for (long r = 0; r < rows; ++r) {
    const int tgt = targets[static_cast<size_t>(r)];
    if (tgt < 0 || tgt >= v) {
      throw std::out_of_range("cross_entropy_mean: target " + std::to_string(tgt) +
                              " outside vocab " + std::to_string(v));
    }
    const float* xr = xv.data() + r * v;
    float m = xr[0];
    for (long j = 1; j < v; ++j) m = std::max(m, xr[j]);
    double z = 0.0;
    for (long j = 0; j < v; ++j) z += std::exp(static_cast<double>(xr[j]) - m);
    total += (m + std::log(z)) - xr[tgt];
  }
  Tensor out({1}, {static_cast<float>(total / static_cast<double>(rows))});
  bool need = want_grad(logits);
  mark_out(out, need);
  if (auto* tape = GradientTape::active(); tape && need) {
    Tensor xc = logits, oc = out;
    std::vector<int> tgts(targets.begin(), targets.end());
    tape->record([xc, oc, tgts = std::move(tgts), rows, v]() mutable {
      const float go = oc.grad()[0];
      const float inv_rows = 1.0f / static_cast<float>(rows);
      auto xv = xc.value();
      auto xg = xc.grad();
      for (long r = 0; r < rows; ++r) {
        const float* xr = xv.data() + r * v;
        float* gr = xg.data() + r * v;
        float m = xr[0];
        for (long j = 1; j < v; ++j) m = std::max(m, xr[j]);
        double z = 0.0;
        for (long j = 0; j < v; ++j) z += std::exp(static_cast<double>(xr[j]) - m);
        const double inv_z = 1.0 / z;
        for (long j = 0; j < v; ++j) {
          const float p = static_cast<float>(std::exp(static_cast<double>(xr[j]) - m) * inv_z);
          const float delta = (j == tgts[static_cast<size_t>(r)]) ? 1.0f : 0.0f;
          gr[j] += go * (p - delta) * inv_rows;
        }
      }
    });
  }
  return out;
}

Tensor sum(const Tensor& x) {
  double total = 0.0;
  for (float v : x.value()) total += v;
  Tensor out({1}, {static_cast<float>(total)});
  bool need = want_grad(x);
  mark_out(out, need);
  if (auto* tape = GradientTape::active(); tape && need) {
    Tensor xc = x, oc = out;
    tape->record([xc, oc]() mutable {
      const float go = oc.grad()[0];
      auto xg = xc.grad();
      for (size_t i = 0; i < xg.size(); ++i) xg[i] += go;
    });
  }
  return out;
}

}  // namespace tstab
