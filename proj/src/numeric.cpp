#include "tstab/numeric.hpp"

#include <cmath>
#include <random>
#include <stdexcept>

namespace tstab {

double l2_norm(std::span<const float> values) {
  double acc = 0.0;
  for (float v : values) acc += static_cast<double>(v) * v;
  return std::sqrt(acc);
}

double l2_norm(const Tensor& x) { return l2_norm(x.value()); }

namespace {

double vec_norm(std::span<const float> v) {
  double acc = 0.0;
  for (float x : v) acc += static_cast<double>(x) * x;
  return std::sqrt(acc);
}

void normalize(std::span<float> v, double norm) {
  const float inv = static_cast<float>(1.0 / norm);
  for (float& x : v) x *= inv;
}

// W[m,n] * v[n] -> out[m]
void matvec(std::span<const float> w, std::span<const float> v, std::span<float> out, long m, long n) {
  for (long i = 0; i < m; ++i) {
    double acc = 0.0;
    const float* wr = w.data() + i * n;
    for (long j = 0; j < n; ++j) acc += static_cast<double>(wr[j]) * v[static_cast<size_t>(j)];
    out[static_cast<size_t>(i)] = static_cast<float>(acc);
  }
}

// W[m,n]^T * u[m] -> out[n]
void matvec_t(std::span<const float> w, std::span<const float> u, std::span<float> out, long m, long n) {
  std::fill(out.begin(), out.end(), 0.0f);
  for (long i = 0; i < m; ++i) {
    const float ui = u[static_cast<size_t>(i)];
    const float* wr = w.data() + i * n;
    for (long j = 0; j < n; ++j) out[static_cast<size_t>(j)] += ui * wr[j];
  }
}

}  // namespace

double spectral_norm(const Tensor& w, SpectralState& state, int iters, double tol) {
  if (w.rank() != 2) throw std::invalid_argument("spectral_norm: need a 2-d tensor, got " + shape_str(w.shape()));
  if (iters < 1) throw std::invalid_argument("spectral_norm: iters must be >= 1");
  const long m = w.dim(0), n = w.dim(1);
  if (!state.initialized()) {
    // deterministic random start; a fixed direction could be orthogonal to
    // the top singular vector
    std::mt19937 rng(0x5eedu ^ static_cast<uint32_t>(m * 2654435761u + n));
    std::normal_distribution<float> dist(0.0f, 1.0f);
    state.u.resize(static_cast<size_t>(m));
    state.v.resize(static_cast<size_t>(n));
    for (auto& x : state.v) x = dist(rng);
    const double nv = vec_norm(state.v);
    if (nv == 0.0) state.v[0] = 1.0f;
    else normalize(state.v, nv);
    std::fill(state.u.begin(), state.u.end(), 0.0f);
  }
  if (static_cast<long>(state.u.size()) != m || static_cast<long>(state.v.size()) != n) {
    throw std::invalid_argument("spectral_norm: state does not match matrix shape");
  }
  auto wv = w.value();
  double sigma = 0.0;
  double prev = -1.0;
  for (int it = 0; it < iters; ++it) {
    matvec(wv, state.v, state.u, m, n);
    sigma = vec_norm(state.u);
    if (sigma == 0.0) return 0.0;
    normalize(state.u, sigma);
    matvec_t(wv, state.u, state.v, m, n);
    const double nv = vec_norm(state.v);
    if (nv == 0.0) return 0.0;
    normalize(state.v, nv);
    if (prev >= 0.0 && std::abs(sigma - prev) < tol) break;
    prev = sigma;
  }
  // one final consistent estimate from the settled right vector
  matvec(wv, state.v, state.u, m, n);
  sigma = vec_norm(state.u);
  if (sigma > 0.0) normalize(state.u, sigma);
  return sigma;
}

double spectral_norm(const Tensor& w, int iters, double tol) {
  SpectralState state;
  return spectral_norm(w, state, iters, tol);
}

Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f, const Tensor& x, double h) {
  if (h <= 0.0) throw std::invalid_argument("finite_diff_grad: h must be > 0");
  Tensor probe = x.clone();
  Tensor out(x.shape());
  auto pv = probe.value();
  auto ov = out.value();
  for (long i = 0; i < x.size(); ++i) {
    const float saved = pv[i];
    pv[i] = static_cast<float>(saved + h);
    const double hi = f(probe);
    pv[i] = static_cast<float>(saved - h);
    const double lo = f(probe);
    pv[i] = saved;
    ov[i] = static_cast<float>((hi - lo) / (2.0 * h));
  }
  return out;
}

}  // namespace tstab
