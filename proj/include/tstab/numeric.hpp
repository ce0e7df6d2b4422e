#pragma once

#include <functional>
#include <span>
#include <vector>

#include "tstab/tensor.hpp"

namespace tstab {

// Frobenius norm over all elements; summation runs in input order with a
// double accumulator.
double l2_norm(std::span<const float> values);
double l2_norm(const Tensor& x);

// Persistent left/right singular-vector estimates so power iteration can be
// warm-started across training steps.
struct SpectralState {
  std::vector<float> u;  // size = rows of W
  std::vector<float> v;  // size = cols of W
  bool initialized() const { return !u.empty(); }
};

// Largest singular value of a 2-d tensor via power iteration on W^T W.
// Stops early when successive estimates differ by less than tol.
// A zero matrix yields 0.
double spectral_norm(const Tensor& w, SpectralState& state, int iters = 16, double tol = 1e-5);
double spectral_norm(const Tensor& w, int iters = 16, double tol = 1e-5);

// Central-difference gradient of a scalar function, (f(x+h*e_i) - f(x-h*e_i)) / 2h.
Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f, const Tensor& x, double h);

}  // namespace tstab
