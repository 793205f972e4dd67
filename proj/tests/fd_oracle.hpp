#pragma once

// Central finite-difference oracle used by the gradient tests. Inputs are
// passed as graph-free tensors; for first-order checks the function never
// touches the differentiation engine it is checking.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "ule/tensor.hpp"

namespace ule::testing {

using TensorD = Tensor<double>;

/// d f / d inputs[which] by central differences with step h.
inline TensorD finite_difference(const std::function<double(const std::vector<TensorD>&)>& f,
                                 std::vector<TensorD> inputs, std::size_t which, double h = 1e-5) {
  const TensorD base = inputs[which].detach();
  TensorD::Array out(base.size());
  for (Index i = 0; i < base.size(); ++i) {
    TensorD::Array plus = base.values();
    TensorD::Array minus = base.values();
    plus(i) += h;
    minus(i) -= h;
    inputs[which] = TensorD(base.shape(), plus);
    const double fp = f(inputs);
    inputs[which] = TensorD(base.shape(), minus);
    const double fm = f(inputs);
    out(i) = (fp - fm) / (2 * h);
  }
  return TensorD(base.shape(), out);
}

/// max_i |a_i - b_i| / max(max_i |b_i|, floor)
inline double max_relative_error(const TensorD& analytic, const TensorD& numeric, double floor = 1e-8) {
  const double scale = std::max(numeric.values().abs().maxCoeff(), floor);
  return (analytic.values() - numeric.values()).abs().maxCoeff() / scale;
}

inline TensorD random_tensor(const Shape& shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  TensorD::Array a(shape_size(shape));
  for (Index i = 0; i < a.size(); ++i) a(i) = u(rng);
  return TensorD(shape, a);
}

/// Random values bounded away from zero so relu/abs kinks are not crossed by h.
inline TensorD random_off_kink(const Shape& shape, std::mt19937_64& rng, double gap = 0.05) {
  std::uniform_real_distribution<double> u(gap, 1.0);
  std::bernoulli_distribution sign(0.5);
  TensorD::Array a(shape_size(shape));
  for (Index i = 0; i < a.size(); ++i) a(i) = sign(rng) ? u(rng) : -u(rng);
  return TensorD(shape, a);
}

}  // namespace ule::testing
