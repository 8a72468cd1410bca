#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <vector>

#include "mlcl/tensor.hpp"

namespace mlcl {

// Central-difference gradient verification helpers. Each returns the maximum
// relative error over the probed coordinates, with denominator
// max(|analytic|, |numeric|, 1e-8). Use double tensors: in single precision
// the finite-difference quotient itself is too noisy to be an oracle.

namespace detail {

inline double rel_err(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
  return std::abs(analytic - numeric) / denom;
}

}  // namespace detail

// Verify d f(x) / d x over the given coordinates (all of them when empty).
// `f` must build a fresh graph from `x` on every call: the scalar it returns
// is backpropagated once, then each probed coordinate of `x` is perturbed in
// place for the two finite-difference evaluations.
template <class T>
double gradient_check_coords(const std::function<Tensor<T>(const Tensor<T>&)>& f, Tensor<T> x,
                             std::vector<std::size_t> coords, double eps = 1e-5) {
  if (coords.empty()) {
    coords.resize(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) coords[i] = i;
  }
  x.set_requires_grad(true);
  x.zero_grad();
  Tensor<T> loss = f(x);
  loss.backward();
  const std::vector<T> analytic(x.grad().begin(), x.grad().end());

  double worst = 0.0;
  auto vals = x.values_mut();
  for (std::size_t i : coords) {
    const T saved = vals[i];
    double plus, minus;
    {
      NoGradGuard no_grad;
      vals[i] = saved + static_cast<T>(eps);
      plus = static_cast<double>(f(x).item());
      vals[i] = saved - static_cast<T>(eps);
      minus = static_cast<double>(f(x).item());
      vals[i] = saved;
    }
    const double numeric = (plus - minus) / (2.0 * eps);
    worst = std::max(worst, detail::rel_err(static_cast<double>(analytic[i]), numeric));
  }
  return worst;
}

template <class T>
double gradient_check(const std::function<Tensor<T>(const Tensor<T>&)>& f, Tensor<T> x,
                      double eps = 1e-5) {
  return gradient_check_coords<T>(f, std::move(x), {}, eps);
}

// Verify d loss / d param for a tensor embedded in a larger model.
// `build_loss` must rebuild the whole graph from current parameter values on
// every call (the analytic pass runs it once with gradients on; each probed
// coordinate then perturbs `param` in place for two no-grad evaluations).
template <class T>
double gradient_check_param(const std::function<Tensor<T>()>& build_loss, Tensor<T> param,
                            std::vector<std::size_t> coords, double eps = 1e-5) {
  if (coords.empty()) {
    coords.resize(param.size());
    for (std::size_t i = 0; i < param.size(); ++i) coords[i] = i;
  }
  param.zero_grad();
  Tensor<T> loss = build_loss();
  loss.backward();
  const std::vector<T> analytic(param.grad().begin(), param.grad().end());

  double worst = 0.0;
  auto vals = param.values_mut();
  for (std::size_t i : coords) {
    const T saved = vals[i];
    double plus, minus;
    {
      NoGradGuard no_grad;
      vals[i] = saved + static_cast<T>(eps);
      plus = static_cast<double>(build_loss().item());
      vals[i] = saved - static_cast<T>(eps);
      minus = static_cast<double>(build_loss().item());
      vals[i] = saved;
    }
    const double numeric = (plus - minus) / (2.0 * eps);
    worst = std::max(worst, detail::rel_err(static_cast<double>(analytic[i]), numeric));
  }
  return worst;
}

}  // namespace mlcl
