#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "rdarts/random.hpp"
#include "rdarts/tensor.hpp"

namespace rdarts::testing {

// Central finite differences of a scalar function with respect to every
// entry of `param`, evaluated by perturbing the parameter in place.
inline std::vector<double> numeric_grad(Tensor<double>& param, const std::function<double()>& f, double eps = 1e-4) {
  std::vector<double> g(param.numel());
  for (std::size_t i = 0; i < param.numel(); ++i) {
    const double orig = param[i];
    param[i] = orig + eps;
    const double fp = f();
    param[i] = orig - eps;
    const double fm = f();
    param[i] = orig;
    g[i] = (fp - fm) / (2 * eps);
  }
  return g;
}

inline double rel_error(double a, double b, double floor = 1e-7) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

inline double max_rel_error(const std::vector<double>& a, const std::vector<double>& b, double floor = 1e-7) {
  double worst = 0;
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, rel_error(a[i], b[i], floor));
  return worst;
}

inline Tensor<double> random_tensor(Shape shape, Rng& rng, bool requires_grad = true, double scale = 1.0) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = scale * rng.normal();
  return Tensor<double>(std::move(shape), std::move(v), requires_grad);
}

}  // namespace rdarts::testing
