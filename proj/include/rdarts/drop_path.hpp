#pragma once

#include <vector>

#include "rdarts/ops.hpp"
#include "rdarts/random.hpp"

namespace rdarts {

// Zeroes whole samples of an edge output with probability p and rescales the
// survivors by 1/(1-p). Identity outside training or when p == 0.
template <typename S>
Tensor<S> drop_path(const Tensor<S>& x, double p, bool training, Rng& rng) {
  if (!(p >= 0.0 && p < 1.0)) throw UsageError("drop_path: probability must lie in [0, 1)");
  if (!training || p == 0.0) return x;
  const double keep = 1.0 - p;
  std::vector<S> factors(x.dim(0));
  for (auto& f : factors) f = rng.bernoulli(keep) ? static_cast<S>(1.0 / keep) : S(0);
  return ops::scale_rows(x, std::move(factors));
}

}  // namespace rdarts
