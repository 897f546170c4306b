#pragma once

#include <cmath>
#include <vector>

#include "rdarts/ops.hpp"
#include "rdarts/random.hpp"

namespace rdarts {

template <typename S>
using ParamList = std::vector<Tensor<S>>;

template <typename S>
Tensor<S> uniform_param(Shape shape, double bound, Rng& rng) {
  std::vector<S> v(shape_numel(shape));
  for (auto& x : v) x = static_cast<S>(rng.uniform(-bound, bound));
  return Tensor<S>(std::move(shape), std::move(v), true);
}

// Weight layout [out, in, k]; uniform(+-1/sqrt(fan_in)).
template <typename S>
Tensor<S> conv_param(std::size_t out, std::size_t in, std::size_t k, Rng& rng) {
  return uniform_param<S>(Shape{out, in, k}, 1.0 / std::sqrt(static_cast<double>(in * k)), rng);
}

template <typename S>
struct BatchNorm {
  Tensor<S> gamma, beta;  // undefined when not affine
  bool track = false;
  ops::RunningStats<S> stats;

  BatchNorm() = default;
  BatchNorm(std::size_t channels, bool affine, bool track_running) : track(track_running) {
    if (affine) {
      gamma = Tensor<S>(Shape{channels}, S(1), true);
      beta = Tensor<S>(Shape{channels}, S(0), true);
    }
    if (track) {
      stats.mean.assign(channels, S(0));
      stats.var.assign(channels, S(1));
    }
  }

  Tensor<S> operator()(const Tensor<S>& x, bool training) {
    if (!track) return ops::batch_norm(x, gamma, beta, true, static_cast<ops::RunningStats<S>*>(nullptr));
    return ops::batch_norm(x, gamma, beta, training, &stats);
  }

  void collect(ParamList<S>& out) const {
    if (gamma.defined()) {
      out.push_back(gamma);
      out.push_back(beta);
    }
  }

  void collect_buffers(std::vector<std::vector<S>*>& out) {
    if (track) {
      out.push_back(&stats.mean);
      out.push_back(&stats.var);
    }
  }
};

// ReLU -> 1x1 conv (stride 1 or 2) -> normalization. Used for cell-input
// projections and for the strided identity on reduction edges.
template <typename S>
struct ReluConvBn {
  Tensor<S> weight;
  BatchNorm<S> bn;
  std::size_t stride = 1;

  ReluConvBn() = default;
  ReluConvBn(std::size_t in, std::size_t out, std::size_t stride_, bool affine, bool track, Rng& rng)
      : weight(conv_param<S>(out, in, 1, rng)), bn(out, affine, track), stride(stride_) {}

  Tensor<S> operator()(const Tensor<S>& x, bool training) {
    return bn(ops::conv1d(ops::relu(x), weight, stride), training);
  }

  void collect(ParamList<S>& out) const {
    out.push_back(weight);
    bn.collect(out);
  }
  void collect_buffers(std::vector<std::vector<S>*>& out) { bn.collect_buffers(out); }
};

// Conv (kernel 3) + normalization mapping the raw input channels to the
// first cell's width.
template <typename S>
struct Stem {
  Tensor<S> weight;
  BatchNorm<S> bn;

  Stem() = default;
  Stem(std::size_t in, std::size_t out, bool track, Rng& rng) : weight(conv_param<S>(out, in, 3, rng)), bn(out, true, track) {}

  Tensor<S> operator()(const Tensor<S>& x, bool training) { return bn(ops::conv1d(x, weight), training); }

  void collect(ParamList<S>& out) const {
    out.push_back(weight);
    bn.collect(out);
  }
  void collect_buffers(std::vector<std::vector<S>*>& out) { bn.collect_buffers(out); }
};

template <typename S>
struct LinearHead {
  Tensor<S> weight, bias;

  LinearHead() = default;
  LinearHead(std::size_t in, std::size_t out, Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    weight = uniform_param<S>(Shape{out, in}, bound, rng);
    bias = uniform_param<S>(Shape{out}, bound, rng);
  }

  Tensor<S> operator()(const Tensor<S>& x) const { return ops::linear(x, weight, bias); }

  void collect(ParamList<S>& out) const {
    out.push_back(weight);
    out.push_back(bias);
  }
};

template <typename S>
std::size_t count_params(const ParamList<S>& ps) {
  std::size_t n = 0;
  for (const auto& p : ps) n += p.numel();
  return n;
}

}  // namespace rdarts
