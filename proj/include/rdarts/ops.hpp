#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <string>
#include <vector>

#include "rdarts/tensor.hpp"

// Differentiable primitives. Feature maps are laid out [batch, channels, time].
namespace rdarts::ops {

namespace detail {

template <typename S>
void require_rank(const char* op, const Tensor<S>& t, std::size_t rank) {
  if (t.rank() != rank)
    throw ShapeError(op, "expected rank " + std::to_string(rank) + ", got shape " + shape_str(t));
}

template <typename S>
void require_same(const char* op, const Tensor<S>& a, const Tensor<S>& b) {
  if (a.shape() != b.shape())
    throw ShapeError(op, "shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

inline std::size_t conv_out_len(std::size_t len, std::size_t stride) { return (len - 1) / stride + 1; }

// Output positions [lo, hi) for which tap k reads an in-bounds input sample
// at t*stride + off, off = k*dilation - pad.
inline void tap_range(std::size_t T, std::size_t To, std::size_t stride, std::size_t dilation, std::ptrdiff_t pad,
                      std::size_t k, std::ptrdiff_t& off, std::size_t& lo, std::size_t& hi) {
  off = static_cast<std::ptrdiff_t>(k * dilation) - pad;
  const std::ptrdiff_t s = static_cast<std::ptrdiff_t>(stride);
  const std::ptrdiff_t l = off < 0 ? (-off + s - 1) / s : 0;
  std::ptrdiff_t h = static_cast<std::ptrdiff_t>(T) - 1 - off;
  h = h < 0 ? -1 : h / s;
  if (h > static_cast<std::ptrdiff_t>(To) - 1) h = static_cast<std::ptrdiff_t>(To) - 1;
  lo = static_cast<std::size_t>(l);
  hi = h < l ? lo : static_cast<std::size_t>(h) + 1;
}

// Dot product with a fixed 8-lane accumulation order, so the compiler can
// vectorize it without reassociating and results stay reproducible.
template <typename S>
S dot(const S* a, const S* b, std::size_t n) {
  S lanes[8] = {};
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8)
    for (std::size_t l = 0; l < 8; ++l) lanes[l] += a[i + l] * b[i + l];
  S acc = ((lanes[0] + lanes[1]) + (lanes[2] + lanes[3])) + ((lanes[4] + lanes[5]) + (lanes[6] + lanes[7]));
  for (; i < n; ++i) acc += a[i] * b[i];
  return acc;
}

}  // namespace detail

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  detail::require_same("add", a, b);
  std::vector<S> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return make_result<S>("add", a.shape(), std::move(out), {a, b}, [a, b](const std::vector<S>& g) {
    if (S* ga = grad_target(a))
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    if (S* gb = grad_target(b))
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
  });
}

template <typename S>
Tensor<S> add_n(const std::vector<Tensor<S>>& xs) {
  if (xs.empty()) throw ShapeError("add_n", "no operands");
  for (const auto& x : xs) detail::require_same("add_n", xs[0], x);
  std::vector<S> out(xs[0].values());
  for (std::size_t k = 1; k < xs.size(); ++k) {
    const auto& v = xs[k].values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += v[i];
  }
  return make_result<S>("add_n", xs[0].shape(), std::move(out), xs, [xs](const std::vector<S>& g) {
    for (const auto& x : xs)
      if (S* gx = grad_target(x))
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
}

template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  detail::require_same("multiply", a, b);
  std::vector<S> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return make_result<S>("multiply", a.shape(), std::move(out), {a, b}, [a, b](const std::vector<S>& g) {
    if (S* ga = grad_target(a))
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * b[i];
    if (S* gb = grad_target(b))
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * a[i];
  });
}

template <typename S>
Tensor<S> scale(const Tensor<S>& x, S factor) {
  std::vector<S> out(x.values());
  for (auto& v : out) v *= factor;
  return make_result<S>("scalar_scale", x.shape(), std::move(out), {x}, [x, factor](const std::vector<S>& g) {
    if (S* gx = grad_target(x))
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += factor * g[i];
  });
}

// w[k] * x, differentiable in both.
template <typename S>
Tensor<S> scale_by(const Tensor<S>& x, const Tensor<S>& w, std::size_t k) {
  if (k >= w.numel()) throw ShapeError("scale_by", "index " + std::to_string(k) + " outside " + shape_str(w));
  const S f = w[k];
  std::vector<S> out(x.values());
  for (auto& v : out) v *= f;
  return make_result<S>("scale_by", x.shape(), std::move(out), {x, w}, [x, w, k, f](const std::vector<S>& g) {
    if (S* gx = grad_target(x))
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += f * g[i];
    if (S* gw = grad_target(w)) {
      S acc = 0;
      for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * x[i];
      gw[k] += acc;
    }
  });
}

// Sum_k w[k] * xs[k]; w is 1-D with one entry per operand.
template <typename S>
Tensor<S> weighted_sum(const std::vector<Tensor<S>>& xs, const Tensor<S>& w) {
  if (xs.empty() || w.rank() != 1 || w.numel() != xs.size())
    throw ShapeError("weighted_sum", "weights " + shape_str(w) + " for " + std::to_string(xs.size()) + " operands");
  for (const auto& x : xs) detail::require_same("weighted_sum", xs[0], x);
  std::vector<S> out(xs[0].numel(), S(0));
  for (std::size_t k = 0; k < xs.size(); ++k) {
    const S f = w[k];
    const auto& v = xs[k].values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += f * v[i];
  }
  std::vector<Tensor<S>> inputs(xs);
  inputs.push_back(w);
  return make_result<S>("weighted_sum", xs[0].shape(), std::move(out), std::move(inputs),
                        [xs, w](const std::vector<S>& g) {
                          S* gw = grad_target(w);
                          for (std::size_t k = 0; k < xs.size(); ++k) {
                            const S f = w[k];
                            if (S* gx = grad_target(xs[k]))
                              for (std::size_t i = 0; i < g.size(); ++i) gx[i] += f * g[i];
                            if (gw) {
                              const auto& v = xs[k].values();
                              S acc = 0;
                              for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * v[i];
                              gw[k] += acc;
                            }
                          }
                        });
}

// Multiplies every element of batch row b by factors[b] (a constant).
template <typename S>
Tensor<S> scale_rows(const Tensor<S>& x, std::vector<S> factors) {
  if (x.rank() < 1 || factors.size() != x.dim(0))
    throw ShapeError("scale_rows", std::to_string(factors.size()) + " factors for " + shape_str(x));
  const std::size_t inner = x.numel() / x.dim(0);
  std::vector<S> out(x.values());
  for (std::size_t b = 0; b < factors.size(); ++b)
    for (std::size_t i = 0; i < inner; ++i) out[b * inner + i] *= factors[b];
  return make_result<S>("scale_rows", x.shape(), std::move(out), {x}, [x, factors, inner](const std::vector<S>& g) {
    if (S* gx = grad_target(x))
      for (std::size_t b = 0; b < factors.size(); ++b)
        for (std::size_t i = 0; i < inner; ++i) gx[b * inner + i] += factors[b] * g[b * inner + i];
  });
}

template <typename S>
Tensor<S> relu(const Tensor<S>& x) {
  std::vector<S> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] > S(0) ? x[i] : S(0);
  return make_result<S>("relu", x.shape(), std::move(out), {x}, [x](const std::vector<S>& g) {
    if (S* gx = grad_target(x))
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += x[i] > S(0) ? g[i] : S(0);
  });
}

template <typename S>
Tensor<S> sum(const Tensor<S>& x) {
  S acc = 0;
  for (auto v : x.values()) acc += v;
  return make_result<S>("sum", Shape{1}, {acc}, {x}, [x](const std::vector<S>& g) {
    if (S* gx = grad_target(x))
      for (std::size_t i = 0; i < x.numel(); ++i) gx[i] += g[0];
  });
}

template <typename S>
Tensor<S> mean(const Tensor<S>& x) {
  return scale(sum(x), S(1) / static_cast<S>(x.numel()));
}

// Concatenation along axis 1 (channels) of rank-2 or rank-3 tensors.
template <typename S>
Tensor<S> concat(const std::vector<Tensor<S>>& xs) {
  if (xs.empty()) throw ShapeError("concat", "no operands");
  const auto rank = xs[0].rank();
  if (rank != 2 && rank != 3) throw ShapeError("concat", "expected rank 2 or 3, got " + shape_str(xs[0]));
  const std::size_t batch = xs[0].dim(0);
  const std::size_t inner = rank == 3 ? xs[0].dim(2) : 1;
  std::size_t channels = 0;
  for (const auto& x : xs) {
    if (x.rank() != rank || x.dim(0) != batch || (rank == 3 && x.dim(2) != inner))
      throw ShapeError("concat", "incompatible operand " + shape_str(x) + " vs " + shape_str(xs[0]));
    channels += x.dim(1);
  }
  std::vector<S> out(batch * channels * inner);
  std::size_t c0 = 0;
  std::vector<std::size_t> offsets;
  for (const auto& x : xs) {
    offsets.push_back(c0);
    const std::size_t cx = x.dim(1);
    for (std::size_t b = 0; b < batch; ++b)
      std::copy_n(x.values().begin() + b * cx * inner, cx * inner, out.begin() + (b * channels + c0) * inner);
    c0 += cx;
  }
  Shape shape = rank == 3 ? Shape{batch, channels, inner} : Shape{batch, channels};
  return make_result<S>("concat", std::move(shape), std::move(out), xs,
                        [xs, offsets, batch, channels, inner](const std::vector<S>& g) {
                          for (std::size_t k = 0; k < xs.size(); ++k) {
                            S* gx = grad_target(xs[k]);
                            if (!gx) continue;
                            const std::size_t cx = xs[k].dim(1);
                            for (std::size_t b = 0; b < batch; ++b) {
                              const S* src = g.data() + (b * channels + offsets[k]) * inner;
                              S* dst = gx + b * cx * inner;
                              for (std::size_t i = 0; i < cx * inner; ++i) dst[i] += src[i];
                            }
                          }
                        });
}

// Row i of a rank-2 tensor as a rank-1 tensor.
template <typename S>
Tensor<S> row(const Tensor<S>& x, std::size_t i) {
  detail::require_rank("row", x, 2);
  if (i >= x.dim(0)) throw ShapeError("row", "row " + std::to_string(i) + " outside " + shape_str(x));
  const std::size_t n = x.dim(1);
  std::vector<S> out(x.values().begin() + i * n, x.values().begin() + (i + 1) * n);
  return make_result<S>("row", Shape{n}, std::move(out), {x}, [x, i, n](const std::vector<S>& g) {
    if (S* gx = grad_target(x))
      for (std::size_t j = 0; j < n; ++j) gx[i * n + j] += g[j];
  });
}

namespace detail {

// 1x1 convolution as a channel matmul over a channel-major copy of the
// (strided) input, so the inner loops run over batch * time.
template <typename S>
Tensor<S> pointwise_conv1d(const Tensor<S>& x, const Tensor<S>& w, std::size_t stride) {
  const std::size_t B = x.dim(0), Cin = x.dim(1), T = x.dim(2), Cout = w.dim(0);
  const std::size_t To = conv_out_len(T, stride), N = B * To;
  auto xt = std::make_shared<std::vector<S>>(Cin * N);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t ci = 0; ci < Cin; ++ci) {
      const S* src = x.values().data() + (b * Cin + ci) * T;
      S* dst = xt->data() + ci * N + b * To;
      for (std::size_t t = 0; t < To; ++t) dst[t] = src[t * stride];
    }
  std::vector<S> ot(Cout * N, S(0));
  const S* wd = w.values().data();
  for (std::size_t co = 0; co < Cout; ++co) {
    S* o = ot.data() + co * N;
    for (std::size_t ci = 0; ci < Cin; ++ci) {
      const S wv = wd[co * Cin + ci];
      const S* xi = xt->data() + ci * N;
      for (std::size_t n = 0; n < N; ++n) o[n] += wv * xi[n];
    }
  }
  std::vector<S> out(B * Cout * To);
  for (std::size_t co = 0; co < Cout; ++co)
    for (std::size_t b = 0; b < B; ++b)
      std::copy_n(ot.data() + co * N + b * To, To, out.data() + (b * Cout + co) * To);
  return make_result<S>(
      "conv1d", Shape{B, Cout, To}, std::move(out), {x, w},
      [x, w, xt, B, Cin, T, Cout, To, N, stride](const std::vector<S>& g) {
        S* gx = grad_target(x);
        S* gw = grad_target(w);
        std::vector<S> gt(Cout * N);
        for (std::size_t b = 0; b < B; ++b)
          for (std::size_t co = 0; co < Cout; ++co)
            std::copy_n(g.data() + (b * Cout + co) * To, To, gt.data() + co * N + b * To);
        if (gw)
          for (std::size_t co = 0; co < Cout; ++co)
            for (std::size_t ci = 0; ci < Cin; ++ci)
              gw[co * Cin + ci] += dot(gt.data() + co * N, xt->data() + ci * N, N);
        if (gx) {
          std::vector<S> dxt(Cin * N, S(0));
          const S* wd = w.values().data();
          for (std::size_t co = 0; co < Cout; ++co) {
            const S* gr = gt.data() + co * N;
            for (std::size_t ci = 0; ci < Cin; ++ci) {
              const S wv = wd[co * Cin + ci];
              S* d = dxt.data() + ci * N;
              for (std::size_t n = 0; n < N; ++n) d[n] += wv * gr[n];
            }
          }
          for (std::size_t b = 0; b < B; ++b)
            for (std::size_t ci = 0; ci < Cin; ++ci) {
              const S* src = dxt.data() + ci * N + b * To;
              S* dst = gx + (b * Cin + ci) * T;
              for (std::size_t t = 0; t < To; ++t) dst[t * stride] += src[t];
            }
        }
      });
}

}  // namespace detail

// Cross-correlation with symmetric zero padding of dilation*(k-1)/2 per side,
// so stride 1 preserves length and stride 2 yields ceil(T/2).
template <typename S>
Tensor<S> conv1d(const Tensor<S>& x, const Tensor<S>& w, std::size_t stride = 1, std::size_t dilation = 1) {
  detail::require_rank("conv1d", x, 3);
  detail::require_rank("conv1d", w, 3);
  const std::size_t B = x.dim(0), Cin = x.dim(1), T = x.dim(2);
  const std::size_t Cout = w.dim(0), K = w.dim(2);
  if (w.dim(1) != Cin)
    throw ShapeError("conv1d", "input channels " + std::to_string(Cin) + " but weight " + shape_str(w));
  if (K % 2 == 0) throw ShapeError("conv1d", "kernel length must be odd, weight " + shape_str(w));
  if (stride < 1 || stride > 2 || dilation < 1 || dilation > 2)
    throw ShapeError("conv1d", "stride and dilation must be 1 or 2");
  if (K == 1) return detail::pointwise_conv1d(x, w, stride);
  const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>(dilation * (K - 1) / 2);
  const std::size_t To = detail::conv_out_len(T, stride);

  auto range = [=](std::size_t k, std::ptrdiff_t& off, std::size_t& lo, std::size_t& hi) {
    detail::tap_range(T, To, stride, dilation, pad, k, off, lo, hi);
  };

  std::vector<S> out(B * Cout * To, S(0));
  const S* xd = x.values().data();
  const S* wd = w.values().data();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t co = 0; co < Cout; ++co) {
      S* o = out.data() + (b * Cout + co) * To;
      for (std::size_t ci = 0; ci < Cin; ++ci) {
        const S* xi = xd + (b * Cin + ci) * T;
        for (std::size_t k = 0; k < K; ++k) {
          const S wv = wd[(co * Cin + ci) * K + k];
          std::ptrdiff_t off;
          std::size_t lo, hi;
          range(k, off, lo, hi);
          if (stride == 1) {
            const S* src = xi + off;
            for (std::size_t t = lo; t < hi; ++t) o[t] += wv * src[t];
          } else {
            for (std::size_t t = lo; t < hi; ++t) o[t] += wv * xi[static_cast<std::ptrdiff_t>(t * stride) + off];
          }
        }
      }
    }
  return make_result<S>(
      "conv1d", Shape{B, Cout, To}, std::move(out), {x, w},
      [x, w, B, Cin, T, Cout, K, To, stride, range](const std::vector<S>& g) {
        S* gx = grad_target(x);
        S* gw = grad_target(w);
        const S* xd = x.values().data();
        const S* wd = w.values().data();
        for (std::size_t b = 0; b < B; ++b)
          for (std::size_t co = 0; co < Cout; ++co) {
            const S* go = g.data() + (b * Cout + co) * To;
            for (std::size_t ci = 0; ci < Cin; ++ci) {
              const S* xi = xd + (b * Cin + ci) * T;
              S* gxi = gx ? gx + (b * Cin + ci) * T : nullptr;
              for (std::size_t k = 0; k < K; ++k) {
                std::ptrdiff_t off;
                std::size_t lo, hi;
                range(k, off, lo, hi);
                const std::size_t widx = (co * Cin + ci) * K + k;
                if (stride == 1) {
                  if (gxi) {
                    const S wv = wd[widx];
                    S* dst = gxi + off;
                    for (std::size_t t = lo; t < hi; ++t) dst[t] += wv * go[t];
                  }
                  if (gw && hi > lo) gw[widx] += detail::dot(go + lo, xi + off + lo, hi - lo);
                } else {
                  if (gxi) {
                    const S wv = wd[widx];
                    for (std::size_t t = lo; t < hi; ++t) gxi[static_cast<std::ptrdiff_t>(t * stride) + off] += wv * go[t];
                  }
                  if (gw) {
                    S acc = 0;
                    for (std::size_t t = lo; t < hi; ++t) acc += go[t] * xi[static_cast<std::ptrdiff_t>(t * stride) + off];
                    gw[widx] += acc;
                  }
                }
              }
            }
          }
      });
}

// Per-channel convolution; w has shape [C, 1, K].
template <typename S>
Tensor<S> depthwise_conv1d(const Tensor<S>& x, const Tensor<S>& w, std::size_t stride = 1, std::size_t dilation = 1) {
  detail::require_rank("depthwise_conv1d", x, 3);
  detail::require_rank("depthwise_conv1d", w, 3);
  const std::size_t B = x.dim(0), C = x.dim(1), T = x.dim(2), K = w.dim(2);
  if (w.dim(0) != C || w.dim(1) != 1)
    throw ShapeError("depthwise_conv1d", "input channels " + std::to_string(C) + " but weight " + shape_str(w));
  if (K % 2 == 0) throw ShapeError("depthwise_conv1d", "kernel length must be odd, weight " + shape_str(w));
  if (stride < 1 || stride > 2 || dilation < 1 || dilation > 2)
    throw ShapeError("depthwise_conv1d", "stride and dilation must be 1 or 2");
  const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>(dilation * (K - 1) / 2);
  const std::size_t To = detail::conv_out_len(T, stride);
  std::vector<S> out(B * C * To, S(0));
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c) {
      const S* xi = x.values().data() + (b * C + c) * T;
      S* o = out.data() + (b * C + c) * To;
      for (std::size_t k = 0; k < K; ++k) {
        const S wv = w[c * K + k];
        std::ptrdiff_t off;
        std::size_t lo, hi;
        detail::tap_range(T, To, stride, dilation, pad, k, off, lo, hi);
        if (stride == 1) {
          const S* src = xi + off;
          for (std::size_t t = lo; t < hi; ++t) o[t] += wv * src[t];
        } else {
          for (std::size_t t = lo; t < hi; ++t) o[t] += wv * xi[static_cast<std::ptrdiff_t>(2 * t) + off];
        }
      }
    }
  return make_result<S>("depthwise_conv1d", Shape{B, C, To}, std::move(out), {x, w},
                        [x, w, B, C, T, K, To, stride, dilation, pad](const std::vector<S>& g) {
                          S* gx = grad_target(x);
                          S* gw = grad_target(w);
                          for (std::size_t b = 0; b < B; ++b)
                            for (std::size_t c = 0; c < C; ++c) {
                              const S* xi = x.values().data() + (b * C + c) * T;
                              const S* go = g.data() + (b * C + c) * To;
                              S* gxi = gx ? gx + (b * C + c) * T : nullptr;
                              for (std::size_t k = 0; k < K; ++k) {
                                const S wv = w[c * K + k];
                                std::ptrdiff_t off;
                                std::size_t lo, hi;
                                detail::tap_range(T, To, stride, dilation, pad, k, off, lo, hi);
                                S acc = 0;
                                for (std::size_t t = lo; t < hi; ++t) {
                                  const std::ptrdiff_t p = static_cast<std::ptrdiff_t>(t * stride) + off;
                                  if (gxi) gxi[p] += wv * go[t];
                                  acc += go[t] * xi[p];
                                }
                                if (gw) gw[c * K + k] += acc;
                              }
                            }
                        });
}

// Depthwise followed by pointwise (1x1) convolution.
template <typename S>
Tensor<S> separable_conv1d(const Tensor<S>& x, const Tensor<S>& depthwise, const Tensor<S>& pointwise,
                           std::size_t stride = 1, std::size_t dilation = 1) {
  return conv1d(depthwise_conv1d(x, depthwise, stride, dilation), pointwise);
}

// Window 3 (or any odd k), padding k/2. Padded positions never win the max.
template <typename S>
Tensor<S> max_pool1d(const Tensor<S>& x, std::size_t k, std::size_t stride) {
  detail::require_rank("max_pool1d", x, 3);
  if (k % 2 == 0) throw ShapeError("max_pool1d", "window must be odd, got " + std::to_string(k));
  const std::size_t B = x.dim(0), C = x.dim(1), T = x.dim(2);
  const std::size_t To = detail::conv_out_len(T, stride);
  const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>(k / 2);
  std::vector<S> out(B * C * To);
  std::vector<std::size_t> arg(B * C * To);
  for (std::size_t r = 0; r < B * C; ++r) {
    const S* xi = x.values().data() + r * T;
    for (std::size_t t = 0; t < To; ++t) {
      S best = -std::numeric_limits<S>::infinity();
      std::size_t bi = 0;
      for (std::size_t j = 0; j < k; ++j) {
        const std::ptrdiff_t p = static_cast<std::ptrdiff_t>(t * stride + j) - pad;
        if (p < 0 || p >= static_cast<std::ptrdiff_t>(T)) continue;
        if (xi[p] > best) {
          best = xi[p];
          bi = static_cast<std::size_t>(p);
        }
      }
      out[r * To + t] = best;
      arg[r * To + t] = r * T + bi;
    }
  }
  return make_result<S>("max_pool1d", Shape{B, C, To}, std::move(out), {x}, [x, arg](const std::vector<S>& g) {
    if (S* gx = grad_target(x))
      for (std::size_t i = 0; i < g.size(); ++i) gx[arg[i]] += g[i];
  });
}

// Average over the in-bounds part of each window (padding excluded from the count).
template <typename S>
Tensor<S> avg_pool1d(const Tensor<S>& x, std::size_t k, std::size_t stride) {
  detail::require_rank("avg_pool1d", x, 3);
  if (k % 2 == 0) throw ShapeError("avg_pool1d", "window must be odd, got " + std::to_string(k));
  const std::size_t B = x.dim(0), C = x.dim(1), T = x.dim(2);
  const std::size_t To = detail::conv_out_len(T, stride);
  const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>(k / 2);
  auto bounds = [=](std::size_t t, std::ptrdiff_t& lo, std::ptrdiff_t& hi) {
    lo = std::max<std::ptrdiff_t>(0, static_cast<std::ptrdiff_t>(t * stride) - pad);
    hi = std::min<std::ptrdiff_t>(static_cast<std::ptrdiff_t>(T), static_cast<std::ptrdiff_t>(t * stride) - pad +
                                                                     static_cast<std::ptrdiff_t>(k));
  };
  std::vector<S> out(B * C * To);
  for (std::size_t r = 0; r < B * C; ++r) {
    const S* xi = x.values().data() + r * T;
    for (std::size_t t = 0; t < To; ++t) {
      std::ptrdiff_t lo, hi;
      bounds(t, lo, hi);
      S acc = 0;
      for (auto p = lo; p < hi; ++p) acc += xi[p];
      out[r * To + t] = acc / static_cast<S>(hi - lo);
    }
  }
  return make_result<S>("avg_pool1d", Shape{B, C, To}, std::move(out), {x},
                        [x, B, C, T, To, bounds](const std::vector<S>& g) {
                          S* gx = grad_target(x);
                          if (!gx) return;
                          for (std::size_t r = 0; r < B * C; ++r)
                            for (std::size_t t = 0; t < To; ++t) {
                              std::ptrdiff_t lo, hi;
                              bounds(t, lo, hi);
                              const S v = g[r * To + t] / static_cast<S>(hi - lo);
                              for (auto p = lo; p < hi; ++p) gx[r * T + p] += v;
                            }
                        });
}

// Running statistics owned by a normalization layer.
template <typename S>
struct RunningStats {
  std::vector<S> mean;
  std::vector<S> var;
  S momentum = S(0.1);
};

// Channel-affine normalization over (batch, time) for [B, C, T] or over batch
// for [B, C]. `gamma`/`beta` may be undefined for the non-affine variant.
// In training mode batch statistics are used (and folded into `stats` when
// given); otherwise `stats` must be present and is used as-is.
template <typename S>
Tensor<S> batch_norm(const Tensor<S>& x, const Tensor<S>& gamma, const Tensor<S>& beta, bool training,
                     RunningStats<S>* stats = nullptr, S eps = S(1e-5)) {
  if (x.rank() != 3 && x.rank() != 2) throw ShapeError("batch_norm", "expected rank 2 or 3, got " + shape_str(x));
  const std::size_t B = x.dim(0), C = x.dim(1), T = x.rank() == 3 ? x.dim(2) : 1;
  const bool affine = gamma.defined();
  if (affine && (gamma.numel() != C || !beta.defined() || beta.numel() != C))
    throw ShapeError("batch_norm", "affine parameters do not match " + std::to_string(C) + " channels");
  const std::size_t n = B * T;
  std::vector<S> mu(C, S(0)), inv_std(C);
  if (training) {
    if (n < 2) throw ShapeError("batch_norm", "batch statistics need more than one value per channel, got " + shape_str(x));
    std::vector<S> var(C, S(0));
    for (std::size_t c = 0; c < C; ++c) {
      S acc = 0;
      for (std::size_t b = 0; b < B; ++b) {
        const S* xi = x.values().data() + (b * C + c) * T;
        for (std::size_t t = 0; t < T; ++t) acc += xi[t];
      }
      mu[c] = acc / static_cast<S>(n);
      S sq = 0;
      for (std::size_t b = 0; b < B; ++b) {
        const S* xi = x.values().data() + (b * C + c) * T;
        for (std::size_t t = 0; t < T; ++t) sq += (xi[t] - mu[c]) * (xi[t] - mu[c]);
      }
      var[c] = sq / static_cast<S>(n);
      inv_std[c] = S(1) / std::sqrt(var[c] + eps);
    }
    if (stats && grad_enabled()) {
      if (stats->mean.size() != C) {
        stats->mean.assign(C, S(0));
        stats->var.assign(C, S(1));
      }
      const S m = stats->momentum;
      for (std::size_t c = 0; c < C; ++c) {
        stats->mean[c] = (S(1) - m) * stats->mean[c] + m * mu[c];
        stats->var[c] = (S(1) - m) * stats->var[c] + m * var[c] * static_cast<S>(n) / static_cast<S>(n - 1);
      }
    }
  } else {
    if (!stats || stats->mean.size() != C)
      throw ShapeError("batch_norm", "evaluation mode requires running statistics for " + std::to_string(C) + " channels");
    for (std::size_t c = 0; c < C; ++c) {
      mu[c] = stats->mean[c];
      inv_std[c] = S(1) / std::sqrt(stats->var[c] + eps);
    }
  }
  std::vector<S> xhat(x.numel()), out(x.numel());
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c) {
      const std::size_t base = (b * C + c) * T;
      const S gm = affine ? gamma[c] : S(1);
      const S bt = affine ? beta[c] : S(0);
      for (std::size_t t = 0; t < T; ++t) {
        const S h = (x[base + t] - mu[c]) * inv_std[c];
        xhat[base + t] = h;
        out[base + t] = h * gm + bt;
      }
    }
  std::vector<Tensor<S>> inputs{x};
  if (affine) {
    inputs.push_back(gamma);
    inputs.push_back(beta);
  }
  return make_result<S>(
      "batch_norm", x.shape(), std::move(out), std::move(inputs),
      [x, gamma, beta, affine, training, xhat = std::move(xhat), inv_std, B, C, T, n](const std::vector<S>& g) {
        S* gx = grad_target(x);
        S* gg = affine ? grad_target(gamma) : nullptr;
        S* gb = affine ? grad_target(beta) : nullptr;
        for (std::size_t c = 0; c < C; ++c) {
          const S gm = affine ? gamma[c] : S(1);
          S sum_g = 0, sum_gh = 0;
          for (std::size_t b = 0; b < B; ++b) {
            const std::size_t base = (b * C + c) * T;
            for (std::size_t t = 0; t < T; ++t) {
              sum_g += g[base + t];
              sum_gh += g[base + t] * xhat[base + t];
            }
          }
          if (gg) gg[c] += sum_gh;
          if (gb) gb[c] += sum_g;
          if (!gx) continue;
          const S k = gm * inv_std[c];
          if (training) {
            const S inv_n = S(1) / static_cast<S>(n);
            for (std::size_t b = 0; b < B; ++b) {
              const std::size_t base = (b * C + c) * T;
              for (std::size_t t = 0; t < T; ++t)
                gx[base + t] += k * (g[base + t] - inv_n * sum_g - xhat[base + t] * inv_n * sum_gh);
            }
          } else {
            for (std::size_t b = 0; b < B; ++b) {
              const std::size_t base = (b * C + c) * T;
              for (std::size_t t = 0; t < T; ++t) gx[base + t] += k * g[base + t];
            }
          }
        }
      });
}

// Mean over the time axis: [B, C, T] -> [B, C].
template <typename S>
Tensor<S> global_avg_pool(const Tensor<S>& x) {
  detail::require_rank("global_avg_pool", x, 3);
  const std::size_t B = x.dim(0), C = x.dim(1), T = x.dim(2);
  std::vector<S> out(B * C);
  for (std::size_t r = 0; r < B * C; ++r) {
    S acc = 0;
    for (std::size_t t = 0; t < T; ++t) acc += x[r * T + t];
    out[r] = acc / static_cast<S>(T);
  }
  return make_result<S>("global_avg_pool", Shape{B, C}, std::move(out), {x}, [x, B, C, T](const std::vector<S>& g) {
    if (S* gx = grad_target(x))
      for (std::size_t r = 0; r < B * C; ++r) {
        const S v = g[r] / static_cast<S>(T);
        for (std::size_t t = 0; t < T; ++t) gx[r * T + t] += v;
      }
  });
}

// x [B, D], weight [O, D], bias [O] -> [B, O].
template <typename S>
Tensor<S> linear(const Tensor<S>& x, const Tensor<S>& weight, const Tensor<S>& bias) {
  detail::require_rank("linear", x, 2);
  detail::require_rank("linear", weight, 2);
  const std::size_t B = x.dim(0), D = x.dim(1), O = weight.dim(0);
  if (weight.dim(1) != D) throw ShapeError("linear", "input width " + std::to_string(D) + " but weight " + shape_str(weight));
  if (bias.numel() != O) throw ShapeError("linear", "bias " + shape_str(bias) + " for " + std::to_string(O) + " outputs");
  std::vector<S> out(B * O);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t o = 0; o < O; ++o) {
      S acc = bias[o];
      for (std::size_t d = 0; d < D; ++d) acc += weight[o * D + d] * x[b * D + d];
      out[b * O + o] = acc;
    }
  return make_result<S>("linear", Shape{B, O}, std::move(out), {x, weight, bias},
                        [x, weight, bias, B, D, O](const std::vector<S>& g) {
                          S* gx = grad_target(x);
                          S* gw = grad_target(weight);
                          S* gb = grad_target(bias);
                          for (std::size_t b = 0; b < B; ++b)
                            for (std::size_t o = 0; o < O; ++o) {
                              const S go = g[b * O + o];
                              if (gb) gb[o] += go;
                              for (std::size_t d = 0; d < D; ++d) {
                                if (gx) gx[b * D + d] += go * weight[o * D + d];
                                if (gw) gw[o * D + d] += go * x[b * D + d];
                              }
                            }
                        });
}

namespace detail {

inline void axis_split(const Shape& s, std::size_t axis, std::size_t& outer, std::size_t& len, std::size_t& inner) {
  outer = 1;
  inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  len = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
}

}  // namespace detail

template <typename S>
Tensor<S> softmax(const Tensor<S>& x, std::size_t axis) {
  if (axis >= x.rank()) throw ShapeError("softmax", "axis " + std::to_string(axis) + " outside " + shape_str(x));
  std::size_t outer, len, inner;
  detail::axis_split(x.shape(), axis, outer, len, inner);
  std::vector<S> out(x.numel());
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t i = 0; i < inner; ++i) {
      const std::size_t base = o * len * inner + i;
      S mx = -std::numeric_limits<S>::infinity();
      for (std::size_t j = 0; j < len; ++j) mx = std::max(mx, x[base + j * inner]);
      S z = 0;
      for (std::size_t j = 0; j < len; ++j) z += (out[base + j * inner] = std::exp(x[base + j * inner] - mx));
      for (std::size_t j = 0; j < len; ++j) out[base + j * inner] /= z;
    }
  std::vector<S> y(out);
  return make_result<S>("softmax", x.shape(), std::move(out), {x},
                        [x, y = std::move(y), outer, len, inner](const std::vector<S>& g) {
                          S* gx = grad_target(x);
                          if (!gx) return;
                          for (std::size_t o = 0; o < outer; ++o)
                            for (std::size_t i = 0; i < inner; ++i) {
                              const std::size_t base = o * len * inner + i;
                              S dot = 0;
                              for (std::size_t j = 0; j < len; ++j) dot += g[base + j * inner] * y[base + j * inner];
                              for (std::size_t j = 0; j < len; ++j)
                                gx[base + j * inner] += y[base + j * inner] * (g[base + j * inner] - dot);
                            }
                        });
}

template <typename S>
Tensor<S> log_softmax(const Tensor<S>& x, std::size_t axis) {
  if (axis >= x.rank()) throw ShapeError("log_softmax", "axis " + std::to_string(axis) + " outside " + shape_str(x));
  std::size_t outer, len, inner;
  detail::axis_split(x.shape(), axis, outer, len, inner);
  std::vector<S> out(x.numel());
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t i = 0; i < inner; ++i) {
      const std::size_t base = o * len * inner + i;
      S mx = -std::numeric_limits<S>::infinity();
      for (std::size_t j = 0; j < len; ++j) mx = std::max(mx, x[base + j * inner]);
      S z = 0;
      for (std::size_t j = 0; j < len; ++j) z += std::exp(x[base + j * inner] - mx);
      const S lz = mx + std::log(z);
      for (std::size_t j = 0; j < len; ++j) out[base + j * inner] = x[base + j * inner] - lz;
    }
  std::vector<S> y(out);
  return make_result<S>("log_softmax", x.shape(), std::move(out), {x},
                        [x, y = std::move(y), outer, len, inner](const std::vector<S>& g) {
                          S* gx = grad_target(x);
                          if (!gx) return;
                          for (std::size_t o = 0; o < outer; ++o)
                            for (std::size_t i = 0; i < inner; ++i) {
                              const std::size_t base = o * len * inner + i;
                              S gs = 0;
                              for (std::size_t j = 0; j < len; ++j) gs += g[base + j * inner];
                              for (std::size_t j = 0; j < len; ++j)
                                gx[base + j * inner] += g[base + j * inner] - std::exp(y[base + j * inner]) * gs;
                            }
                        });
}

// Mean negative log-likelihood of integer labels under logits [B, O].
template <typename S>
Tensor<S> cross_entropy(const Tensor<S>& logits, const std::vector<int>& labels) {
  detail::require_rank("cross_entropy", logits, 2);
  const std::size_t B = logits.dim(0), O = logits.dim(1);
  if (labels.size() != B)
    throw ShapeError("cross_entropy", std::to_string(labels.size()) + " labels for logits " + shape_str(logits));
  for (int l : labels)
    if (l < 0 || static_cast<std::size_t>(l) >= O)
      throw ShapeError("cross_entropy", "label " + std::to_string(l) + " outside " + std::to_string(O) + " classes");
  auto lsm = log_softmax(logits, 1);
  S acc = 0;
  for (std::size_t b = 0; b < B; ++b) acc -= lsm[b * O + static_cast<std::size_t>(labels[b])];
  acc /= static_cast<S>(B);
  return make_result<S>("cross_entropy", Shape{1}, {acc}, {lsm}, [lsm, labels, B, O](const std::vector<S>& g) {
    if (S* gl = grad_target(lsm))
      for (std::size_t b = 0; b < B; ++b) gl[b * O + static_cast<std::size_t>(labels[b])] -= g[0] / static_cast<S>(B);
  });
}

}  // namespace rdarts::ops
