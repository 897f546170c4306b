#pragma once

#include <array>
#include <cmath>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "rdarts/modules.hpp"

namespace rdarts {

enum class OpKind : int {
  none = 0,
  skip_connect,
  max_pool_3,
  avg_pool_3,
  sep_conv_3,
  sep_conv_5,
  dil_conv_3,
  dil_conv_5,
};

inline constexpr std::size_t kNumOps = 8;

// Fixed order; index i is the column of every alpha row.
inline constexpr std::array<std::string_view, kNumOps> kOpNames = {
    "none", "skip_connect", "max_pool_3", "avg_pool_3", "sep_conv_3", "sep_conv_5", "dil_conv_3", "dil_conv_5",
};

inline std::string_view op_name(OpKind k) { return kOpNames[static_cast<std::size_t>(k)]; }

inline std::optional<OpKind> op_from_name(std::string_view name) {
  for (std::size_t i = 0; i < kNumOps; ++i)
    if (kOpNames[i] == name) return static_cast<OpKind>(i);
  return std::nullopt;
}

inline std::vector<std::string> op_vocabulary() { return {kOpNames.begin(), kOpNames.end()}; }

// Search-time candidates use non-affine normalization without running
// statistics; final networks use affine normalization with running stats.
struct OpStyle {
  bool affine = false;
  bool track_running = false;
  bool normalize_pools = true;

  static OpStyle search() { return {false, false, true}; }
  static OpStyle final_net() { return {true, true, false}; }
};

template <typename S>
class CandidateOp {
 public:
  CandidateOp(OpKind kind, std::size_t channels, std::size_t stride, OpStyle style, Rng& rng)
      : kind_(kind), channels_(channels), stride_(stride), style_(style) {
    const std::size_t C = channels;
    switch (kind) {
      case OpKind::none:
        break;
      case OpKind::skip_connect:
        if (stride == 2) reduce_ = ReluConvBn<S>(C, C, 2, style.affine, style.track_running, rng);
        break;
      case OpKind::max_pool_3:
      case OpKind::avg_pool_3:
        if (style.normalize_pools) bns_.emplace_back(C, false, style.track_running);
        break;
      case OpKind::sep_conv_3:
      case OpKind::sep_conv_5: {
        const std::size_t k = kind == OpKind::sep_conv_3 ? 3 : 5;
        for (int rep = 0; rep < 2; ++rep) {
          depthwise_.push_back(conv_param<S>(C, 1, k, rng));
          pointwise_.push_back(conv_param<S>(C, C, 1, rng));
          bns_.emplace_back(C, style.affine, style.track_running);
        }
        break;
      }
      case OpKind::dil_conv_3:
      case OpKind::dil_conv_5: {
        const std::size_t k = kind == OpKind::dil_conv_3 ? 3 : 5;
        depthwise_.push_back(conv_param<S>(C, 1, k, rng));
        pointwise_.push_back(conv_param<S>(C, C, 1, rng));
        bns_.emplace_back(C, style.affine, style.track_running);
        break;
      }
    }
  }

  OpKind kind() const { return kind_; }
  std::size_t stride() const { return stride_; }
  std::size_t channels() const { return channels_; }

  Shape output_shape(const Shape& in) const {
    return {in[0], in[1], (in[2] - 1) / stride_ + 1};
  }

  Tensor<S> operator()(const Tensor<S>& x, bool training = true) {
    if (x.rank() != 3 || x.dim(1) != channels_)
      throw ShapeError(std::string(op_name(kind_)), "expected [B, " + std::to_string(channels_) + ", T], got " + shape_str(x));
    switch (kind_) {
      case OpKind::none:
        return Tensor<S>::zeros(output_shape(x.shape()));
      case OpKind::skip_connect:
        return stride_ == 1 ? x : reduce_(x, training);
      case OpKind::max_pool_3: {
        auto y = ops::max_pool1d(x, 3, stride_);
        return bns_.empty() ? y : bns_[0](y, training);
      }
      case OpKind::avg_pool_3: {
        auto y = ops::avg_pool1d(x, 3, stride_);
        return bns_.empty() ? y : bns_[0](y, training);
      }
      case OpKind::sep_conv_3:
      case OpKind::sep_conv_5: {
        auto y = ops::separable_conv1d(ops::relu(x), depthwise_[0], pointwise_[0], stride_);
        y = bns_[0](y, training);
        y = ops::separable_conv1d(ops::relu(y), depthwise_[1], pointwise_[1]);
        return bns_[1](y, training);
      }
      case OpKind::dil_conv_3:
      case OpKind::dil_conv_5: {
        auto y = ops::separable_conv1d(ops::relu(x), depthwise_[0], pointwise_[0], stride_, 2);
        return bns_[0](y, training);
      }
    }
    return x;
  }

  void collect(ParamList<S>& out) const {
    if (reduce_.weight.defined()) reduce_.collect(out);
    for (std::size_t i = 0; i < depthwise_.size(); ++i) {
      out.push_back(depthwise_[i]);
      out.push_back(pointwise_[i]);
    }
    for (const auto& bn : bns_) bn.collect(out);
  }

  void collect_buffers(std::vector<std::vector<S>*>& out) {
    if (reduce_.weight.defined()) reduce_.collect_buffers(out);
    for (auto& bn : bns_) bn.collect_buffers(out);
  }

 private:
  OpKind kind_;
  std::size_t channels_;
  std::size_t stride_;
  OpStyle style_;
  ReluConvBn<S> reduce_;
  ParamList<S> depthwise_, pointwise_;
  std::vector<BatchNorm<S>> bns_;
};

// Every candidate op on one edge, combined by softmax(alpha_row).
template <typename S>
class MixedOp {
 public:
  MixedOp(std::size_t channels, std::size_t stride, OpStyle style, Rng& rng) {
    candidates_.reserve(kNumOps);
    for (std::size_t i = 0; i < kNumOps; ++i) candidates_.emplace_back(static_cast<OpKind>(i), channels, stride, style, rng);
  }

  std::size_t size() const { return candidates_.size(); }
  CandidateOp<S>& candidate(std::size_t i) { return candidates_.at(i); }
  CandidateOp<S>& candidate(OpKind k) { return candidates_.at(static_cast<std::size_t>(k)); }

  Tensor<S> operator()(const Tensor<S>& x, const Tensor<S>& alpha_row) {
    if (alpha_row.rank() != 1 || alpha_row.numel() != kNumOps)
      throw ShapeError("mixed_op", "alpha row must have " + std::to_string(kNumOps) + " entries, got " + shape_str(alpha_row));
    for (auto v : alpha_row.values())
      if (std::isnan(v)) throw NumericalError("mixed_op: NaN in architecture weights");
    auto weights = ops::softmax(alpha_row, 0);
    std::vector<Tensor<S>> outs;
    outs.reserve(kNumOps);
    for (auto& c : candidates_) outs.push_back(c(x, true));
    return ops::weighted_sum(outs, weights);
  }

  void collect(ParamList<S>& out) const {
    for (const auto& c : candidates_) c.collect(out);
  }

 private:
  std::vector<CandidateOp<S>> candidates_;
};

}  // namespace rdarts
