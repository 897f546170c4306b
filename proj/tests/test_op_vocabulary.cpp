#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "rdarts/op_vocabulary.hpp"
#include "support/grad_check.hpp"

using namespace rdarts;
using rdarts::testing::max_rel_error;
using rdarts::testing::numeric_grad;
using rdarts::testing::random_tensor;

TEST(Vocabulary, FixedOrderOfEightOps) {
  const std::vector<std::string> expected{"none",       "skip_connect", "max_pool_3", "avg_pool_3",
                                          "sep_conv_3", "sep_conv_5",   "dil_conv_3", "dil_conv_5"};
  EXPECT_EQ(op_vocabulary(), expected);
  for (std::size_t i = 0; i < kNumOps; ++i) EXPECT_EQ(op_from_name(expected[i]), static_cast<OpKind>(i));
  EXPECT_FALSE(op_from_name("conv_7x1").has_value());
}

class CandidateShapes : public ::testing::TestWithParam<std::tuple<int, std::size_t>> {};

TEST_P(CandidateShapes, LengthPreservedOrHalved) {
  const auto kind = static_cast<OpKind>(std::get<0>(GetParam()));
  const std::size_t stride = std::get<1>(GetParam());
  Rng rng(3);
  CandidateOp<double> op(kind, 4, stride, OpStyle::search(), rng);
  for (std::size_t T : {7u, 8u, 16u}) {
    auto x = random_tensor({3, 4, T}, rng, false);
    auto y = op(x);
    EXPECT_EQ(y.shape(), (Shape{3, 4, stride == 1 ? T : (T + 1) / 2})) << op_name(kind) << " T=" << T;
    EXPECT_EQ(y.shape(), op.output_shape(x.shape()));
  }
}

INSTANTIATE_TEST_SUITE_P(AllOps, CandidateShapes,
                         ::testing::Combine(::testing::Range(0, static_cast<int>(kNumOps)),
                                            ::testing::Values(std::size_t{1}, std::size_t{2})));

TEST(Candidates, NoneIsZeroAndSkipIsIdentity) {
  Rng rng(1);
  auto x = random_tensor({2, 3, 10}, rng, false);
  CandidateOp<double> none(OpKind::none, 3, 1, OpStyle::search(), rng);
  const auto z = none(x);
  for (auto v : z.values()) EXPECT_EQ(v, 0.0);
  CandidateOp<double> skip(OpKind::skip_connect, 3, 1, OpStyle::search(), rng);
  const auto id = skip(x);
  EXPECT_TRUE(std::equal(id.values().begin(), id.values().end(), x.values().begin()));
  ParamList<double> ps;
  skip.collect(ps);
  EXPECT_TRUE(ps.empty());
}

TEST(Candidates, ParameterCounts) {
  Rng rng(1);
  const std::size_t C = 6;
  auto count = [&](OpKind k, std::size_t stride, OpStyle st) {
    CandidateOp<double> op(k, C, stride, st, rng);
    ParamList<double> ps;
    op.collect(ps);
    return count_params(ps);
  };
  // depthwise C*k + pointwise C*C per separable block; affine norm adds 2C.
  EXPECT_EQ(count(OpKind::sep_conv_3, 1, OpStyle::search()), 2 * (C * 3 + C * C));
  EXPECT_EQ(count(OpKind::sep_conv_5, 1, OpStyle::final_net()), 2 * (C * 5 + C * C + 2 * C));
  EXPECT_EQ(count(OpKind::dil_conv_3, 1, OpStyle::search()), C * 3 + C * C);
  EXPECT_EQ(count(OpKind::dil_conv_5, 2, OpStyle::final_net()), C * 5 + C * C + 2 * C);
  EXPECT_EQ(count(OpKind::max_pool_3, 1, OpStyle::search()), 0u);
  EXPECT_EQ(count(OpKind::skip_connect, 2, OpStyle::search()), C * C);
  EXPECT_EQ(count(OpKind::skip_connect, 2, OpStyle::final_net()), C * C + 2 * C);
}

TEST(MixedOp, UniformAlphaGivesMeanOfCandidates) {
  Rng rng(5);
  for (std::size_t stride : {1u, 2u}) {
    MixedOp<double> mix(4, stride, OpStyle::search(), rng);
    auto x = random_tensor({2, 4, 12}, rng, false);
    auto alpha = Tensor<double>(Shape{kNumOps}, 0.7, false);
    auto y = mix(x, alpha);
    std::vector<double> mean(y.numel(), 0.0);
    for (std::size_t i = 0; i < kNumOps; ++i) {
      auto c = mix.candidate(i)(x, true);
      for (std::size_t k = 0; k < mean.size(); ++k) mean[k] += c[k] / kNumOps;
    }
    for (std::size_t k = 0; k < mean.size(); ++k) EXPECT_NEAR(y[k], mean[k], 1e-6);
  }
}

TEST(MixedOp, SaturatedAlphaSelectsOneCandidate) {
  Rng rng(6);
  MixedOp<double> mix(3, 1, OpStyle::search(), rng);
  auto x = random_tensor({2, 3, 9}, rng, false);
  std::vector<double> a(kNumOps, -50.0);
  a[static_cast<std::size_t>(OpKind::sep_conv_3)] = 50.0;
  auto y = mix(x, Tensor<double>(Shape{kNumOps}, a));
  auto ref = mix.candidate(OpKind::sep_conv_3)(x, true);
  for (std::size_t k = 0; k < y.numel(); ++k) EXPECT_NEAR(y[k], ref[k], 1e-12);
}

TEST(MixedOp, GradientsMatchFiniteDifferences) {
  Rng rng(7);
  MixedOp<double> mix(2, 1, OpStyle::search(), rng);
  auto x = random_tensor({2, 2, 8}, rng, true);
  auto alpha = random_tensor({kNumOps}, rng, true, 0.5);
  auto R = random_tensor({2, 2, 8}, rng, false);
  auto loss = [&] { return ops::sum(ops::mul(mix(x, alpha), R)); };
  backward(loss());
  const std::vector<double> ga(alpha.grad().begin(), alpha.grad().end());
  const std::vector<double> gx(x.grad().begin(), x.grad().end());
  auto f = [&] {
    NoGradGuard ng;
    return loss().item();
  };
  EXPECT_LT(max_rel_error(ga, numeric_grad(alpha, f, 1e-6)), 1e-5);
  EXPECT_LT(max_rel_error(gx, numeric_grad(x, f, 1e-6), 1e-6), 1e-4);
}

TEST(MixedOp, RejectsBadAlpha) {
  Rng rng(8);
  MixedOp<double> mix(2, 1, OpStyle::search(), rng);
  auto x = random_tensor({1, 2, 8}, rng, false);
  EXPECT_THROW(mix(x, Tensor<double>(Shape{7}, 0.0)), ShapeError);
  std::vector<double> a(kNumOps, 0.0);
  a[3] = std::nan("");
  EXPECT_THROW(mix(x, Tensor<double>(Shape{kNumOps}, a)), NumericalError);
}

TEST(Candidates, WrongChannelCountNamesTheOp) {
  Rng rng(9);
  CandidateOp<double> op(OpKind::dil_conv_3, 4, 1, OpStyle::search(), rng);
  try {
    op(random_tensor({1, 3, 8}, rng, false));
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    EXPECT_EQ(e.primitive(), "dil_conv_3");
  }
}

TEST(Candidates, FinalStylePoolsHaveNoNormalization) {
  Rng rng(10);
  CandidateOp<double> op(OpKind::avg_pool_3, 2, 1, OpStyle::final_net(), rng);
  auto x = Tensor<double>(Shape{1, 2, 5}, std::vector<double>{1, 2, 3, 4, 5, 0, 0, 3, 0, 0});
  auto y = op(x, true);
  // Padding is excluded from the average.
  EXPECT_NEAR(y[0], 1.5, 1e-12);
  EXPECT_NEAR(y[1], 2.0, 1e-12);
  EXPECT_NEAR(y[4], 4.5, 1e-12);
  EXPECT_NEAR(y[6], 1.0, 1e-12);
}
