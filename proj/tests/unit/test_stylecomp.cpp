#include <gtest/gtest.h>

#include <cmath>

#include "sfda/engine.hpp"
#include "sfda/nn/stylecomp.hpp"

using namespace sfda;
using namespace sfda::nn;

namespace {

Tensor<double> random_tensor(Tensor<double>::Shape s, std::uint64_t seed, double lo = 0.0, double hi = 1.0) {
  Tensor<double> t(s);
  Rng r(seed);
  for (auto& v : t.values()) v = r.uniform(lo, hi);
  return t;
}

bool close_rel(double analytic, double numeric, double tol = 1e-4, double floor = 1e-7) {
  return std::abs(analytic - numeric) <= tol * std::max({std::abs(analytic), std::abs(numeric), floor});
}

SCSpec small_sc() { return {{4, 3, 3, 2, 2, 2, 1}, 3, 1}; }

}  // namespace

TEST(StyleComp, DefaultWidthsBuild) {
  const SCSpec spec;
  EXPECT_EQ(spec.layer_filters, (std::vector<int>{64, 32, 16, 8, 4, 2, 1}));
  EXPECT_NO_THROW(StyleCompNet<float>(spec, 1));
}

TEST(StyleComp, RejectsMalformedSpecs) {
  EXPECT_THROW(StyleCompNet<float>(SCSpec{{8, 4, 4, 2, 2, 1}, 3, 1}, 1), ValidationError);
  EXPECT_THROW(StyleCompNet<float>(SCSpec{{8, 4, 4, 2, 2, 1, 2}, 3, 1}, 1), ValidationError);
}

TEST(StyleComp, OutputKeepsShapeAndLiesInUnitInterval) {
  StyleCompNet<float> net(SCSpec{{16, 8, 8, 4, 4, 2, 1}, 3, 1}, 3);
  Tensor<float> x(4, 1, 32, 24);
  Rng r(1);
  for (auto& v : x.values()) v = static_cast<float>(r.uniform());
  for (bool train : {true, false}) {
    const auto& p = net.forward(x, train);
    EXPECT_EQ(p.shape(), x.shape());
    for (float v : p.values()) {
      EXPECT_GT(v, 0.f);
      EXPECT_LT(v, 1.f);
    }
  }
}

TEST(StyleComp, EvalModeIsDeterministic) {
  StyleCompNet<double> net(small_sc(), 5);
  const auto x = random_tensor({2, 1, 8, 8}, 6);
  const Tensor<double> a = net.forward(x, false);
  const Tensor<double> b = net.forward(x, false);
  EXPECT_EQ(a, b);
}

TEST(StyleComp, CompensateExamples) {
  Tensor<double> x(1, 1, 2, 2), ones(1, 1, 2, 2), zeros(1, 1, 2, 2), half(1, 1, 2, 2);
  x.values() = {0.1, 0.4, 0.7, 1.0};
  ones.fill(1.0);
  zeros.fill(0.0);
  half.fill(0.5);
  EXPECT_EQ(compensate(x, ones), x);
  const auto blank = compensate(x, zeros);
  for (double v : blank.values()) EXPECT_EQ(v, 0.0);
  const auto quarter = compensate(half, half);
  for (double v : quarter.values()) EXPECT_EQ(v, 0.25);
}

TEST(StyleComp, CompensateBroadcastsOverChannelsAndChecksShapes) {
  Tensor<double> x(1, 2, 1, 2), p(1, 1, 1, 2);
  x.values() = {1, 2, 3, 4};
  p.values() = {0.5, 0.25};
  EXPECT_EQ(compensate(x, p).values(), (std::vector<double>{0.5, 0.5, 1.5, 1.0}));
  EXPECT_THROW(compensate(x, Tensor<double>(1, 1, 2, 1)), ValidationError);
  EXPECT_THROW(compensate(x, Tensor<double>(1, 2, 1, 2)), ValidationError);
}

TEST(StyleComp, CompensationPreservesOrderUnderEqualCoefficients) {
  Rng r(9);
  for (int trial = 0; trial < 1000; ++trial) {
    Tensor<double> x(1, 1, 1, 2), p(1, 1, 1, 2);
    x.values() = {r.uniform(), r.uniform()};
    const double s = r.uniform(1e-6, 1.0 - 1e-6);
    p.fill(s);
    const auto out = compensate(x, p);
    for (double v : out.values()) {
      EXPECT_GE(v, 0.0);
      EXPECT_LT(v, 1.0);
    }
    EXPECT_EQ(x[0] <= x[1], out[0] <= out[1]);
  }
}

TEST(StyleComp, CompensateGradientMatchesFiniteDifferences) {
  const auto x = random_tensor({2, 2, 3, 3}, 1);
  const auto p = random_tensor({2, 1, 3, 3}, 2);
  const auto g = random_tensor({2, 2, 3, 3}, 3, -1, 1);
  Tensor<double> dx, dp;
  compensate_backward(x, p, g, &dx, &dp);
  auto loss = [&](const Tensor<double>& a, const Tensor<double>& b) {
    const auto o = compensate(a, b);
    double s = 0;
    for (std::size_t i = 0; i < o.size(); ++i) s += o[i] * g[i];
    return s;
  };
  const double h = 1e-6;
  for (std::size_t i = 0; i < p.size(); ++i) {
    Tensor<double> up = p, down = p;
    up[i] += h;
    down[i] -= h;
    EXPECT_NEAR(dp[i], (loss(x, up) - loss(x, down)) / (2 * h), 1e-8);
  }
  for (std::size_t i = 0; i < x.size(); ++i) {
    Tensor<double> up = x, down = x;
    up[i] += h;
    down[i] -= h;
    EXPECT_NEAR(dx[i], (loss(up, p) - loss(down, p)) / (2 * h), 1e-8);
  }
  // with unit upstream gradient, d/dp at each pixel is the pixel's own intensity summed over channels
  Tensor<double> unit(x.shape());
  unit.fill(1.0);
  compensate_backward(x, p, unit, static_cast<Tensor<double>*>(nullptr), &dp);
  EXPECT_NEAR(dp(1, 0, 2, 1), x(1, 0, 2, 1) + x(1, 1, 2, 1), 1e-15);
}

TEST(StyleComp, GradientThroughFrozenSegmenterMatchesFiniteDifferences) {
  const NetworkSpec spec{{2, 3, 2, 3, 2, 3, 2, 3, 2}, 3, 1};
  UNet<double> u2(spec, 21);
  u2.apply_freeze(FreezePlan::all_frozen());
  StyleCompNet<double> sc(small_sc(), 22);
  const auto x = random_tensor({2, 1, 16, 16}, 23);
  LabelBatch lb(2, 16, 16);
  Rng r(24);
  for (auto& v : lb.labels) v = static_cast<std::uint8_t>(r.below(3));
  const auto target = one_hot<double>(lb, 3);
  const std::set<int> classes{1, 2};

  for (bool with_st : {false, true}) {
    auto loss = [&] {
      return engine::sc_through_frozen_u2(sc, u2, x, target, classes, losses::DiceReduction::kPerClassMean, with_st,
                                          0.0);
    };
    const std::string before = parameter_digest(u2, false);
    sc.zero_grad();
    const double value = engine::sc_through_frozen_u2(sc, u2, x, target, classes,
                                                      losses::DiceReduction::kPerClassMean, with_st, 1.0);
    EXPECT_EQ(value, loss());
    EXPECT_EQ(parameter_digest(u2, false), before);

    std::vector<Param<double>*> params = sc.trainable_params();
    const double h = 1e-6;
    for (int trial = 0; trial < 30; ++trial) {
      Param<double>* p = params[r.below(params.size())];
      const std::size_t i = r.below(p->size());
      const double keep = p->value[i];
      p->value[i] = keep + h;
      const double up = loss();
      p->value[i] = keep - h;
      const double down = loss();
      p->value[i] = keep;
      EXPECT_TRUE(close_rel(p->grad[i], (up - down) / (2 * h), 1e-4, 1e-8))
          << (with_st ? "with_st " : "") << p->grad[i] << " vs " << (up - down) / (2 * h);
    }
  }
}

TEST(StyleComp, InputGradientMatchesFiniteDifferences) {
  StyleCompNet<double> sc(small_sc(), 31);
  const auto x = random_tensor({2, 1, 6, 6}, 32);
  const auto g = random_tensor({2, 1, 6, 6}, 33, -1, 1);
  auto loss = [&](const Tensor<double>& in) {
    const auto& o = sc.forward(in, true);
    double s = 0;
    for (std::size_t i = 0; i < o.size(); ++i) s += o[i] * g[i];
    return s;
  };
  loss(x);
  sc.zero_grad();
  Tensor<double> dx;
  sc.backward(g, &dx);
  const double h = 1e-6;
  for (std::size_t i = 0; i < x.size(); i += 5) {
    Tensor<double> up = x, down = x;
    up[i] += h;
    down[i] -= h;
    EXPECT_TRUE(close_rel(dx[i], (loss(up) - loss(down)) / (2 * h)));
  }
}
