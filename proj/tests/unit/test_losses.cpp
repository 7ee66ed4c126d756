#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "sfda/losses.hpp"

using namespace sfda;
using namespace sfda::losses;

namespace {

Tensor<double> softmax_random(Tensor<double>::Shape s, std::uint64_t seed) {
  Tensor<double> t(s);
  Rng r(seed);
  for (auto& v : t.values()) v = r.uniform(-2, 2);
  const std::size_t p = t.plane();
  for (int n = 0; n < s[0]; ++n)
    for (std::size_t i = 0; i < p; ++i) {
      double z = 0;
      for (int c = 0; c < s[1]; ++c) z += std::exp(t[t.index(n, c, 0, 0) + i]);
      for (int c = 0; c < s[1]; ++c) t[t.index(n, c, 0, 0) + i] = std::exp(t[t.index(n, c, 0, 0) + i]) / z;
    }
  return t;
}

Tensor<double> random_one_hot(int n, int c, int h, int w, std::uint64_t seed) {
  LabelBatch b(n, h, w);
  Rng r(seed);
  for (auto& l : b.labels) l = static_cast<std::uint8_t>(r.below(static_cast<std::uint64_t>(c)));
  return one_hot<double>(b, c);
}

/// Central-difference check of `grad` for a scalar function of `x`.
template <typename F>
void expect_gradient(Tensor<double> x, const Tensor<double>& grad, F&& f, double tol = 1e-4) {
  const double h = 1e-6;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double keep = x[i];
    x[i] = keep + h;
    const double up = f(x);
    x[i] = keep - h;
    const double down = f(x);
    x[i] = keep;
    const double num = (up - down) / (2 * h);
    EXPECT_LE(std::abs(num - grad[i]), tol * std::max({std::abs(num), std::abs(grad[i]), 1e-6})) << "element " << i;
  }
}

}  // namespace

// --- dice ------------------------------------------------------------------

TEST(DiceLoss, PerfectPredictionGivesZero) {
  const auto y = random_one_hot(2, 5, 4, 4, 1);
  EXPECT_NEAR(dice_loss(y, y, foreground_classes(5)), 0.0, 1e-5);
}

TEST(DiceLoss, DisjointPredictionGivesOne) {
  LabelBatch yl(1, 2, 2), ol(1, 2, 2);
  yl.labels = {1, 1, 1, 1};
  ol.labels = {2, 2, 2, 2};
  const auto y = one_hot<double>(yl, 3), o = one_hot<double>(ol, 3);
  EXPECT_NEAR(dice_loss(o, y, {1}), 1.0, 1e-6);
}

TEST(DiceLoss, HandComputedFourPixelCase) {
  // y = [1,1,0,0], o = [0.5,0.5,0.5,0.5] on one class: DSC = 2/3.
  Tensor<double> y(1, 1, 1, 4), o(1, 1, 1, 4, 0.5);
  y[0] = y[1] = 1.0;
  const double expected = 1.0 - (2.0 * 1.0 + kDiceEps) / (2.0 + 1.0 + kDiceEps);
  EXPECT_NEAR(dice_loss(o, y, {0}), expected, 1e-12);
  EXPECT_NEAR(dice_loss(o, y, {0}), 1.0 / 3.0, 1e-6);
}

TEST(DiceLoss, PerClassMeanAveragesClassLosses) {
  const auto o = softmax_random({2, 4, 4, 4}, 3);
  const auto y = random_one_hot(2, 4, 4, 4, 4);
  const double mean = (dice_loss(o, y, {1}) + dice_loss(o, y, {2}) + dice_loss(o, y, {3})) / 3.0;
  EXPECT_NEAR(dice_loss(o, y, {1, 2, 3}), mean, 1e-12);
}

TEST(DiceLoss, FlatSumPoolsAllSelectedChannels) {
  const auto o = softmax_random({2, 3, 4, 4}, 5);
  const auto y = random_one_hot(2, 3, 4, 4, 6);
  double inter = 0, yy = 0, oo = 0;
  for (int n = 0; n < 2; ++n)
    for (int c = 1; c < 3; ++c)
      for (int i = 0; i < 16; ++i) {
        const double a = o(n, c, i / 4, i % 4), b = y(n, c, i / 4, i % 4);
        inter += a * b;
        yy += b * b;
        oo += a * a;
      }
  const double expected = 1.0 - (2 * inter + kDiceEps) / (yy + oo + kDiceEps);
  EXPECT_NEAR(dice_loss(o, y, {1, 2}, DiceReduction::kFlatSum), expected, 1e-12);
}

TEST(DiceLoss, EmptyClassSetIsRejected) {
  const auto y = random_one_hot(1, 3, 2, 2, 1);
  EXPECT_THROW(dice_loss(y, y, {}), ValidationError);
  EXPECT_THROW(dice_loss(y, y, {7}), ValidationError);
}

TEST(DiceLoss, ShapeMismatchIsRejected) {
  Tensor<double> a(1, 3, 2, 2), b(1, 3, 2, 4);
  EXPECT_THROW(dice_loss(a, b, {1}), ValidationError);
}

TEST(DiceLoss, StaysInUnitIntervalAndIsPermutationSymmetric) {
  for (std::uint64_t s = 0; s < 50; ++s) {
    const auto o = softmax_random({2, 3, 4, 4}, s);
    const auto y = random_one_hot(2, 3, 4, 4, s + 100);
    const double l = dice_loss(o, y, {1, 2});
    EXPECT_GE(l, 0.0);
    EXPECT_LE(l, 1.0);
    // the same spatial permutation applied to both leaves the loss unchanged
    std::vector<std::size_t> perm(16);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    Rng r(s);
    shuffle(perm.begin(), perm.end(), r);
    Tensor<double> op(o.shape()), yp(y.shape());
    for (int n = 0; n < 2; ++n)
      for (int c = 0; c < 3; ++c)
        for (std::size_t i = 0; i < 16; ++i) {
          op[op.index(n, c, 0, 0) + perm[i]] = o[o.index(n, c, 0, 0) + i];
          yp[yp.index(n, c, 0, 0) + perm[i]] = y[y.index(n, c, 0, 0) + i];
        }
    EXPECT_NEAR(dice_loss(op, yp, {1, 2}), l, 1e-12);
  }
}

TEST(DiceLoss, GradientMatchesFiniteDifferences) {
  for (auto red : {DiceReduction::kPerClassMean, DiceReduction::kFlatSum}) {
    const auto o = softmax_random({2, 2, 4, 4}, 7);
    const auto y = random_one_hot(2, 2, 4, 4, 8);
    const auto g = dice_loss_grad(o, y, {0, 1}, red);
    expect_gradient(o, g.grad, [&](const Tensor<double>& x) { return dice_loss(x, y, {0, 1}, red); });
  }
}

// --- entropy ---------------------------------------------------------------

TEST(EntropyLoss, OneHotGivesZero) {
  const auto y = random_one_hot(2, 5, 4, 4, 2);
  EXPECT_NEAR(entropy_loss(y), 0.0, 1e-9);
}

TEST(EntropyLoss, UniformFiveClassesGivesLogFive) {
  Tensor<double> u(2, 5, 4, 4, 0.2);
  EXPECT_NEAR(entropy_loss(u), std::log(5.0), 1e-6);
}

TEST(EntropyLoss, SinglePixelTwoClasses) {
  Tensor<double> u(1, 2, 1, 1, 0.5);
  EXPECT_NEAR(entropy_loss(u), std::log(2.0), 1e-12);
}

TEST(EntropyLoss, BoundedByLogC) {
  for (std::uint64_t s = 0; s < 50; ++s) {
    const double e = entropy_loss(softmax_random({2, 5, 4, 4}, s));
    EXPECT_GE(e, 0.0);
    EXPECT_LE(e, std::log(5.0) + 1e-12);
  }
}

TEST(EntropyLoss, GradientMatchesFiniteDifferences) {
  const auto o = softmax_random({2, 2, 4, 4}, 9);
  const auto g = entropy_loss_grad(o);
  expect_gradient(o, g.grad, [](const Tensor<double>& x) { return entropy_loss(x); });
}

// --- feature statistics ----------------------------------------------------

TEST(FmsLoss, MatchedStatisticsGiveZero) {
  std::vector<nn::LayerStats> a{{"l0", {0.1, 0.2}, {1.0, 2.0}}, {"l1", {0.3}, {0.5}}};
  EXPECT_EQ(fms_loss(a, a), 0.0);
  const auto g = fms_loss_grad(a, a);
  for (const auto& sg : g.grads) {
    for (double v : sg.d_mean) EXPECT_EQ(v, 0.0);
    for (double v : sg.d_var) EXPECT_EQ(v, 0.0);
  }
}

TEST(FmsLoss, UnitMeanShiftGivesOne) {
  std::vector<nn::LayerStats> b{{"l0", {1.0}, {0.7}}}, r{{"l0", {0.0}, {0.7}}};
  EXPECT_DOUBLE_EQ(fms_loss(b, r), 1.0);
}

TEST(FmsLoss, LayerContributionsAdd) {
  // brute-force oracle: per-layer Euclidean norms of mean and variance gaps
  Rng rng(4);
  std::vector<nn::LayerStats> b, r;
  double oracle = 0;
  for (int l = 0; l < 2; ++l) {
    nn::LayerStats x{"l" + std::to_string(l), {}, {}}, y = x;
    double sm = 0, sv = 0;
    for (int c = 0; c < 3; ++c) {
      x.mean.push_back(rng.uniform());
      y.mean.push_back(rng.uniform());
      x.var.push_back(rng.uniform());
      y.var.push_back(rng.uniform());
      sm += (x.mean.back() - y.mean.back()) * (x.mean.back() - y.mean.back());
      sv += (x.var.back() - y.var.back()) * (x.var.back() - y.var.back());
    }
    oracle += std::sqrt(sm) + std::sqrt(sv);
    b.push_back(x);
    r.push_back(y);
  }
  const double a = fms_loss({b[0]}, {r[0]}), c = fms_loss({b[1]}, {r[1]});
  EXPECT_NEAR(fms_loss(b, r), a + c, 1e-15);
  EXPECT_NEAR(fms_loss(b, r), oracle, 1e-15);
}

TEST(FmsLoss, MisalignedListsAreRejected) {
  std::vector<nn::LayerStats> a{{"l0", {0.0}, {1.0}}}, b;
  EXPECT_THROW(fms_loss(a, b), ValidationError);
  std::vector<nn::LayerStats> c{{"l0", {0.0, 1.0}, {1.0, 1.0}}};
  EXPECT_THROW(fms_loss(a, c), ValidationError);
}

TEST(FmsLoss, StatisticGradientMatchesFiniteDifferences) {
  std::vector<nn::LayerStats> b{{"l0", {0.3, -0.2}, {1.1, 0.4}}}, r{{"l0", {0.1, 0.5}, {0.9, 0.8}}};
  const auto g = fms_loss_grad(b, r);
  const double h = 1e-7;
  for (std::size_t c = 0; c < 2; ++c) {
    auto bp = b, bm = b;
    bp[0].mean[c] += h;
    bm[0].mean[c] -= h;
    EXPECT_NEAR(g.grads[0].d_mean[c], (fms_loss(bp, r) - fms_loss(bm, r)) / (2 * h), 1e-6);
    bp = b;
    bm = b;
    bp[0].var[c] += h;
    bm[0].var[c] -= h;
    EXPECT_NEAR(g.grads[0].d_var[c], (fms_loss(bp, r) - fms_loss(bm, r)) / (2 * h), 1e-6);
  }
}

// --- weighted objective ----------------------------------------------------

TEST(TotalLoss, DefaultWeights) {
  const LossWeights w;
  EXPECT_EQ(w.lambda, (std::array<double, 6>{0.001, 10, 1, 1, 0.6, 0.3}));
}

TEST(TotalLoss, StageOneHasFourComponents) {
  const StageSchedule sched{5, 10};
  const LossComponents c{1.0, 2.0, 3.0, 4.0, std::nullopt, std::nullopt};
  const auto r = total_loss(c, LossWeights{}, 4, sched);
  EXPECT_EQ(r.active_count(), 4);
  EXPECT_NEAR(r.total, 0.001 + 20 + 3 + 4, 1e-12);
}

TEST(TotalLoss, StageTwoAddsPamrAndCircularTerms) {
  const StageSchedule sched{5, 10};
  const LossComponents c4{1.0, 2.0, 3.0, 4.0, std::nullopt, std::nullopt};
  const LossComponents c6{1.0, 2.0, 3.0, 4.0, 0.5, 0.25};
  const auto before = total_loss(c4, LossWeights{}, 4, sched);
  const auto after = total_loss(c6, LossWeights{}, 5, sched);
  EXPECT_EQ(after.active_count(), 6);
  EXPECT_NEAR(after.total - before.total, 0.6 * 0.5 + 0.3 * 0.25, 1e-12);
}

TEST(TotalLoss, StageTwoComponentsBeforeTransitionAreAScheduleViolation) {
  const StageSchedule sched{5, 10};
  const LossComponents c{1.0, 2.0, 3.0, 4.0, 0.5, std::nullopt};
  EXPECT_THROW(total_loss(c, LossWeights{}, 4, sched), ScheduleError);
}

TEST(TotalLoss, ZeroComponentsGiveZeroAndWeightsScaleLinearly) {
  const StageSchedule sched{5, 10};
  const LossComponents zero{0.0, 0.0, 0.0, 0.0, 0.0, 0.0};
  EXPECT_EQ(total_loss(zero, LossWeights{}, 7, sched).total, 0.0);
  const LossComponents c{0.3, 0.2, 0.1, 0.4, 0.6, 0.7};
  LossWeights w2;
  for (auto& l : w2.lambda) l *= 2;
  EXPECT_NEAR(total_loss(c, w2, 7, sched).total, 2 * total_loss(c, LossWeights{}, 7, sched).total, 1e-12);
}

TEST(TotalLoss, InvalidWeightsAndScheduleAreRejected) {
  LossWeights w;
  w.lambda[2] = -1;
  EXPECT_THROW(w.validate(), ValidationError);
  EXPECT_THROW((StageSchedule{0, 10}.validate()), ValidationError);
  EXPECT_THROW((StageSchedule{11, 10}.validate()), ValidationError);
}

TEST(LossReport, CsvLineMarksInactiveComponents) {
  const LossComponents c{1.0, 2.0, 3.0, 4.0, std::nullopt, std::nullopt};
  const auto r = total_loss(c, LossWeights{}, 0, StageSchedule{5, 10});
  EXPECT_EQ(LossReport::csv_header(), "epoch,step,fms,ent,seg_sc,seg_u3,pamr,seg_circ,total");
  const auto line = r.csv_line(0, 3);
  EXPECT_EQ(line.rfind("0,3,1,2,3,4,NA,NA,", 0), 0u) << line;
}
