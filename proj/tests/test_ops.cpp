#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "mudeep/parallel.hpp"
#include "test_util.hpp"

using namespace mudeep;
using namespace mudeep::testing;

namespace {

constexpr double kGradTol = 1e-4;
constexpr int kSeeds = 10;

// Distinct values at least 0.01 apart in shuffled order, so a 1e-5 step can
// never flip a max-pool argmax.
Tensor<double> spaced_tensor(const Shape& shape, std::uint64_t seed) {
  Tensor<double> t(shape);
  std::vector<double> v(t.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = 0.01 * static_cast<double>(i) - 0.005 * static_cast<double>(v.size());
  std::mt19937_64 rng(seed);
  std::shuffle(v.begin(), v.end(), rng);
  std::copy(v.begin(), v.end(), t.data().begin());
  return t;
}

Tensor<double> values(const Shape& shape, std::vector<double> v) { return Tensor<double>(shape, std::move(v)); }

}  // namespace

// ---- forward oracles -------------------------------------------------------

TEST(WindowSize, ClosedForm) {
  EXPECT_EQ(window_out_size(160, 3, 1, 0), 158u);
  EXPECT_EQ(window_out_size(156, 3, 2, 1), 78u);
  EXPECT_EQ(window_out_size(78, 3, 2, 1), 39u);
  EXPECT_EQ(window_out_size(56, 3, 2, 1), 28u);
  EXPECT_EQ(window_out_size(28, 3, 2, 1), 14u);
  EXPECT_EQ(window_out_size(39, 3, 1, 1), 39u);
  EXPECT_THROW(window_out_size(2, 3, 1, 0), GeometryError);
}

TEST(Conv2d, ShapeOfFirstPreprocessingLayer) {
  Graph<float> g;
  auto x = constant(Tensor<float>({1, 3, 160, 60}, 0.1f));
  auto w = constant(Tensor<float>({48, 3, 3, 3}, 0.01f));
  auto b = constant(Tensor<float>({48}));
  EXPECT_EQ(conv2d(g, x, w, b, {}).get()->value.shape(), (Shape{1, 48, 158, 58}));
}

TEST(Conv2d, ZeroInputGivesBiasPerChannel) {
  Graph<double> g;
  auto x = constant(Tensor<double>({2, 3, 5, 4}));
  auto w = constant(random_tensor<double>({4, 3, 3, 3}, 1));
  auto b = constant(values({4}, {0.5, -1.0, 2.0, 0.0}));
  auto y = conv2d(g, x, w, b, {1, 1, 1});
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t k = 0; k < 4; ++k)
      for (std::size_t h = 0; h < 5; ++h)
        for (std::size_t c = 0; c < 4; ++c) ASSERT_EQ(y->value.at(n, k, h, c), b->value[k]);
}

TEST(Conv2d, OnesKernelGivesWindowSums) {
  Graph<double> g;
  auto x = constant(values({1, 1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9}));
  auto w = constant(Tensor<double>({1, 1, 2, 2}, 1.0));
  auto b = constant(Tensor<double>({1}));
  auto y = conv2d(g, x, w, b, {});
  EXPECT_EQ(y->value, values({1, 1, 2, 2}, {12, 16, 24, 28}));
}

TEST(Conv2d, MatchesDirectConvolutionWithStrideAndAsymmetricPadding) {
  Graph<double> g;
  const auto xt = random_tensor<double>({2, 3, 7, 6}, 3);
  const auto wt = random_tensor<double>({5, 3, 1, 3}, 4);
  const auto bt = random_tensor<double>({5}, 5);
  auto y = conv2d(g, constant(xt), constant(wt), constant(bt), {2, 0, 1});
  ASSERT_EQ(y->value.shape(), (Shape{2, 5, 4, 3}));
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t k = 0; k < 5; ++k)
      for (std::size_t oh = 0; oh < 4; ++oh)
        for (std::size_t ow = 0; ow < 3; ++ow) {
          double ref = bt[k];
          for (std::size_t c = 0; c < 3; ++c)
            for (std::size_t kw = 0; kw < 3; ++kw) {
              const long ih = static_cast<long>(oh * 2), iw = static_cast<long>(ow * 2 + kw) - 1;
              if (iw < 0 || iw >= 6) continue;
              ref += xt.at(n, c, ih, iw) * wt.at(k, c, 0, kw);
            }
          ASSERT_NEAR(y->value.at(n, k, oh, ow), ref, 1e-12);
        }
}

TEST(Conv2d, RejectsDepthMismatchAndTooSmallInput) {
  Graph<float> g;
  auto b = constant(Tensor<float>({2}));
  EXPECT_THROW(conv2d(g, constant(Tensor<float>({1, 3, 5, 5})), constant(Tensor<float>({2, 4, 3, 3})), b, {}),
               ShapeError);
  EXPECT_THROW(conv2d(g, constant(Tensor<float>({1, 3, 2, 5})), constant(Tensor<float>({2, 3, 3, 3})), b, {}),
               GeometryError);
}

TEST(Pool, ShapesAtMultiScaleBoundaries) {
  Graph<float> g;
  EXPECT_EQ(max_pool2d(g, constant(Tensor<float>({1, 96, 156, 56})), 3, 2, 1)->value.shape(), (Shape{1, 96, 78, 28}));
  EXPECT_EQ(max_pool2d(g, constant(Tensor<float>({1, 96, 78, 28})), 3, 2, 1)->value.shape(), (Shape{1, 96, 39, 14}));
  EXPECT_EQ(avg_pool2d(g, constant(Tensor<float>({1, 256, 39, 14})), 3, 1, 1)->value.shape(), (Shape{1, 256, 39, 14}));
}

TEST(Pool, AverageOracles) {
  Graph<double> g;
  EXPECT_EQ(avg_pool2d(g, constant(Tensor<double>({1, 1, 2, 2}, 1.0)), 2, 1, 0)->value, values({1, 1, 1, 1}, {1.0}));
  EXPECT_EQ(avg_pool2d(g, constant(values({1, 1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9})), 3, 1, 0)->value[0], 5.0);
  // Padded cells count as zeros: the corner window of a ones map sees 4 of 9.
  auto y = avg_pool2d(g, constant(Tensor<double>({1, 1, 3, 3}, 1.0)), 3, 1, 1);
  EXPECT_DOUBLE_EQ(y->value.at(0, 0, 0, 0), 4.0 / 9.0);
  EXPECT_DOUBLE_EQ(y->value.at(0, 0, 1, 1), 1.0);
}

TEST(Pool, MaxConstantInputAndTieBreak) {
  Graph<double> g;
  auto x = leaf(Tensor<double>({1, 1, 4, 4}, -2.0));
  auto y = max_pool2d(g, x, 2, 2, 0);
  for (double v : y->value.data()) EXPECT_EQ(v, -2.0);
  g.tape.backward(sum_all(g, y));
  // Each window's unit of gradient lands on its first (top-left) cell.
  double mass = 0;
  for (std::size_t h = 0; h < 4; ++h)
    for (std::size_t w = 0; w < 4; ++w) {
      const double d = x->grad.at(0, 0, h, w);
      mass += d;
      EXPECT_EQ(d, (h % 2 == 0 && w % 2 == 0) ? 1.0 : 0.0);
    }
  EXPECT_EQ(mass, 4.0);
}

TEST(Pool, MaxPaddingNeverWins) {
  Graph<double> g;
  auto y = max_pool2d(g, constant(Tensor<double>({1, 1, 3, 3}, -5.0)), 3, 2, 1);
  for (double v : y->value.data()) EXPECT_EQ(v, -5.0);
}

TEST(Geometry, SweepMatchesClosedForm) {
  Graph<float> g;
  for (std::size_t k : {1, 2, 3})
    for (std::size_t s : {1, 2})
      for (std::size_t p : {0, 1})
        for (std::size_t in : {3, 4, 7, 10}) {
          const std::size_t expect = (in + 2 * p - k) / s + 1;
          auto x = constant(Tensor<float>({1, 2, in, in + 1}, 1.0f));
          auto w = constant(Tensor<float>({3, 2, k, k}, 1.0f));
          auto b = constant(Tensor<float>({3}));
          EXPECT_EQ(conv2d(g, x, w, b, {s, p, p})->value.shape(), (Shape{1, 3, expect, (in + 1 + 2 * p - k) / s + 1}));
          if (p < k) {
            EXPECT_EQ(max_pool2d(g, x, k, s, p)->value.shape()[2], expect);
            EXPECT_EQ(avg_pool2d(g, x, k, s, p)->value.shape()[2], expect);
          }
        }
}

TEST(BatchNorm, TrainModeNormalizesPerChannel) {
  Graph<double> g;
  auto x = constant(random_tensor<double>({4, 3, 5, 5}, 9, -3, 7));
  Tensor<double> rm({3}), rv({3}, 1.0);
  auto y = batch_norm(g, x, constant(Tensor<double>({3}, 1.0)), constant(Tensor<double>({3})), rm, rv);
  for (std::size_t c = 0; c < 3; ++c) {
    double s = 0, ss = 0;
    for (std::size_t n = 0; n < 4; ++n)
      for (std::size_t i = 0; i < 25; ++i) s += y->value.at(n, c, i / 5, i % 5);
    const double mean = s / 100;
    for (std::size_t n = 0; n < 4; ++n)
      for (std::size_t i = 0; i < 25; ++i) ss += std::pow(y->value.at(n, c, i / 5, i % 5) - mean, 2);
    EXPECT_LE(std::abs(mean), 1e-5);
    EXPECT_NEAR(ss / 100, 1.0, 1e-4);
  }
}

TEST(BatchNorm, StandardizedInputPassesThrough) {
  Graph<double> g;
  auto x = values({2, 2}, {-1, 1, 1, -1});
  Tensor<double> rm({2}), rv({2}, 1.0);
  auto y = batch_norm(g, constant(x), constant(Tensor<double>({2}, 1.0)), constant(Tensor<double>({2})), rm, rv);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(y->value[i], x[i], 1e-5);
}

TEST(BatchNorm, RunningStatisticsUpdateAndEvalMode) {
  Graph<double> g;
  auto x = constant(values({2, 1}, {1.0, 3.0}));
  Tensor<double> rm({1}), rv({1}, 1.0);
  auto gamma = constant(Tensor<double>({1}, 1.0)), beta = constant(Tensor<double>({1}));
  batch_norm(g, x, gamma, beta, rm, rv);
  EXPECT_NEAR(rm[0], 0.1 * 2.0, 1e-12);
  const double var = rv[0];
  EXPECT_GT(var, 1.0);

  Graph<double> frozen;
  frozen.update_running_stats = false;
  batch_norm(frozen, x, gamma, beta, rm, rv);
  EXPECT_EQ(rv[0], var);

  Graph<double> ev(Mode::eval);
  auto y = batch_norm(ev, constant(values({1, 1}, {rm[0]})), gamma, beta, rm, rv);
  EXPECT_NEAR(y->value[0], 0.0, 1e-12);
}

TEST(BatchNorm, SingleSampleTrainBatchIsRejected) {
  Graph<float> g;
  Tensor<float> rm({2}), rv({2}, 1.0f);
  EXPECT_THROW(batch_norm(g, constant(Tensor<float>({1, 2, 3, 3})), constant(Tensor<float>({2}, 1.0f)),
                          constant(Tensor<float>({2})), rm, rv),
               Error);
}

TEST(Dropout, EvalIsIdentityAndTrainScalesSurvivors) {
  const auto xt = random_tensor<double>({8, 100}, 2, 0.5, 1.5);
  auto x = constant(xt);
  Graph<double> ev(Mode::eval);
  EXPECT_EQ(dropout(ev, x, 0.3).get(), x.get());

  Graph<double> tr(Mode::train, 11);
  auto y = dropout(tr, x, 0.3);
  std::size_t dropped = 0;
  for (std::size_t i = 0; i < xt.numel(); ++i) {
    if (y->value[i] == 0.0) ++dropped;
    else EXPECT_NEAR(y->value[i], xt[i] / 0.7, 1e-12);
  }
  EXPECT_NEAR(static_cast<double>(dropped) / xt.numel(), 0.3, 0.05);
  EXPECT_THROW(dropout(tr, x, 1.0), InvalidArgument);
  EXPECT_THROW(dropout(tr, x, -0.1), InvalidArgument);
}

TEST(SoftmaxCrossEntropy, UniformLogitsGiveLn2) {
  Graph<double> g;
  auto z = constant(Tensor<double>({2, 2}));
  const int labels[] = {0, 1};
  EXPECT_NEAR(softmax_cross_entropy(g, z, std::span<const int>(labels))->value[0], std::log(2.0), 1e-12);
  const int bad[] = {0, 2};
  EXPECT_THROW(softmax_cross_entropy(g, z, std::span<const int>(bad)), InvalidArgument);
}

TEST(SoftmaxCrossEntropy, StableForLargeLogits) {
  Graph<double> g;
  auto z = constant(values({1, 3}, {1000.0, 0.0, -1000.0}));
  const int labels[] = {0};
  EXPECT_NEAR(softmax_cross_entropy(g, z, std::span<const int>(labels))->value[0], 0.0, 1e-12);
  const auto p = softmax_rows(z->value);
  EXPECT_NEAR(p[0] + p[1] + p[2], 1.0, 1e-12);
}

TEST(ChannelOps, ScaleByOnesIsIdentityAndConcatOrdersChannels) {
  Graph<double> g;
  const auto xt = random_tensor<double>({2, 3, 2, 2}, 4);
  EXPECT_EQ(channel_scale(g, constant(xt), constant(Tensor<double>({3}, 1.0)))->value, xt);
  const auto yt = random_tensor<double>({2, 1, 2, 2}, 5);
  const Var<double> parts[] = {constant(xt), constant(yt)};
  auto c = channel_concat(g, std::span<const Var<double>>(parts));
  ASSERT_EQ(c->value.shape(), (Shape{2, 4, 2, 2}));
  EXPECT_EQ(c->value.at(1, 2, 1, 0), xt.at(1, 2, 1, 0));
  EXPECT_EQ(c->value.at(1, 3, 0, 1), yt.at(1, 0, 0, 1));
  EXPECT_EQ(flatten(g, c)->value.shape(), (Shape{2, 16}));
}

TEST(Graph, ConstantsRecordNothing) {
  Graph<double> g;
  auto y = relu(g, add(g, constant(Tensor<double>({3}, 1.0)), constant(Tensor<double>({3}, 2.0))));
  EXPECT_EQ(g.tape.size(), 0u);
  EXPECT_EQ(y->value[0], 3.0);
}

// ---- gradient checks -------------------------------------------------------

TEST(GradCheck, SumOfSquaresWithinRoundoff) {
  auto x = leaf(random_tensor<double>({4, 5}, 1));
  auto loss = [&](Graph<double>& g) { return sum_all(g, mul(g, x, x)); };
  EXPECT_LE(max_rel_error(loss, {{"x", x}}), 1e-8);
}

TEST(GradCheck, FrozenTargetIsSkippedAndUntouched) {
  Parameter<double> p("w", random_tensor<double>({3}, 2), ParamKind::weight);
  p.set_frozen(true);
  const auto before = p.value();
  auto loss = [&](Graph<double>& g) { return sum_all(g, mul(g, p.var(), p.var())); };
  GradCheckOptions opt;
  const auto r = grad_check<double>(loss, {target_of(p)}, opt);
  ASSERT_EQ(r.entries.size(), 1u);
  EXPECT_TRUE(r.entries[0].skipped);
  EXPECT_EQ(r.entries[0].checked, 0u);
  EXPECT_TRUE(bitwise_equal(before, p.value()));
}

class OpGrad : public ::testing::TestWithParam<int> {};

TEST_P(OpGrad, Conv2d) {
  const auto seed = static_cast<std::uint64_t>(GetParam());
  auto x = leaf(random_tensor<double>({2, 3, 5, 4}, seed));
  auto w = leaf(random_tensor<double>({4, 3, 3, 3}, seed + 100));
  auto b = leaf(random_tensor<double>({4}, seed + 200));
  auto loss = [&](Graph<double>& g) { return probe_loss(g, conv2d(g, x, w, b, {2, 1, 1}), seed); };
  EXPECT_LE(max_rel_error(loss, {{"x", x}, {"w", w}, {"b", b}}), kGradTol);
}

TEST_P(OpGrad, Conv2dAsymmetricKernel) {
  const auto seed = static_cast<std::uint64_t>(GetParam());
  auto x = leaf(random_tensor<double>({2, 2, 4, 5}, seed));
  auto w = leaf(random_tensor<double>({3, 2, 3, 1}, seed + 100));
  auto b = leaf(random_tensor<double>({3}, seed + 200));
  auto loss = [&](Graph<double>& g) { return probe_loss(g, conv2d(g, x, w, b, {1, 1, 0}), seed); };
  EXPECT_LE(max_rel_error(loss, {{"x", x}, {"w", w}, {"b", b}}), kGradTol);
}

TEST_P(OpGrad, MaxPool) {
  const auto seed = static_cast<std::uint64_t>(GetParam());
  auto x = leaf(spaced_tensor({2, 2, 5, 5}, seed));
  auto loss = [&](Graph<double>& g) { return probe_loss(g, max_pool2d(g, x, 3, 2, 1), seed); };
  EXPECT_LE(max_rel_error(loss, {{"x", x}}), kGradTol);
}

TEST_P(OpGrad, AvgPool) {
  const auto seed = static_cast<std::uint64_t>(GetParam());
  auto x = leaf(random_tensor<double>({2, 2, 5, 4}, seed));
  auto loss = [&](Graph<double>& g) { return probe_loss(g, avg_pool2d(g, x, 3, 1, 1), seed); };
  EXPECT_LE(max_rel_error(loss, {{"x", x}}), kGradTol);
}

TEST_P(OpGrad, BatchNormSpatial) {
  const auto seed = static_cast<std::uint64_t>(GetParam());
  auto x = leaf(random_tensor<double>({2, 4, 3, 3}, seed));
  auto gamma = leaf(random_tensor<double>({4}, seed + 1, 0.5, 1.5));
  auto beta = leaf(random_tensor<double>({4}, seed + 2));
  Tensor<double> rm({4}), rv({4}, 1.0);
  auto loss = [&](Graph<double>& g) {
    g.update_running_stats = false;
    return probe_loss(g, batch_norm(g, x, gamma, beta, rm, rv), seed);
  };
  EXPECT_LE(max_rel_error(loss, {{"x", x}, {"gamma", gamma}, {"beta", beta}}), kGradTol);
}

TEST_P(OpGrad, BatchNormFlat) {
  const auto seed = static_cast<std::uint64_t>(GetParam());
  auto x = leaf(random_tensor<double>({5, 3}, seed));
  auto gamma = leaf(random_tensor<double>({3}, seed + 1, 0.5, 1.5));
  auto beta = leaf(random_tensor<double>({3}, seed + 2));
  Tensor<double> rm({3}), rv({3}, 1.0);
  auto loss = [&](Graph<double>& g) {
    g.update_running_stats = false;
    return probe_loss(g, batch_norm(g, x, gamma, beta, rm, rv), seed);
  };
  EXPECT_LE(max_rel_error(loss, {{"x", x}, {"gamma", gamma}, {"beta", beta}}), kGradTol);
}

TEST_P(OpGrad, BatchNormEval) {
  const auto seed = static_cast<std::uint64_t>(GetParam());
  auto x = leaf(random_tensor<double>({2, 3, 2, 2}, seed));
  auto gamma = leaf(random_tensor<double>({3}, seed + 1, 0.5, 1.5));
  auto beta = leaf(random_tensor<double>({3}, seed + 2));
  Tensor<double> rm = random_tensor<double>({3}, seed + 3), rv = random_tensor<double>({3}, seed + 4, 0.5, 2.0);
  auto loss = [&](Graph<double>& g) {
    g.mode = Mode::eval;
    return probe_loss(g, batch_norm(g, x, gamma, beta, rm, rv), seed);
  };
  EXPECT_LE(max_rel_error(loss, {{"x", x}, {"gamma", gamma}, {"beta", beta}}), kGradTol);
}

TEST_P(OpGrad, Relu) {
  const auto seed = static_cast<std::uint64_t>(GetParam());
  auto x = leaf(kink_free_tensor<double>({3, 7}, seed));
  auto loss = [&](Graph<double>& g) { return probe_loss(g, relu(g, x), seed); };
  EXPECT_LE(max_rel_error(loss, {{"x", x}}), kGradTol);
}

TEST_P(OpGrad, Dropout) {
  const auto seed = static_cast<std::uint64_t>(GetParam());
  auto x = leaf(random_tensor<double>({4, 6}, seed));
  auto loss = [&](Graph<double>& g) {
    g.rng.seed(seed);
    return probe_loss(g, dropout(g, x, 0.3), seed);
  };
  EXPECT_LE(max_rel_error(loss, {{"x", x}}), kGradTol);
}

TEST_P(OpGrad, FullyConnected) {
  const auto seed = static_cast<std::uint64_t>(GetParam());
  auto x = leaf(random_tensor<double>({4, 5}, seed));
  auto w = leaf(random_tensor<double>({3, 5}, seed + 1));
  auto b = leaf(random_tensor<double>({3}, seed + 2));
  auto loss = [&](Graph<double>& g) { return probe_loss(g, fully_connected(g, x, w, b), seed); };
  EXPECT_LE(max_rel_error(loss, {{"x", x}, {"w", w}, {"b", b}}), kGradTol);
}

TEST_P(OpGrad, SoftmaxCrossEntropy) {
  const auto seed = static_cast<std::uint64_t>(GetParam());
  auto z = leaf(random_tensor<double>({5, 4}, seed, -3, 3));
  std::vector<int> labels{0, 3, 1, 2, 3};
  auto loss = [&](Graph<double>& g) { return softmax_cross_entropy(g, z, std::span<const int>(labels)); };
  EXPECT_LE(max_rel_error(loss, {{"z", z}}), kGradTol);
}

TEST_P(OpGrad, ElementwiseArithmetic) {
  const auto seed = static_cast<std::uint64_t>(GetParam());
  auto a = leaf(random_tensor<double>({3, 4}, seed));
  auto b = leaf(random_tensor<double>({3, 4}, seed + 1));
  auto loss = [&](Graph<double>& g) {
    auto d = sub(g, a, b);
    return probe_loss(g, add(g, mul(g, d, d), scale(g, a, 0.7)), seed);
  };
  EXPECT_LE(max_rel_error(loss, {{"a", a}, {"b", b}}), kGradTol);
}

TEST_P(OpGrad, ChannelConcatScaleSelectFlatten) {
  const auto seed = static_cast<std::uint64_t>(GetParam());
  auto f1 = leaf(random_tensor<double>({2, 3, 2, 3}, seed));
  auto f2 = leaf(random_tensor<double>({2, 2, 2, 3}, seed + 1));
  auto alpha = leaf(random_tensor<double>({2, 5}, seed + 2));
  auto loss = [&](Graph<double>& g) {
    const Var<double> parts[] = {f1, f2};
    auto cat = channel_concat(g, std::span<const Var<double>>(parts));
    auto s = channel_scale(g, cat, select_row(g, alpha, 1));
    return probe_loss(g, flatten(g, s), seed);
  };
  EXPECT_LE(max_rel_error(loss, {{"f1", f1}, {"f2", f2}, {"alpha", alpha}}), kGradTol);
}

INSTANTIATE_TEST_SUITE_P(Seeds, OpGrad, ::testing::Range(1, kSeeds + 1));

// ---- accumulation ----------------------------------------------------------

TEST(Tape, SharedParameterGradientIsSumOfSites) {
  Parameter<double> w("w", random_tensor<double>({3, 4}, 1), ParamKind::weight, 4);
  Parameter<double> b("b", random_tensor<double>({3}, 2), ParamKind::bias);
  const auto x1 = constant(random_tensor<double>({2, 4}, 3));
  const auto x2 = constant(random_tensor<double>({2, 4}, 4));
  auto site = [&](Graph<double>& g, const Var<double>& x, std::uint64_t s) {
    return probe_loss(g, fully_connected(g, x, w.var(), b.var()), s);
  };
  auto both = [&](Graph<double>& g) { return add(g, site(g, x1, 10), site(g, x2, 20)); };

  std::vector<Tensor<double>> site_grads;
  for (int i = 0; i < 2; ++i) {
    w.zero_grad();
    b.zero_grad();
    Graph<double> g;
    g.tape.backward(site(g, i == 0 ? x1 : x2, i == 0 ? 10 : 20));
    site_grads.push_back(w.grad());
  }
  w.zero_grad();
  b.zero_grad();
  Graph<double> g;
  g.tape.backward(both(g));
  for (std::size_t i = 0; i < w.grad().numel(); ++i)
    EXPECT_NEAR(w.grad()[i], site_grads[0][i] + site_grads[1][i], 1e-12);
  EXPECT_LE(max_rel_error(both, {target_of(w), target_of(b)}), kGradTol);
}

TEST(Tape, BackwardTwiceDoublesGradientsExactly) {
  Parameter<double> w("w", random_tensor<double>({3, 5}, 1), ParamKind::weight, 5);
  Parameter<double> b("b", random_tensor<double>({3}, 2), ParamKind::bias);
  const auto x = constant(random_tensor<double>({4, 5}, 3));
  Graph<double> g;
  auto loss = probe_loss(g, relu(g, fully_connected(g, x, w.var(), b.var())), 5);
  w.zero_grad();
  for (double v : w.grad().data()) ASSERT_EQ(v, 0.0);
  g.tape.backward(loss);
  const Tensor<double> once = w.grad();
  g.tape.backward(loss);
  for (std::size_t i = 0; i < once.numel(); ++i) EXPECT_EQ(w.grad()[i], 2.0 * once[i]);
}

TEST(Threads, ConvolutionMatchesAcrossThreadCounts) {
  const auto xt = random_tensor<float>({6, 8, 12, 10}, 1);
  const auto wt = random_tensor<float>({16, 8, 3, 3}, 2);
  const auto bt = random_tensor<float>({16}, 3);
  auto run = [&](std::size_t threads) {
    set_num_threads(threads);
    Graph<float> g;
    auto x = leaf(xt);
    auto w = leaf(wt);
    auto y = conv2d(g, x, w, constant(bt), {1, 1, 1});
    g.tape.backward(probe_loss(g, y, 4));
    return std::make_tuple(y->value, x->grad, w->grad);
  };
  const auto [y1, dx1, dw1] = run(1);
  const auto [y4, dx4, dw4] = run(4);
  set_num_threads(1);
  auto close = [](const Tensor<float>& a, const Tensor<float>& b) {
    for (std::size_t i = 0; i < a.numel(); ++i)
      if (std::abs(a[i] - b[i]) > 1e-6 * std::max(1.0f, std::abs(a[i]))) return false;
    return true;
  };
  EXPECT_TRUE(bitwise_equal(y1, y4));
  EXPECT_TRUE(bitwise_equal(dx1, dx4));
  EXPECT_TRUE(close(dw1, dw4));
}
