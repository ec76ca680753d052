#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "dvad/adam.hpp"
#include "dvad/ops.hpp"
#include "dvad/tensor.hpp"
#include "grad_check.hpp"

using namespace dvad;
using dvad::testing::check_gradients;
using dvad::testing::probe;
using dvad::testing::random_tensor;

namespace {

// Nested-loop cross-correlation oracle.
std::vector<double> conv_oracle(const Tensor<double>& x, const Tensor<double>& w, std::size_t stride,
                                std::size_t pad, std::size_t groups) {
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t O = w.dim(0), Cg = w.dim(1), KH = w.dim(2), KW = w.dim(3);
  const std::size_t Ho = (H + 2 * pad - KH) / stride + 1, Wo = (W + 2 * pad - KW) / stride + 1;
  const std::size_t Og = O / groups;
  std::vector<double> y(N * O * Ho * Wo, 0.0);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t o = 0; o < O; ++o) {
      const std::size_t g = o / Og;
      for (std::size_t oy = 0; oy < Ho; ++oy)
        for (std::size_t ox = 0; ox < Wo; ++ox) {
          double s = 0.0;
          for (std::size_t c = 0; c < Cg; ++c)
            for (std::size_t i = 0; i < KH; ++i)
              for (std::size_t j = 0; j < KW; ++j) {
                const long iy = static_cast<long>(oy * stride + i) - static_cast<long>(pad);
                const long ix = static_cast<long>(ox * stride + j) - static_cast<long>(pad);
                if (iy < 0 || ix < 0 || iy >= static_cast<long>(H) || ix >= static_cast<long>(W)) continue;
                s += x.data()[((n * C + g * Cg + c) * H + iy) * W + ix] * w.data()[((o * Cg + c) * KH + i) * KW + j];
              }
          y[((n * O + o) * Ho + oy) * Wo + ox] = s;
        }
    }
  return y;
}

}  // namespace

TEST(Conv2d, IdentityKernel) {
  Tensor<double> x(Shape{1, 1, 3, 3}, std::vector<double>{1, 2, 3, 4, 5, 6, 7, 8, 9});
  Tensor<double> w(Shape{1, 1, 1, 1}, 1.0);
  auto y = conv2d(x, w, nullptr, 1, 0);
  ASSERT_EQ(y.shape(), (Shape{1, 1, 3, 3}));
  for (std::size_t i = 0; i < 9; ++i) EXPECT_EQ(y[i], x[i]);
}

TEST(Conv2d, RampWindowSums) {
  std::vector<double> ramp(16);
  for (std::size_t i = 0; i < 16; ++i) ramp[i] = static_cast<double>(i);
  Tensor<double> x(Shape{1, 1, 4, 4}, ramp);
  Tensor<double> w(Shape{1, 1, 3, 3}, 1.0);
  auto y = conv2d(x, w, nullptr, 1, 0);
  ASSERT_EQ(y.shape(), (Shape{1, 1, 2, 2}));
  const auto oracle = conv_oracle(x, w, 1, 0, 1);
  // 3x3 window sums of the 0..15 ramp: 45, 54, 81, 90.
  EXPECT_EQ(oracle, (std::vector<double>{45, 54, 81, 90}));
  for (std::size_t i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ(y[i], oracle[i]);
}

TEST(Conv2d, GroupsEqualIndependentChannels) {
  Philox rng(3);
  auto x = random_tensor({2, 2, 5, 5}, rng, -1, 1, false);
  auto w = random_tensor({2, 1, 3, 3}, rng, -1, 1, false);
  auto y = conv2d(x, w, nullptr, 1, 1, 2);
  for (std::size_t c = 0; c < 2; ++c) {
    Tensor<double> xc(Shape{2, 1, 5, 5});
    Tensor<double> wc(Shape{1, 1, 3, 3});
    for (std::size_t n = 0; n < 2; ++n)
      for (std::size_t i = 0; i < 25; ++i) xc.data_mut()[n * 25 + i] = x[(n * 2 + c) * 25 + i];
    for (std::size_t i = 0; i < 9; ++i) wc.data_mut()[i] = w[c * 9 + i];
    auto yc = conv2d(xc, wc, nullptr, 1, 1);
    for (std::size_t n = 0; n < 2; ++n)
      for (std::size_t i = 0; i < 25; ++i) EXPECT_DOUBLE_EQ(y[(n * 2 + c) * 25 + i], yc[n * 25 + i]);
  }
}

TEST(Conv2d, MatchesOracleOnRandomConfigurations) {
  Philox rng(11);
  struct Case { std::size_t c, o, k, s, p, g; };
  for (auto cs : {Case{3, 4, 3, 1, 1, 1}, Case{4, 6, 3, 2, 1, 2}, Case{4, 4, 3, 2, 1, 4}, Case{2, 5, 1, 1, 0, 1},
                  Case{6, 3, 1, 2, 0, 1}, Case{3, 3, 5, 1, 2, 3}}) {
    auto x = random_tensor({2, cs.c, 7, 6}, rng, -1, 1, false);
    auto w = random_tensor({cs.o, cs.c / cs.g, cs.k, cs.k}, rng, -1, 1, false);
    auto b = random_tensor({cs.o}, rng, -1, 1, false);
    auto y = conv2d(x, w, &b, cs.s, cs.p, cs.g);
    auto oracle = conv_oracle(x, w, cs.s, cs.p, cs.g);
    const std::size_t per = y.numel() / (2 * cs.o);
    for (std::size_t i = 0; i < oracle.size(); ++i) EXPECT_NEAR(y[i], oracle[i] + b[(i / per) % cs.o], 1e-12);
  }
}

TEST(Conv2d, ShapeErrorsNameAxes) {
  Tensor<double> x(Shape{1, 3, 4, 4});
  Tensor<double> w(Shape{2, 2, 3, 3});
  try {
    conv2d(x, w, nullptr, 1, 1);
    FAIL();
  } catch (const DimensionError& e) {
    EXPECT_NE(std::string(e.what()).find("axis 1"), std::string::npos);
  }
  EXPECT_THROW(conv2d(x, Tensor<double>(Shape{2, 1, 3, 3}), nullptr, 1, 1, 2), DimensionError);
  EXPECT_THROW(conv2d(x, Tensor<double>(Shape{2, 3, 7, 7}), nullptr, 1, 1), DimensionError);
}

TEST(Conv2d, DepthwiseThenPointwiseMatchesComposition) {
  Philox rng(5);
  for (int trial = 0; trial < 5; ++trial) {
    auto x = random_tensor({2, 3, 6, 6}, rng, -1, 1, false);
    auto dw = random_tensor({3, 1, 3, 3}, rng, -1, 1, false);
    auto pw = random_tensor({4, 3, 1, 1}, rng, -1, 1, false);
    auto y = conv2d(conv2d(x, dw, nullptr, 1, 1, 3), pw, nullptr, 1, 0);
    // Composition oracle: per-channel spatial filter, then channel mixing.
    auto mid = conv_oracle(x, dw, 1, 1, 3);
    for (std::size_t n = 0; n < 2; ++n)
      for (std::size_t o = 0; o < 4; ++o)
        for (std::size_t p = 0; p < 36; ++p) {
          double s = 0.0;
          for (std::size_t c = 0; c < 3; ++c) s += pw[o * 3 + c] * mid[(n * 3 + c) * 36 + p];
          EXPECT_NEAR(y[(n * 4 + o) * 36 + p], s, 1e-12);
        }
  }
}

TEST(BatchNorm, NormalizedInputIsFixedPoint) {
  // Per-channel zero mean, unit (biased) variance.
  Tensor<double> x(Shape{2, 1, 1, 2}, std::vector<double>{1, -1, 1, -1});
  Tensor<double> g(Shape{1}, 1.0), b(Shape{1}, 0.0);
  RunningStats<double> rs{Tensor<double>(Shape{1}, 0.0), Tensor<double>(Shape{1}, 1.0)};
  auto y = batch_norm2d(x, g, b, rs, Mode::kTrain, 0.1, 1e-12);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(y[i], x[i], 1e-9);
}

TEST(BatchNorm, ConstantChannelCollapsesToBeta) {
  Tensor<double> x(Shape{3, 2, 2, 2}, 4.0);
  Tensor<double> g(Shape{2}, 2.0), b(Shape{2}, std::vector<double>{0.25, -0.5});
  RunningStats<double> rs{Tensor<double>(Shape{2}, 0.0), Tensor<double>(Shape{2}, 1.0)};
  auto y = batch_norm2d(x, g, b, rs, Mode::kTrain);
  for (std::size_t n = 0; n < 3; ++n)
    for (std::size_t c = 0; c < 2; ++c)
      for (std::size_t i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ(y[(n * 2 + c) * 4 + i], b[c]);
}

TEST(BatchNorm, RandomBatchStatistics) {
  Philox rng(17);
  auto x = random_tensor({2, 3, 4, 4}, rng, -3, 5, false);
  Tensor<double> g(Shape{3}, 1.0), b(Shape{3}, 0.0);
  RunningStats<double> rs{Tensor<double>(Shape{3}, 0.0), Tensor<double>(Shape{3}, 1.0)};
  auto y = batch_norm2d(x, g, b, rs, Mode::kTrain, 0.1, 1e-10);
  for (std::size_t c = 0; c < 3; ++c) {
    double m = 0, v = 0, xm = 0;
    for (std::size_t n = 0; n < 2; ++n)
      for (std::size_t i = 0; i < 16; ++i) {
        m += y[(n * 3 + c) * 16 + i];
        xm += x[(n * 3 + c) * 16 + i];
      }
    m /= 32;
    xm /= 32;
    for (std::size_t n = 0; n < 2; ++n)
      for (std::size_t i = 0; i < 16; ++i) v += (y[(n * 3 + c) * 16 + i] - m) * (y[(n * 3 + c) * 16 + i] - m);
    v /= 32;
    EXPECT_NEAR(m, 0.0, 1e-12);
    EXPECT_NEAR(v, 1.0, 1e-8);
    EXPECT_NEAR(rs.mean[c], 0.1 * xm, 1e-12);
  }
}

TEST(BatchNorm, EvalUsesRunningStatistics) {
  Tensor<double> x(Shape{1, 1, 1, 2}, std::vector<double>{3.0, 5.0});
  Tensor<double> g(Shape{1}, 1.0), b(Shape{1}, 0.0);
  RunningStats<double> rs{Tensor<double>(Shape{1}, 1.0), Tensor<double>(Shape{1}, 4.0)};
  auto y = batch_norm2d(x, g, b, rs, Mode::kEval, 0.1, 1e-12);
  EXPECT_NEAR(y[0], 1.0, 1e-9);
  EXPECT_NEAR(y[1], 2.0, 1e-9);
  EXPECT_DOUBLE_EQ(rs.mean[0], 1.0);
}

TEST(BatchNorm, EmptyBatchIsRejected) {
  EXPECT_THROW(Tensor<double>(Shape{0, 1, 2, 2}), DimensionError);
  Tensor<double> x(Shape{1, 2, 2, 2});
  Tensor<double> g(Shape{3}, 1.0), b(Shape{3}, 0.0);
  RunningStats<double> rs{Tensor<double>(Shape{3}), Tensor<double>(Shape{3}, 1.0)};
  EXPECT_THROW(batch_norm2d(x, g, b, rs, Mode::kTrain), DimensionError);
}

TEST(Activation, ScalarValues) {
  Tensor<double> x(Shape{3}, std::vector<double>{-1, 0, 2});
  auto r = relu(x);
  EXPECT_EQ(std::vector<double>(r.data().begin(), r.data().end()), (std::vector<double>{0, 0, 2}));
  EXPECT_DOUBLE_EQ(sigmoid(Tensor<double>::scalar(0.0)).item(), 0.5);
  auto hs = hardswish(Tensor<double>(Shape{3}, std::vector<double>{3, -3, 1}));
  EXPECT_DOUBLE_EQ(hs[0], 3.0);
  EXPECT_DOUBLE_EQ(hs[1], 0.0);
  EXPECT_DOUBLE_EQ(hs[2], 1.0 * 4.0 / 6.0);
  EXPECT_TRUE(std::isfinite(sigmoid(Tensor<double>::scalar(-1000.0)).item()));
}

TEST(Pooling, Values) {
  Tensor<double> c(Shape{1, 2, 4, 4}, 2.5);
  auto a = adaptive_avg_pool2d(c, 1, 1);
  EXPECT_DOUBLE_EQ(a[0], 2.5);
  EXPECT_DOUBLE_EQ(a[1], 2.5);
  auto m = max_pool2x2(Tensor<double>(Shape{1, 1, 2, 2}, std::vector<double>{1, 2, 3, 4}));
  EXPECT_EQ(m.shape(), (Shape{1, 1, 1, 1}));
  EXPECT_DOUBLE_EQ(m[0], 4.0);
  std::vector<double> ramp(16);
  double total = 0;
  for (std::size_t i = 0; i < 16; ++i) total += (ramp[i] = 0.5 * static_cast<double>(i) - 1.0);
  EXPECT_DOUBLE_EQ(adaptive_avg_pool2d(Tensor<double>(Shape{1, 1, 4, 4}, ramp), 1, 1)[0], total / 16.0);
  EXPECT_THROW(max_pool2x2(Tensor<double>(Shape{1, 1, 3, 4})), DimensionError);
}

TEST(Pooling, MaxTieRoutesGradientToFirst) {
  Tensor<double> x(Shape{1, 1, 2, 2}, 1.0);
  x.set_requires_grad(true);
  Tape<double> tape;
  Tensor<double> l;
  {
    TapeScope<double> s(tape);
    l = sum(max_pool2x2(x));
  }
  tape.backward(l);
  EXPECT_EQ(std::vector<double>(x.grad().begin(), x.grad().end()), (std::vector<double>{1, 0, 0, 0}));
}

TEST(Linear, Values) {
  Tensor<double> x(Shape{2, 2}, std::vector<double>{1, 2, 3, 4});
  Tensor<double> eye(Shape{2, 2}, std::vector<double>{1, 0, 0, 1});
  Tensor<double> zero(Shape{2}, 0.0);
  auto y = linear(x, eye, &zero);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ(y[i], x[i]);
  Tensor<double> x1(Shape{1, 2}, std::vector<double>{1, 2});
  Tensor<double> w(Shape{1, 2}, std::vector<double>{3, 4});
  Tensor<double> b(Shape{1}, 5.0);
  EXPECT_DOUBLE_EQ(linear(x1, w, &b).item(), 16.0);
  EXPECT_THROW(linear(x1, Tensor<double>(Shape{1, 3}), &b), DimensionError);
}

TEST(Linear, WeightGradientIsBroadcastInput) {
  Philox rng(23);
  auto x = random_tensor({3, 4}, rng, -1, 1, false);
  auto w = random_tensor({2, 4}, rng);
  auto b = random_tensor({2}, rng);
  Tape<double> tape;
  Tensor<double> l;
  {
    TapeScope<double> s(tape);
    l = sum(linear(x, w, &b));
  }
  tape.backward(l);
  for (std::size_t g = 0; g < 2; ++g)
    for (std::size_t f = 0; f < 4; ++f) {
      double col = 0;
      for (std::size_t n = 0; n < 3; ++n) col += x[n * 4 + f];
      EXPECT_NEAR(w.grad()[g * 4 + f], col, 1e-12);
    }
  auto r = check_gradients({w, b}, [&] { return sum(linear(x, w, &b)); });
  EXPECT_LT(r.max_relative_error, 1e-8);
}

TEST(Dropout, IdentityCasesAndErrors) {
  Philox rng(1);
  Tensor<double> x(Shape{10}, 2.0);
  for (Mode m : {Mode::kTrain, Mode::kEval}) {
    auto y = dropout(x, 0.0, m, &rng);
    for (std::size_t i = 0; i < 10; ++i) EXPECT_EQ(y[i], 2.0);
  }
  auto e = dropout(x, 0.5, Mode::kEval, &rng);
  for (std::size_t i = 0; i < 10; ++i) EXPECT_EQ(e[i], 2.0);
  EXPECT_THROW(dropout(x, 1.0, Mode::kTrain, &rng), std::invalid_argument);
}

TEST(Dropout, MonteCarloExpectation) {
  Philox rng(2024);
  Tensor<double> x(Shape{4}, std::vector<double>{1.0, -2.0, 0.5, 3.0});
  std::vector<double> acc(4, 0.0);
  const int trials = 10000;
  for (int t = 0; t < trials; ++t) {
    auto y = dropout(x, 0.5, Mode::kTrain, &rng);
    for (std::size_t i = 0; i < 4; ++i) acc[i] += y[i];
  }
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(acc[i] / trials, x[i], 0.02 * std::abs(x[i]));
}

TEST(Backward, SumAndAccumulation) {
  Tensor<double> x(Shape{3}, std::vector<double>{1, 2, 3});
  x.set_requires_grad(true);
  Tape<double> tape;
  Tensor<double> l;
  {
    TapeScope<double> s(tape);
    l = sum(x);
  }
  tape.backward(l);
  for (double g : x.grad()) EXPECT_EQ(g, 1.0);

  Tensor<double> y = Tensor<double>::scalar(1.5);
  y.set_requires_grad(true);
  Tape<double> tape2;
  {
    TapeScope<double> s(tape2);
    l = add(y, y);
  }
  tape2.backward(l);
  EXPECT_EQ(y.grad()[0], 2.0);
}

TEST(Backward, Errors) {
  Tensor<double> x(Shape{2}, 1.0);
  x.set_requires_grad(true);
  Tape<double> tape;
  Tensor<double> y, l;
  {
    TapeScope<double> s(tape);
    y = scale(x, 2.0);
    l = sum(y);
  }
  EXPECT_THROW(tape.backward(y), DimensionError);
  tape.backward(l);
  EXPECT_THROW(tape.backward(l), std::logic_error);
  {
    TapeScope<double> s(tape);
    l = sum(scale(x, 3.0));
  }
  EXPECT_NO_THROW(tape.backward(l));
}

TEST(Backward, ReverseOrderReplay) {
  Tape<double> tape;
  std::vector<int> order;
  tape.record([&] { order.push_back(1); });
  tape.record([&] { order.push_back(2); });
  tape.record([&] { order.push_back(3); });
  Tensor<double> l = Tensor<double>::scalar(0.0);
  l.set_requires_grad(true);
  tape.backward(l);
  EXPECT_EQ(order, (std::vector<int>{3, 2, 1}));
}

TEST(Backward, NoRecordingWithoutTapeOrGrad) {
  Tensor<double> x(Shape{2}, 1.0);
  x.set_requires_grad(true);
  auto y = scale(x, 2.0);
  EXPECT_FALSE(y.requires_grad());
  Tape<double> tape;
  TapeScope<double> s(tape);
  auto z = scale(Tensor<double>(Shape{2}, 1.0), 2.0);
  EXPECT_EQ(tape.size(), 0u);
  EXPECT_FALSE(z.requires_grad());
}

TEST(Adam, ZeroGradientKeepsParameters) {
  std::vector<double> p{1.0, -2.0};
  std::vector<double> g{0.0, 0.0};
  AdamMoments<double> st;
  adam_step<double>(p, g, st, AdamOptions{}, 1);
  EXPECT_EQ(p, (std::vector<double>{1.0, -2.0}));
}

TEST(Adam, FirstStepScalar) {
  std::vector<double> p{0.0};
  std::vector<double> g{1.0};
  AdamMoments<double> st;
  adam_step<double>(p, g, st, AdamOptions{0.001, 0.9, 0.999, 1e-8}, 1);
  EXPECT_NEAR(p[0], -0.001 * (1.0 / (1.0 + 1e-8)), 1e-18);
}

TEST(Adam, TwoStepsOnQuadraticMatchScalarRecomputation) {
  // f(p) = (p - 3)^2, gradient 2(p - 3).
  std::vector<double> p{0.5};
  AdamMoments<double> st;
  const AdamOptions opt{0.01, 0.9, 0.999, 1e-8};
  double q = 0.5, m = 0, v = 0;
  for (std::uint64_t t = 1; t <= 2; ++t) {
    std::vector<double> g{2.0 * (p[0] - 3.0)};
    adam_step<double>(p, g, st, opt, t);
    const double gq = 2.0 * (q - 3.0);
    m = 0.9 * m + 0.1 * gq;
    v = 0.999 * v + 0.001 * gq * gq;
    const double mh = m / (1.0 - std::pow(0.9, static_cast<double>(t)));
    const double vh = v / (1.0 - std::pow(0.999, static_cast<double>(t)));
    q -= 0.01 * mh / (std::sqrt(vh) + 1e-8);
    EXPECT_EQ(p[0], q);
  }
}

TEST(Determinism, SameSeedSameOutputsAndGradients) {
  auto run = [] {
    Philox rng(77);
    auto x = random_tensor({2, 3, 6, 6}, rng);
    auto w = random_tensor({4, 3, 3, 3}, rng);
    Tape<double> tape;
    Tensor<double> l;
    Philox drop(5);
    {
      TapeScope<double> s(tape);
      l = sum(square(dropout(relu(conv2d(x, w, nullptr, 1, 1)), 0.3, Mode::kTrain, &drop)));
    }
    tape.backward(l);
    std::vector<double> out(w.grad().begin(), w.grad().end());
    out.push_back(l.item());
    return out;
  };
  EXPECT_EQ(run(), run());
}

TEST(Philox, BulkDrawsMatchSingleDraws) {
  for (std::size_t skip : {0u, 1u, 3u, 4u, 6u}) {
    Philox a(9, 2), b(9, 2);
    for (std::size_t i = 0; i < skip; ++i) a.next_u32(), b.next_u32();
    std::vector<std::uint32_t> bulk;
    a.for_each_u32(23, [&](std::uint32_t u) { bulk.push_back(u); });
    for (std::size_t i = 0; i < bulk.size(); ++i) EXPECT_EQ(bulk[i], b.next_u32()) << skip << " " << i;
    EXPECT_EQ(a.next_u32(), b.next_u32());
  }
}

TEST(Philox, ForksDifferAndReplay) {
  Philox root(5);
  EXPECT_NE(root.fork(0).next_u64(), root.fork(1).next_u64());
  EXPECT_EQ(root.fork(3).next_u64(), Philox(5).fork(3).next_u64());
}
