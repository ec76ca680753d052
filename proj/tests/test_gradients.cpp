#include <gtest/gtest.h>

#include "grad_suite.hpp"

namespace dvad::testing {
namespace {

class GradientSuite : public ::testing::TestWithParam<std::size_t> {};

TEST_P(GradientSuite, MatchesCentralDifferences) {
  const auto cases = gradient_cases();
  const auto& gc = cases.at(GetParam());
  Philox root(77, GetParam());
  for (std::size_t i = 0; i < 20; ++i) {
    Philox r = root.fork(i);
    auto inst = gc.make(r);
    const auto res = check_gradients(inst.inputs, inst.loss);
    EXPECT_LT(res.max_relative_error, 1e-4) << gc.name << " instance " << i;
  }
}

INSTANTIATE_TEST_SUITE_P(AllCases, GradientSuite, ::testing::Range<std::size_t>(0, gradient_cases().size()),
                         [](const ::testing::TestParamInfo<std::size_t>& info) {
                           return gradient_cases().at(info.param).name;
                         });

// Float32 kernels stay within the looser single-precision bound.
TEST(GradientFloat, ConvAndLossesWithinSinglePrecisionBound) {
  Philox r(5);
  Tensor<float> x(Shape{2, 2, 4, 4}), w(Shape{3, 2, 3, 3});
  for (auto& v : x.data_mut()) v = static_cast<float>(r.uniform(-1, 1));
  for (auto& v : w.data_mut()) v = static_cast<float>(r.uniform(-1, 1));
  w.set_requires_grad(true);
  const std::vector<float> y{1.f, 0.f};
  // The pooled map has 3 channels; a fixed mix reduces them to one logit per sample.
  auto loss2 = [&] {
    auto p = flatten(adaptive_avg_pool2d(relu(conv2d(x, w, nullptr, 1, 1)), 1, 1));
    Tensor<float> mix(Shape{1, 3}, std::vector<float>{0.5f, -1.f, 2.f});
    return bce_with_logits(linear(p, mix, nullptr), std::span<const float>(y));
  };
  Tape<float> tape;
  Tensor<float> l;
  {
    TapeScope<float> scope(tape);
    l = loss2();
  }
  tape.backward(l);
  std::vector<float> analytic(w.grad().begin(), w.grad().end());
  double diff2 = 0, a2 = 0, n2 = 0;
  const float h = 1e-2f;
  for (std::size_t i = 0; i < w.numel(); ++i) {
    const float saved = w.data()[i];
    w.data_mut()[i] = saved + h;
    const double fp = loss2().item();
    w.data_mut()[i] = saved - h;
    const double fm = loss2().item();
    w.data_mut()[i] = saved;
    const double num = (fp - fm) / (2.0 * h);
    diff2 += (analytic[i] - num) * (analytic[i] - num);
    a2 += analytic[i] * analytic[i];
    n2 += num * num;
  }
  EXPECT_LT(std::sqrt(diff2) / (std::sqrt(a2) + std::sqrt(n2)), 1e-2);
}

}  // namespace
}  // namespace dvad::testing
