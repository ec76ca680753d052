#include <gtest/gtest.h>

#include <cmath>

#include "dvad/distill/trainer.hpp"
#include "loss_oracles.hpp"

namespace dvad {
namespace {

using testing::column;
using testing::points_tensor;

TEST(LossOracles, AllHandSetCasesMatch) {
  for (const auto& c : testing::loss_oracle_checks()) {
    EXPECT_NEAR(c.got, c.want, 1e-10) << c.name;
  }
}

TEST(BceWithLogits, HugeLogitIsFinite) {
  const std::vector<double> y1{1.0}, y0{0.0};
  const double a = bce_with_logits(column({1000.0}), std::span<const double>(y1)).item();
  const double b = bce_with_logits(column({1000.0}), std::span<const double>(y0)).item();
  EXPECT_TRUE(std::isfinite(a));
  EXPECT_NEAR(b, 1000.0, 1e-9);
  const std::vector<float> yf{1.f};
  EXPECT_TRUE(std::isfinite(bce_with_logits(Tensor<float>(Shape{1, 1}, 1000.f), std::span<const float>(yf)).item()));
}

TEST(SoftTargetLoss, NonNegativeOverRandomPairs) {
  Philox rng(11);
  for (int i = 0; i < 10000; ++i) {
    const double zs = rng.uniform(-30, 30), zt = rng.uniform(-30, 30), T = rng.uniform(0.1, 10);
    EXPECT_GE(soft_target_loss(column({zs}), column({zt}), T).item(), 0.0);
  }
}

TEST(SoftTargetLoss, RejectsNonPositiveTemperature) {
  EXPECT_THROW(soft_target_loss(column({0.0}), column({0.0}), 0.0), std::invalid_argument);
}

TEST(FeatureLoss, DoublingDifferenceQuadruples) {
  Philox rng(3);
  Tensor<double> h(Shape{2, 3, 2, 2}), g(Shape{2, 3, 2, 2}), g2(Shape{2, 3, 2, 2});
  for (std::size_t i = 0; i < h.numel(); ++i) {
    h.data_mut()[i] = rng.uniform(-1, 1);
    const double d = rng.uniform(-1, 1);
    g.data_mut()[i] = h.data()[i] + d;
    g2.data_mut()[i] = h.data()[i] + 2 * d;
  }
  EXPECT_NEAR(feature_loss(g2, h).item(), 4.0 * feature_loss(g, h).item(), 1e-12);
}

TEST(FeatureLoss, ChannelMismatchNamesShapes) {
  Tensor<double> a(Shape{1, 2, 2, 2}), b(Shape{1, 3, 2, 2});
  EXPECT_THROW(feature_loss(a, b), DimensionError);
}

TEST(RkdLosses, BatchTooSmall) {
  Tensor<double> one(Shape{1, 3}, 1.0), two(Shape{2, 3}, 1.0);
  EXPECT_THROW(rkd_distance_loss(one, one), DimensionError);
  EXPECT_NO_THROW(rkd_distance_loss(two, two));
  EXPECT_THROW(rkd_angle_loss(two, two), DimensionError);
}

TEST(RkdLosses, NonNegativeAndTeacherUntouched) {
  Philox rng(8);
  for (int trial = 0; trial < 50; ++trial) {
    Tensor<double> s(Shape{5, 4}), t(Shape{5, 6});
    for (auto& v : s.data_mut()) v = rng.uniform(-2, 2);
    for (auto& v : t.data_mut()) v = rng.uniform(-2, 2);
    s.set_requires_grad(true);
    t.set_requires_grad(true);
    Tape<double> tape;
    Tensor<double> l;
    {
      TapeScope<double> scope(tape);
      l = add(rkd_distance_loss(s, t), rkd_angle_loss(s, t));
    }
    EXPECT_GE(l.item(), 0.0);
    tape.backward(l);
    EXPECT_TRUE(s.has_grad());
    EXPECT_FALSE(t.has_grad());
  }
}

TEST(CombinedLoss, LinearInAlpha) {
  DistillConfig cfg;
  cfg.method = Method::kRelational;
  Philox rng(4);
  DistillTerms<double> s, t;
  s.logits = column({0.3, -0.2, 1.1, 0.4});
  t.logits = column({1.0, -1.0, 2.0, 0.0});
  s.embedding = Tensor<double>(Shape{4, 3});
  t.embedding = Tensor<double>(Shape{4, 5});
  for (auto& v : s.embedding.data_mut()) v = rng.uniform(-1, 1);
  for (auto& v : t.embedding.data_mut()) v = rng.uniform(-1, 1);
  const std::vector<double> y{1, 0, 1, 0};
  auto at = [&](double a) {
    cfg.alpha = a;
    return combined_loss(cfg, s, t, std::span<const double>(y)).item();
  };
  const double l0 = at(0.0), l1 = at(1.0);
  for (double a : {0.1, 0.2, 0.5, 0.9}) EXPECT_NEAR(at(a), (1 - a) * l0 + a * l1, 1e-12);
  cfg.invert_alpha = true;
  EXPECT_NEAR(at(0.2), 0.8 * l1 + 0.2 * l0, 1e-12);
}

TEST(CombinedLoss, MissingFeatureIsConfigError) {
  DistillConfig cfg;
  cfg.method = Method::kFeature;
  DistillTerms<double> s{column({0.0}), {}, {}}, t{column({0.0}), {}, {}};
  const std::vector<double> y{1.0};
  EXPECT_THROW(combined_loss(cfg, s, t, std::span<const double>(y)), ConfigError);
}

TEST(DistillConfig, DefaultsAndValidation) {
  DistillConfig c;
  EXPECT_EQ(c.temperature, 5.0);
  EXPECT_EQ(c.alpha, 0.2);
  EXPECT_EQ(c.lr, 1e-3);
  EXPECT_EQ(c.batch_size, 32u);
  EXPECT_EQ(c.max_epochs, 50u);
  EXPECT_EQ(c.patience, 3u);
  EXPECT_THROW(distill_config_from_json({{"temperature", 0.0}}), ConfigError);
  EXPECT_THROW(distill_config_from_json({{"alpha", 1.5}}), ConfigError);
  EXPECT_THROW(distill_config_from_json({{"patience", 0}}), ConfigError);
  EXPECT_THROW(parse_method("logits"), ConfigError);
  const auto round = distill_config_from_json(to_json(DistillConfig{Method::kFeature, 3.0, 0.4}));
  EXPECT_EQ(round.method, Method::kFeature);
  EXPECT_EQ(round.temperature, 3.0);
}

TEST(EarlyStopping, ScriptedTraceStopsAfterFifthEpochAndRestoresSecond) {
  const std::vector<double> val{1.0, 0.9, 0.95, 0.96, 0.97, 0.5, 0.4};
  std::size_t saved = 0, restored = 0;
  std::size_t current = 0;
  auto r = run_epoch_loop(
      50, 3, [&](std::size_t e) { current = e; return std::pair{0.0, val.at(e - 1)}; },
      [&] { saved = current; }, [&] { restored = saved; });
  ASSERT_EQ(r.log.size(), 5u);
  EXPECT_TRUE(r.log.back().stopped);
  EXPECT_EQ(r.best_epoch, 2u);
  EXPECT_EQ(restored, 2u);
  EXPECT_DOUBLE_EQ(r.best_val_loss, 0.9);
}

TEST(EarlyStopping, StrictlyDecreasingRunsAllEpochs) {
  auto r = run_epoch_loop(
      50, 3, [](std::size_t e) { return std::pair{0.0, 1.0 / static_cast<double>(e)}; }, [] {}, [] {});
  EXPECT_EQ(r.log.size(), 50u);
  EXPECT_EQ(r.best_epoch, 50u);
}

TEST(EarlyStopping, TiesAreNotImprovement) {
  EarlyStopping s(2);
  EXPECT_TRUE(s.observe(1.0));
  EXPECT_FALSE(s.observe(1.0));
  EXPECT_FALSE(s.should_stop());
  EXPECT_FALSE(s.observe(1.0));
  EXPECT_TRUE(s.should_stop());
}

TEST(Batches, TrailingRemainderMergedBelowMinimum) {
  auto b = make_batches(34, 32, 3, nullptr);
  ASSERT_EQ(b.size(), 1u);
  EXPECT_EQ(b[0].size(), 34u);
  b = make_batches(36, 32, 3, nullptr);
  ASSERT_EQ(b.size(), 2u);
  EXPECT_EQ(b[1].size(), 4u);
  EXPECT_THROW(make_batches(0, 32, 1, nullptr), DataError);
  EXPECT_THROW(make_batches(2, 32, 3, nullptr), DataError);
}

// ---------------------------------------------------------------------------
// End-to-end on a tiny separable problem.

ModelConfig tiny_teacher() {
  nlohmann::json j = {{"name", "tiny_teacher"},
                      {"role", "teacher"},
                      {"input_shape", {1, 8, 8}},
                      {"layers",
                       {{{"kind", "conv"}, {"in_channels", 1}, {"out_channels", 4}, {"bias", true}},
                        {{"kind", "pool"}},
                        {{"kind", "conv"}, {"in_channels", 4}, {"out_channels", 8}, {"bias", true}},
                        {{"kind", "pool"}},
                        {{"kind", "flatten"}},
                        {{"kind", "linear"}, {"in_channels", 32}, {"out_channels", 8}, {"activation", "relu"}},
                        {{"kind", "dropout"}, {"dropout_p", 0.5}},
                        {{"kind", "linear"}, {"in_channels", 8}, {"out_channels", 1}}}}};
  return model_config_from_json(j);
}

ModelConfig tiny_student() {
  nlohmann::json j = {
      {"name", "tiny_student"},
      {"role", "student"},
      {"input_shape", {1, 8, 8}},
      {"layers",
       {{{"kind", "conv"}, {"in_channels", 1}, {"out_channels", 4}, {"stride", 2}},
        {{"kind", "bneck"}, {"in_channels", 4}, {"out_channels", 4}, {"expansion_ratio", 2.0}, {"se", true}},
        {{"kind", "bneck"}, {"in_channels", 4}, {"out_channels", 6}, {"expansion_ratio", 2.0}, {"stride", 2}},
        {{"kind", "conv"}, {"in_channels", 6}, {"out_channels", 8}, {"kernel", 1}},
        {{"kind", "adaptive_pool"}},
        {{"kind", "pointwise"}, {"in_channels", 8}, {"out_channels", 8}, {"activation", "relu"}},
        {{"kind", "pointwise"}, {"in_channels", 8}, {"out_channels", 1}},
        {{"kind", "flatten"}}}}};
  return model_config_from_json(j);
}

// Label 1: bright upper half. Label 0: bright lower half. Plus noise.
SpectrogramSet tiny_data(std::size_t n, std::uint64_t seed) {
  SpectrogramSet d;
  d.sample_shape = {1, 8, 8};
  Philox rng(seed);
  for (std::size_t i = 0; i < n; ++i) {
    const float label = static_cast<float>(i % 2);
    std::vector<float> x(64);
    for (std::size_t p = 0; p < 64; ++p) {
      const bool upper = p < 32;
      x[p] = static_cast<float>(rng.uniform(0, 0.3)) + ((upper == (label == 1.f)) ? 0.6f : 0.f);
    }
    d.add(x, label);
  }
  return d;
}

DistillConfig fast_cfg(Method m) {
  DistillConfig c;
  c.method = m;
  c.batch_size = 8;
  c.max_epochs = 3;
  c.lr = 3e-3;
  c.seed = 5;
  c.hint_layer = "conv2";
  return c;
}

TEST(Train, TeacherLearnsAndLogIsBounded) {
  auto train_set = tiny_data(64, 1), val_set = tiny_data(32, 2);
  Model<float> teacher(tiny_teacher(), 3);
  auto cfg = fast_cfg(Method::kNone);
  cfg.max_epochs = 8;
  auto r = train(teacher, train_set, val_set, cfg);
  ASSERT_FALSE(r.log.empty());
  EXPECT_LE(r.log.size(), 8u);
  EXPECT_LT(r.best_val_loss, r.log.front().val_loss + 1e-12);
  double min_val = 1e300;
  for (const auto& e : r.log) min_val = std::min(min_val, e.val_loss);
  EXPECT_DOUBLE_EQ(r.best_val_loss, min_val);
}

TEST(Train, EmptySplitAndTeacherMismatchAreErrors) {
  Model<float> student(tiny_student(), 1);
  Model<float> teacher(tiny_teacher(), 1);
  SpectrogramSet empty;
  empty.sample_shape = {1, 8, 8};
  auto data = tiny_data(8, 1);
  EXPECT_THROW(train(student, empty, data, fast_cfg(Method::kNone)), DataError);
  EXPECT_THROW(train(student, data, data, fast_cfg(Method::kResponse)), ConfigError);
  EXPECT_THROW(train(student, data, data, fast_cfg(Method::kNone), &teacher), ConfigError);
  auto bad = fast_cfg(Method::kFeature);
  bad.hint_layer = "conv9";
  EXPECT_THROW(train(student, data, data, bad, &teacher), ConfigError);
}

class DistillMethods : public ::testing::TestWithParam<Method> {};

TEST_P(DistillMethods, DeterministicAndTeacherFrozen) {
  auto train_set = tiny_data(40, 1), val_set = tiny_data(16, 2);
  Model<float> teacher(tiny_teacher(), 3);
  train(teacher, train_set, val_set, fast_cfg(Method::kNone));
  const auto teacher_before = teacher.snapshot();
  teacher.zero_grad();
  teacher.set_requires_grad(false);

  Model<float> a(tiny_student(), 9), b(tiny_student(), 9);
  auto cfg = fast_cfg(GetParam());
  auto ra = train(a, train_set, val_set, cfg, &teacher);
  auto rb = train(b, train_set, val_set, cfg, &teacher);
  EXPECT_EQ(a.snapshot(), b.snapshot());
  ASSERT_EQ(ra.log.size(), rb.log.size());
  for (std::size_t i = 0; i < ra.log.size(); ++i) EXPECT_EQ(ra.log[i].val_loss, rb.log[i].val_loss);
  EXPECT_EQ(teacher.snapshot(), teacher_before);
  for (const auto& p : teacher.parameters()) EXPECT_FALSE(p.tensor.has_grad()) << p.name;

  // outputs cached once for every method give the same run
  Model<float> c(tiny_student(), 9);
  const auto caches = compute_teacher_caches(teacher, c, train_set, val_set, cfg);
  train(c, train_set, val_set, cfg, &teacher, {}, &caches);
  EXPECT_EQ(a.snapshot(), c.snapshot());
}

INSTANTIATE_TEST_SUITE_P(All, DistillMethods,
                         ::testing::Values(Method::kResponse, Method::kFeature, Method::kRelational),
                         [](const auto& info) { return to_string(info.param); });

TEST(Train, AlphaZeroMatchesBaseline) {
  auto train_set = tiny_data(40, 1), val_set = tiny_data(16, 2);
  Model<float> teacher(tiny_teacher(), 3);
  Model<float> a(tiny_student(), 9), b(tiny_student(), 9);
  auto cfg = fast_cfg(Method::kResponse);
  cfg.alpha = 0.0;
  train(a, train_set, val_set, cfg, &teacher);
  train(b, train_set, val_set, fast_cfg(Method::kNone));
  const auto sa = a.snapshot(), sb = b.snapshot();
  ASSERT_EQ(sa.size(), sb.size());
  for (std::size_t i = 0; i < sa.size(); ++i)
    for (std::size_t k = 0; k < sa[i].size(); ++k) EXPECT_NEAR(sa[i][k], sb[i][k], 1e-6);
}

TEST(DefaultGuide, MiddleBottleneck) {
  auto c = tiny_student();
  validate_model_config(c);
  EXPECT_EQ(default_guide_layer(c), "bneck1");
}

}  // namespace
}  // namespace dvad
