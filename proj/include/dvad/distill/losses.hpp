#pragma once

#include <cmath>
#include <span>
#include <vector>

#include "dvad/error.hpp"
#include "dvad/ops.hpp"
#include "dvad/tensor.hpp"

namespace dvad {

namespace detail {

// log(1 + e^x) without overflow.
template <typename T>
T softplus(T x) {
  return x > T{0} ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

template <typename T>
T stable_sigmoid(T x) {
  if (x >= T{0}) return T{1} / (T{1} + std::exp(-x));
  const T e = std::exp(x);
  return e / (T{1} + e);
}

template <typename T>
void check_labels(const Tensor<T>& x, std::span<const T> labels, const char* op) {
  if (x.numel() != labels.size()) {
    throw DimensionError(concat(op, ": ", x.numel(), " predictions but ", labels.size(), " labels"));
  }
  if (labels.empty()) throw DimensionError(concat(op, ": empty batch"));
}

}  // namespace detail

/// Mean binary cross entropy on logits:
/// max(z,0) - z*y + log(1 + e^{-|z|}).
template <typename T>
Tensor<T> bce_with_logits(const Tensor<T>& logits, std::span<const T> labels) {
  detail::check_labels(logits, labels, "bce_with_logits");
  const std::size_t n = labels.size();
  auto z = logits.data();
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const T zi = z[i];
    acc += std::max(zi, T{0}) - zi * labels[i] + std::log1p(std::exp(-std::abs(zi)));
  }
  Tensor<T> out = Tensor<T>::scalar(static_cast<T>(acc / static_cast<double>(n)));
  if (auto* tape = detail::recording_tape(logits)) {
    out.set_requires_grad(true);
    std::vector<T> y(labels.begin(), labels.end());
    tape->record([logits, out, y = std::move(y)]() mutable {
      if (!out.has_grad()) return;
      const T g = out.grad()[0] / static_cast<T>(y.size());
      auto z = logits.data();
      auto gz = logits.grad_mut();
      for (std::size_t i = 0; i < y.size(); ++i) gz[i] += g * (detail::stable_sigmoid(z[i]) - y[i]);
    });
  }
  return out;
}

/// Mean binary cross entropy on probabilities; logs are clamped at -100.
template <typename T>
Tensor<T> bce(const Tensor<T>& probabilities, std::span<const T> labels) {
  detail::check_labels(probabilities, labels, "bce");
  const std::size_t n = labels.size();
  auto p = probabilities.data();
  auto clamped_log = [](T v) { return std::max(std::log(v), T{-100}); };
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    acc -= labels[i] * clamped_log(p[i]) + (T{1} - labels[i]) * clamped_log(T{1} - p[i]);
  }
  Tensor<T> out = Tensor<T>::scalar(static_cast<T>(acc / static_cast<double>(n)));
  if (auto* tape = detail::recording_tape(probabilities)) {
    out.set_requires_grad(true);
    std::vector<T> y(labels.begin(), labels.end());
    tape->record([probabilities, out, y = std::move(y)]() mutable {
      if (!out.has_grad()) return;
      const T g = out.grad()[0] / static_cast<T>(y.size());
      auto p = probabilities.data();
      auto gp = probabilities.grad_mut();
      constexpr T tiny = std::numeric_limits<T>::min();
      for (std::size_t i = 0; i < y.size(); ++i) {
        const T pi = p[i];
        gp[i] += g * (-y[i] / std::max(pi, tiny) + (T{1} - y[i]) / std::max(T{1} - pi, tiny));
      }
    });
  }
  return out;
}

/// Batch-mean KL( Bern(sigmoid(t/T)) || Bern(sigmoid(s/T)) ), optionally
/// multiplied by T^2. Gradients flow into the student logits only.
template <typename T>
Tensor<T> soft_target_loss(const Tensor<T>& student_logits, const Tensor<T>& teacher_logits, T temperature,
                           bool t_squared = true) {
  if (!(temperature > T{0})) throw std::invalid_argument("soft_target_loss: temperature must be positive");
  if (student_logits.numel() != teacher_logits.numel()) {
    throw DimensionError("soft_target_loss: student and teacher batch sizes differ");
  }
  const std::size_t n = student_logits.numel();
  if (n == 0) throw DimensionError("soft_target_loss: empty batch");
  auto s = student_logits.data();
  auto t = teacher_logits.data();
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const T zs = s[i] / temperature, zt = t[i] / temperature;
    const T pt = detail::stable_sigmoid(zt);
    // log p = -softplus(-z), log(1-p) = -softplus(z)
    const T log_pt = -detail::softplus(-zt), log_qt = -detail::softplus(zt);
    const T log_ps = -detail::softplus(-zs), log_qs = -detail::softplus(zs);
    // Rounding can leave a near-zero divergence slightly negative.
    acc += std::max(T{0}, pt * (log_pt - log_ps) + (T{1} - pt) * (log_qt - log_qs));
  }
  const T factor = t_squared ? temperature * temperature : T{1};
  Tensor<T> out = Tensor<T>::scalar(static_cast<T>(factor * acc / static_cast<double>(n)));
  if (auto* tape = detail::recording_tape(student_logits)) {
    out.set_requires_grad(true);
    tape->record([student_logits, teacher_logits, out, temperature, factor, n]() mutable {
      if (!out.has_grad()) return;
      const T g = out.grad()[0] * factor / static_cast<T>(n);
      auto s = student_logits.data();
      auto t = teacher_logits.data();
      auto gs = student_logits.grad_mut();
      for (std::size_t i = 0; i < n; ++i) {
        const T ps = detail::stable_sigmoid(s[i] / temperature);
        const T pt = detail::stable_sigmoid(t[i] / temperature);
        gs[i] += g * (ps - pt) / temperature;
      }
    });
  }
  return out;
}

/// Mean squared error.
template <typename T>
Tensor<T> mse(const Tensor<T>& a, const Tensor<T>& b) {
  return mean(square(sub(a, b)));
}

/// MSE between a regressed guide map and a hint map. The larger spatial map
/// is first reduced with adaptive average pooling to the smaller one.
template <typename T>
Tensor<T> feature_loss(const Tensor<T>& regressed_guide, const Tensor<T>& hint) {
  detail::require_rank(regressed_guide.shape(), 4, "feature_loss", "guide");
  detail::require_rank(hint.shape(), 4, "feature_loss", "hint");
  if (regressed_guide.dim(0) != hint.dim(0) || regressed_guide.dim(1) != hint.dim(1)) {
    throw DimensionError("feature_loss: regressed guide " + shape_str(regressed_guide.shape()) +
                         " and hint " + shape_str(hint.shape()) + " differ in axes 0/1");
  }
  Tensor<T> g = regressed_guide, h = hint;
  const std::size_t oh = std::min(g.dim(2), h.dim(2)), ow = std::min(g.dim(3), h.dim(3));
  if (g.dim(2) != oh || g.dim(3) != ow) g = adaptive_avg_pool2d(g, oh, ow);
  if (h.dim(2) != oh || h.dim(3) != ow) h = adaptive_avg_pool2d(h, oh, ow);
  return mse(g, h);
}

namespace detail {

// Distance table divided by its mean over strictly positive entries.
template <typename T>
Tensor<T> normalized_distances(const Tensor<T>& emb) {
  Tensor<T> d = pairwise_distances(emb);
  std::size_t positive = 0;
  for (T v : d.data())
    if (v > T{0}) ++positive;
  if (positive == 0) return d;
  return div_scalar(d, scale(sum(d), T{1} / static_cast<T>(positive)));
}

}  // namespace detail

/// Distance-wise relational loss: Huber (delta 1) between mean-normalized
/// pairwise distance tables, averaged over all B*B entries.
template <typename T>
Tensor<T> rkd_distance_loss(const Tensor<T>& student_emb, const Tensor<T>& teacher_emb) {
  detail::require_rank(student_emb.shape(), 2, "rkd_distance_loss", "student embeddings");
  detail::require_rank(teacher_emb.shape(), 2, "rkd_distance_loss", "teacher embeddings");
  if (student_emb.dim(0) != teacher_emb.dim(0)) throw DimensionError("rkd_distance_loss: batch sizes differ");
  if (student_emb.dim(0) < 2) throw DimensionError("rkd_distance_loss: needs a batch of at least 2");
  Tensor<T> t;
  {
    NoGradScope<T> frozen;
    t = detail::normalized_distances(teacher_emb);
  }
  return mean(huber(sub(detail::normalized_distances(student_emb), t), T{1}));
}

/// Angle-wise relational loss: Huber (delta 1) between the cosine tables of
/// all B^3 (apex, b, c) triplets.
template <typename T>
Tensor<T> rkd_angle_loss(const Tensor<T>& student_emb, const Tensor<T>& teacher_emb) {
  detail::require_rank(student_emb.shape(), 2, "rkd_angle_loss", "student embeddings");
  detail::require_rank(teacher_emb.shape(), 2, "rkd_angle_loss", "teacher embeddings");
  if (student_emb.dim(0) != teacher_emb.dim(0)) throw DimensionError("rkd_angle_loss: batch sizes differ");
  if (student_emb.dim(0) < 3) throw DimensionError("rkd_angle_loss: needs a batch of at least 3");
  Tensor<T> t;
  {
    NoGradScope<T> frozen;
    t = angle_cosines(teacher_emb);
  }
  return mean(huber(sub(angle_cosines(student_emb), t), T{1}));
}

}  // namespace dvad
