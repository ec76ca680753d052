#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "dvad/error.hpp"
#include "dvad/tensor.hpp"

namespace dvad {

struct AdamOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <typename T>
struct AdamMoments {
  std::vector<T> m;
  std::vector<T> v;
};

/// One Adam update with bias correction for step `t` (1-based):
///   m <- b1 m + (1-b1) g;  v <- b2 v + (1-b2) g^2
///   p <- p - lr * (m / (1-b1^t)) / (sqrt(v / (1-b2^t)) + eps)
template <typename T>
void adam_step(std::span<T> param, std::span<const T> grad, AdamMoments<T>& state,
               const AdamOptions& opt, std::uint64_t t) {
  if (t < 1) throw std::invalid_argument("adam_step: step index starts at 1");
  if (grad.size() != param.size()) throw DimensionError("adam_step: gradient size does not match parameter");
  if (state.m.empty()) {
    state.m.assign(param.size(), T{0});
    state.v.assign(param.size(), T{0});
  }
  if (state.m.size() != param.size() || state.v.size() != param.size()) {
    throw DimensionError("adam_step: optimizer state does not match parameter");
  }
  const double bc1 = 1.0 - std::pow(opt.beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(opt.beta2, static_cast<double>(t));
  const T b1 = static_cast<T>(opt.beta1), b2 = static_cast<T>(opt.beta2);
  for (std::size_t i = 0; i < param.size(); ++i) {
    const T g = grad[i];
    state.m[i] = b1 * state.m[i] + (T{1} - b1) * g;
    state.v[i] = b2 * state.v[i] + (T{1} - b2) * g * g;
    const double mhat = static_cast<double>(state.m[i]) / bc1;
    const double vhat = static_cast<double>(state.v[i]) / bc2;
    param[i] = static_cast<T>(static_cast<double>(param[i]) - opt.lr * mhat / (std::sqrt(vhat) + opt.eps));
  }
}

/// Adam over a fixed list of parameter tensors. Missing gradients count as zero.
template <typename T>
class Adam {
 public:
  Adam(std::vector<Tensor<T>> params, AdamOptions options)
      : params_(std::move(params)), options_(options), moments_(params_.size()) {}

  void step() {
    ++t_;
    std::vector<T> zeros;
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& p = params_[i];
      std::span<const T> g;
      if (p.has_grad()) {
        g = p.grad();
      } else {
        zeros.assign(p.numel(), T{0});
        g = zeros;
      }
      adam_step<T>(p.data_mut(), g, moments_[i], options_, t_);
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  std::uint64_t steps() const { return t_; }

 private:
  std::vector<Tensor<T>> params_;
  AdamOptions options_;
  std::vector<AdamMoments<T>> moments_;
  std::uint64_t t_ = 0;
};

}  // namespace dvad
