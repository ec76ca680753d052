#pragma once

// Differentiable primitives. Every function returns a fresh tensor and, when
// a tape is active and any input requires grad, records its backward pass.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dvad/error.hpp"
#include "dvad/rng.hpp"
#include "dvad/tensor.hpp"

namespace dvad {

enum class Mode { kTrain, kEval };

enum class Activation { kNone, kRelu, kSigmoid, kHardswish };

inline std::string to_string(Activation a) {
  switch (a) {
    case Activation::kNone: return "none";
    case Activation::kRelu: return "relu";
    case Activation::kSigmoid: return "sigmoid";
    case Activation::kHardswish: return "hardswish";
  }
  return "none";
}

inline Activation parse_activation(const std::string& s) {
  if (s == "none" || s.empty()) return Activation::kNone;
  if (s == "relu") return Activation::kRelu;
  if (s == "sigmoid") return Activation::kSigmoid;
  if (s == "hardswish") return Activation::kHardswish;
  throw ConfigError("unknown activation '" + s + "'");
}

namespace detail {

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMatrix<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMatrix<T>>;

inline void require_rank(const Shape& s, std::size_t rank, const char* op, const char* what) {
  if (s.size() != rank) {
    throw DimensionError(concat(op, ": ", what, " must have rank ", rank, ", got ", shape_str(s)));
  }
}

inline void require_same_shape(const Shape& a, const Shape& b, const char* op) {
  if (a != b) {
    throw DimensionError(concat(op, ": shape mismatch ", shape_str(a), " vs ", shape_str(b)));
  }
}

// col[(c*kh + i)*kw + j][oy*wo + ox] = x[c][oy*s - p + i][ox*s - p + j]
template <typename T>
void im2col(const T* x, std::size_t channels, std::size_t h, std::size_t w, std::size_t kh,
            std::size_t kw, std::size_t stride, std::size_t pad, std::size_t ho, std::size_t wo,
            T* col) {
  const std::ptrdiff_t H = static_cast<std::ptrdiff_t>(h), W = static_cast<std::ptrdiff_t>(w);
  for (std::size_t c = 0; c < channels; ++c) {
    const T* xc = x + c * h * w;
    for (std::size_t i = 0; i < kh; ++i) {
      for (std::size_t j = 0; j < kw; ++j) {
        T* row = col + ((c * kh + i) * kw + j) * ho * wo;
        for (std::size_t oy = 0; oy < ho; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + i) - static_cast<std::ptrdiff_t>(pad);
          T* dst = row + oy * wo;
          if (iy < 0 || iy >= H) {
            std::fill(dst, dst + wo, T{0});
            continue;
          }
          const T* src = xc + iy * W;
          for (std::size_t ox = 0; ox < wo; ++ox) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + j) - static_cast<std::ptrdiff_t>(pad);
            dst[ox] = (ix >= 0 && ix < W) ? src[ix] : T{0};
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* col, std::size_t channels, std::size_t h, std::size_t w, std::size_t kh,
                std::size_t kw, std::size_t stride, std::size_t pad, std::size_t ho, std::size_t wo,
                T* dx) {
  const std::ptrdiff_t H = static_cast<std::ptrdiff_t>(h), W = static_cast<std::ptrdiff_t>(w);
  for (std::size_t c = 0; c < channels; ++c) {
    T* dxc = dx + c * h * w;
    for (std::size_t i = 0; i < kh; ++i) {
      for (std::size_t j = 0; j < kw; ++j) {
        const T* row = col + ((c * kh + i) * kw + j) * ho * wo;
        for (std::size_t oy = 0; oy < ho; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + i) - static_cast<std::ptrdiff_t>(pad);
          if (iy < 0 || iy >= H) continue;
          const T* src = row + oy * wo;
          T* dst = dxc + iy * W;
          for (std::size_t ox = 0; ox < wo; ++ox) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + j) - static_cast<std::ptrdiff_t>(pad);
            if (ix >= 0 && ix < W) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

template <typename T>
std::vector<T>& scratch() {
  thread_local std::vector<T> buffer;
  return buffer;
}

template <typename T>
std::vector<T>& scratch2() {
  thread_local std::vector<T> buffer;
  return buffer;
}

// Generic unary elementwise op; `df(x, y)` is the local derivative.
template <typename T, typename F, typename DF>
Tensor<T> unary(const Tensor<T>& x, F f, DF df) {
  Tensor<T> y(x.shape());
  auto xd = x.data();
  auto yd = y.data_mut();
  for (std::size_t i = 0; i < xd.size(); ++i) yd[i] = f(xd[i]);
  if (auto* tape = recording_tape(x)) {
    y.set_requires_grad(true);
    tape->record([x, y, df]() mutable {
      if (!y.has_grad()) return;
      auto g = y.grad();
      auto xd = x.data();
      auto yd = y.data();
      auto gx = x.grad_mut();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * df(xd[i], yd[i]);
    });
  }
  return y;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Convolution

/// Direct cross-correlation (no kernel flip). `weight` is [O, C/groups, kh, kw].
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const std::type_identity_t<Tensor<T>>* bias,
                 std::size_t stride, std::size_t padding, std::size_t groups = 1) {
  using namespace detail;
  require_rank(input.shape(), 4, "conv2d", "input");
  require_rank(weight.shape(), 4, "conv2d", "weight");
  if (stride == 0) throw DimensionError("conv2d: stride must be positive");
  if (groups == 0) throw DimensionError("conv2d: groups must be positive");
  const std::size_t N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  const std::size_t O = weight.dim(0), Cg = weight.dim(1), KH = weight.dim(2), KW = weight.dim(3);
  if (C % groups != 0) {
    throw DimensionError(concat("conv2d: input channels (axis 1) = ", C,
                                " not divisible by groups = ", groups));
  }
  if (Cg * groups != C) {
    throw DimensionError(concat("conv2d: weight axis 1 = ", Cg, " but input channels (axis 1) / groups = ",
                                C / groups));
  }
  if (O % groups != 0) {
    throw DimensionError(concat("conv2d: weight axis 0 = ", O, " not divisible by groups = ", groups));
  }
  if (KH > H + 2 * padding || KW > W + 2 * padding) {
    throw DimensionError(concat("conv2d: kernel ", KH, "x", KW, " exceeds padded spatial extent (axes 2,3) ",
                                H + 2 * padding, "x", W + 2 * padding));
  }
  if (bias) {
    if (bias->rank() != 1 || bias->dim(0) != O) {
      throw DimensionError(concat("conv2d: bias must be [", O, "], got ", shape_str(bias->shape())));
    }
  }
  const std::size_t Ho = (H + 2 * padding - KH) / stride + 1;
  const std::size_t Wo = (W + 2 * padding - KW) / stride + 1;
  const std::size_t Og = O / groups;
  const std::size_t K = Cg * KH * KW;
  const std::size_t P = Ho * Wo;
  const bool depthwise = (Cg == 1 && Og == 1);
  const bool pointwise = (KH == 1 && KW == 1 && stride == 1 && padding == 0);

  Tensor<T> out(Shape{N, O, Ho, Wo});
  const T* x = input.data().data();
  const T* wgt = weight.data().data();
  T* y = out.data_mut().data();

  if (depthwise) {
    for (std::size_t n = 0; n < N; ++n) {
      for (std::size_t c = 0; c < C; ++c) {
        const T* xc = x + (n * C + c) * H * W;
        const T* wc = wgt + c * KH * KW;
        T* yc = y + (n * O + c) * P;
        const T b = bias ? (*bias)[c] : T{0};
        for (std::size_t oy = 0; oy < Ho; ++oy) {
          for (std::size_t ox = 0; ox < Wo; ++ox) {
            T acc{0};
            for (std::size_t i = 0; i < KH; ++i) {
              const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + i) - static_cast<std::ptrdiff_t>(padding);
              if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) continue;
              for (std::size_t j = 0; j < KW; ++j) {
                const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + j) - static_cast<std::ptrdiff_t>(padding);
                if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(W)) continue;
                acc += xc[iy * static_cast<std::ptrdiff_t>(W) + ix] * wc[i * KW + j];
              }
            }
            yc[oy * Wo + ox] = acc + b;
          }
        }
      }
    }
  } else {
    auto& col = scratch<T>();
    if (!pointwise) col.resize(K * P);
    for (std::size_t n = 0; n < N; ++n) {
      for (std::size_t g = 0; g < groups; ++g) {
        const T* xg = x + (n * C + g * Cg) * H * W;
        const T* colp = xg;
        if (!pointwise) {
          im2col(xg, Cg, H, W, KH, KW, stride, padding, Ho, Wo, col.data());
          colp = col.data();
        }
        ConstMatMap<T> wm(wgt + g * Og * K, Og, K);
        ConstMatMap<T> cm(colp, K, P);
        MatMap<T> ym(y + (n * O + g * Og) * P, Og, P);
        ym.noalias() = wm * cm;
      }
      if (bias) {
        for (std::size_t o = 0; o < O; ++o) {
          T* yo = y + (n * O + o) * P;
          const T b = (*bias)[o];
          for (std::size_t p = 0; p < P; ++p) yo[p] += b;
        }
      }
    }
  }

  Tape<T>* tape = bias ? recording_tape(input, weight, *bias) : recording_tape(input, weight);
  if (tape) {
    out.set_requires_grad(true);
    std::optional<Tensor<T>> b;
    if (bias) b = *bias;
    tape->record([input, weight, b, out, stride, padding, groups, N, C, H, W, O, Cg, KH, KW, Ho,
                  Wo, Og, K, P, depthwise, pointwise]() mutable {
      if (!out.has_grad()) return;
      const T* dy = out.grad().data();
      const T* x = input.data().data();
      const T* wgt = weight.data().data();
      const bool need_dx = input.requires_grad();
      const bool need_dw = weight.requires_grad();
      T* dx = need_dx ? input.grad_mut().data() : nullptr;
      T* dw = need_dw ? weight.grad_mut().data() : nullptr;
      if (b && b->requires_grad()) {
        auto db = b->grad_mut();
        for (std::size_t n = 0; n < N; ++n)
          for (std::size_t o = 0; o < O; ++o) {
            const T* d = dy + (n * O + o) * P;
            T s{0};
            for (std::size_t p = 0; p < P; ++p) s += d[p];
            db[o] += s;
          }
      }
      if (depthwise) {
        for (std::size_t n = 0; n < N; ++n) {
          for (std::size_t c = 0; c < C; ++c) {
            const T* xc = x + (n * C + c) * H * W;
            const T* wc = wgt + c * KH * KW;
            const T* dyc = dy + (n * O + c) * P;
            T* dxc = need_dx ? dx + (n * C + c) * H * W : nullptr;
            T* dwc = need_dw ? dw + c * KH * KW : nullptr;
            for (std::size_t oy = 0; oy < Ho; ++oy) {
              for (std::size_t ox = 0; ox < Wo; ++ox) {
                const T g = dyc[oy * Wo + ox];
                for (std::size_t i = 0; i < KH; ++i) {
                  const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + i) - static_cast<std::ptrdiff_t>(padding);
                  if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) continue;
                  for (std::size_t j = 0; j < KW; ++j) {
                    const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + j) - static_cast<std::ptrdiff_t>(padding);
                    if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(W)) continue;
                    const std::ptrdiff_t at = iy * static_cast<std::ptrdiff_t>(W) + ix;
                    if (dwc) dwc[i * KW + j] += g * xc[at];
                    if (dxc) dxc[at] += g * wc[i * KW + j];
                  }
                }
              }
            }
          }
        }
        return;
      }
      auto& col = scratch<T>();
      auto& dcol = scratch2<T>();
      if (!pointwise) {
        col.resize(K * P);
        dcol.resize(K * P);
      }
      for (std::size_t n = 0; n < N; ++n) {
        for (std::size_t g = 0; g < groups; ++g) {
          ConstMatMap<T> dym(dy + (n * O + g * Og) * P, Og, P);
          const T* xg = x + (n * C + g * Cg) * H * W;
          if (need_dw) {
            const T* colp = xg;
            if (!pointwise) {
              im2col(xg, Cg, H, W, KH, KW, stride, padding, Ho, Wo, col.data());
              colp = col.data();
            }
            MatMap<T> dwm(dw + g * Og * K, Og, K);
            dwm.noalias() += dym * ConstMatMap<T>(colp, K, P).transpose();
          }
          if (need_dx) {
            ConstMatMap<T> wm(wgt + g * Og * K, Og, K);
            T* dxg = dx + (n * C + g * Cg) * H * W;
            if (pointwise) {
              MatMap<T>(dxg, K, P).noalias() += wm.transpose() * dym;
            } else {
              MatMap<T>(dcol.data(), K, P).noalias() = wm.transpose() * dym;
              col2im_add(dcol.data(), Cg, H, W, KH, KW, stride, padding, Ho, Wo, dxg);
            }
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Batch normalization

template <typename T>
struct RunningStats {
  Tensor<T> mean;
  Tensor<T> var;
};

template <typename T>
Tensor<T> batch_norm2d(const Tensor<T>& input, const Tensor<T>& gamma, const Tensor<T>& beta,
                       RunningStats<T>& running, Mode mode, T momentum = T(0.1), T eps = T(1e-5)) {
  using namespace detail;
  require_rank(input.shape(), 4, "batch_norm2d", "input");
  const std::size_t N = input.dim(0), C = input.dim(1), HW = input.dim(2) * input.dim(3);
  if (gamma.numel() != C || beta.numel() != C || running.mean.numel() != C || running.var.numel() != C) {
    throw DimensionError(concat("batch_norm2d: parameters must have ", C,
                                " entries to match input channels (axis 1)"));
  }
  if (!(eps > T{0})) throw DimensionError("batch_norm2d: eps must be positive");
  if (mode == Mode::kTrain && N == 0) throw DimensionError("batch_norm2d: empty batch in train mode");
  const std::size_t M = N * HW;

  std::vector<T> mean(C), invstd(C);
  const T* x = input.data().data();
  if (mode == Mode::kTrain) {
    auto rm = running.mean.data_mut();
    auto rv = running.var.data_mut();
    for (std::size_t c = 0; c < C; ++c) {
      double s = 0.0;
      for (std::size_t n = 0; n < N; ++n) {
        const T* xc = x + (n * C + c) * HW;
        for (std::size_t i = 0; i < HW; ++i) s += xc[i];
      }
      const double mu = s / static_cast<double>(M);
      double ss = 0.0;
      for (std::size_t n = 0; n < N; ++n) {
        const T* xc = x + (n * C + c) * HW;
        for (std::size_t i = 0; i < HW; ++i) {
          const double d = xc[i] - mu;
          ss += d * d;
        }
      }
      const double var = ss / static_cast<double>(M);
      mean[c] = static_cast<T>(mu);
      invstd[c] = static_cast<T>(1.0 / std::sqrt(var + static_cast<double>(eps)));
      const double unbiased = M > 1 ? var * static_cast<double>(M) / static_cast<double>(M - 1) : var;
      rm[c] = static_cast<T>((1.0 - momentum) * rm[c] + momentum * mu);
      rv[c] = static_cast<T>((1.0 - momentum) * rv[c] + momentum * unbiased);
    }
  } else {
    for (std::size_t c = 0; c < C; ++c) {
      mean[c] = running.mean[c];
      invstd[c] = static_cast<T>(1.0 / std::sqrt(static_cast<double>(running.var[c]) + static_cast<double>(eps)));
    }
  }

  Tensor<T> out(input.shape());
  T* y = out.data_mut().data();
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t c = 0; c < C; ++c) {
      const T* xc = x + (n * C + c) * HW;
      T* yc = y + (n * C + c) * HW;
      const T a = gamma[c] * invstd[c];
      const T b = beta[c] - mean[c] * a;
      for (std::size_t i = 0; i < HW; ++i) yc[i] = xc[i] * a + b;
    }
  }

  if (auto* tape = recording_tape(input, gamma, beta)) {
    out.set_requires_grad(true);
    tape->record([input, gamma, beta, out, mean = std::move(mean), invstd = std::move(invstd), N, C, HW,
                  M, mode]() mutable {
      if (!out.has_grad()) return;
      const T* dy = out.grad().data();
      const T* x = input.data().data();
      std::vector<double> sum_dy(C, 0.0), sum_dy_xhat(C, 0.0);
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t c = 0; c < C; ++c) {
          const T* xc = x + (n * C + c) * HW;
          const T* dyc = dy + (n * C + c) * HW;
          double s = 0.0, sx = 0.0;
          for (std::size_t i = 0; i < HW; ++i) {
            s += dyc[i];
            sx += dyc[i] * (xc[i] - mean[c]) * invstd[c];
          }
          sum_dy[c] += s;
          sum_dy_xhat[c] += sx;
        }
      if (gamma.requires_grad()) {
        auto dg = gamma.grad_mut();
        for (std::size_t c = 0; c < C; ++c) dg[c] += static_cast<T>(sum_dy_xhat[c]);
      }
      if (beta.requires_grad()) {
        auto db = beta.grad_mut();
        for (std::size_t c = 0; c < C; ++c) db[c] += static_cast<T>(sum_dy[c]);
      }
      if (!input.requires_grad()) return;
      T* dx = input.grad_mut().data();
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t c = 0; c < C; ++c) {
          const T* xc = x + (n * C + c) * HW;
          const T* dyc = dy + (n * C + c) * HW;
          T* dxc = dx + (n * C + c) * HW;
          const T scale = gamma[c] * invstd[c];
          if (mode == Mode::kEval) {
            for (std::size_t i = 0; i < HW; ++i) dxc[i] += dyc[i] * scale;
          } else {
            const T mdy = static_cast<T>(sum_dy[c] / static_cast<double>(M));
            const T mdyx = static_cast<T>(sum_dy_xhat[c] / static_cast<double>(M));
            for (std::size_t i = 0; i < HW; ++i) {
              const T xhat = (xc[i] - mean[c]) * invstd[c];
              dxc[i] += scale * (dyc[i] - mdy - xhat * mdyx);
            }
          }
        }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Activations

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  return detail::unary(
      x, [](T v) { return v > T{0} ? v : T{0}; }, [](T v, T) { return v > T{0} ? T{1} : T{0}; });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  return detail::unary(
      x,
      [](T v) {
        if (v >= T{0}) return T{1} / (T{1} + std::exp(-v));
        const T e = std::exp(v);
        return e / (T{1} + e);
      },
      [](T, T y) { return y * (T{1} - y); });
}

/// x * clamp(x + 3, 0, 6) / 6
template <typename T>
Tensor<T> hardswish(const Tensor<T>& x) {
  return detail::unary(
      x, [](T v) { return v * std::clamp(v + T{3}, T{0}, T{6}) / T{6}; },
      [](T v, T) {
        if (v <= T{-3}) return T{0};
        if (v >= T{3}) return T{1};
        return (T{2} * v + T{3}) / T{6};
      });
}

template <typename T>
Tensor<T> activation(const Tensor<T>& x, Activation kind) {
  switch (kind) {
    case Activation::kRelu: return relu(x);
    case Activation::kSigmoid: return sigmoid(x);
    case Activation::kHardswish: return hardswish(x);
    case Activation::kNone: return x;
  }
  return x;
}

template <typename T>
Tensor<T> square(const Tensor<T>& x) {
  return detail::unary(x, [](T v) { return v * v; }, [](T v, T) { return T{2} * v; });
}

/// Elementwise Huber / smooth-L1 with threshold `delta`.
template <typename T>
Tensor<T> huber(const Tensor<T>& x, T delta = T{1}) {
  return detail::unary(
      x,
      [delta](T v) {
        const T a = std::abs(v);
        return a < delta ? T(0.5) * v * v / delta : a - T(0.5) * delta;
      },
      [delta](T v, T) {
        if (std::abs(v) < delta) return v / delta;
        return v > T{0} ? T{1} : T{-1};
      });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
  return detail::unary(x, [factor](T v) { return v * factor; }, [factor](T, T) { return factor; });
}

// ---------------------------------------------------------------------------
// Pooling

/// 2x2 max pooling with stride 2. Ties route the gradient to the first
/// element in row-major order.
template <typename T>
Tensor<T> max_pool2x2(const Tensor<T>& input) {
  using namespace detail;
  require_rank(input.shape(), 4, "max_pool2x2", "input");
  const std::size_t N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  if (H % 2 != 0 || W % 2 != 0) {
    throw DimensionError(concat("max_pool2x2: spatial extents (axes 2,3) must be even, got ", H, "x", W));
  }
  const std::size_t Ho = H / 2, Wo = W / 2;
  Tensor<T> out(Shape{N, C, Ho, Wo});
  std::vector<std::uint32_t> argmax(out.numel());
  const T* x = input.data().data();
  T* y = out.data_mut().data();
  for (std::size_t nc = 0; nc < N * C; ++nc) {
    const T* xc = x + nc * H * W;
    for (std::size_t oy = 0; oy < Ho; ++oy)
      for (std::size_t ox = 0; ox < Wo; ++ox) {
        std::size_t best = (2 * oy) * W + 2 * ox;
        const std::size_t cand[3] = {best + 1, best + W, best + W + 1};
        for (std::size_t k : cand)
          if (xc[k] > xc[best]) best = k;
        const std::size_t o = nc * Ho * Wo + oy * Wo + ox;
        y[o] = xc[best];
        argmax[o] = static_cast<std::uint32_t>(best);
      }
  }
  if (auto* tape = recording_tape(input)) {
    out.set_requires_grad(true);
    tape->record([input, out, argmax = std::move(argmax), H, W, Ho, Wo]() mutable {
      if (!out.has_grad()) return;
      auto dy = out.grad();
      T* dx = input.grad_mut().data();
      for (std::size_t o = 0; o < dy.size(); ++o) {
        const std::size_t nc = o / (Ho * Wo);
        dx[nc * H * W + argmax[o]] += dy[o];
      }
    });
  }
  return out;
}

/// Adaptive average pooling to `oh` x `ow` with bins
/// [floor(i*H/oh), ceil((i+1)*H/oh)).
template <typename T>
Tensor<T> adaptive_avg_pool2d(const Tensor<T>& input, std::size_t oh, std::size_t ow) {
  using namespace detail;
  require_rank(input.shape(), 4, "adaptive_avg_pool2d", "input");
  if (oh == 0 || ow == 0) throw DimensionError("adaptive_avg_pool2d: target extent must be positive");
  const std::size_t N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  Tensor<T> out(Shape{N, C, oh, ow});
  const T* x = input.data().data();
  T* y = out.data_mut().data();
  auto lo = [](std::size_t i, std::size_t in, std::size_t outn) { return (i * in) / outn; };
  auto hi = [](std::size_t i, std::size_t in, std::size_t outn) { return ((i + 1) * in + outn - 1) / outn; };
  for (std::size_t nc = 0; nc < N * C; ++nc) {
    const T* xc = x + nc * H * W;
    for (std::size_t i = 0; i < oh; ++i)
      for (std::size_t j = 0; j < ow; ++j) {
        const std::size_t y0 = lo(i, H, oh), y1 = hi(i, H, oh), x0 = lo(j, W, ow), x1 = hi(j, W, ow);
        T s{0};
        for (std::size_t yy = y0; yy < y1; ++yy)
          for (std::size_t xx = x0; xx < x1; ++xx) s += xc[yy * W + xx];
        y[(nc * oh + i) * ow + j] = s / static_cast<T>((y1 - y0) * (x1 - x0));
      }
  }
  if (auto* tape = recording_tape(input)) {
    out.set_requires_grad(true);
    tape->record([input, out, N, C, H, W, oh, ow, lo, hi]() mutable {
      if (!out.has_grad()) return;
      const T* dy = out.grad().data();
      T* dx = input.grad_mut().data();
      for (std::size_t nc = 0; nc < N * C; ++nc)
        for (std::size_t i = 0; i < oh; ++i)
          for (std::size_t j = 0; j < ow; ++j) {
            const std::size_t y0 = lo(i, H, oh), y1 = hi(i, H, oh), x0 = lo(j, W, ow), x1 = hi(j, W, ow);
            const T g = dy[(nc * oh + i) * ow + j] / static_cast<T>((y1 - y0) * (x1 - x0));
            for (std::size_t yy = y0; yy < y1; ++yy)
              for (std::size_t xx = x0; xx < x1; ++xx) dx[nc * H * W + yy * W + xx] += g;
          }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Dense

/// y = x W^T + b with x [N,F], W [G,F], b [G].
template <typename T>
Tensor<T> linear(const Tensor<T>& input, const Tensor<T>& weight, const std::type_identity_t<Tensor<T>>* bias) {
  using namespace detail;
  require_rank(input.shape(), 2, "linear", "input");
  require_rank(weight.shape(), 2, "linear", "weight");
  const std::size_t N = input.dim(0), F = input.dim(1), G = weight.dim(0);
  if (weight.dim(1) != F) {
    throw DimensionError(concat("linear: input features (axis 1) = ", F, " but weight axis 1 = ", weight.dim(1)));
  }
  if (bias && (bias->rank() != 1 || bias->dim(0) != G)) {
    throw DimensionError(concat("linear: bias must be [", G, "], got ", shape_str(bias->shape())));
  }
  Tensor<T> out(Shape{N, G});
  MatMap<T> ym(out.data_mut().data(), N, G);
  ConstMatMap<T> xm(input.data().data(), N, F);
  ConstMatMap<T> wm(weight.data().data(), G, F);
  ym.noalias() = xm * wm.transpose();
  if (bias) {
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t g = 0; g < G; ++g) ym(n, g) += (*bias)[g];
  }
  Tape<T>* tape = bias ? recording_tape(input, weight, *bias) : recording_tape(input, weight);
  if (tape) {
    out.set_requires_grad(true);
    std::optional<Tensor<T>> b;
    if (bias) b = *bias;
    tape->record([input, weight, b, out, N, F, G]() mutable {
      if (!out.has_grad()) return;
      ConstMatMap<T> dy(out.grad().data(), N, G);
      if (input.requires_grad()) {
        MatMap<T>(input.grad_mut().data(), N, F).noalias() +=
            dy * ConstMatMap<T>(weight.data().data(), G, F);
      }
      if (weight.requires_grad()) {
        MatMap<T>(weight.grad_mut().data(), G, F).noalias() +=
            dy.transpose() * ConstMatMap<T>(input.data().data(), N, F);
      }
      if (b && b->requires_grad()) {
        auto db = b->grad_mut();
        for (std::size_t n = 0; n < N; ++n)
          for (std::size_t g = 0; g < G; ++g) db[g] += dy(n, g);
      }
    });
  }
  return out;
}

/// Inverted dropout: eval mode is the identity.
template <typename T>
Tensor<T> dropout(const Tensor<T>& input, double p, Mode mode, Philox* rng) {
  if (!(p >= 0.0) || p >= 1.0) throw std::invalid_argument("dropout: p must lie in [0, 1)");
  if (mode == Mode::kEval || p == 0.0) return input;
  if (!rng) throw std::invalid_argument("dropout: train mode requires a generator");
  const T keep_scale = static_cast<T>(1.0 / (1.0 - p));
  std::vector<T> mask(input.numel());
  for (auto& m : mask) m = rng->uniform() < p ? T{0} : keep_scale;
  Tensor<T> out(input.shape());
  auto xd = input.data();
  auto yd = out.data_mut();
  for (std::size_t i = 0; i < mask.size(); ++i) yd[i] = xd[i] * mask[i];
  if (auto* tape = detail::recording_tape(input)) {
    out.set_requires_grad(true);
    tape->record([input, out, mask = std::move(mask)]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      auto gx = input.grad_mut();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * mask[i];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Structural / arithmetic

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError(detail::concat("reshape: cannot view ", shape_str(x.shape()), " as ", shape_str(shape)));
  }
  Tensor<T> out(std::move(shape), std::vector<T>(x.data().begin(), x.data().end()));
  if (auto* tape = detail::recording_tape(x)) {
    out.set_requires_grad(true);
    tape->record([x, out]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      auto gx = x.grad_mut();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    });
  }
  return out;
}

/// [N, ...] -> [N, prod(...)]
template <typename T>
Tensor<T> flatten(const Tensor<T>& x) {
  const std::size_t n = x.dim(0);
  return reshape(x, Shape{n, x.numel() / n});
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "add");
  Tensor<T> out(a.shape());
  auto ad = a.data(), bd = b.data();
  auto yd = out.data_mut();
  for (std::size_t i = 0; i < yd.size(); ++i) yd[i] = ad[i] + bd[i];
  if (auto* tape = detail::recording_tape(a, b)) {
    out.set_requires_grad(true);
    tape->record([a, b, out]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      if (a.requires_grad()) {
        auto ga = a.grad_mut();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (b.requires_grad()) {
        auto gb = b.grad_mut();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "sub");
  Tensor<T> out(a.shape());
  auto ad = a.data(), bd = b.data();
  auto yd = out.data_mut();
  for (std::size_t i = 0; i < yd.size(); ++i) yd[i] = ad[i] - bd[i];
  if (auto* tape = detail::recording_tape(a, b)) {
    out.set_requires_grad(true);
    tape->record([a, b, out]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      if (a.requires_grad()) {
        auto ga = a.grad_mut();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (b.requires_grad()) {
        auto gb = b.grad_mut();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "mul");
  Tensor<T> out(a.shape());
  auto ad = a.data(), bd = b.data();
  auto yd = out.data_mut();
  for (std::size_t i = 0; i < yd.size(); ++i) yd[i] = ad[i] * bd[i];
  if (auto* tape = detail::recording_tape(a, b)) {
    out.set_requires_grad(true);
    tape->record([a, b, out]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      auto ad = a.data(), bd = b.data();
      if (a.requires_grad()) {
        auto ga = a.grad_mut();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bd[i];
      }
      if (b.requires_grad()) {
        auto gb = b.grad_mut();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * ad[i];
      }
    });
  }
  return out;
}

/// x [N,C,H,W] scaled per (n,c) by gate [N,C] (or [N,C,1,1]).
template <typename T>
Tensor<T> mul_channel(const Tensor<T>& x, const Tensor<T>& gate) {
  using namespace detail;
  require_rank(x.shape(), 4, "mul_channel", "input");
  const std::size_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  if (gate.numel() != N * C || gate.dim(0) != N) {
    throw DimensionError(concat("mul_channel: gate ", shape_str(gate.shape()), " does not match axes 0,1 of ",
                                shape_str(x.shape())));
  }
  Tensor<T> out(x.shape());
  const T* xd = x.data().data();
  const T* gd = gate.data().data();
  T* yd = out.data_mut().data();
  for (std::size_t nc = 0; nc < N * C; ++nc)
    for (std::size_t i = 0; i < HW; ++i) yd[nc * HW + i] = xd[nc * HW + i] * gd[nc];
  if (auto* tape = recording_tape(x, gate)) {
    out.set_requires_grad(true);
    tape->record([x, gate, out, N, C, HW]() mutable {
      if (!out.has_grad()) return;
      const T* g = out.grad().data();
      const T* xd = x.data().data();
      const T* gd = gate.data().data();
      T* dx = x.requires_grad() ? x.grad_mut().data() : nullptr;
      T* dg = gate.requires_grad() ? gate.grad_mut().data() : nullptr;
      for (std::size_t nc = 0; nc < N * C; ++nc) {
        T s{0};
        for (std::size_t i = 0; i < HW; ++i) {
          if (dx) dx[nc * HW + i] += g[nc * HW + i] * gd[nc];
          s += g[nc * HW + i] * xd[nc * HW + i];
        }
        if (dg) dg[nc] += s;
      }
    });
  }
  return out;
}

/// x / s where s is a single-element tensor.
template <typename T>
Tensor<T> div_scalar(const Tensor<T>& x, const Tensor<T>& s) {
  if (s.numel() != 1) throw DimensionError("div_scalar: divisor must be a single element");
  const T d = s[0];
  Tensor<T> out(x.shape());
  auto xd = x.data();
  auto yd = out.data_mut();
  for (std::size_t i = 0; i < yd.size(); ++i) yd[i] = xd[i] / d;
  if (auto* tape = detail::recording_tape(x, s)) {
    out.set_requires_grad(true);
    tape->record([x, s, out, d]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      auto xd = x.data();
      if (x.requires_grad()) {
        auto gx = x.grad_mut();
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] / d;
      }
      if (s.requires_grad()) {
        T acc{0};
        for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * xd[i];
        s.grad_mut()[0] -= acc / (d * d);
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T s{0};
  for (T v : x.data()) s += v;
  Tensor<T> out = Tensor<T>::scalar(s);
  if (auto* tape = detail::recording_tape(x)) {
    out.set_requires_grad(true);
    tape->record([x, out]() mutable {
      if (!out.has_grad()) return;
      const T g = out.grad()[0];
      for (auto& v : x.grad_mut()) v += g;
    });
  }
  return out;
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  return scale(sum(x), T{1} / static_cast<T>(x.numel()));
}

// ---------------------------------------------------------------------------
// Relational primitives

/// Euclidean distance table [B,B] between the rows of e [B,D].
template <typename T>
Tensor<T> pairwise_distances(const Tensor<T>& e) {
  using namespace detail;
  require_rank(e.shape(), 2, "pairwise_distances", "embeddings");
  const std::size_t B = e.dim(0), D = e.dim(1);
  Tensor<T> out(Shape{B, B});
  const T* x = e.data().data();
  T* d = out.data_mut().data();
  for (std::size_t i = 0; i < B; ++i)
    for (std::size_t j = i + 1; j < B; ++j) {
      T s{0};
      for (std::size_t k = 0; k < D; ++k) {
        const T diff = x[i * D + k] - x[j * D + k];
        s += diff * diff;
      }
      d[i * B + j] = d[j * B + i] = std::sqrt(s);
    }
  if (auto* tape = recording_tape(e)) {
    out.set_requires_grad(true);
    tape->record([e, out, B, D]() mutable {
      if (!out.has_grad()) return;
      const T* g = out.grad().data();
      const T* d = out.data().data();
      const T* x = e.data().data();
      T* dx = e.grad_mut().data();
      for (std::size_t i = 0; i < B; ++i)
        for (std::size_t j = 0; j < B; ++j) {
          if (i == j || d[i * B + j] == T{0}) continue;
          const T c = g[i * B + j] / d[i * B + j];
          for (std::size_t k = 0; k < D; ++k) {
            const T v = c * (x[i * D + k] - x[j * D + k]);
            dx[i * D + k] += v;
            dx[j * D + k] -= v;
          }
        }
    });
  }
  return out;
}

/// Cosine table [B,B,B]: out[a][b][c] = <unit(e_b - e_a), unit(e_c - e_a)>,
/// the cosine of the angle at apex a. Zero-length differences yield 0.
template <typename T>
Tensor<T> angle_cosines(const Tensor<T>& e) {
  using namespace detail;
  require_rank(e.shape(), 2, "angle_cosines", "embeddings");
  const std::size_t B = e.dim(0), D = e.dim(1);
  const T* x = e.data().data();
  // unit[a][b] = unit(e_b - e_a), norms[a][b] = |e_b - e_a|
  std::vector<T> unit(B * B * D, T{0}), norms(B * B, T{0});
  for (std::size_t a = 0; a < B; ++a)
    for (std::size_t b = 0; b < B; ++b) {
      T* u = unit.data() + (a * B + b) * D;
      T s{0};
      for (std::size_t k = 0; k < D; ++k) {
        u[k] = x[b * D + k] - x[a * D + k];
        s += u[k] * u[k];
      }
      const T n = std::sqrt(s);
      norms[a * B + b] = n;
      if (n > T{0}) {
        for (std::size_t k = 0; k < D; ++k) u[k] /= n;
      } else {
        std::fill(u, u + D, T{0});
      }
    }
  Tensor<T> out(Shape{B, B, B});
  T* y = out.data_mut().data();
  for (std::size_t a = 0; a < B; ++a) {
    ConstMatMap<T> ua(unit.data() + a * B * D, B, D);
    MatMap<T>(y + a * B * B, B, B).noalias() = ua * ua.transpose();
  }
  if (auto* tape = recording_tape(e)) {
    out.set_requires_grad(true);
    tape->record([e, out, unit = std::move(unit), norms = std::move(norms), B, D]() mutable {
      if (!out.has_grad()) return;
      const T* g = out.grad().data();
      const T* cs = out.data().data();
      T* dx = e.grad_mut().data();
      std::vector<T> gu(B * D);
      for (std::size_t a = 0; a < B; ++a) {
        // d out[a][b][c] / d diff_ab = (u_ac - cos * u_ab) / |diff_ab|, and symmetrically for c.
        std::fill(gu.begin(), gu.end(), T{0});
        const T* ua = unit.data() + a * B * D;
        for (std::size_t b = 0; b < B; ++b) {
          const T nb = norms[a * B + b];
          if (nb == T{0}) continue;
          T* gb = gu.data() + b * D;
          for (std::size_t c = 0; c < B; ++c) {
            if (norms[a * B + c] == T{0}) continue;
            // out[a][b][c] and out[a][c][b] both depend on diff_ab.
            const T w1 = g[(a * B + b) * B + c];
            const T w2 = g[(a * B + c) * B + b];
            const T w = w1 + w2;
            if (w == T{0}) continue;
            const T cosv = cs[(a * B + b) * B + c];
            const T* ub = ua + b * D;
            const T* uc = ua + c * D;
            for (std::size_t k = 0; k < D; ++k) gb[k] += w * (uc[k] - cosv * ub[k]) / nb;
          }
        }
        for (std::size_t b = 0; b < B; ++b) {
          const T* gb = gu.data() + b * D;
          for (std::size_t k = 0; k < D; ++k) {
            dx[b * D + k] += gb[k];
            dx[a * D + k] -= gb[k];
          }
        }
      }
    });
  }
  return out;
}

}  // namespace dvad
