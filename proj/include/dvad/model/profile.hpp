#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "dvad/error.hpp"
#include "dvad/model/model.hpp"

namespace dvad {

/// Trainable scalars: conv/linear weights and biases, BN gamma and beta.
template <typename T>
std::uint64_t count_parameters(const Model<T>& model) {
  std::uint64_t n = 0;
  for (const auto& p : model.parameters()) n += p.tensor.numel();
  return n;
}

/// Primitive operations realized by the model (conv, BN, activation, pool, ...).
template <typename T>
std::uint64_t count_layers(const Model<T>& model) {
  std::uint64_t n = 0;
  for (std::size_t i = 0; i < model.size(); ++i) n += model.layer(i).primitive_count();
  return n;
}

struct FlopCount {
  std::uint64_t flops = 0;            // MACs + elementwise ops
  std::uint64_t multiplications = 0;  // flops / 2
  std::uint64_t macs = 0;
  std::uint64_t elementwise = 0;
};

/// Counts one multiply-accumulate as one FLOP, plus bias adds, 2 ops per BN
/// element, 1 per activation element, residual adds and SE scaling.
/// Pooling, flatten and dropout are free.
template <typename T>
FlopCount count_flops(const Model<T>& model, const Shape& input_shape) {
  if (input_shape.size() != 3) throw DimensionError("count_flops: input shape must be [C,H,W]");
  for (auto e : input_shape)
    if (e == 0) throw std::invalid_argument("count_flops: dynamic (zero) extents are unsupported");
  if (input_shape != model.config().input_shape) {
    throw DimensionError("count_flops: model was built for " + shape_str(model.config().input_shape));
  }
  OpCount total;
  Shape cur = input_shape;
  for (std::size_t i = 0; i < model.size(); ++i) {
    auto [next, c] = model.layer(i).cost(cur);
    total += c;
    cur = next;
  }
  FlopCount f;
  f.macs = total.macs;
  f.elementwise = total.elementwise;
  f.flops = total.total();
  f.multiplications = f.flops / 2;
  return f;
}

/// Parameter storage in MiB at 4 bytes per parameter.
inline double memory_mib(std::uint64_t parameters) {
  return static_cast<double>(parameters) * 4.0 / (1024.0 * 1024.0);
}

/// Truncated to the precision used in the reference table: whole MiB at or
/// above 10, two decimals below.
inline double memory_mib_display(std::uint64_t parameters) {
  const double m = memory_mib(parameters);
  if (m >= 10.0) return std::floor(m);
  return std::floor(m * 100.0) / 100.0;
}

/// Median single-input forward time in seconds after `warmup` runs.
template <typename T>
double measure_latency(Model<T>& model, std::size_t repetitions, std::size_t warmup = 1,
                       std::vector<double>* samples = nullptr) {
  if (repetitions == 0) throw std::invalid_argument("measure_latency: repetitions must be >= 1");
  Shape s{1};
  s.insert(s.end(), model.config().input_shape.begin(), model.config().input_shape.end());
  Tensor<T> x(s, T(0.5));
  NoGradScope<T> no_grad;
  for (std::size_t i = 0; i < warmup; ++i) (void)model.logits(x);
  std::vector<double> t;
  for (std::size_t i = 0; i < repetitions; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    auto y = model.logits(x);
    const auto t1 = std::chrono::steady_clock::now();
    (void)y;
    t.push_back(std::chrono::duration<double>(t1 - t0).count());
  }
  if (samples) *samples = t;
  std::sort(t.begin(), t.end());
  const std::size_t n = t.size();
  return n % 2 ? t[n / 2] : 0.5 * (t[n / 2 - 1] + t[n / 2]);
}

struct EfficiencyReport {
  std::string model;
  std::uint64_t parameters = 0;
  std::uint64_t layers = 0;
  std::uint64_t flops = 0;
  std::uint64_t multiplications = 0;
  double memory_mib = 0.0;
  double inference_time_s = 0.0;
};

/// Published characteristics used for deviation reporting only.
struct ReferenceRow {
  const char* model;
  std::uint64_t parameters;
  std::uint64_t layers;
  std::uint64_t flops;
  std::uint64_t multiplications;
  double memory_mb;
  double inference_time_s;
};

inline const std::vector<ReferenceRow>& reference_table() {
  static const std::vector<ReferenceRow> rows = {
      {"teacher", 59568769, 20, 2485390000, 1242700000, 227, 0.17},
      {"student1", 4662017, 215, 388459000, 194230000, 17, 0.038},
      {"student2", 2930177, 179, 337257000, 168628000, 11, 0.042},
      {"student3", 502793, 179, 27353400, 13676700, 1.91, 0.0087},
      {"student4", 52253, 114, 8648350, 4324170, 0.19, 0.0050},
  };
  return rows;
}

inline std::optional<ReferenceRow> reference_for(const std::string& model) {
  for (const auto& r : reference_table())
    if (model == r.model) return r;
  return std::nullopt;
}

template <typename T>
EfficiencyReport profile_model(Model<T>& model, std::size_t repetitions = 5, std::size_t warmup = 1) {
  EfficiencyReport r;
  r.model = model.name();
  r.parameters = count_parameters(model);
  r.layers = count_layers(model);
  const auto f = count_flops(model, model.config().input_shape);
  r.flops = f.flops;
  r.multiplications = f.multiplications;
  r.memory_mib = memory_mib_display(r.parameters);
  r.inference_time_s = repetitions ? measure_latency(model, repetitions, warmup) : 0.0;
  return r;
}

}  // namespace dvad
