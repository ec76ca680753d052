#pragma once

#include <algorithm>
#include <span>
#include <vector>

#include "dvad/error.hpp"
#include "dvad/tensor.hpp"

namespace dvad {

/// In-memory labeled inputs, row-major, one sample after another.
struct SpectrogramSet {
  Shape sample_shape{1, 128, 128};
  std::vector<float> inputs;
  std::vector<float> labels;

  std::size_t sample_size() const { return shape_numel(sample_shape); }
  std::size_t size() const { return labels.size(); }
  bool empty() const { return labels.empty(); }

  void add(std::span<const float> x, float label) {
    if (x.size() != sample_size()) {
      throw DimensionError(detail::concat("sample has ", x.size(), " values, expected ", sample_size()));
    }
    inputs.insert(inputs.end(), x.begin(), x.end());
    labels.push_back(label);
  }

  std::span<const float> sample(std::size_t i) const { return {inputs.data() + i * sample_size(), sample_size()}; }

  template <typename T>
  Tensor<T> batch(std::span<const std::size_t> idx) const {
    Shape s{idx.size()};
    s.insert(s.end(), sample_shape.begin(), sample_shape.end());
    Tensor<T> x(s);
    auto out = x.data_mut();
    const std::size_t m = sample_size();
    for (std::size_t b = 0; b < idx.size(); ++b) {
      auto src = sample(idx[b]);
      std::transform(src.begin(), src.end(), out.begin() + b * m, [](float v) { return static_cast<T>(v); });
    }
    return x;
  }

  template <typename T>
  std::vector<T> batch_labels(std::span<const std::size_t> idx) const {
    std::vector<T> y;
    y.reserve(idx.size());
    for (auto i : idx) y.push_back(static_cast<T>(labels[i]));
    return y;
  }
};

}  // namespace dvad
