#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "dvad/error.hpp"
#include "dvad/model/config.hpp"
#include "dvad/ops.hpp"
#include "dvad/rng.hpp"
#include "dvad/tensor.hpp"

namespace dvad {

template <typename T>
struct NamedTensor {
  std::string name;
  Tensor<T> tensor;
};

struct ForwardContext {
  Mode mode = Mode::kEval;
  Philox* rng = nullptr;
};

/// Operation counts of one layer; one multiply-accumulate counts as one.
struct OpCount {
  std::uint64_t macs = 0;
  std::uint64_t elementwise = 0;
  std::uint64_t total() const { return macs + elementwise; }
  OpCount& operator+=(const OpCount& o) {
    macs += o.macs;
    elementwise += o.elementwise;
    return *this;
  }
};

namespace detail {

// U(-1/sqrt(fan_in), 1/sqrt(fan_in)), the usual framework default. The
// ReLU-gain variant (sqrt(6/fan_in)) lets the teacher's wide FC stack blow
// its logits past the BCE clamp after one Adam step.
template <typename T>
Tensor<T> kaiming_uniform(Shape shape, std::size_t fan_in, Philox& rng) {
  Tensor<T> t(std::move(shape));
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  T* v = t.data_mut().data();
  rng.for_each_u32(t.numel(), [&](std::uint32_t u) { *v++ = static_cast<T>(bound * ((u >> 8) * 0x1.0p-23 - 1.0)); });
  t.set_requires_grad(true);
  return t;
}

template <typename T>
Tensor<T> parameter(Shape shape, T fill) {
  Tensor<T> t(std::move(shape), fill);
  t.set_requires_grad(true);
  return t;
}

inline std::uint64_t activation_ops(Activation a, std::uint64_t n) { return a == Activation::kNone ? 0 : n; }

}  // namespace detail

// ---------------------------------------------------------------------------
// Building blocks (not layers themselves)

template <typename T>
struct ConvUnit {
  Tensor<T> weight;
  std::optional<Tensor<T>> bias;
  std::size_t stride = 1, padding = 0, groups = 1;

  ConvUnit() = default;
  ConvUnit(std::size_t in, std::size_t out, std::size_t k, std::size_t s, std::size_t g, bool with_bias,
           Philox& rng)
      : stride(s), padding(k / 2), groups(g) {
    weight = detail::kaiming_uniform<T>(Shape{out, in / g, k, k}, (in / g) * k * k, rng);
    if (with_bias) bias = detail::parameter<T>(Shape{out}, T{0});
  }

  Tensor<T> operator()(const Tensor<T>& x) const {
    return conv2d(x, weight, bias ? &*bias : nullptr, stride, padding, groups);
  }

  void collect(const std::string& prefix, std::vector<NamedTensor<T>>& out) const {
    out.push_back({prefix + ".weight", weight});
    if (bias) out.push_back({prefix + ".bias", *bias});
  }

  // Output shape for input [C,H,W] and its cost (MACs + bias adds).
  Shape out_shape(const Shape& in) const {
    const std::size_t k = weight.dim(2);
    return {weight.dim(0), (in[1] + 2 * padding - k) / stride + 1, (in[2] + 2 * padding - k) / stride + 1};
  }
  OpCount cost(const Shape& in) const {
    const Shape o = out_shape(in);
    const std::uint64_t outputs = shape_numel(o);
    OpCount c;
    c.macs = outputs * weight.dim(1) * weight.dim(2) * weight.dim(3);
    if (bias) c.elementwise = outputs;
    return c;
  }
};

template <typename T>
struct BatchNormUnit {
  Tensor<T> gamma, beta;
  RunningStats<T> running;

  BatchNormUnit() = default;
  explicit BatchNormUnit(std::size_t c)
      : gamma(detail::parameter<T>(Shape{c}, T{1})),
        beta(detail::parameter<T>(Shape{c}, T{0})),
        running{Tensor<T>(Shape{c}, T{0}), Tensor<T>(Shape{c}, T{1})} {}

  Tensor<T> operator()(const Tensor<T>& x, Mode mode) { return batch_norm2d(x, gamma, beta, running, mode); }

  void collect(const std::string& prefix, std::vector<NamedTensor<T>>& out) const {
    out.push_back({prefix + ".gamma", gamma});
    out.push_back({prefix + ".beta", beta});
  }
  void collect_buffers(const std::string& prefix, std::vector<NamedTensor<T>>& out) const {
    out.push_back({prefix + ".running_mean", running.mean});
    out.push_back({prefix + ".running_var", running.var});
  }
};

template <typename T>
struct LinearUnit {
  Tensor<T> weight;
  Tensor<T> bias;

  LinearUnit() = default;
  LinearUnit(std::size_t in, std::size_t out, Philox& rng)
      : weight(detail::kaiming_uniform<T>(Shape{out, in}, in, rng)), bias(detail::parameter<T>(Shape{out}, T{0})) {}

  Tensor<T> operator()(const Tensor<T>& x) const { return linear(x, weight, &bias); }

  void collect(const std::string& prefix, std::vector<NamedTensor<T>>& out) const {
    out.push_back({prefix + ".weight", weight});
    out.push_back({prefix + ".bias", bias});
  }
  OpCount cost() const { return {weight.dim(0) * weight.dim(1), weight.dim(0)}; }
};

// ---------------------------------------------------------------------------
// Layers

template <typename T>
class Layer {
 public:
  explicit Layer(LayerSpec spec) : spec_(std::move(spec)) {}
  virtual ~Layer() = default;

  virtual Tensor<T> forward(const Tensor<T>& x, ForwardContext& ctx) = 0;
  virtual void collect_parameters(std::vector<NamedTensor<T>>&) const {}
  virtual void collect_buffers(std::vector<NamedTensor<T>>&) const {}
  /// Primitive operations realized by this layer (conv, BN, activation, ...).
  virtual std::size_t primitive_count() const = 0;
  /// Output shape (no batch axis) and operation counts for input `in`.
  virtual std::pair<Shape, OpCount> cost(const Shape& in) const = 0;
  virtual bool has_parameters() const { return false; }

  const LayerSpec& spec() const { return spec_; }
  const std::string& name() const { return spec_.name; }

 protected:
  LayerSpec spec_;
};

/// conv (+ BN) (+ activation); also realizes `pointwise`.
template <typename T>
class ConvLayer : public Layer<T> {
 public:
  ConvLayer(LayerSpec spec, Philox& rng) : Layer<T>(std::move(spec)) {
    const auto& s = this->spec_;
    const bool pw = s.kind == LayerKind::kPointwise;
    conv_ = ConvUnit<T>(s.in_channels, s.out_channels, pw ? 1 : s.kernel, pw ? 1 : s.stride, 1,
                        pw ? true : s.bias, rng);
    if (!pw && s.batch_norm) bn_ = BatchNormUnit<T>(s.out_channels);
  }

  Tensor<T> forward(const Tensor<T>& x, ForwardContext& ctx) override {
    Tensor<T> y = conv_(x);
    if (bn_) y = (*bn_)(y, ctx.mode);
    return activation(y, this->spec_.activation);
  }
  void collect_parameters(std::vector<NamedTensor<T>>& out) const override {
    conv_.collect(this->name() + ".conv", out);
    if (bn_) bn_->collect(this->name() + ".bn", out);
  }
  void collect_buffers(std::vector<NamedTensor<T>>& out) const override {
    if (bn_) bn_->collect_buffers(this->name() + ".bn", out);
  }
  std::size_t primitive_count() const override {
    return 1 + (bn_ ? 1 : 0) + (this->spec_.activation != Activation::kNone ? 1 : 0);
  }
  std::pair<Shape, OpCount> cost(const Shape& in) const override {
    const Shape o = conv_.out_shape(in);
    OpCount c = conv_.cost(in);
    const std::uint64_t n = shape_numel(o);
    if (bn_) c.elementwise += 2 * n;
    c.elementwise += detail::activation_ops(this->spec_.activation, n);
    return {o, c};
  }
  bool has_parameters() const override { return true; }

 private:
  ConvUnit<T> conv_;
  std::optional<BatchNormUnit<T>> bn_;
};

/// Inverted residual: expand 1x1 -> depthwise kxk -> SE -> project 1x1
/// (linear), with identity skip when stride is 1 and widths match.
template <typename T>
class BottleneckLayer : public Layer<T> {
 public:
  BottleneckLayer(LayerSpec spec, Philox& rng) : Layer<T>(std::move(spec)) {
    const auto& s = this->spec_;
    expanded_ = s.expanded_channels();
    if (expanded_ != s.in_channels) {
      expand_ = ConvUnit<T>(s.in_channels, expanded_, 1, 1, 1, false, rng);
      expand_bn_ = BatchNormUnit<T>(expanded_);
    }
    depthwise_ = ConvUnit<T>(expanded_, expanded_, s.kernel, s.stride, expanded_, false, rng);
    depthwise_bn_ = BatchNormUnit<T>(expanded_);
    if (s.se) {
      const std::size_t sq = se_squeeze_channels(expanded_);
      se_fc1_ = LinearUnit<T>(expanded_, sq, rng);
      se_fc2_ = LinearUnit<T>(sq, expanded_, rng);
    }
    project_ = ConvUnit<T>(expanded_, s.out_channels, 1, 1, 1, false, rng);
    project_bn_ = BatchNormUnit<T>(s.out_channels);
  }

  bool has_residual() const { return this->spec_.stride == 1 && this->spec_.in_channels == this->spec_.out_channels; }
  void set_residual_enabled(bool on) { residual_enabled_ = on; }
  void set_se_enabled(bool on) { se_enabled_ = on; }
  std::size_t expanded_channels() const { return expanded_; }

  /// SE gate [N,C] in (0,1) for a feature map [N,C,H,W].
  Tensor<T> se_gate(const Tensor<T>& x) const {
    Tensor<T> s = flatten(adaptive_avg_pool2d(x, 1, 1));
    s = relu(se_fc1_(s));
    return sigmoid(se_fc2_(s));
  }

  Tensor<T> forward(const Tensor<T>& x, ForwardContext& ctx) override {
    const Activation act = this->spec_.activation;
    Tensor<T> h = x;
    if (expand_) h = activation((*expand_bn_)((*expand_)(h), ctx.mode), act);
    h = activation(depthwise_bn_(depthwise_(h), ctx.mode), act);
    if (this->spec_.se && se_enabled_) h = mul_channel(h, se_gate(h));
    h = project_bn_(project_(h), ctx.mode);
    if (has_residual() && residual_enabled_) h = add(h, x);
    return h;
  }

  void collect_parameters(std::vector<NamedTensor<T>>& out) const override {
    const std::string& n = this->name();
    if (expand_) {
      expand_->collect(n + ".expand.conv", out);
      expand_bn_->collect(n + ".expand.bn", out);
    }
    depthwise_.collect(n + ".depthwise.conv", out);
    depthwise_bn_.collect(n + ".depthwise.bn", out);
    if (this->spec_.se) {
      se_fc1_.collect(n + ".se.fc1", out);
      se_fc2_.collect(n + ".se.fc2", out);
    }
    project_.collect(n + ".project.conv", out);
    project_bn_.collect(n + ".project.bn", out);
  }
  void collect_buffers(std::vector<NamedTensor<T>>& out) const override {
    const std::string& n = this->name();
    if (expand_) expand_bn_->collect_buffers(n + ".expand.bn", out);
    depthwise_bn_.collect_buffers(n + ".depthwise.bn", out);
    project_bn_.collect_buffers(n + ".project.bn", out);
  }
  std::size_t primitive_count() const override {
    const bool act = this->spec_.activation != Activation::kNone;
    std::size_t n = 0;
    if (expand_) n += 2 + (act ? 1 : 0);
    n += 2 + (act ? 1 : 0);
    if (this->spec_.se) n += 6;  // pool, fc, relu, fc, sigmoid, scale
    n += 2;
    if (has_residual()) n += 1;
    return n;
  }
  std::pair<Shape, OpCount> cost(const Shape& in) const override {
    const Activation act = this->spec_.activation;
    OpCount c;
    Shape cur = in;
    if (expand_) {
      c += expand_->cost(cur);
      cur = expand_->out_shape(cur);
      c.elementwise += 2 * shape_numel(cur) + detail::activation_ops(act, shape_numel(cur));
    }
    c += depthwise_.cost(cur);
    cur = depthwise_.out_shape(cur);
    c.elementwise += 2 * shape_numel(cur) + detail::activation_ops(act, shape_numel(cur));
    if (this->spec_.se) {
      c += se_fc1_.cost();
      c.elementwise += se_fc1_.bias.numel();  // relu
      c += se_fc2_.cost();
      c.elementwise += se_fc2_.bias.numel();  // sigmoid
      c.elementwise += shape_numel(cur);      // channel scaling
    }
    c += project_.cost(cur);
    cur = project_.out_shape(cur);
    c.elementwise += 2 * shape_numel(cur);
    if (has_residual()) c.elementwise += shape_numel(cur);
    return {cur, c};
  }
  bool has_parameters() const override { return true; }

 private:
  std::size_t expanded_ = 0;
  std::optional<ConvUnit<T>> expand_;
  std::optional<BatchNormUnit<T>> expand_bn_;
  ConvUnit<T> depthwise_;
  BatchNormUnit<T> depthwise_bn_;
  LinearUnit<T> se_fc1_, se_fc2_;
  ConvUnit<T> project_;
  BatchNormUnit<T> project_bn_;
  bool residual_enabled_ = true;
  bool se_enabled_ = true;
};

template <typename T>
class LinearLayer : public Layer<T> {
 public:
  LinearLayer(LayerSpec spec, Philox& rng)
      : Layer<T>(std::move(spec)), fc_(this->spec_.in_channels, this->spec_.out_channels, rng) {}

  Tensor<T> forward(const Tensor<T>& x, ForwardContext&) override { return activation(fc_(x), this->spec_.activation); }
  void collect_parameters(std::vector<NamedTensor<T>>& out) const override { fc_.collect(this->name(), out); }
  std::size_t primitive_count() const override { return this->spec_.activation != Activation::kNone ? 2 : 1; }
  std::pair<Shape, OpCount> cost(const Shape&) const override {
    OpCount c = fc_.cost();
    c.elementwise += detail::activation_ops(this->spec_.activation, this->spec_.out_channels);
    return {Shape{this->spec_.out_channels}, c};
  }
  bool has_parameters() const override { return true; }

 private:
  LinearUnit<T> fc_;
};

template <typename T>
class MaxPoolLayer : public Layer<T> {
 public:
  using Layer<T>::Layer;
  Tensor<T> forward(const Tensor<T>& x, ForwardContext&) override { return max_pool2x2(x); }
  std::size_t primitive_count() const override { return 1; }
  std::pair<Shape, OpCount> cost(const Shape& in) const override { return {Shape{in[0], in[1] / 2, in[2] / 2}, {}}; }
};

template <typename T>
class AdaptivePoolLayer : public Layer<T> {
 public:
  using Layer<T>::Layer;
  Tensor<T> forward(const Tensor<T>& x, ForwardContext&) override {
    return adaptive_avg_pool2d(x, this->spec_.output_size, this->spec_.output_size);
  }
  std::size_t primitive_count() const override { return 1; }
  std::pair<Shape, OpCount> cost(const Shape& in) const override {
    return {Shape{in[0], this->spec_.output_size, this->spec_.output_size}, {}};
  }
};

template <typename T>
class FlattenLayer : public Layer<T> {
 public:
  using Layer<T>::Layer;
  Tensor<T> forward(const Tensor<T>& x, ForwardContext&) override { return flatten(x); }
  std::size_t primitive_count() const override { return 1; }
  std::pair<Shape, OpCount> cost(const Shape& in) const override { return {Shape{shape_numel(in)}, {}}; }
};

template <typename T>
class DropoutLayer : public Layer<T> {
 public:
  using Layer<T>::Layer;
  Tensor<T> forward(const Tensor<T>& x, ForwardContext& ctx) override {
    return dropout(x, this->spec_.dropout_p, ctx.mode, ctx.rng);
  }
  std::size_t primitive_count() const override { return 1; }
  std::pair<Shape, OpCount> cost(const Shape& in) const override { return {in, {}}; }
};

// ---------------------------------------------------------------------------
// Model

template <typename T>
struct ForwardResult {
  Tensor<T> logits;                           // [N,1]
  std::map<std::string, Tensor<T>> features;  // captured layer outputs
  Tensor<T> embedding;                        // [N,F] input of the final classifier layer
};

/// A sequential network realized from a validated ModelConfig.
template <typename T>
class Model {
 public:
  explicit Model(ModelConfig config, std::uint64_t seed = 0) : config_(std::move(config)) {
    out_shapes_ = validate_model_config(config_);
    Philox base(seed, 0x6d6f64656cULL);
    for (std::size_t i = 0; i < config_.layers.size(); ++i) {
      Philox rng = base.fork(i);
      const auto& spec = config_.layers[i];
      switch (spec.kind) {
        case LayerKind::kConv:
        case LayerKind::kPointwise: layers_.push_back(std::make_unique<ConvLayer<T>>(spec, rng)); break;
        case LayerKind::kBneck: layers_.push_back(std::make_unique<BottleneckLayer<T>>(spec, rng)); break;
        case LayerKind::kLinear: layers_.push_back(std::make_unique<LinearLayer<T>>(spec, rng)); break;
        case LayerKind::kPool: layers_.push_back(std::make_unique<MaxPoolLayer<T>>(spec)); break;
        case LayerKind::kAdaptivePool: layers_.push_back(std::make_unique<AdaptivePoolLayer<T>>(spec)); break;
        case LayerKind::kFlatten: layers_.push_back(std::make_unique<FlattenLayer<T>>(spec)); break;
        case LayerKind::kDropout: layers_.push_back(std::make_unique<DropoutLayer<T>>(spec)); break;
      }
    }
    classifier_ = layers_.size();
    for (std::size_t i = layers_.size(); i-- > 0;) {
      if (layers_[i]->has_parameters()) {
        classifier_ = i;
        break;
      }
    }
  }

  const ModelConfig& config() const { return config_; }
  const std::string& name() const { return config_.name; }
  std::size_t size() const { return layers_.size(); }
  Layer<T>& layer(std::size_t i) { return *layers_.at(i); }
  const Layer<T>& layer(std::size_t i) const { return *layers_.at(i); }

  std::optional<std::size_t> find_layer(const std::string& name) const {
    for (std::size_t i = 0; i < layers_.size(); ++i)
      if (layers_[i]->name() == name) return i;
    return std::nullopt;
  }

  /// Output shape (no batch axis) of layer `i`.
  const Shape& output_shape(std::size_t i) const { return out_shapes_.at(i); }

  ForwardResult<T> forward(const Tensor<T>& input, ForwardContext ctx,
                           const std::vector<std::string>& capture = {}) {
    if (input.rank() != 4 || Shape(input.shape().begin() + 1, input.shape().end()) != config_.input_shape) {
      throw DimensionError(detail::concat(config_.name, ": expected input [N,", shape_str(config_.input_shape).substr(1),
                                          " got ", shape_str(input.shape())));
    }
    std::set<std::string> wanted(capture.begin(), capture.end());
    for (const auto& w : wanted) {
      if (!find_layer(w)) throw ConfigError(config_.name + ": no layer named '" + w + "'");
    }
    ForwardResult<T> r;
    Tensor<T> x = input;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      if (i == classifier_) r.embedding = x.rank() == 2 ? x : flatten(x);
      x = layers_[i]->forward(x, ctx);
      if (wanted.count(layers_[i]->name())) r.features[layers_[i]->name()] = x;
    }
    r.logits = x.rank() == 2 ? x : flatten(x);
    return r;
  }

  Tensor<T> logits(const Tensor<T>& input, Mode mode = Mode::kEval, Philox* rng = nullptr) {
    return forward(input, ForwardContext{mode, rng}).logits;
  }

  /// Trainable tensors in a fixed order.
  std::vector<NamedTensor<T>> parameters() const {
    std::vector<NamedTensor<T>> out;
    for (const auto& l : layers_) l->collect_parameters(out);
    return out;
  }

  /// Non-trainable state (BN running statistics).
  std::vector<NamedTensor<T>> buffers() const {
    std::vector<NamedTensor<T>> out;
    for (const auto& l : layers_) l->collect_buffers(out);
    return out;
  }

  /// Parameters followed by buffers; the serialization order.
  std::vector<NamedTensor<T>> state() const {
    auto out = parameters();
    auto b = buffers();
    out.insert(out.end(), b.begin(), b.end());
    return out;
  }

  std::vector<Tensor<T>> parameter_tensors() const {
    std::vector<Tensor<T>> out;
    for (auto& p : parameters()) out.push_back(p.tensor);
    return out;
  }

  void set_requires_grad(bool on) {
    for (auto& p : parameters()) p.tensor.set_requires_grad(on);
  }

  void zero_grad() {
    for (auto& p : parameters()) p.tensor.zero_grad();
  }

  using Snapshot = std::vector<std::vector<T>>;

  Snapshot snapshot() const {
    Snapshot s;
    for (const auto& t : state()) s.emplace_back(t.tensor.data().begin(), t.tensor.data().end());
    return s;
  }

  void restore(const Snapshot& s) {
    auto st = state();
    if (s.size() != st.size()) throw DimensionError("snapshot does not match model state");
    for (std::size_t i = 0; i < st.size(); ++i) {
      auto dst = st[i].tensor.data_mut();
      if (dst.size() != s[i].size()) throw DimensionError("snapshot tensor size mismatch for " + st[i].name);
      std::copy(s[i].begin(), s[i].end(), dst.begin());
    }
  }

 private:
  ModelConfig config_;
  std::vector<Shape> out_shapes_;
  std::vector<std::unique_ptr<Layer<T>>> layers_;
  std::size_t classifier_ = 0;
};

template <typename T = float>
Model<T> build_teacher(std::uint64_t seed = 0) {
  return Model<T>(teacher_config(), seed);
}

template <typename T = float>
Model<T> build_student(ModelConfig config, std::uint64_t seed = 0) {
  if (config.role != ModelRole::kStudent) throw ConfigError("build_student: config '" + config.name + "' is not a student");
  return Model<T>(std::move(config), seed);
}

}  // namespace dvad
