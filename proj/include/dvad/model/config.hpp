#pragma once

#include <nlohmann/json.hpp>

#include <cmath>
#include <cstddef>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "dvad/error.hpp"
#include "dvad/ops.hpp"
#include "dvad/tensor.hpp"

namespace dvad {

enum class LayerKind { kConv, kBneck, kPool, kAdaptivePool, kPointwise, kFlatten, kLinear, kDropout };

inline std::string to_string(LayerKind k) {
  switch (k) {
    case LayerKind::kConv: return "conv";
    case LayerKind::kBneck: return "bneck";
    case LayerKind::kPool: return "pool";
    case LayerKind::kAdaptivePool: return "adaptive_pool";
    case LayerKind::kPointwise: return "pointwise";
    case LayerKind::kFlatten: return "flatten";
    case LayerKind::kLinear: return "linear";
    case LayerKind::kDropout: return "dropout";
  }
  return "?";
}

inline LayerKind parse_layer_kind(const std::string& s) {
  for (auto k : {LayerKind::kConv, LayerKind::kBneck, LayerKind::kPool, LayerKind::kAdaptivePool,
                 LayerKind::kPointwise, LayerKind::kFlatten, LayerKind::kLinear, LayerKind::kDropout}) {
    if (to_string(k) == s) return k;
  }
  throw ConfigError("unknown layer kind '" + s + "'");
}

/// One entry of a declarative architecture.
///
/// `conv` is conv + optional BN + activation (padding kernel/2);
/// `pointwise` is a 1x1 conv with bias and no BN;
/// `bneck` is an inverted residual (expand, depthwise, optional SE, project).
struct LayerSpec {
  LayerKind kind = LayerKind::kConv;
  std::string name;
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  std::size_t kernel = 3;
  std::size_t stride = 1;
  double expansion_ratio = 1.0;
  bool se = false;
  Activation activation = Activation::kRelu;
  double dropout_p = 0.0;
  bool batch_norm = true;
  bool bias = false;
  std::size_t output_size = 1;

  /// Expanded width of a bottleneck.
  std::size_t expanded_channels() const {
    return static_cast<std::size_t>(std::llround(static_cast<double>(in_channels) * expansion_ratio));
  }
};

enum class ModelRole { kTeacher, kStudent };

struct ModelConfig {
  std::string name;
  ModelRole role = ModelRole::kStudent;
  Shape input_shape{1, 128, 128};
  std::vector<LayerSpec> layers;
};

/// SE squeeze width: reduction 4, at least one unit.
inline std::size_t se_squeeze_channels(std::size_t expanded) { return std::max<std::size_t>(1, expanded / 4); }

// ---------------------------------------------------------------------------
// JSON

inline nlohmann::json to_json(const LayerSpec& l) {
  nlohmann::json j;
  j["kind"] = to_string(l.kind);
  j["name"] = l.name;
  switch (l.kind) {
    case LayerKind::kConv:
      j["in_channels"] = l.in_channels;
      j["out_channels"] = l.out_channels;
      j["kernel"] = l.kernel;
      j["stride"] = l.stride;
      j["batch_norm"] = l.batch_norm;
      j["bias"] = l.bias;
      j["activation"] = to_string(l.activation);
      break;
    case LayerKind::kBneck:
      j["in_channels"] = l.in_channels;
      j["out_channels"] = l.out_channels;
      j["kernel"] = l.kernel;
      j["stride"] = l.stride;
      j["expansion_ratio"] = l.expansion_ratio;
      j["se"] = l.se;
      j["activation"] = to_string(l.activation);
      break;
    case LayerKind::kPointwise:
      j["in_channels"] = l.in_channels;
      j["out_channels"] = l.out_channels;
      j["activation"] = to_string(l.activation);
      break;
    case LayerKind::kLinear:
      j["in_channels"] = l.in_channels;
      j["out_channels"] = l.out_channels;
      j["activation"] = to_string(l.activation);
      break;
    case LayerKind::kDropout:
      j["dropout_p"] = l.dropout_p;
      break;
    case LayerKind::kAdaptivePool:
      j["output_size"] = l.output_size;
      break;
    case LayerKind::kPool:
    case LayerKind::kFlatten:
      break;
  }
  return j;
}

inline nlohmann::json to_json(const ModelConfig& c) {
  nlohmann::json j;
  j["name"] = c.name;
  j["role"] = c.role == ModelRole::kTeacher ? "teacher" : "student";
  j["input_shape"] = c.input_shape;
  j["layers"] = nlohmann::json::array();
  for (const auto& l : c.layers) j["layers"].push_back(to_json(l));
  return j;
}

inline LayerSpec layer_from_json(const nlohmann::json& j, std::size_t index) {
  try {
    LayerSpec l;
    l.kind = parse_layer_kind(j.at("kind").get<std::string>());
    l.name = j.value("name", std::string{});
    l.in_channels = j.value("in_channels", std::size_t{0});
    l.out_channels = j.value("out_channels", std::size_t{0});
    l.kernel = j.value("kernel", l.kind == LayerKind::kPointwise ? std::size_t{1} : std::size_t{3});
    l.stride = j.value("stride", std::size_t{1});
    l.expansion_ratio = j.value("expansion_ratio", 1.0);
    l.se = j.value("se", false);
    const bool head = l.kind == LayerKind::kPointwise || l.kind == LayerKind::kLinear;
    l.activation = parse_activation(j.value("activation", std::string(head ? "none" : "relu")));
    l.dropout_p = j.value("dropout_p", 0.0);
    l.batch_norm = j.value("batch_norm", true);
    l.bias = j.value("bias", false);
    l.output_size = j.value("output_size", std::size_t{1});
    return l;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(detail::concat("layer ", index, ": ", e.what()));
  }
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  try {
    c.name = j.value("name", std::string("model"));
    const auto role = j.value("role", std::string("student"));
    if (role == "teacher") {
      c.role = ModelRole::kTeacher;
    } else if (role == "student") {
      c.role = ModelRole::kStudent;
    } else {
      throw ConfigError("unknown model role '" + role + "'");
    }
    if (j.contains("input_shape")) c.input_shape = j.at("input_shape").get<Shape>();
    const auto& layers = j.at("layers");
    for (std::size_t i = 0; i < layers.size(); ++i) c.layers.push_back(layer_from_json(layers[i], i));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("model config: ") + e.what());
  }
  return c;
}

// ---------------------------------------------------------------------------
// Validation

/// Assigns default names ("<kind><k>", counted per kind) and checks channel
/// chaining, kernel and ratio invariants. Returns the per-layer output shapes
/// (without batch axis).
inline std::vector<Shape> validate_model_config(ModelConfig& c) {
  using detail::concat;
  if (c.input_shape.size() != 3) throw ConfigError("input_shape must be [C,H,W]");
  if (c.layers.empty()) throw ConfigError("model config has no layers");
  std::map<LayerKind, std::size_t> counters;
  std::set<std::string> names;
  for (auto& l : c.layers) {
    const std::size_t k = ++counters[l.kind];
    if (l.name.empty()) l.name = to_string(l.kind) + std::to_string(k);
    if (!names.insert(l.name).second) throw ConfigError("duplicate layer name '" + l.name + "'");
  }

  std::vector<Shape> shapes;
  Shape cur = c.input_shape;
  for (std::size_t i = 0; i < c.layers.size(); ++i) {
    const auto& l = c.layers[i];
    auto fail = [&](const std::string& msg) {
      throw ConfigError(concat("layer ", i, " ('", l.name, "', ", to_string(l.kind), "): ", msg));
    };
    const bool spatial = cur.size() == 3;
    switch (l.kind) {
      case LayerKind::kConv:
      case LayerKind::kBneck:
      case LayerKind::kPointwise: {
        if (!spatial) fail("expects a [C,H,W] input, got " + shape_str(cur));
        if (l.in_channels != cur[0]) fail(concat("in_channels ", l.in_channels, " != incoming channels ", cur[0]));
        if (l.out_channels == 0) fail("out_channels must be positive");
        const std::size_t kernel = l.kind == LayerKind::kPointwise ? 1 : l.kernel;
        if (kernel != 1 && kernel != 3 && kernel != 5) fail(concat("kernel ", kernel, " not in {1,3,5}"));
        if (c.role == ModelRole::kStudent && kernel == 5) fail("student configs use 1x1 or 3x3 kernels only");
        if (l.stride != 1 && l.stride != 2) fail(concat("stride ", l.stride, " not in {1,2}"));
        if (l.kind == LayerKind::kBneck && l.expansion_ratio < 1.0) fail("expansion_ratio must be >= 1");
        const std::size_t stride = l.kind == LayerKind::kPointwise ? 1 : l.stride;
        const std::size_t pad = kernel / 2;
        if (cur[1] + 2 * pad < kernel || cur[2] + 2 * pad < kernel) fail("kernel larger than padded input");
        cur = {l.out_channels, (cur[1] + 2 * pad - kernel) / stride + 1, (cur[2] + 2 * pad - kernel) / stride + 1};
        break;
      }
      case LayerKind::kPool:
        if (!spatial) fail("expects a [C,H,W] input");
        if (cur[1] % 2 || cur[2] % 2) fail("max2x2 pooling needs even spatial extents, got " + shape_str(cur));
        cur = {cur[0], cur[1] / 2, cur[2] / 2};
        break;
      case LayerKind::kAdaptivePool:
        if (!spatial) fail("expects a [C,H,W] input");
        if (l.output_size == 0) fail("output_size must be positive");
        cur = {cur[0], l.output_size, l.output_size};
        break;
      case LayerKind::kFlatten:
        cur = {shape_numel(cur)};
        break;
      case LayerKind::kLinear:
        if (cur.size() != 1) fail("expects a flattened input, got " + shape_str(cur));
        if (l.in_channels != cur[0]) fail(concat("in features ", l.in_channels, " != incoming features ", cur[0]));
        if (l.out_channels == 0) fail("out features must be positive");
        cur = {l.out_channels};
        break;
      case LayerKind::kDropout:
        if (!(l.dropout_p >= 0.0 && l.dropout_p < 1.0)) fail("dropout_p must lie in [0,1)");
        break;
    }
    shapes.push_back(cur);
  }
  if (shape_numel(cur) != 1) {
    throw ConfigError("model output must be a single logit, got " + shape_str(cur));
  }
  if (c.role == ModelRole::kStudent) {
    const auto n = c.layers.size();
    const bool head = n >= 4 && c.layers[n - 4].kind == LayerKind::kAdaptivePool &&
                      c.layers[n - 3].kind == LayerKind::kPointwise &&
                      c.layers[n - 2].kind == LayerKind::kPointwise && c.layers[n - 1].kind == LayerKind::kFlatten;
    if (!head) {
      throw ConfigError("student configs must end with adaptive_pool, pointwise, pointwise, flatten");
    }
  }
  return shapes;
}

inline ModelConfig load_model_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open model config '" + path + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("model config '" + path + "': " + e.what());
  }
  auto c = model_config_from_json(j);
  validate_model_config(c);
  return c;
}

/// The VGG11-style teacher for 1x128x128 inputs.
inline ModelConfig teacher_config() {
  ModelConfig c;
  c.name = "teacher";
  c.role = ModelRole::kTeacher;
  auto conv = [](std::size_t in, std::size_t out) {
    LayerSpec l;
    l.kind = LayerKind::kConv;
    l.in_channels = in;
    l.out_channels = out;
    l.kernel = 3;
    l.stride = 1;
    l.bias = true;
    l.batch_norm = true;
    l.activation = Activation::kRelu;
    return l;
  };
  auto pool = [] {
    LayerSpec l;
    l.kind = LayerKind::kPool;
    return l;
  };
  auto fc = [](std::size_t in, std::size_t out, Activation a) {
    LayerSpec l;
    l.kind = LayerKind::kLinear;
    l.in_channels = in;
    l.out_channels = out;
    l.bias = true;
    l.activation = a;
    return l;
  };
  auto drop = [] {
    LayerSpec l;
    l.kind = LayerKind::kDropout;
    l.dropout_p = 0.5;
    return l;
  };
  LayerSpec flat;
  flat.kind = LayerKind::kFlatten;
  c.layers = {conv(1, 64),    pool(),         conv(64, 128),  pool(),
              conv(128, 256), conv(256, 256), pool(),         conv(256, 512),
              conv(512, 512), pool(),         conv(512, 512), conv(512, 512),
              pool(),         flat,           fc(8192, 4096, Activation::kRelu),
              drop(),         fc(4096, 4096, Activation::kRelu),
              drop(),         fc(4096, 1, Activation::kNone)};
  validate_model_config(c);
  return c;
}

}  // namespace dvad
