#pragma once

#include <nlohmann/json.hpp>

#include <cstdint>
#include <string>

#include "dvad/error.hpp"
#include "dvad/model/config.hpp"

namespace dvad {

/// kNone trains on hard labels only (teacher training or a no-teacher baseline).
enum class Method { kNone, kResponse, kFeature, kRelational };

inline std::string to_string(Method m) {
  switch (m) {
    case Method::kNone: return "none";
    case Method::kResponse: return "response";
    case Method::kFeature: return "feature";
    case Method::kRelational: return "relational";
  }
  return "?";
}

inline Method parse_method(const std::string& s) {
  if (s == "none") return Method::kNone;
  if (s == "response") return Method::kResponse;
  if (s == "feature") return Method::kFeature;
  if (s == "relational") return Method::kRelational;
  throw ConfigError("unknown distillation method '" + s + "' (expected one of: response, feature, relational)");
}

struct DistillConfig {
  Method method = Method::kNone;
  double temperature = 5.0;
  double alpha = 0.2;  // weight of the distillation term
  double lr = 1e-3;
  std::size_t batch_size = 32;
  std::size_t max_epochs = 50;
  std::size_t patience = 3;
  std::uint64_t seed = 0;
  std::string hint_layer = "conv6";
  std::string guide_layer;  // empty: middle bottleneck of the student
  bool t_squared = true;
  bool invert_alpha = false;  // weight the hard-label term by alpha instead

  double distill_weight() const { return invert_alpha ? 1.0 - alpha : alpha; }

  void validate() const {
    if (!(temperature > 0.0)) throw ConfigError("temperature must be > 0");
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw ConfigError("alpha must lie in [0, 1]");
    if (patience < 1) throw ConfigError("patience must be >= 1");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (max_epochs < 1) throw ConfigError("max_epochs must be >= 1");
    if (!(lr > 0.0)) throw ConfigError("lr must be > 0");
  }
};

inline nlohmann::json to_json(const DistillConfig& c) {
  return {{"method", to_string(c.method)},   {"temperature", c.temperature}, {"alpha", c.alpha},
          {"lr", c.lr},                      {"batch_size", c.batch_size},   {"max_epochs", c.max_epochs},
          {"patience", c.patience},          {"seed", c.seed},               {"hint_layer", c.hint_layer},
          {"guide_layer", c.guide_layer},    {"t_squared", c.t_squared},     {"invert_alpha", c.invert_alpha}};
}

/// Overlays the keys present in `j` onto `base`.
inline DistillConfig distill_config_from_json(const nlohmann::json& j, DistillConfig base = {}) {
  try {
    if (j.contains("method")) base.method = parse_method(j.at("method").get<std::string>());
    base.temperature = j.value("temperature", base.temperature);
    base.alpha = j.value("alpha", base.alpha);
    base.lr = j.value("lr", base.lr);
    base.batch_size = j.value("batch_size", base.batch_size);
    base.max_epochs = j.value("max_epochs", base.max_epochs);
    base.patience = j.value("patience", base.patience);
    base.seed = j.value("seed", base.seed);
    base.hint_layer = j.value("hint_layer", base.hint_layer);
    base.guide_layer = j.value("guide_layer", base.guide_layer);
    base.t_squared = j.value("t_squared", base.t_squared);
    base.invert_alpha = j.value("invert_alpha", base.invert_alpha);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("distill config: ") + e.what());
  }
  base.validate();
  return base;
}

/// Name of the middle bottleneck ("bneck<k>", k = ceil(count / 2)).
inline std::string default_guide_layer(const ModelConfig& c) {
  std::size_t count = 0;
  for (const auto& l : c.layers)
    if (l.kind == LayerKind::kBneck) ++count;
  if (count == 0) throw ConfigError("model '" + c.name + "' has no bottleneck to use as guide layer");
  std::size_t seen = 0;
  for (const auto& l : c.layers) {
    if (l.kind == LayerKind::kBneck && ++seen == (count + 1) / 2) {
      return l.name.empty() ? "bneck" + std::to_string(seen) : l.name;
    }
  }
  return {};
}

}  // namespace dvad
