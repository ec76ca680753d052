#pragma once

#include <nlohmann/json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dvad/adam.hpp"
#include "dvad/distill/config.hpp"
#include "dvad/distill/losses.hpp"
#include "dvad/error.hpp"
#include "dvad/model/model.hpp"
#include "dvad/rng.hpp"
#include "dvad/spectrogram_set.hpp"

namespace dvad {

/// Consecutive chunks of `batch` indices, shuffled when `rng` is given. A
/// trailing chunk shorter than `min_batch` is merged into its predecessor.
inline std::vector<std::vector<std::size_t>> make_batches(std::size_t n, std::size_t batch, std::size_t min_batch,
                                                          Philox* rng) {
  if (n == 0) throw DataError("cannot batch an empty split");
  if (n < min_batch) throw DataError(detail::concat("split of ", n, " samples is smaller than the minimum batch ", min_batch));
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  if (rng) rng->shuffle(order);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < n; i += batch) {
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                     order.begin() + static_cast<std::ptrdiff_t>(std::min(n, i + batch)));
  }
  if (out.size() > 1 && out.back().size() < min_batch) {
    auto tail = std::move(out.back());
    out.pop_back();
    out.back().insert(out.back().end(), tail.begin(), tail.end());
  }
  return out;
}

// ---------------------------------------------------------------------------
// Objective

/// Quantities a distillation term may use. `feature` is the regressed guide
/// map on the student side and the hint map on the teacher side.
template <typename T>
struct DistillTerms {
  Tensor<T> logits;
  Tensor<T> feature;
  Tensor<T> embedding;
};

template <typename T>
Tensor<T> distillation_term(const DistillConfig& cfg, const DistillTerms<T>& s, const DistillTerms<T>& t) {
  switch (cfg.method) {
    case Method::kResponse:
      if (!s.logits.defined() || !t.logits.defined()) throw ConfigError("response distillation needs both logits");
      return soft_target_loss(s.logits, t.logits, static_cast<T>(cfg.temperature), cfg.t_squared);
    case Method::kFeature:
      if (!s.feature.defined() || !t.feature.defined()) {
        throw ConfigError("feature distillation needs a guide map (student) and a hint map (teacher)");
      }
      return feature_loss(s.feature, t.feature);
    case Method::kRelational:
      if (!s.embedding.defined() || !t.embedding.defined()) {
        throw ConfigError("relational distillation needs student and teacher embeddings");
      }
      return add(rkd_distance_loss(s.embedding, t.embedding), rkd_angle_loss(s.embedding, t.embedding));
    case Method::kNone: break;
  }
  throw ConfigError("method 'none' has no distillation term");
}

/// w * L_distill + (1 - w) * BCE-with-logits(student, labels), w = distill_weight().
/// A zero weight drops the corresponding term entirely.
template <typename T>
Tensor<T> combined_loss(const DistillConfig& cfg, const DistillTerms<T>& s, const DistillTerms<T>& t,
                        std::span<const T> labels) {
  const T w = static_cast<T>(cfg.method == Method::kNone ? 0.0 : cfg.distill_weight());
  std::optional<Tensor<T>> total;
  if (w != T{1}) total = scale(bce_with_logits(s.logits, labels), T{1} - w);
  if (w != T{0}) {
    auto d = scale(distillation_term(cfg, s, t), w);
    total = total ? add(*total, d) : d;
  }
  return *total;
}

// ---------------------------------------------------------------------------
// Early stopping

class EarlyStopping {
 public:
  explicit EarlyStopping(std::size_t patience) : patience_(patience) {
    if (patience < 1) throw ConfigError("patience must be >= 1");
  }

  /// Returns true on strict improvement; ties and NaN count as no improvement.
  bool observe(double val_loss) {
    ++epoch_;
    if (val_loss < best_) {
      best_ = val_loss;
      best_epoch_ = epoch_;
      counter_ = 0;
      return true;
    }
    ++counter_;
    return false;
  }

  bool should_stop() const { return counter_ >= patience_; }
  double best() const { return best_; }
  std::size_t best_epoch() const { return best_epoch_; }  // 1-based, 0 before any improvement
  std::size_t counter() const { return counter_; }

 private:
  std::size_t patience_;
  std::size_t epoch_ = 0, best_epoch_ = 0, counter_ = 0;
  double best_ = std::numeric_limits<double>::infinity();
};

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double train_loss = 0.0;
  double val_loss = 0.0;
  double elapsed_s = 0.0;
  bool stopped = false;
};

inline nlohmann::json to_json(const EpochRecord& r) {
  return {{"epoch", r.epoch}, {"train_loss", r.train_loss}, {"val_loss", r.val_loss},
          {"elapsed_s", r.elapsed_s}, {"stopped", r.stopped}};
}

struct EpochLoopResult {
  std::vector<EpochRecord> log;
  std::size_t best_epoch = 0;
  double best_val_loss = std::numeric_limits<double>::infinity();
};

/// Drives `run_epoch(epoch) -> {train_loss, val_loss}` until the patience or
/// epoch budget is exhausted. `save_best` is called after every strict
/// improvement and `restore_best` once at the end.
inline EpochLoopResult run_epoch_loop(std::size_t max_epochs, std::size_t patience,
                                      const std::function<std::pair<double, double>(std::size_t)>& run_epoch,
                                      const std::function<void()>& save_best,
                                      const std::function<void()>& restore_best,
                                      const std::function<void(const EpochRecord&)>& on_epoch = {}) {
  EarlyStopping stop(patience);
  EpochLoopResult r;
  const auto t0 = std::chrono::steady_clock::now();
  for (std::size_t epoch = 1; epoch <= max_epochs; ++epoch) {
    auto [train_loss, val_loss] = run_epoch(epoch);
    if (stop.observe(val_loss)) save_best();
    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = train_loss;
    rec.val_loss = val_loss;
    rec.elapsed_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    rec.stopped = stop.should_stop() || epoch == max_epochs;
    r.log.push_back(rec);
    if (on_epoch) on_epoch(rec);
    if (rec.stopped) break;
  }
  r.best_epoch = stop.best_epoch();
  r.best_val_loss = stop.best();
  if (r.best_epoch > 0) restore_best();
  return r;
}

inline void write_training_log(const std::string& path, const std::vector<EpochRecord>& log) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write training log '" + path + "'");
  for (const auto& r : log) out << to_json(r).dump() << "\n";
}

// ---------------------------------------------------------------------------
// Teacher outputs

/// Teacher quantities for every sample of a split, computed once in eval mode.
template <typename T>
struct TeacherCache {
  std::vector<T> logits;
  Shape feature_shape;  // per sample, empty when unused
  std::vector<T> features;
  std::size_t embedding_dim = 0;
  std::vector<T> embeddings;

  DistillTerms<T> gather(std::span<const std::size_t> idx) const {
    DistillTerms<T> t;
    const std::size_t n = idx.size();
    t.logits = Tensor<T>(Shape{n, 1});
    for (std::size_t b = 0; b < n; ++b) t.logits.data_mut()[b] = logits[idx[b]];
    if (!feature_shape.empty()) {
      Shape s{n};
      s.insert(s.end(), feature_shape.begin(), feature_shape.end());
      t.feature = Tensor<T>(s);
      const std::size_t m = shape_numel(feature_shape);
      for (std::size_t b = 0; b < n; ++b) {
        std::copy_n(features.begin() + static_cast<std::ptrdiff_t>(idx[b] * m), m,
                    t.feature.data_mut().begin() + static_cast<std::ptrdiff_t>(b * m));
      }
    }
    if (embedding_dim > 0) {
      t.embedding = Tensor<T>(Shape{n, embedding_dim});
      for (std::size_t b = 0; b < n; ++b) {
        std::copy_n(embeddings.begin() + static_cast<std::ptrdiff_t>(idx[b] * embedding_dim), embedding_dim,
                    t.embedding.data_mut().begin() + static_cast<std::ptrdiff_t>(b * embedding_dim));
      }
    }
    return t;
  }
};

/// Runs the teacher over `data`. For feature distillation the hint map is
/// reduced with adaptive average pooling to at most `max_hw` spatially; the
/// pooling commutes with caching because the teacher is frozen.
template <typename T>
TeacherCache<T> compute_teacher_cache(Model<T>& teacher, const SpectrogramSet& data, bool features, bool embeddings,
                                      const std::string& hint_layer, std::pair<std::size_t, std::size_t> max_hw,
                                      std::size_t batch = 32) {
  NoGradScope<T> no_grad;
  TeacherCache<T> c;
  std::vector<std::string> capture;
  if (features) {
    if (!teacher.find_layer(hint_layer)) throw ConfigError("teacher has no hint layer '" + hint_layer + "'");
    capture.push_back(hint_layer);
  }
  for (std::size_t i = 0; i < data.size(); i += batch) {
    std::vector<std::size_t> idx(std::min(batch, data.size() - i));
    std::iota(idx.begin(), idx.end(), i);
    auto r = teacher.forward(data.batch<T>(idx), ForwardContext{Mode::kEval, nullptr}, capture);
    c.logits.insert(c.logits.end(), r.logits.data().begin(), r.logits.data().end());
    if (features) {
      Tensor<T> h = r.features.at(hint_layer);
      if (h.rank() != 4) throw ConfigError("hint layer '" + hint_layer + "' is not a feature map");
      const std::size_t oh = std::min(h.dim(2), max_hw.first), ow = std::min(h.dim(3), max_hw.second);
      if (oh != h.dim(2) || ow != h.dim(3)) h = adaptive_avg_pool2d(h, oh, ow);
      c.feature_shape = Shape(h.shape().begin() + 1, h.shape().end());
      c.features.insert(c.features.end(), h.data().begin(), h.data().end());
    }
    if (embeddings) {
      c.embedding_dim = r.embedding.dim(1);
      c.embeddings.insert(c.embeddings.end(), r.embedding.data().begin(), r.embedding.data().end());
    }
  }
  return c;
}

template <typename T>
TeacherCache<T> compute_teacher_cache(Model<T>& teacher, const SpectrogramSet& data, Method method,
                                      const std::string& hint_layer, std::pair<std::size_t, std::size_t> max_hw,
                                      std::size_t batch = 32) {
  return compute_teacher_cache(teacher, data, method == Method::kFeature, method == Method::kRelational, hint_layer,
                               max_hw, batch);
}

/// Guide layer of the student and the spatial size hint maps are pooled to.
struct GuideInfo {
  std::string guide;
  std::size_t guide_channels = 0, hint_channels = 0;
  std::pair<std::size_t, std::size_t> hw{std::numeric_limits<std::size_t>::max(),
                                         std::numeric_limits<std::size_t>::max()};
};

template <typename T>
GuideInfo resolve_guide(const Model<T>& student, const Model<T>& teacher, const DistillConfig& cfg) {
  GuideInfo g;
  g.guide = cfg.guide_layer.empty() ? default_guide_layer(student.config()) : cfg.guide_layer;
  auto gi = student.find_layer(g.guide);
  if (!gi) throw ConfigError("student has no guide layer '" + g.guide + "'");
  const Shape& gs = student.output_shape(*gi);
  if (gs.size() != 3) throw ConfigError("guide layer '" + g.guide + "' is not a feature map");
  auto hi = teacher.find_layer(cfg.hint_layer);
  if (!hi) throw ConfigError("teacher has no hint layer '" + cfg.hint_layer + "'");
  const Shape& hs = teacher.output_shape(*hi);
  if (hs.size() != 3) throw ConfigError("hint layer '" + cfg.hint_layer + "' is not a feature map");
  g.guide_channels = gs[0];
  g.hint_channels = hs[0];
  g.hw = {gs[1], gs[2]};
  return g;
}

/// Teacher outputs for both splits, shareable between runs and methods that
/// use the same teacher, student architecture and data.
template <typename T>
struct TeacherCaches {
  TeacherCache<T> train, val;
};

/// Everything any method needs: logits, pooled hint maps and embeddings.
template <typename T>
TeacherCaches<T> compute_teacher_caches(Model<T>& teacher, const Model<T>& student, const SpectrogramSet& train_set,
                                        const SpectrogramSet& val_set, const DistillConfig& cfg) {
  DistillConfig fcfg = cfg;
  fcfg.method = Method::kFeature;
  const auto g = resolve_guide(student, teacher, fcfg);
  return {compute_teacher_cache(teacher, train_set, true, true, cfg.hint_layer, g.hw),
          compute_teacher_cache(teacher, val_set, true, true, cfg.hint_layer, g.hw)};
}

// ---------------------------------------------------------------------------
// Training

struct TrainResult {
  std::vector<EpochRecord> log;
  std::size_t best_epoch = 0;
  double best_val_loss = std::numeric_limits<double>::infinity();
};

/// Trains `model` in place and leaves it holding the best-validation weights.
/// Teacher-role models are trained with BCE on the sigmoid output; students with
/// BCE-with-logits, combined with the distillation term when `teacher` is set.
template <typename T>
TrainResult train(Model<T>& model, const SpectrogramSet& train_set, const SpectrogramSet& val_set,
                  const DistillConfig& cfg, Model<T>* teacher = nullptr,
                  const std::function<void(const EpochRecord&)>& on_epoch = {},
                  const TeacherCaches<T>* caches = nullptr) {
  cfg.validate();
  if (train_set.empty()) throw DataError("training split is empty");
  if (val_set.empty()) throw DataError("validation split is empty");
  const bool distilling = cfg.method != Method::kNone;
  if (distilling && !teacher) throw ConfigError("method '" + to_string(cfg.method) + "' requires a teacher");
  if (!distilling && teacher) throw ConfigError("a teacher was given but the method is 'none'");
  const bool teacher_objective = model.config().role == ModelRole::kTeacher;
  if (teacher_objective && distilling) throw ConfigError("distillation target must be a student model");

  Philox root(cfg.seed, 0x747261696eULL);

  // Feature path: guide capture and a 1x1 regressor to the hint channels.
  std::string guide;
  std::optional<ConvUnit<T>> regressor;
  GuideInfo gi;
  if (cfg.method == Method::kFeature) {
    gi = resolve_guide(model, *teacher, cfg);
    guide = gi.guide;
    Philox reg_rng = root.fork(1);
    regressor.emplace(gi.guide_channels, gi.hint_channels, 1, 1, 1, true, reg_rng);
  }

  std::optional<TeacherCache<T>> own_train, own_val;
  const TeacherCache<T>* train_cache = nullptr;
  const TeacherCache<T>* val_cache = nullptr;
  if (distilling && caches) {
    if (cfg.method == Method::kFeature) {
      const Shape& hs = teacher->output_shape(*teacher->find_layer(cfg.hint_layer));
      const Shape want{hs[0], std::min(hs[1], gi.hw.first), std::min(hs[2], gi.hw.second)};
      if (caches->train.feature_shape != want) throw ConfigError("cached hint maps do not match the guide layer");
    }
    if (cfg.method == Method::kRelational && caches->train.embedding_dim == 0) {
      throw ConfigError("cached teacher outputs have no embeddings");
    }
    train_cache = &caches->train;
    val_cache = &caches->val;
  } else if (distilling) {
    own_train = compute_teacher_cache(*teacher, train_set, cfg.method, cfg.hint_layer, gi.hw);
    own_val = compute_teacher_cache(*teacher, val_set, cfg.method, cfg.hint_layer, gi.hw);
    train_cache = &*own_train;
    val_cache = &*own_val;
  }
  if (train_cache && (train_cache->logits.size() != train_set.size() || val_cache->logits.size() != val_set.size())) {
    throw ConfigError("cached teacher outputs do not match the data");
  }

  model.set_requires_grad(true);
  auto params = model.parameter_tensors();
  if (regressor) {
    params.push_back(regressor->weight);
    params.push_back(*regressor->bias);
  }
  Adam<T> adam(params, AdamOptions{cfg.lr, 0.9, 0.999, 1e-8});
  const std::size_t min_batch = cfg.method == Method::kRelational ? 3 : 1;
  const std::vector<std::string> capture = guide.empty() ? std::vector<std::string>{} : std::vector{guide};

  auto objective = [&](const ForwardResult<T>& r, const TeacherCache<T>* cache,
                       std::span<const std::size_t> idx, const std::vector<T>& y) {
    // BCE on the sigmoid output, evaluated in logit form: once float32
    // sigmoid rounds to exactly 0 or 1 the clamped probability form has a
    // zero gradient and training never leaves saturation.
    if (teacher_objective) return bce_with_logits(r.logits, std::span<const T>(y));
    DistillTerms<T> s{r.logits, {}, r.embedding};
    DistillTerms<T> t;
    if (distilling) {
      t = cache->gather(idx);
      if (regressor) s.feature = (*regressor)(r.features.at(guide));
    }
    return combined_loss(cfg, s, t, std::span<const T>(y));
  };

  auto val_batches = make_batches(val_set.size(), cfg.batch_size, min_batch, nullptr);
  auto run_epoch = [&](std::size_t epoch) -> std::pair<double, double> {
    Philox shuffle_rng = root.fork(1000 + epoch);
    Philox dropout_rng = root.fork(2000000 + epoch);
    double train_sum = 0.0;
    for (const auto& idx : make_batches(train_set.size(), cfg.batch_size, min_batch, &shuffle_rng)) {
      const auto y = train_set.batch_labels<T>(idx);
      Tape<T> tape;
      Tensor<T> loss;
      {
        TapeScope<T> scope(tape);
        auto r = model.forward(train_set.batch<T>(idx), ForwardContext{Mode::kTrain, &dropout_rng}, capture);
        loss = objective(r, train_cache, idx, y);
      }
      tape.backward(loss);
      adam.step();
      adam.zero_grad();
      train_sum += static_cast<double>(loss.item()) * static_cast<double>(idx.size());
    }
    NoGradScope<T> no_grad;
    double val_sum = 0.0;
    for (const auto& idx : val_batches) {
      const auto y = val_set.batch_labels<T>(idx);
      auto r = model.forward(val_set.batch<T>(idx), ForwardContext{Mode::kEval, nullptr}, capture);
      val_sum += static_cast<double>(objective(r, val_cache, idx, y).item()) * static_cast<double>(idx.size());
    }
    return {train_sum / static_cast<double>(train_set.size()), val_sum / static_cast<double>(val_set.size())};
  };

  typename Model<T>::Snapshot best;
  auto loop = run_epoch_loop(
      cfg.max_epochs, cfg.patience, run_epoch, [&] { best = model.snapshot(); }, [&] { model.restore(best); },
      on_epoch);
  model.zero_grad();
  return TrainResult{std::move(loop.log), loop.best_epoch, loop.best_val_loss};
}

}  // namespace dvad
