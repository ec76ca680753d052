#pragma once

// End-to-end steps shared by the command-line tool and the acceptance runner.

#include <nlohmann/json.hpp>

#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <string>

#include "dvad/audio/dataset.hpp"
#include "dvad/distill/trainer.hpp"
#include "dvad/eval/report.hpp"
#include "dvad/model/weights_io.hpp"

namespace dvad {

namespace fs = std::filesystem;

struct DataSplits {
  SpectrogramSet train, val, test;
};

inline DataSplits load_splits(const audio::DatasetManifest& m, const fs::path& dir, bool use_cache = false) {
  return {audio::load_split(m, dir, "train", use_cache), audio::load_split(m, dir, "val", use_cache),
          audio::load_split(m, dir, "test", use_cache)};
}

inline void write_json(const fs::path& path, const nlohmann::json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write '" + path.string() + "'");
  out << j.dump(2) << "\n";
}

struct TeacherReport {
  TrainResult train;
  EvalResult val, test;
};

/// Hard-label training of a teacher-role model. With `out_dir`, writes
/// teacher.dvad, train_log.jsonl and metrics.json there.
template <typename T>
TeacherReport train_teacher(Model<T>& teacher, const DataSplits& data, DistillConfig cfg,
                            const std::optional<fs::path>& out_dir = std::nullopt, double threshold = 0.5,
                            const std::function<void(const EpochRecord&)>& on_epoch = {}) {
  if (teacher.config().role != ModelRole::kTeacher) throw ConfigError("model '" + teacher.name() + "' is not a teacher");
  cfg.method = Method::kNone;
  TeacherReport r;
  r.train = train(teacher, data.train, data.val, cfg, static_cast<Model<T>*>(nullptr), on_epoch);
  r.val = evaluate(teacher, data.val, threshold);
  r.test = evaluate(teacher, data.test, threshold);
  if (out_dir) {
    fs::create_directories(*out_dir);
    save_weights(teacher, (*out_dir / "teacher.dvad").string());
    write_training_log((*out_dir / "train_log.jsonl").string(), r.train.log);
    write_json(*out_dir / "metrics.json", {{"model", teacher.name()},
                                           {"best_epoch", r.train.best_epoch},
                                           {"best_val_loss", r.train.best_val_loss},
                                           {"val", to_json(r.val)},
                                           {"test", to_json(r.test)}});
  }
  return r;
}

/// One student run: fresh weights seeded by cfg.seed, training, then
/// evaluation on val/test (and playback groups when given).
template <typename T>
MetricsReport distill_once(const ModelConfig& student_cfg, Model<T>* teacher, const DataSplits& data,
                           const DistillConfig& cfg, const TeacherCaches<T>* caches = nullptr,
                           const std::map<int, SpectrogramSet>* playback = nullptr,
                           const std::optional<fs::path>& out_dir = std::nullopt, double threshold = 0.5,
                           const std::function<void(const EpochRecord&)>& on_epoch = {}) {
  Model<T> student(student_cfg, cfg.seed);
  Model<T>* t = cfg.method == Method::kNone ? nullptr : teacher;
  const auto tr = train(student, data.train, data.val, cfg, t, on_epoch, t ? caches : nullptr);
  MetricsReport r;
  r.model = student.name();
  r.method = to_string(cfg.method);
  r.seed = cfg.seed;
  r.splits["val"] = evaluate(student, data.val, threshold);
  r.splits["test"] = evaluate(student, data.test, threshold);
  if (playback) r.playback = evaluate_playback(student, *playback, threshold);
  if (out_dir) {
    fs::create_directories(*out_dir);
    save_weights(student, (*out_dir / (student.name() + ".dvad")).string());
    write_training_log((*out_dir / "train_log.jsonl").string(), tr.log);
    auto j = to_json(r);
    j["best_epoch"] = tr.best_epoch;
    j["epochs_run"] = tr.log.size();
    write_json(*out_dir / "metrics.json", j);
  }
  return r;
}

/// `runs` runs with seeds cfg.seed + 0 .. runs - 1, teacher outputs computed once.
template <typename T>
AggregateReport distill_runs(const ModelConfig& student_cfg, Model<T>* teacher, const DataSplits& data,
                             const DistillConfig& cfg, std::size_t runs,
                             const std::map<int, SpectrogramSet>* playback = nullptr,
                             const std::optional<fs::path>& out_dir = std::nullopt, double threshold = 0.5,
                             const TeacherCaches<T>* shared = nullptr,
                             const std::function<void(std::size_t, const EpochRecord&)>& on_epoch = {}) {
  if (runs == 0) throw ConfigError("--runs must be >= 1");
  std::optional<TeacherCaches<T>> own;
  const TeacherCaches<T>* caches = shared;
  if (cfg.method != Method::kNone && !caches) {
    if (!teacher) throw ConfigError("method '" + to_string(cfg.method) + "' requires a teacher");
    Model<T> probe(student_cfg, 0);
    own = compute_teacher_caches(*teacher, probe, data.train, data.val, cfg);
    caches = &*own;
  }
  std::vector<MetricsReport> reports;
  for (std::size_t i = 0; i < runs; ++i) {
    DistillConfig c = cfg;
    c.seed = cfg.seed + i;
    std::optional<fs::path> dir;
    if (out_dir) dir = *out_dir / ("run_" + std::to_string(i));
    std::function<void(const EpochRecord&)> cb;
    if (on_epoch) cb = [&, i](const EpochRecord& e) { on_epoch(i, e); };
    reports.push_back(distill_once(student_cfg, teacher, data, c, caches, playback, dir, threshold, cb));
  }
  auto agg = aggregate_runs(reports);
  if (out_dir) {
    write_json(*out_dir / "report.json", report_json({agg}));
    if (agg.playback) {
      std::ofstream csv(*out_dir / "playback.csv", std::ios::trunc);
      csv << playback_csv({agg});
    }
  }
  return agg;
}

}  // namespace dvad
