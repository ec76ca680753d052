// distill-vad: dataset building, teacher training, distillation, evaluation
// and profiling from the command line.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <sstream>

#include "dvad/dvad.hpp"
#include "dvad/workflow.hpp"

namespace fs = std::filesystem;
using namespace dvad;

namespace {

using Real = float;

// Path to a model config, the word "teacher" (built-in), or a bare name
// looked up in the bundled configs directory.
ModelConfig resolve_model(const std::string& what) {
  if (what == "teacher") {
    auto c = teacher_config();
    validate_model_config(c);
    return c;
  }
  if (fs::exists(what)) return load_model_config(what);
  const fs::path bundled = fs::path(DVAD_CONFIG_DIR) / (what + ".json");
  if (fs::exists(bundled)) return load_model_config(bundled.string());
  throw ConfigError("no model config '" + what + "'");
}

nlohmann::json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config '" + path + "'");
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config '" + path + "': " + e.what());
  }
}

std::array<double, 3> parse_ratios(const std::string& s) {
  std::array<double, 3> r{};
  std::stringstream ss(s);
  std::string part;
  std::size_t i = 0;
  while (std::getline(ss, part, ',')) {
    if (i == 3) throw ConfigError("--ratios takes three comma-separated values");
    try {
      r[i++] = std::stod(part);
    } catch (const std::exception&) {
      throw ConfigError("--ratios: '" + part + "' is not a number");
    }
  }
  if (i != 3) throw ConfigError("--ratios takes three comma-separated values");
  return r;
}

audio::Pools resolve_pools(const std::string& pools, const std::string& speech, const std::string& background,
                           const std::string& bird) {
  const fs::path root(pools);
  auto pick = [&](const std::string& explicit_dir, const char* sub) {
    if (!explicit_dir.empty()) return fs::path(explicit_dir);
    return pools.empty() ? fs::path{} : root / sub;
  };
  return audio::load_pools(pick(speech, "speech"), pick(background, "background"), pick(bird, "bird"));
}

// Training flags shared by train-teacher and distill. Only flags given on
// the command line override the --config file.
struct TrainFlags {
  std::string config;
  std::uint64_t seed = 0;
  std::size_t max_epochs = 0, batch_size = 0, patience = 0;
  double lr = 0, alpha = -1, temperature = 0;
  std::string hint_layer, guide_layer;
  bool invert_alpha = false, no_t_squared = false;
  CLI::App* app = nullptr;

  void add(CLI::App* sub, bool distill) {
    app = sub;
    sub->add_option("--config", config, "JSON file overriding training defaults")->check(CLI::ExistingFile);
    sub->add_option("--seed", seed, "Root seed");
    sub->add_option("--max-epochs", max_epochs, "Epoch cap (default 50)");
    sub->add_option("--batch-size", batch_size, "Mini-batch size (default 32)");
    sub->add_option("--lr", lr, "Adam learning rate (default 1e-3)");
    sub->add_option("--patience", patience, "Early-stopping patience (default 3)");
    if (distill) {
      sub->add_option("--alpha", alpha, "Weight of the distillation term (default 0.2)");
      sub->add_option("--temperature", temperature, "Softening temperature (default 5)");
      sub->add_option("--hint-layer", hint_layer, "Teacher layer for feature distillation (default conv6)");
      sub->add_option("--guide-layer", guide_layer, "Student layer for feature distillation (default middle bneck)");
      sub->add_flag("--invert-alpha", invert_alpha, "Weight the hard-label term by alpha instead");
      sub->add_flag("--no-t-squared", no_t_squared, "Drop the T^2 factor on the soft-target loss");
    }
  }

  bool given(const char* flag) const { return app->count(flag) > 0; }

  DistillConfig resolve(DistillConfig base = {}) const {
    if (!config.empty()) base = distill_config_from_json(read_json_file(config), base);
    if (given("--seed")) base.seed = seed;
    if (given("--max-epochs")) base.max_epochs = max_epochs;
    if (given("--batch-size")) base.batch_size = batch_size;
    if (given("--lr")) base.lr = lr;
    if (given("--patience")) base.patience = patience;
    if (app->get_option_no_throw("--alpha") && given("--alpha")) base.alpha = alpha;
    if (app->get_option_no_throw("--temperature") && given("--temperature")) base.temperature = temperature;
    if (app->get_option_no_throw("--hint-layer") && given("--hint-layer")) base.hint_layer = hint_layer;
    if (app->get_option_no_throw("--guide-layer") && given("--guide-layer")) base.guide_layer = guide_layer;
    if (invert_alpha) base.invert_alpha = true;
    if (no_t_squared) base.t_squared = false;
    base.validate();
    return base;
  }
};

void print_epoch(const EpochRecord& e) {
  std::fprintf(stderr, "epoch %zu  train %.5f  val %.5f  %.1fs%s\n", e.epoch, e.train_loss, e.val_loss, e.elapsed_s,
               e.stopped ? "  (stop)" : "");
}

nlohmann::json frozen(const std::string& command, nlohmann::json extra) {
  extra["command"] = command;
  return extra;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Knowledge distillation for small voice activity detectors"};
  app.require_subcommand(1);

  // dataset --------------------------------------------------------------
  auto* ds = app.add_subcommand("dataset", "Build, split or extend a dataset");
  ds->require_subcommand(1);

  std::string out, pools_dir, speech_dir, background_dir, bird_dir, data_dir, ratios = "0.6,0.2,0.2";
  std::uint64_t seed = 0;
  std::size_t n_clips = 2000, per_pool = 8, scenes = 100;
  double seconds = 4.0;

  auto* synth = ds->add_subcommand("synth-pools", "Write synthetic speech/background/bird source pools");
  synth->add_option("--out", out, "Output directory")->required();
  synth->add_option("--seed", seed, "Seed");
  synth->add_option("--per-pool", per_pool, "Files per pool");
  synth->add_option("--seconds", seconds, "Length of each file")->check(CLI::Range(3.0, 600.0));

  auto add_pool_flags = [&](CLI::App* s) {
    s->add_option("--pools", pools_dir, "Directory with speech/, background/ and bird/");
    s->add_option("--speech", speech_dir, "Speech pool directory");
    s->add_option("--background", background_dir, "Background pool directory");
    s->add_option("--bird", bird_dir, "Bird pool directory");
  };
  auto* build = ds->add_subcommand("build", "Mix labeled 3 s clips");
  add_pool_flags(build);
  build->add_option("--n", n_clips, "Number of clips");
  build->add_option("--seed", seed, "Seed");
  build->add_option("--out", out, "Output directory")->required();

  auto* split = ds->add_subcommand("split", "Stratified train/val/test assignment");
  split->add_option("--data", data_dir, "Dataset directory")->required()->check(CLI::ExistingDirectory);
  split->add_option("--ratios", ratios, "train,val,test fractions");
  split->add_option("--seed", seed, "Seed");
  split->add_option("--out", out, "Write the split manifest here instead of in place");

  auto* playback = ds->add_subcommand("playback", "Distance-degraded evaluation set at 1/5/10/20 m");
  add_pool_flags(playback);
  playback->add_option("--scenes", scenes, "Scenes rendered at every distance");
  playback->add_option("--seed", seed, "Seed");
  playback->add_option("--out", out, "Output directory")->required();

  // train-teacher -----------------------------------------------------------
  auto* tt = app.add_subcommand("train-teacher", "Train the teacher on hard labels");
  TrainFlags tt_flags;
  std::string model_path = "teacher";
  double threshold = 0.5;
  bool cache_mels = false;
  tt->add_option("--data", data_dir, "Split dataset directory")->required()->check(CLI::ExistingDirectory);
  tt->add_option("--out", out, "Output directory")->required();
  tt->add_option("--model", model_path, "Model config (default: built-in teacher)");
  tt->add_option("--threshold", threshold, "F1 decision threshold")->check(CLI::Range(0.0, 1.0));
  tt->add_flag("--cache-mels", cache_mels, "Read/write .mels spectrogram caches next to the clips");
  tt_flags.add(tt, false);

  // distill --------------------------------------------------------------
  auto* dist = app.add_subcommand("distill", "Train a student, optionally from a teacher");
  TrainFlags d_flags;
  std::string method, student, teacher_weights, teacher_model = "teacher", playback_dir;
  std::size_t runs = 1;
  dist->add_option("--method", method, "response | feature | relational | none")->required();
  dist->add_option("--student", student, "Student config path or bundled name")->required();
  dist->add_option("--teacher-weights", teacher_weights, "Trained teacher (.dvad)");
  dist->add_option("--teacher-model", teacher_model, "Teacher config (default: built-in)");
  dist->add_option("--data", data_dir, "Split dataset directory")->required()->check(CLI::ExistingDirectory);
  dist->add_option("--out", out, "Output directory")->required();
  dist->add_option("--runs", runs, "Runs with seeds seed+0..runs-1")->check(CLI::PositiveNumber);
  dist->add_option("--playback", playback_dir, "Playback set to evaluate every run on");
  dist->add_option("--threshold", threshold, "F1 decision threshold")->check(CLI::Range(0.0, 1.0));
  dist->add_flag("--cache-mels", cache_mels, "Read/write .mels spectrogram caches next to the clips");
  d_flags.add(dist, true);

  // profile --------------------------------------------------------------
  auto* prof = app.add_subcommand("profile", "Parameters, layers, FLOPs, memory and latency");
  std::vector<std::string> models;
  std::size_t reps = 5;
  prof->add_option("models", models, "Model configs (default: teacher student1..student4)");
  prof->add_option("--reps", reps, "Timed forward passes per model (0 skips timing)");
  prof->add_option("--out", out, "Write the table as JSON");

  // eval -----------------------------------------------------------------
  auto* ev = app.add_subcommand("eval", "Evaluate saved weights");
  std::string weights, eval_split = "test";
  ev->add_option("--weights", weights, "Weights file (.dvad)")->required()->check(CLI::ExistingFile);
  ev->add_option("--model", model_path, "Model config path, bundled name or 'teacher'")->required();
  ev->add_option("--data", data_dir, "Split dataset directory");
  ev->add_option("--split", eval_split, "Split to evaluate");
  ev->add_option("--playback", playback_dir, "Playback set directory");
  ev->add_option("--threshold", threshold, "F1 decision threshold")->check(CLI::Range(0.0, 1.0));
  ev->add_option("--out", out, "Write the report as JSON");
  ev->add_flag("--cache-mels", cache_mels, "Read/write .mels spectrogram caches next to the clips");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (synth->parsed()) {
      const auto p = audio::synth_pools(seed, per_pool, seconds);
      audio::write_pools(p, out);
      write_json(fs::path(out) / "resolved_config.json",
                 frozen("dataset synth-pools", {{"seed", seed}, {"per_pool", per_pool}, {"seconds", seconds}}));
      std::printf("wrote %zu files per pool under %s\n", per_pool, out.c_str());
    } else if (build->parsed()) {
      const auto p = resolve_pools(pools_dir, speech_dir, background_dir, bird_dir);
      const auto m = audio::build_dataset(p, n_clips, seed, out);
      write_json(fs::path(out) / "resolved_config.json",
                 frozen("dataset build", {{"seed", seed}, {"n", n_clips}, {"pools", pools_dir}, {"speech", speech_dir},
                                          {"background", background_dir}, {"bird", bird_dir}}));
      const auto side = audio::sidecar_json(m);
      std::printf("%zu clips (speech %zu, non-speech %zu) in %s\n", m.records.size(),
                  side["balance"]["speech"].get<std::size_t>(), side["balance"]["non_speech"].get<std::size_t>(),
                  out.c_str());
    } else if (split->parsed()) {
      auto m = audio::split_dataset(audio::read_manifest(data_dir), parse_ratios(ratios), seed);
      fs::path dest = data_dir;
      if (!out.empty()) {
        // clip paths stay relative to the original dataset
        dest = out;
        for (auto& r : m.records) r.path = fs::absolute(fs::path(data_dir) / r.path).string();
      }
      audio::write_manifest(m, dest);
      write_json(dest / "split_config.json", frozen("dataset split", {{"seed", seed}, {"ratios", ratios}}));
      for (const auto& [name, b] : audio::balance_by_split(m)) {
        std::printf("%-6s %5zu  (speech %zu, non-speech %zu)\n", name.c_str(), b.speech + b.non_speech, b.speech,
                    b.non_speech);
      }
    } else if (playback->parsed()) {
      const auto p = resolve_pools(pools_dir, speech_dir, background_dir, bird_dir);
      const auto m = audio::build_playback_set(p, scenes, seed, out);
      write_json(fs::path(out) / "resolved_config.json",
                 frozen("dataset playback", {{"seed", seed}, {"scenes", scenes}, {"pools", pools_dir}}));
      std::printf("%zu playback clips (%zu scenes x 4 distances) in %s\n", m.records.size(), scenes, out.c_str());
    } else if (tt->parsed()) {
      const auto cfg = tt_flags.resolve();
      const auto mc = resolve_model(model_path);
      write_json(fs::path(out) / "resolved_config.json",
                 frozen("train-teacher", {{"data", data_dir}, {"model", to_json(mc)}, {"train", to_json(cfg)},
                                          {"threshold", threshold}}));
      const auto data = load_splits(audio::read_manifest(data_dir), data_dir, cache_mels);
      Model<Real> teacher(mc, cfg.seed);
      const auto r = train_teacher(teacher, data, cfg, fs::path(out), threshold, print_epoch);
      std::printf("best epoch %zu  val auc %.4f f1 %.4f  test auc %.4f f1 %.4f\n", r.train.best_epoch, r.val.auc,
                  r.val.f1, r.test.auc, r.test.f1);
    } else if (dist->parsed()) {
      DistillConfig base;
      base.method = parse_method(method);
      const auto cfg = d_flags.resolve(base);
      const auto sc = resolve_model(student);
      const auto tc = resolve_model(teacher_model);
      if (cfg.method != Method::kNone && teacher_weights.empty()) {
        throw ConfigError("--teacher-weights is required for method '" + method + "'");
      }
      write_json(fs::path(out) / "resolved_config.json",
                 frozen("distill", {{"data", data_dir},
                                    {"student", to_json(sc)},
                                    {"teacher", to_json(tc)},
                                    {"teacher_weights", teacher_weights},
                                    {"train", to_json(cfg)},
                                    {"runs", runs},
                                    {"run_seeds_from", cfg.seed},
                                    {"playback", playback_dir},
                                    {"threshold", threshold}}));
      const auto data = load_splits(audio::read_manifest(data_dir), data_dir, cache_mels);
      std::optional<std::map<int, SpectrogramSet>> groups;
      if (!playback_dir.empty()) groups = load_playback_groups(audio::read_manifest(playback_dir), playback_dir, cache_mels);
      std::optional<Model<Real>> teacher;
      if (cfg.method != Method::kNone) {
        teacher.emplace(tc, 0);
        load_weights(*teacher, teacher_weights);
        teacher->set_requires_grad(false);
      }
      const auto agg = distill_runs<Real>(sc, teacher ? &*teacher : nullptr, data, cfg, runs, groups ? &*groups : nullptr,
                                          fs::path(out), threshold, nullptr,
                                          [](std::size_t run, const EpochRecord& e) {
                                            std::fprintf(stderr, "run %zu  ", run);
                                            print_epoch(e);
                                          });
      std::printf("%s/%s over %zu run(s): avg auc %.4f  avg f1 %.4f\n", agg.model.c_str(), agg.method.c_str(),
                  agg.n_runs, agg.splits.at("test").auc, agg.splits.at("test").f1);
      if (agg.playback) {
        for (const auto& [d, f] : agg.playback->f1) std::printf("  %2d m  f1 %.4f\n", d, f);
        std::printf("  mean  f1 %.4f\n", agg.playback->mean_f1);
      }
    } else if (prof->parsed()) {
      if (models.empty()) models = {"teacher", "student1", "student2", "student3", "student4"};
      nlohmann::json rows = nlohmann::json::array();
      std::printf("%-10s %12s %7s %14s %14s %9s %10s\n", "model", "params", "layers", "flops", "mults", "MiB",
                  "time(s)");
      for (const auto& name : models) {
        Model<Real> m(resolve_model(name), 0);
        const auto r = profile_model(m, reps);
        std::printf("%-10s %12llu %7llu %14llu %14llu %9.2f %10.5f\n", r.model.c_str(),
                    static_cast<unsigned long long>(r.parameters), static_cast<unsigned long long>(r.layers),
                    static_cast<unsigned long long>(r.flops), static_cast<unsigned long long>(r.multiplications),
                    r.memory_mib, r.inference_time_s);
        nlohmann::json row = {{"model", r.model},          {"parameters", r.parameters},
                              {"layers", r.layers},        {"flops", r.flops},
                              {"multiplications", r.multiplications}, {"memory_mib", r.memory_mib},
                              {"inference_time_s", r.inference_time_s}};
        if (const auto ref = reference_for(r.model)) {
          auto rel = [](double got, double want) { return want != 0.0 ? (got - want) / want : 0.0; };
          nlohmann::json dev = {{"parameters", rel(r.parameters, ref->parameters)},
                                {"layers", rel(r.layers, ref->layers)},
                                {"flops", rel(r.flops, ref->flops)},
                                {"multiplications", rel(r.multiplications, ref->multiplications)},
                                {"memory_mib", rel(r.memory_mib, ref->memory_mb)}};
          if (reps > 0) dev["inference_time_s"] = rel(r.inference_time_s, ref->inference_time_s);
          row["reference"] = {{"parameters", ref->parameters}, {"layers", ref->layers},
                              {"flops", ref->flops},           {"multiplications", ref->multiplications},
                              {"memory_mib", ref->memory_mb},  {"inference_time_s", ref->inference_time_s}};
          row["relative_deviation"] = dev;
          std::printf("%-10s %+11.1f%% %+6.1f%% %+13.1f%% %+13.1f%% %+8.1f%% %+9.1f%%  vs reference\n", "",
                      100 * dev["parameters"].get<double>(), 100 * dev["layers"].get<double>(),
                      100 * dev["flops"].get<double>(), 100 * dev["multiplications"].get<double>(),
                      100 * dev["memory_mib"].get<double>(),
                      reps > 0 ? 100 * dev["inference_time_s"].get<double>() : 0.0);
        }
        rows.push_back(row);
      }
      if (!out.empty()) write_json(out, {{"command", "profile"}, {"reps", reps}, {"models", rows}});
    } else if (ev->parsed()) {
      if (data_dir.empty() && playback_dir.empty()) throw ConfigError("eval needs --data or --playback");
      Model<Real> m(resolve_model(model_path), 0);
      load_weights(m, weights);
      nlohmann::json report = {{"model", m.name()}, {"weights", weights}, {"threshold", threshold}};
      if (!data_dir.empty()) {
        const auto manifest = audio::read_manifest(data_dir);
        const auto r = evaluate(m, audio::load_split(manifest, data_dir, eval_split, cache_mels), threshold);
        report["split"] = eval_split;
        report["result"] = to_json(r);
        std::printf("%s on %s (n=%zu): auc %.4f  f1 %.4f\n", m.name().c_str(), eval_split.c_str(), r.n, r.auc, r.f1);
      }
      if (!playback_dir.empty()) {
        const auto groups = load_playback_groups(audio::read_manifest(playback_dir), playback_dir, cache_mels);
        const auto p = evaluate_playback(m, groups, threshold);
        report["playback"] = to_json(p);
        for (const auto& [d, f] : p.f1) std::printf("  %2d m  f1 %.4f\n", d, f);
        std::printf("  mean  f1 %.4f\n", p.mean_f1);
      }
      if (!out.empty()) write_json(out, report);
    }
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "distill-vad: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "distill-vad: %s\n", e.what());
    return 1;
  }
  return 0;
}
