#pragma once

#include <nlohmann/json.hpp>

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numbers>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "dvad/audio/mel.hpp"
#include "dvad/audio/synth.hpp"
#include "dvad/audio/wav.hpp"
#include "dvad/error.hpp"
#include "dvad/rng.hpp"
#include "dvad/spectrogram_set.hpp"

namespace dvad::audio {

namespace fs = std::filesystem;

inline constexpr double kClipSeconds = 3.0;
inline constexpr std::size_t kClipSamples = 48000;
inline constexpr std::array<int, 4> kPlaybackDistances{1, 5, 10, 20};

struct SourceUse {
  std::string role;  // speech | background | bird
  std::string file;
  std::size_t offset = 0;       // first sample taken from the source
  std::size_t placed_at = 0;    // first sample written in the clip
  std::size_t length = 0;       // samples
  double gain = 1.0;            // linear factor applied to the source
};

struct ClipRecord {
  std::string id;
  std::string path;  // relative to the manifest directory
  int label = 0;     // 1 = speech present
  std::vector<SourceUse> sources;
  std::string split;  // "", train, val, test, playback
  std::optional<int> distance_m;
  std::uint64_t seed = 0;
  std::optional<double> snr_db;
};

struct DatasetManifest {
  std::string dataset_id;
  std::uint32_t sample_rate = kSampleRate;
  double clip_duration_s = kClipSeconds;
  std::vector<ClipRecord> records;
};

struct MixParams {
  double snr_min_db = -6.0;
  double snr_max_db = 12.0;
  double bird_probability = 0.5;
  double speech_min_s = 1.0;
  double speech_max_s = 2.5;
  double bird_rel_min_db = -6.0;  // bird level relative to background RMS
  double bird_rel_max_db = 6.0;
  double peak_dbfs = -1.0;
};

// ---------------------------------------------------------------------------
// JSON

inline nlohmann::json to_json(const SourceUse& s) {
  return {{"role", s.role},     {"file", s.file},     {"offset", s.offset},
          {"placed_at", s.placed_at}, {"length", s.length}, {"gain", s.gain}};
}

inline nlohmann::json to_json(const ClipRecord& r) {
  nlohmann::json j = {{"id", r.id}, {"path", r.path}, {"label", r.label}, {"split", r.split}, {"seed", r.seed}};
  j["sources"] = nlohmann::json::array();
  for (const auto& s : r.sources) j["sources"].push_back(to_json(s));
  j["distance_m"] = r.distance_m ? nlohmann::json(*r.distance_m) : nlohmann::json(nullptr);
  j["snr_db"] = r.snr_db ? nlohmann::json(*r.snr_db) : nlohmann::json(nullptr);
  return j;
}

inline ClipRecord clip_record_from_json(const nlohmann::json& j) {
  ClipRecord r;
  r.id = j.at("id").get<std::string>();
  r.path = j.at("path").get<std::string>();
  r.label = j.at("label").get<int>();
  r.split = j.value("split", std::string{});
  r.seed = j.value("seed", std::uint64_t{0});
  for (const auto& s : j.value("sources", nlohmann::json::array())) {
    r.sources.push_back({s.at("role").get<std::string>(), s.at("file").get<std::string>(),
                         s.at("offset").get<std::size_t>(), s.value("placed_at", std::size_t{0}),
                         s.at("length").get<std::size_t>(), s.at("gain").get<double>()});
  }
  if (j.contains("distance_m") && !j["distance_m"].is_null()) r.distance_m = j["distance_m"].get<int>();
  if (j.contains("snr_db") && !j["snr_db"].is_null()) r.snr_db = j["snr_db"].get<double>();
  return r;
}

struct Balance {
  std::size_t speech = 0, non_speech = 0;
};

inline std::map<std::string, Balance> balance_by_split(const DatasetManifest& m) {
  std::map<std::string, Balance> out;
  for (const auto& r : m.records) {
    auto& b = out[r.split.empty() ? "unsplit" : r.split];
    (r.label ? b.speech : b.non_speech) += 1;
  }
  return out;
}

inline nlohmann::json sidecar_json(const DatasetManifest& m) {
  Balance total;
  for (const auto& r : m.records) (r.label ? total.speech : total.non_speech) += 1;
  nlohmann::json splits = nlohmann::json::object();
  for (const auto& [name, b] : balance_by_split(m)) splits[name] = {{"speech", b.speech}, {"non_speech", b.non_speech}};
  return {{"dataset_id", m.dataset_id},
          {"sample_rate", m.sample_rate},
          {"clip_duration_s", m.clip_duration_s},
          {"n_records", m.records.size()},
          {"balance", {{"speech", total.speech}, {"non_speech", total.non_speech}}},
          {"splits", splits}};
}

/// Writes `<dir>/manifest.jsonl` and the `<dir>/dataset.json` sidecar.
inline void write_manifest(const DatasetManifest& m, const fs::path& dir) {
  fs::create_directories(dir);
  {
    std::ofstream out(dir / "manifest.jsonl", std::ios::trunc);
    if (!out) throw DataError("cannot write manifest in '" + dir.string() + "'");
    for (const auto& r : m.records) out << to_json(r).dump() << "\n";
  }
  std::ofstream side(dir / "dataset.json", std::ios::trunc);
  side << sidecar_json(m).dump(2) << "\n";
}

/// Accepts the dataset directory or the manifest.jsonl path.
inline DatasetManifest read_manifest(const fs::path& where) {
  const fs::path dir = fs::is_directory(where) ? where : where.parent_path();
  const fs::path jsonl = fs::is_directory(where) ? where / "manifest.jsonl" : where;
  std::ifstream in(jsonl);
  if (!in) throw DataError("cannot open manifest '" + jsonl.string() + "'");
  DatasetManifest m;
  if (std::ifstream side(dir / "dataset.json"); side) {
    try {
      const auto j = nlohmann::json::parse(side);
      m.dataset_id = j.value("dataset_id", std::string{});
      m.sample_rate = j.value("sample_rate", kSampleRate);
      m.clip_duration_s = j.value("clip_duration_s", kClipSeconds);
    } catch (const nlohmann::json::exception& e) {
      throw DataError("corrupt dataset.json: " + std::string(e.what()));
    }
  }
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty()) continue;
    try {
      m.records.push_back(clip_record_from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      throw DataError(dvad::detail::concat("manifest line ", n, ": ", e.what()));
    }
  }
  return m;
}

// ---------------------------------------------------------------------------
// Mixing

namespace detail {

inline double rms(const float* x, std::size_t n) {
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += static_cast<double>(x[i]) * x[i];
  return n ? std::sqrt(s / static_cast<double>(n)) : 0.0;
}

inline double db_to_gain(double db) { return std::pow(10.0, db / 20.0); }

/// Worker count: DISTILL_VAD_THREADS if set, else the hardware concurrency.
inline std::size_t worker_count(std::size_t jobs) {
  std::size_t n = std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("DISTILL_VAD_THREADS")) {
    const long v = std::strtol(env, nullptr, 10);
    if (v >= 1) n = static_cast<std::size_t>(v);
  }
  return std::max<std::size_t>(1, std::min(n, jobs));
}

/// Calls fn(i) for i in [0, n) on up to worker_count(n) threads. Results
/// must not depend on which thread runs which index.
inline void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn) {
  const std::size_t workers = worker_count(n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(workers);
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = next++; i < n; i = next++) fn(i);
      } catch (...) {
        errors[w] = std::current_exception();
        next = n;
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

inline const NamedAudio& pick(const std::vector<NamedAudio>& pool, Philox& rng, const char* role) {
  if (pool.empty()) throw DataError(std::string("the ") + role + " pool is empty");
  const auto& a = pool[rng.below(pool.size())];
  if (a.audio.samples.empty()) throw DataError(std::string(role) + " file '" + a.id + "' is empty");
  return a;
}

// Takes `len` samples from `a` starting at a random offset; shorter sources loop.
inline std::vector<float> excerpt(const Audio& a, std::size_t len, Philox& rng, std::size_t& offset) {
  const std::size_t n = a.samples.size();
  offset = n > len ? rng.below(n - len + 1) : 0;
  std::vector<float> out(len);
  for (std::size_t i = 0; i < len; ++i) out[i] = a.samples[(offset + i) % n];
  return out;
}

// Scales to the requested peak level; a silent clip is left as is.
inline double peak_normalize(std::vector<float>& x, double peak_dbfs) {
  float peak = 0.f;
  for (float v : x) peak = std::max(peak, std::abs(v));
  if (peak <= 0.f) return 1.0;
  const double g = db_to_gain(peak_dbfs) / peak;
  for (auto& v : x) v = static_cast<float>(v * g);
  return g;
}

// Background excerpt plus an optional bird overlay; records its sources.
inline std::vector<float> background_bed(const Pools& pools, const MixParams& mp, Philox& rng,
                                         std::vector<SourceUse>& sources, double& bg_rms) {
  const auto& bg = pick(pools.background, rng, "background");
  std::size_t off = 0;
  std::vector<float> clip = excerpt(bg.audio, kClipSamples, rng, off);
  sources.push_back({"background", bg.id, off, 0, kClipSamples, 1.0});
  bg_rms = rms(clip.data(), clip.size());
  if (!pools.bird.empty() && rng.bernoulli(mp.bird_probability)) {
    const auto& bird = pick(pools.bird, rng, "bird");
    std::size_t boff = 0;
    const auto b = excerpt(bird.audio, kClipSamples, rng, boff);
    const double brms = rms(b.data(), b.size());
    const double g = brms > 0.0 ? bg_rms * db_to_gain(rng.uniform(mp.bird_rel_min_db, mp.bird_rel_max_db)) / brms : 0.0;
    for (std::size_t i = 0; i < kClipSamples; ++i) clip[i] += static_cast<float>(g * b[i]);
    sources.push_back({"bird", bird.id, boff, 0, kClipSamples, g});
  }
  return clip;
}

// A speech segment with 10 ms raised-cosine fades, unscaled.
inline std::vector<float> speech_segment(const Pools& pools, const MixParams& mp, Philox& rng, SourceUse& use) {
  const auto& sp = pick(pools.speech, rng, "speech");
  const std::size_t len = static_cast<std::size_t>(std::lround(rng.uniform(mp.speech_min_s, mp.speech_max_s) * kSampleRate));
  std::size_t off = 0;
  auto seg = excerpt(sp.audio, len, rng, off);
  const std::size_t fade = std::min<std::size_t>(160, len / 2);
  for (std::size_t i = 0; i < fade; ++i) {
    const float w = static_cast<float>(0.5 - 0.5 * std::cos(std::numbers::pi * i / fade));
    seg[i] *= w;
    seg[len - 1 - i] *= w;
  }
  use = {"speech", sp.id, off, 0, len, 1.0};
  return seg;
}

inline std::string clip_name(const std::string& prefix, std::size_t i) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%s_%05zu", prefix.c_str(), i);
  return buf;
}

}  // namespace detail

/// One labeled mixture; deterministic in (seed, index).
inline std::vector<float> mix_clip(const Pools& pools, std::size_t index, std::uint64_t seed, const MixParams& mp,
                                   ClipRecord& rec) {
  Philox rng = Philox(seed, 0x6d6978ULL).fork(index);
  rec.label = static_cast<int>(index % 2 == 0);  // alternate labels, 1:1
  rec.seed = seed;
  double bg_rms = 0.0;
  auto clip = detail::background_bed(pools, mp, rng, rec.sources, bg_rms);
  if (rec.label) {
    SourceUse use;
    auto seg = detail::speech_segment(pools, mp, rng, use);
    const double snr = rng.uniform(mp.snr_min_db, mp.snr_max_db);
    const double srms = detail::rms(seg.data(), seg.size());
    const double g = srms > 0.0 ? bg_rms * detail::db_to_gain(snr) / srms : 0.0;
    use.placed_at = rng.below(kClipSamples - seg.size() + 1);
    use.gain = g;
    for (std::size_t i = 0; i < seg.size(); ++i) clip[use.placed_at + i] += static_cast<float>(g * seg[i]);
    rec.sources.push_back(use);
    rec.snr_db = snr;
  }
  detail::peak_normalize(clip, mp.peak_dbfs);
  return clip;
}

/// Writes `n_clips` labeled 3 s clips plus the manifest into `out_dir`.
inline DatasetManifest build_dataset(const Pools& pools, std::size_t n_clips, std::uint64_t seed,
                                     const fs::path& out_dir, const MixParams& mp = {}) {
  if (n_clips > 0) {
    if (pools.background.empty()) throw DataError("the background pool is empty");
    if (pools.speech.empty()) throw DataError("the speech pool is empty but speech clips are requested");
  }
  DatasetManifest m;
  m.dataset_id = "synthetic-" + std::to_string(seed) + "-" + std::to_string(n_clips);
  m.records.resize(n_clips);
  if (n_clips > 0) fs::create_directories(out_dir / "clips");
  detail::parallel_for(n_clips, [&](std::size_t i) {
    ClipRecord& r = m.records[i];
    r.id = detail::clip_name("clip", i);
    r.path = "clips/" + r.id + ".wav";
    auto clip = mix_clip(pools, i, seed, mp, r);
    write_wav((out_dir / r.path).string(), Audio{kSampleRate, std::move(clip)});
  });
  write_manifest(m, out_dir);
  return m;
}

// ---------------------------------------------------------------------------
// Splits

/// Stratified by label: each label's records are shuffled with the seed and
/// cut at round(r0 n), round((r0 + r1) n).
inline DatasetManifest split_dataset(DatasetManifest m, std::array<double, 3> ratios, std::uint64_t seed) {
  const double total = ratios[0] + ratios[1] + ratios[2];
  if (std::abs(total - 1.0) > 1e-9 || ratios[0] < 0 || ratios[1] < 0 || ratios[2] < 0) {
    throw ConfigError("split ratios must be non-negative and sum to 1");
  }
  Philox root(seed, 0x73706c6974ULL);
  for (int label : {0, 1}) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < m.records.size(); ++i)
      if (m.records[i].label == label && !m.records[i].distance_m) idx.push_back(i);
    Philox rng = root.fork(static_cast<std::uint64_t>(label));
    rng.shuffle(idx);
    const double n = static_cast<double>(idx.size());
    const std::size_t a = static_cast<std::size_t>(std::lround(ratios[0] * n));
    const std::size_t b = std::min(idx.size(), static_cast<std::size_t>(std::lround((ratios[0] + ratios[1]) * n)));
    for (std::size_t k = 0; k < idx.size(); ++k) m.records[idx[k]].split = k < a ? "train" : (k < b ? "val" : "test");
  }
  return m;
}

// ---------------------------------------------------------------------------
// Playback proxy

/// Level drop of 20 log10(d) dB and a one-pole low-pass whose cutoff falls
/// geometrically from 8 kHz at 1 m to 2 kHz at 20 m.
inline std::vector<float> apply_distance(const std::vector<float>& x, double distance_m,
                                         std::uint32_t sample_rate = kSampleRate) {
  if (!(distance_m >= 1.0)) throw std::invalid_argument("apply_distance: distance must be >= 1 m");
  const double gain = 1.0 / distance_m;
  const double fc = 8000.0 * std::pow(0.25, std::log(distance_m) / std::log(20.0));
  const double a = 1.0 - std::exp(-2.0 * std::numbers::pi * fc / sample_rate);
  std::vector<float> y(x.size());
  double state = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    state += a * (x[i] - state);
    y[i] = static_cast<float>(gain * state);
  }
  return y;
}

/// `scenes` background scenes (alternating labels) rendered at each of the
/// four distances; speech level at 1 m is drawn from [6, 18] dB SNR.
inline DatasetManifest build_playback_set(const Pools& pools, std::size_t scenes, std::uint64_t seed,
                                          const fs::path& out_dir, const MixParams& base = {}) {
  if (scenes > 0 && (pools.background.empty() || pools.speech.empty())) {
    throw DataError("playback set needs non-empty speech and background pools");
  }
  MixParams mp = base;
  mp.snr_min_db = 6.0;
  mp.snr_max_db = 18.0;
  DatasetManifest m;
  m.dataset_id = "playback-" + std::to_string(seed) + "-" + std::to_string(scenes);
  m.records.resize(scenes * kPlaybackDistances.size());
  if (scenes > 0) fs::create_directories(out_dir / "clips");
  detail::parallel_for(scenes, [&](std::size_t s) {
    Philox rng = Philox(seed, 0x706c6179ULL).fork(s);
    const int label = static_cast<int>(s % 2 == 0);
    std::vector<SourceUse> bed_sources;
    double bg_rms = 0.0;
    const auto bed = detail::background_bed(pools, mp, rng, bed_sources, bg_rms);
    std::vector<float> speech(kClipSamples, 0.f);
    SourceUse use;
    std::optional<double> snr;
    if (label) {
      auto seg = detail::speech_segment(pools, mp, rng, use);
      snr = rng.uniform(mp.snr_min_db, mp.snr_max_db);
      const double srms = detail::rms(seg.data(), seg.size());
      use.gain = srms > 0.0 ? bg_rms * detail::db_to_gain(*snr) / srms : 0.0;
      use.placed_at = rng.below(kClipSamples - seg.size() + 1);
      for (std::size_t i = 0; i < seg.size(); ++i) speech[use.placed_at + i] = static_cast<float>(use.gain * seg[i]);
    }
    for (std::size_t k = 0; k < kPlaybackDistances.size(); ++k) {
      const int d = kPlaybackDistances[k];
      ClipRecord& r = m.records[k * scenes + s];
      r.id = detail::clip_name("playback_" + std::to_string(d) + "m", s);
      r.path = "clips/" + r.id + ".wav";
      r.label = label;
      r.split = "playback";
      r.distance_m = d;
      r.seed = seed;
      r.snr_db = snr;
      r.sources = bed_sources;
      std::vector<float> clip = bed;
      if (label) {
        const auto far = apply_distance(speech, d);
        for (std::size_t i = 0; i < kClipSamples; ++i) clip[i] += far[i];
        SourceUse u = use;
        u.gain = use.gain / d;
        r.sources.push_back(u);
      }
      detail::peak_normalize(clip, mp.peak_dbfs);
      write_wav((out_dir / r.path).string(), Audio{kSampleRate, std::move(clip)});
    }
  });
  write_manifest(m, out_dir);
  return m;
}

// ---------------------------------------------------------------------------
// Spectrograms

/// Reads a clip written by this pipeline; it must be exactly 3 s at 16 kHz.
inline std::vector<float> read_clip(const fs::path& path) {
  Audio a = read_wav(path.string());
  if (a.sample_rate != kSampleRate) a = resample(a, kSampleRate);
  if (a.samples.size() != kClipSamples) {
    throw DataError(dvad::detail::concat("clip '", path.string(), "' has ", a.samples.size(), " samples, expected ",
                                         kClipSamples));
  }
  return std::move(a.samples);
}

/// Mel spectrograms of the records selected by `keep`, in manifest order.
/// With `use_cache`, a "<clip>.mels" file next to each clip is read when
/// present and written when missing.
inline SpectrogramSet load_spectrograms(const DatasetManifest& m, const fs::path& dir,
                                        const std::function<bool(const ClipRecord&)>& keep, bool use_cache = false) {
  std::vector<const ClipRecord*> chosen;
  for (const auto& r : m.records)
    if (keep(r)) chosen.push_back(&r);
  SpectrogramSet set;
  set.sample_shape = {1, 128, 128};
  const std::size_t size = set.sample_size();
  set.inputs.resize(chosen.size() * size);
  set.labels.resize(chosen.size());
  detail::parallel_for(chosen.size(), [&](std::size_t i) {
    const fs::path clip = dir / chosen[i]->path;
    fs::path cache = clip;
    cache += ".mels";
    MelSpec mel;
    if (use_cache && fs::exists(cache)) {
      mel = read_mels(cache.string());
    } else {
      mel = mel_spectrogram(read_clip(clip));
      if (use_cache) write_mels(cache.string(), mel);
    }
    if (mel.values.size() != size) throw DataError("spectrogram of '" + clip.string() + "' is not 128x128");
    std::copy(mel.values.begin(), mel.values.end(), set.inputs.begin() + static_cast<std::ptrdiff_t>(i * size));
    set.labels[i] = static_cast<float>(chosen[i]->label);
  });
  return set;
}

inline SpectrogramSet load_split(const DatasetManifest& m, const fs::path& dir, const std::string& split,
                                 bool use_cache = false) {
  auto set = load_spectrograms(m, dir, [&](const ClipRecord& r) { return r.split == split; }, use_cache);
  if (set.empty()) throw DataError("split '" + split + "' is empty; run the split step first");
  return set;
}

}  // namespace dvad::audio
