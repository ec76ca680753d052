#pragma once

// Desk-scale stand-ins for real speech, soundscape and bird recordings.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <numbers>
#include <string>
#include <vector>

#include "dvad/audio/wav.hpp"
#include "dvad/rng.hpp"

namespace dvad::audio {

struct NamedAudio {
  std::string id;  // file stem
  Audio audio;
};

struct Pools {
  std::vector<NamedAudio> speech;
  std::vector<NamedAudio> background;
  std::vector<NamedAudio> bird;
};

namespace detail {

inline void scale_to_rms(std::vector<float>& x, double target) {
  double s = 0.0;
  for (float v : x) s += static_cast<double>(v) * v;
  const double rms = std::sqrt(s / static_cast<double>(std::max<std::size_t>(1, x.size())));
  if (rms <= 0.0) return;
  for (auto& v : x) v = static_cast<float>(v * target / rms);
}

}  // namespace detail

/// Harmonic complex on a slowly gliding 100-300 Hz fundamental with 1/k
/// harmonic rolloff and 4-8 Hz syllable-rate amplitude modulation.
inline Audio synth_speech(Philox& rng, double seconds) {
  const std::uint32_t fs = kSampleRate;
  const std::size_t n = static_cast<std::size_t>(seconds * fs);
  const double f0 = rng.uniform(100.0, 300.0);
  const double am_rate = rng.uniform(4.0, 8.0), am_phase = rng.uniform(0.0, 2 * std::numbers::pi);
  const double glide_rate = rng.uniform(0.3, 1.2), glide_depth = rng.uniform(0.02, 0.08);
  const int harmonics = static_cast<int>(std::floor(7500.0 / (f0 * (1.0 + glide_depth))));
  std::vector<double> phase(static_cast<std::size_t>(harmonics), 0.0);
  for (auto& p : phase) p = rng.uniform(0.0, 2 * std::numbers::pi);
  Audio a;
  a.samples.resize(n);
  double base_phase = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double t = static_cast<double>(i) / fs;
    const double f = f0 * (1.0 + glide_depth * std::sin(2 * std::numbers::pi * glide_rate * t));
    base_phase += 2 * std::numbers::pi * f / fs;
    double v = 0.0;
    for (int k = 1; k <= harmonics; ++k) v += std::sin(k * base_phase + phase[static_cast<std::size_t>(k - 1)]) / k;
    const double env = 0.5 * (1.0 + std::sin(2 * std::numbers::pi * am_rate * t + am_phase));
    a.samples[i] = static_cast<float>(v * (0.1 + 0.9 * env));
  }
  detail::scale_to_rms(a.samples, 0.1);
  return a;
}

/// Pink noise (Kellet's filter on white Gaussian noise) plus a low-frequency
/// rumble of a few 20-80 Hz partials.
inline Audio synth_background(Philox& rng, double seconds) {
  const std::uint32_t fs = kSampleRate;
  const std::size_t n = static_cast<std::size_t>(seconds * fs);
  double b0 = 0, b1 = 0, b2 = 0, b3 = 0, b4 = 0, b5 = 0, b6 = 0;
  struct Partial {
    double f, a, phi;
  };
  std::vector<Partial> rumble(3);
  for (auto& p : rumble) p = {rng.uniform(20.0, 80.0), rng.uniform(0.3, 1.0), rng.uniform(0.0, 2 * std::numbers::pi)};
  const double rumble_level = rng.uniform(0.5, 1.5);
  std::vector<float> pink(n), low(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double w = rng.normal();
    b0 = 0.99886 * b0 + w * 0.0555179;
    b1 = 0.99332 * b1 + w * 0.0750759;
    b2 = 0.96900 * b2 + w * 0.1538520;
    b3 = 0.86650 * b3 + w * 0.3104856;
    b4 = 0.55000 * b4 + w * 0.5329522;
    b5 = -0.7616 * b5 - w * 0.0168980;
    pink[i] = static_cast<float>(b0 + b1 + b2 + b3 + b4 + b5 + b6 + w * 0.5362);
    b6 = w * 0.115926;
    const double t = static_cast<double>(i) / fs;
    double r = 0.0;
    for (const auto& p : rumble) r += p.a * std::sin(2 * std::numbers::pi * p.f * t + p.phi);
    low[i] = static_cast<float>(r);
  }
  detail::scale_to_rms(pink, 1.0);
  detail::scale_to_rms(low, rumble_level);
  Audio a;
  a.samples.resize(n);
  for (std::size_t i = 0; i < n; ++i) a.samples[i] = pink[i] + low[i];
  detail::scale_to_rms(a.samples, 0.1);
  return a;
}

/// Trains of short Hann-shaped chirps sweeping within 2-8 kHz.
inline Audio synth_bird(Philox& rng, double seconds) {
  const std::uint32_t fs = kSampleRate;
  const std::size_t n = static_cast<std::size_t>(seconds * fs);
  Audio a;
  a.samples.assign(n, 0.f);
  std::size_t at = static_cast<std::size_t>(rng.uniform(0.0, 0.2) * fs);
  while (at < n) {
    const std::size_t len = static_cast<std::size_t>(rng.uniform(0.05, 0.2) * fs);
    const double f_start = rng.uniform(2000.0, 8000.0 * 0.95), f_end = rng.uniform(2000.0, 8000.0 * 0.95);
    const double amp = rng.uniform(0.5, 1.0);
    double phase = 0.0;
    for (std::size_t k = 0; k < len && at + k < n; ++k) {
      const double u = static_cast<double>(k) / len;
      phase += 2 * std::numbers::pi * (f_start + (f_end - f_start) * u) / fs;
      const double env = 0.5 - 0.5 * std::cos(2 * std::numbers::pi * u);
      a.samples[at + k] += static_cast<float>(amp * env * std::sin(phase));
    }
    at += len + static_cast<std::size_t>(rng.uniform(0.03, 0.4) * fs);
  }
  detail::scale_to_rms(a.samples, 0.1);
  return a;
}

/// `per_pool` files of `seconds` each for every pool; fully determined by `seed`.
inline Pools synth_pools(std::uint64_t seed, std::size_t per_pool = 8, double seconds = 4.0) {
  Pools p;
  Philox root(seed, 0x706f6f6c73ULL);
  char name[32];
  for (std::size_t i = 0; i < per_pool; ++i) {
    Philox rs = root.fork(3 * i), rb = root.fork(3 * i + 1), rr = root.fork(3 * i + 2);
    std::snprintf(name, sizeof name, "speech_%03zu", i);
    p.speech.push_back({name, synth_speech(rs, seconds)});
    std::snprintf(name, sizeof name, "background_%03zu", i);
    p.background.push_back({name, synth_background(rb, seconds)});
    std::snprintf(name, sizeof name, "bird_%03zu", i);
    p.bird.push_back({name, synth_bird(rr, seconds)});
  }
  return p;
}

inline void write_pool(const std::vector<NamedAudio>& pool, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  for (const auto& a : pool) write_wav((dir / (a.id + ".wav")).string(), a.audio);
}

/// Writes speech/, background/ and bird/ under `out_dir`.
inline void write_pools(const Pools& p, const std::filesystem::path& out_dir) {
  write_pool(p.speech, out_dir / "speech");
  write_pool(p.background, out_dir / "background");
  write_pool(p.bird, out_dir / "bird");
}

/// Every *.wav in `dir` (sorted by name), converted to 16 kHz mono.
inline std::vector<NamedAudio> load_pool(const std::filesystem::path& dir) {
  std::vector<NamedAudio> out;
  if (dir.empty() || !std::filesystem::is_directory(dir)) return out;
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::directory_iterator(dir)) {
    if (e.is_regular_file() && e.path().extension() == ".wav") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  for (const auto& f : files) out.push_back({f.stem().string(), load_audio(f.string())});
  return out;
}

inline Pools load_pools(const std::filesystem::path& speech, const std::filesystem::path& background,
                        const std::filesystem::path& bird) {
  return Pools{load_pool(speech), load_pool(background), load_pool(bird)};
}

}  // namespace dvad::audio
