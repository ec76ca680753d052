#pragma once

#include <unsupported/Eigen/FFT>

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <numbers>
#include <string>
#include <vector>

#include "dvad/audio/wav.hpp"
#include "dvad/error.hpp"

namespace dvad::audio {

struct MelParams {
  std::uint32_t sample_rate = kSampleRate;
  std::size_t n_fft = 1024;
  std::size_t hop = 368;
  std::size_t n_mels = 128;
  double f_min = 50.0;
  double f_max = 8000.0;
  std::size_t clip_samples = 48000;

  std::size_t n_frames() const { return (clip_samples - n_fft) / hop + 1; }
  bool operator==(const MelParams&) const = default;
};

/// Rows are mel bands (lowest first), columns are frames.
struct MelSpec {
  std::size_t rows = 0, cols = 0;
  std::vector<float> values;  // row-major, in [0, 1]
  float min = 0.f, max = 0.f;  // log-power range before scaling

  float at(std::size_t r, std::size_t c) const { return values[r * cols + c]; }
};

inline double hz_to_mel(double f) { return 2595.0 * std::log10(1.0 + f / 700.0); }
inline double mel_to_hz(double m) { return 700.0 * (std::pow(10.0, m / 2595.0) - 1.0); }

/// n_mels + 2 edge frequencies, equally spaced on the mel scale.
inline std::vector<double> mel_edges_hz(const MelParams& p) {
  std::vector<double> edges(p.n_mels + 2);
  const double lo = hz_to_mel(p.f_min), hi = hz_to_mel(p.f_max);
  for (std::size_t i = 0; i < edges.size(); ++i) edges[i] = mel_to_hz(lo + (hi - lo) * i / (p.n_mels + 1));
  return edges;
}

/// Triangular filters with unit peak, [n_mels][n_fft/2 + 1].
inline std::vector<std::vector<float>> mel_filterbank(const MelParams& p) {
  const auto edges = mel_edges_hz(p);
  const std::size_t bins = p.n_fft / 2 + 1;
  std::vector<std::vector<float>> fb(p.n_mels, std::vector<float>(bins, 0.f));
  for (std::size_t m = 0; m < p.n_mels; ++m) {
    const double l = edges[m], c = edges[m + 1], r = edges[m + 2];
    for (std::size_t k = 0; k < bins; ++k) {
      const double f = static_cast<double>(k) * p.sample_rate / p.n_fft;
      double w = 0.0;
      if (f > l && f <= c) w = (f - l) / (c - l);
      else if (f > c && f < r) w = (r - f) / (r - c);
      fb[m][k] = static_cast<float>(w);
    }
  }
  return fb;
}

/// Power mel spectrogram -> log(1 + S) -> per-clip min-max scaling.
inline MelSpec mel_spectrogram(const std::vector<float>& clip, const MelParams& p = {}) {
  if (clip.size() != p.clip_samples) {
    throw DimensionError(dvad::detail::concat("mel_spectrogram: expected ", p.clip_samples, " samples, got ", clip.size()));
  }
  static thread_local std::vector<std::vector<float>> fb;
  static thread_local MelParams fb_params;
  if (fb.empty() || !(fb_params == p)) {
    fb = mel_filterbank(p);
    fb_params = p;
  }
  const std::size_t frames = p.n_frames(), bins = p.n_fft / 2 + 1;
  std::vector<float> window(p.n_fft);
  for (std::size_t n = 0; n < p.n_fft; ++n) {
    window[n] = static_cast<float>(0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * n / p.n_fft));  // periodic Hann
  }
  Eigen::FFT<float> fft;
  std::vector<float> frame(p.n_fft);
  std::vector<std::complex<float>> spectrum;
  std::vector<float> power(bins);
  MelSpec out;
  out.rows = p.n_mels;
  out.cols = frames;
  out.values.assign(out.rows * out.cols, 0.f);
  for (std::size_t t = 0; t < frames; ++t) {
    for (std::size_t n = 0; n < p.n_fft; ++n) frame[n] = clip[t * p.hop + n] * window[n];
    fft.fwd(spectrum, frame);
    for (std::size_t k = 0; k < bins; ++k) power[k] = std::norm(spectrum[k]);
    for (std::size_t m = 0; m < p.n_mels; ++m) {
      double acc = 0.0;
      for (std::size_t k = 0; k < bins; ++k) acc += static_cast<double>(fb[m][k]) * power[k];
      out.values[m * frames + t] = static_cast<float>(std::log1p(acc));
    }
  }
  const auto [lo, hi] = std::minmax_element(out.values.begin(), out.values.end());
  out.min = *lo;
  out.max = *hi;
  const float range = out.max - out.min;
  for (auto& v : out.values) v = range > 0.f ? (v - out.min) / range : 0.f;
  return out;
}

// Cache: "MELS" | u32 rows | u32 cols | row-major little-endian float32.

inline std::string encode_mels(const MelSpec& m) {
  std::string s = "MELS";
  detail::put32(s, static_cast<std::uint32_t>(m.rows));
  detail::put32(s, static_cast<std::uint32_t>(m.cols));
  for (float v : m.values) {
    std::uint32_t u;
    std::memcpy(&u, &v, 4);
    detail::put32(s, u);
  }
  return s;
}

inline MelSpec decode_mels(const std::string& bytes, const std::string& label = "<memory>") {
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  if (bytes.size() < 12 || std::memcmp(p, "MELS", 4) != 0) throw DataError("'" + label + "' is not a MELS cache");
  MelSpec m;
  m.rows = detail::le32(p + 4);
  m.cols = detail::le32(p + 8);
  if (bytes.size() != 12 + 4 * m.rows * m.cols) throw DataError("MELS cache '" + label + "' has the wrong size");
  m.values.resize(m.rows * m.cols);
  for (std::size_t i = 0; i < m.values.size(); ++i) {
    const std::uint32_t u = detail::le32(p + 12 + 4 * i);
    std::memcpy(&m.values[i], &u, 4);
  }
  return m;  // min/max metadata is not stored in the cache
}

inline void write_mels(const std::string& path, const MelSpec& m) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write MELS cache '" + path + "'");
  const auto bytes = encode_mels(m);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

inline MelSpec read_mels(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open MELS cache '" + path + "'");
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_mels(bytes, path);
}

}  // namespace dvad::audio
