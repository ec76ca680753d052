#pragma once

// RIFF/WAVE reading (PCM16 or float32, any channel count, downmixed by
// averaging) and PCM16 mono writing.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <numbers>
#include <string>
#include <vector>

#include "dvad/error.hpp"

namespace dvad::audio {

inline constexpr std::uint32_t kSampleRate = 16000;

struct Audio {
  std::uint32_t sample_rate = kSampleRate;
  std::vector<float> samples;  // mono, nominally in [-1, 1]

  double duration_s() const { return static_cast<double>(samples.size()) / sample_rate; }
};

namespace detail {

inline std::uint32_t le32(const unsigned char* p) {
  return std::uint32_t{p[0]} | (std::uint32_t{p[1]} << 8) | (std::uint32_t{p[2]} << 16) | (std::uint32_t{p[3]} << 24);
}
inline std::uint16_t le16(const unsigned char* p) { return static_cast<std::uint16_t>(p[0] | (p[1] << 8)); }

inline void put16(std::string& s, std::uint16_t v) {
  s.push_back(static_cast<char>(v & 0xFF));
  s.push_back(static_cast<char>(v >> 8));
}
inline void put32(std::string& s, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) s.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

}  // namespace detail

inline Audio decode_wav(const std::string& bytes, const std::string& label = "<memory>") {
  using namespace detail;
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  auto fail = [&](const std::string& why) -> DataError { return DataError("unreadable WAV '" + label + "': " + why); };
  if (bytes.size() < 12 || std::memcmp(p, "RIFF", 4) != 0 || std::memcmp(p + 8, "WAVE", 4) != 0) {
    throw fail("missing RIFF/WAVE header");
  }
  std::uint16_t format = 0, channels = 0, bits = 0;
  std::uint32_t rate = 0;
  const unsigned char* data = nullptr;
  std::size_t data_len = 0;
  for (std::size_t off = 12; off + 8 <= bytes.size();) {
    const std::uint32_t len = le32(p + off + 4);
    const unsigned char* body = p + off + 8;
    const std::size_t avail = std::min<std::size_t>(len, bytes.size() - off - 8);
    if (std::memcmp(p + off, "fmt ", 4) == 0) {
      if (avail < 16) throw fail("short fmt chunk");
      format = le16(body);
      channels = le16(body + 2);
      rate = le32(body + 4);
      bits = le16(body + 14);
      if (format == 0xFFFE && avail >= 26) format = le16(body + 24);  // WAVE_FORMAT_EXTENSIBLE subformat
    } else if (std::memcmp(p + off, "data", 4) == 0) {
      data = body;
      data_len = avail;
    }
    off += 8 + len + (len & 1);
  }
  if (!data) throw fail("no data chunk");
  if (channels == 0 || rate == 0) throw fail("no fmt chunk");
  const bool pcm16 = format == 1 && bits == 16;
  const bool f32 = format == 3 && bits == 32;
  if (!pcm16 && !f32) throw fail("unsupported encoding (format " + std::to_string(format) + ", " + std::to_string(bits) + " bits)");
  const std::size_t width = bits / 8;
  const std::size_t frames = data_len / (width * channels);
  Audio a;
  a.sample_rate = rate;
  a.samples.resize(frames);
  for (std::size_t f = 0; f < frames; ++f) {
    double acc = 0.0;
    for (std::size_t c = 0; c < channels; ++c) {
      const unsigned char* q = data + (f * channels + c) * width;
      if (pcm16) {
        acc += static_cast<std::int16_t>(le16(q)) / 32768.0;
      } else {
        float v;
        const std::uint32_t u = le32(q);
        std::memcpy(&v, &u, 4);
        acc += v;
      }
    }
    a.samples[f] = static_cast<float>(acc / channels);
  }
  return a;
}

inline Audio read_wav(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("unreadable WAV '" + path + "': cannot open");
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_wav(bytes, path);
}

/// PCM16 mono; samples are clamped to [-1, 1] and scaled by 32767.
inline std::string encode_wav_pcm16(const Audio& a) {
  using namespace detail;
  std::string s = "RIFF";
  const std::uint32_t data_len = static_cast<std::uint32_t>(a.samples.size() * 2);
  put32(s, 36 + data_len);
  s += "WAVEfmt ";
  put32(s, 16);
  put16(s, 1);
  put16(s, 1);
  put32(s, a.sample_rate);
  put32(s, a.sample_rate * 2);
  put16(s, 2);
  put16(s, 16);
  s += "data";
  put32(s, data_len);
  for (float v : a.samples) {
    const long q = std::lround(std::clamp(static_cast<double>(v), -1.0, 1.0) * 32767.0);
    put16(s, static_cast<std::uint16_t>(static_cast<std::int16_t>(q)));
  }
  return s;
}

inline void write_wav(const std::string& path, const Audio& a) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write WAV '" + path + "'");
  const auto bytes = encode_wav_pcm16(a);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

/// Windowed-sinc resampling (Hann-windowed, 16 zero crossings), cutoff at
/// the lower Nyquist frequency.
inline Audio resample(const Audio& in, std::uint32_t target_rate) {
  if (in.sample_rate == target_rate || in.samples.empty()) {
    Audio out = in;
    out.sample_rate = target_rate;
    return out;
  }
  const double ratio = static_cast<double>(target_rate) / in.sample_rate;
  const double cutoff = std::min(1.0, ratio);  // relative to the input Nyquist
  constexpr int kZeros = 16;
  const double half_width = kZeros / cutoff;
  const std::size_t n_out = static_cast<std::size_t>(std::floor(in.samples.size() * ratio));
  Audio out;
  out.sample_rate = target_rate;
  out.samples.resize(n_out);
  const auto n_in = static_cast<long>(in.samples.size());
  for (std::size_t i = 0; i < n_out; ++i) {
    const double t = i / ratio;
    const long lo = static_cast<long>(std::ceil(t - half_width)), hi = static_cast<long>(std::floor(t + half_width));
    double acc = 0.0;
    for (long k = std::max(0L, lo); k <= std::min(n_in - 1, hi); ++k) {
      const double x = (t - k) * cutoff;
      const double sinc = x == 0.0 ? 1.0 : std::sin(std::numbers::pi * x) / (std::numbers::pi * x);
      const double w = 0.5 + 0.5 * std::cos(std::numbers::pi * (t - k) / half_width);
      acc += in.samples[static_cast<std::size_t>(k)] * sinc * w * cutoff;
    }
    out.samples[i] = static_cast<float>(acc);
  }
  return out;
}

/// Reads any supported WAV and converts it to 16 kHz mono.
inline Audio load_audio(const std::string& path) { return resample(read_wav(path), kSampleRate); }

}  // namespace dvad::audio
