#include <unistd.h>
#include <cstring>
#include <map>
#include <gtest/gtest.h>

#include <Eigen/Core>
#include <unsupported/Eigen/FFT>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <numbers>

#include "dvad/audio/dataset.hpp"

using namespace dvad;
using namespace dvad::audio;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("dvad_audio_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::vector<float> tone(double hz, double amp = 0.5) {
  std::vector<float> x(kClipSamples);
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = static_cast<float>(amp * std::sin(2 * std::numbers::pi * hz * i / kSampleRate));
  return x;
}

double centroid_hz(const std::vector<float>& x) {
  Eigen::FFT<double> fft;
  std::vector<double> in(x.begin(), x.end());
  std::vector<std::complex<double>> spec;
  fft.fwd(spec, in);
  double num = 0, den = 0;
  for (std::size_t k = 0; k <= in.size() / 2; ++k) {
    const double p = std::norm(spec[k]);
    num += p * k * kSampleRate / static_cast<double>(in.size());
    den += p;
  }
  return num / den;
}

// Power in [lo, hi] Hz.
double band_power(const std::vector<float>& x, double lo, double hi) {
  Eigen::FFT<double> fft;
  std::vector<double> in(x.begin(), x.end());
  std::vector<std::complex<double>> spec;
  fft.fwd(spec, in);
  double s = 0;
  for (std::size_t k = 0; k <= in.size() / 2; ++k) {
    const double f = k * kSampleRate / static_cast<double>(in.size());
    if (f >= lo && f <= hi) s += std::norm(spec[k]);
  }
  return s;
}

const Pools& small_pools() {
  static const Pools p = synth_pools(7, 3, 3.5);
  return p;
}

}  // namespace

TEST(Wav, Pcm16RoundTripWithinOneStep) {
  const auto dir = scratch("wav");
  Audio a{kSampleRate, tone(440.0, 0.9)};
  write_wav((dir / "t.wav").string(), a);
  const auto b = read_wav((dir / "t.wav").string());
  ASSERT_EQ(b.sample_rate, kSampleRate);
  ASSERT_EQ(b.samples.size(), kClipSamples);
  for (std::size_t i = 0; i < a.samples.size(); ++i) EXPECT_NEAR(a.samples[i], b.samples[i], 1.0 / 32768 + 1e-4);
}

TEST(Wav, StereoFloatDownmixAndResample) {
  // 2 channels, float32, 48 kHz: left = s, right = -s/2 => mean s/4.
  std::string s = "RIFF";
  const std::uint32_t frames = 48000;
  const std::uint32_t data_len = frames * 2 * 4;
  audio::detail::put32(s, 36 + data_len);
  s += "WAVEfmt ";
  audio::detail::put32(s, 16);
  audio::detail::put16(s, 3);
  audio::detail::put16(s, 2);
  audio::detail::put32(s, 48000);
  audio::detail::put32(s, 48000 * 8);
  audio::detail::put16(s, 8);
  audio::detail::put16(s, 32);
  s += "data";
  audio::detail::put32(s, data_len);
  auto put_f = [&](float v) {
    std::uint32_t u;
    std::memcpy(&u, &v, 4);
    audio::detail::put32(s, u);
  };
  for (std::uint32_t i = 0; i < frames; ++i) {
    const float v = static_cast<float>(0.8 * std::sin(2 * std::numbers::pi * 300.0 * i / 48000));
    put_f(v);
    put_f(-v / 2);
  }
  const Audio a = decode_wav(s);
  EXPECT_EQ(a.sample_rate, 48000u);
  EXPECT_NEAR(a.samples[40], 0.2 * std::sin(2 * std::numbers::pi * 300.0 * 40 / 48000), 1e-6);
  const Audio r = resample(a, kSampleRate);
  ASSERT_EQ(r.samples.size(), 16000u);
  for (std::size_t i = 2000; i < 14000; i += 37) {
    EXPECT_NEAR(r.samples[i], 0.2 * std::sin(2 * std::numbers::pi * 300.0 * i / 16000), 2e-3) << i;
  }
}

TEST(Wav, GarbageNamesTheFile) {
  try {
    decode_wav("not a wave file at all", "bad.wav");
    FAIL();
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("bad.wav"), std::string::npos);
  }
}

TEST(Mel, ShapeAndRange) {
  const auto m = mel_spectrogram(tone(1000.0));
  EXPECT_EQ(m.rows, 128u);
  EXPECT_EQ(m.cols, 128u);
  float lo = 1, hi = 0;
  for (float v : m.values) lo = std::min(lo, v), hi = std::max(hi, v);
  EXPECT_FLOAT_EQ(lo, 0.f);
  EXPECT_FLOAT_EQ(hi, 1.f);
}

TEST(Mel, ToneLandsInItsBand) {
  const MelParams p;
  const auto edges = mel_edges_hz(p);
  const auto m = mel_spectrogram(tone(440.0));
  // the band whose centre is nearest 440 Hz holds the maximum of each frame
  std::size_t want = 0;
  for (std::size_t b = 0; b < p.n_mels; ++b)
    if (std::abs(edges[b + 1] - 440.0) < std::abs(edges[want + 1] - 440.0)) want = b;
  for (std::size_t t = 0; t < m.cols; t += 17) {
    std::size_t best = 0;
    for (std::size_t b = 0; b < m.rows; ++b)
      if (m.at(b, t) > m.at(best, t)) best = b;
    EXPECT_LE(std::abs(static_cast<long>(best) - static_cast<long>(want)), 1) << t;
  }
}

TEST(Mel, FilterbankUnitPeaks) {
  const auto fb = mel_filterbank({});
  for (const auto& row : fb) {
    const float peak = *std::max_element(row.begin(), row.end());
    EXPECT_GT(peak, 0.f);
    EXPECT_LE(peak, 1.f);
  }
}

TEST(Mel, SilenceGivesZeros) {
  const auto m = mel_spectrogram(std::vector<float>(kClipSamples, 0.f));
  for (float v : m.values) ASSERT_EQ(v, 0.f);
}

TEST(Mel, WrongLengthThrows) { EXPECT_THROW(mel_spectrogram(std::vector<float>(1000)), DimensionError); }

TEST(Mel, CacheRoundTripBitExact) {
  const auto dir = scratch("mels");
  const auto m = mel_spectrogram(tone(700.0));
  write_mels((dir / "a.mels").string(), m);
  const auto r = read_mels((dir / "a.mels").string());
  ASSERT_EQ(r.rows, m.rows);
  ASSERT_EQ(r.cols, m.cols);
  EXPECT_EQ(std::memcmp(r.values.data(), m.values.data(), m.values.size() * 4), 0);
  auto bytes = encode_mels(m);
  bytes.pop_back();
  EXPECT_THROW(decode_mels(bytes), DataError);
}

TEST(Synth, SpeechCentroidBelowBird) {
  const auto& p = small_pools();
  for (std::size_t i = 0; i < p.speech.size(); ++i) {
    EXPECT_LT(centroid_hz(p.speech[i].audio.samples), centroid_hz(p.bird[i].audio.samples));
    EXPECT_GE(p.speech[i].audio.duration_s(), 3.0);
  }
}

TEST(Synth, PoolsDeterministic) {
  const auto a = synth_pools(11, 2, 3.0), b = synth_pools(11, 2, 3.0), c = synth_pools(12, 2, 3.0);
  EXPECT_EQ(a.speech[1].audio.samples, b.speech[1].audio.samples);
  EXPECT_EQ(a.background[0].audio.samples, b.background[0].audio.samples);
  EXPECT_NE(a.bird[0].audio.samples, c.bird[0].audio.samples);
}

TEST(Synth, PoolsWriteAndLoad) {
  const auto dir = scratch("pools");
  write_pools(small_pools(), dir);
  const auto p = load_pools(dir / "speech", dir / "background", dir / "bird");
  EXPECT_EQ(p.speech.size(), 3u);
  EXPECT_EQ(p.bird[2].id, "bird_002");
}

TEST(Dataset, BalancedDeterministicAndPeakNormalised) {
  const auto d1 = scratch("ds1"), d2 = scratch("ds2");
  const auto m = build_dataset(small_pools(), 20, 5, d1);
  build_dataset(small_pools(), 20, 5, d2);
  std::size_t pos = 0;
  for (const auto& r : m.records) {
    pos += r.label;
    EXPECT_EQ(slurp(d1 / r.path), slurp(d2 / r.path));
    const auto a = read_wav((d1 / r.path).string());
    ASSERT_EQ(a.samples.size(), kClipSamples);
    float peak = 0;
    for (float v : a.samples) peak = std::max(peak, std::abs(v));
    EXPECT_NEAR(20 * std::log10(peak), -1.0, 0.01);
    EXPECT_EQ(r.snr_db.has_value(), r.label == 1);
    if (r.label) {
      EXPECT_GE(*r.snr_db, -6.0);
      EXPECT_LE(*r.snr_db, 12.0);
      const auto& sp = r.sources.back();
      EXPECT_EQ(sp.role, "speech");
      EXPECT_GE(sp.length, 16000u);
      EXPECT_LE(sp.length, 40000u);
      EXPECT_LE(sp.placed_at + sp.length, kClipSamples);
    }
  }
  EXPECT_EQ(pos, 10u);
  EXPECT_EQ(slurp(d1 / "manifest.jsonl"), slurp(d2 / "manifest.jsonl"));
}

TEST(Dataset, ThreadCountDoesNotChangeOutput) {
  const auto d1 = scratch("th1"), d2 = scratch("th2");
  ::setenv("DISTILL_VAD_THREADS", "1", 1);
  const auto m = build_dataset(small_pools(), 8, 9, d1);
  ::setenv("DISTILL_VAD_THREADS", "3", 1);
  build_dataset(small_pools(), 8, 9, d2);
  ::unsetenv("DISTILL_VAD_THREADS");
  for (const auto& r : m.records) EXPECT_EQ(slurp(d1 / r.path), slurp(d2 / r.path));
}

TEST(Dataset, ZeroClipsEmptyManifest) {
  const auto dir = scratch("zero");
  const auto m = build_dataset(small_pools(), 0, 1, dir);
  EXPECT_TRUE(m.records.empty());
  EXPECT_FALSE(fs::exists(dir / "clips"));
  EXPECT_TRUE(read_manifest(dir).records.empty());
}

TEST(Dataset, EmptySpeechPoolIsAnError) {
  Pools p = small_pools();
  p.speech.clear();
  EXPECT_THROW(build_dataset(p, 4, 1, scratch("nospeech")), DataError);
}

TEST(Dataset, UnreadablePoolFileNamed) {
  const auto dir = scratch("badpool");
  fs::create_directories(dir / "speech");
  std::ofstream(dir / "speech" / "broken.wav") << "xx";
  try {
    load_pool(dir / "speech");
    FAIL();
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("broken.wav"), std::string::npos);
  }
}

TEST(Dataset, ManifestRoundTripLossless) {
  const auto dir = scratch("manifest");
  auto m = build_dataset(small_pools(), 6, 3, dir);
  m = split_dataset(m, {0.6, 0.2, 0.2}, 3);
  m.records[0].distance_m = 5;
  write_manifest(m, dir);
  const auto r = read_manifest(dir / "manifest.jsonl");
  EXPECT_EQ(r.dataset_id, m.dataset_id);
  ASSERT_EQ(r.records.size(), m.records.size());
  for (std::size_t i = 0; i < r.records.size(); ++i) EXPECT_EQ(to_json(r.records[i]), to_json(m.records[i]));
  const auto side = nlohmann::json::parse(slurp(dir / "dataset.json"));
  EXPECT_EQ(side["sample_rate"], 16000);
  EXPECT_EQ(side["balance"]["speech"], 3);
}

TEST(Split, SixtyTwentyTwentyStratified) {
  DatasetManifest m;
  for (int i = 0; i < 100; ++i) m.records.push_back({"c" + std::to_string(i), "", i % 2});
  const auto s = split_dataset(m, {0.6, 0.2, 0.2}, 42);
  const auto b = balance_by_split(s);
  EXPECT_EQ(b.at("train").speech + b.at("train").non_speech, 60u);
  EXPECT_EQ(b.at("val").speech + b.at("val").non_speech, 20u);
  EXPECT_EQ(b.at("test").speech + b.at("test").non_speech, 20u);
  for (const auto& [name, bal] : b) {
    EXPECT_LE(std::abs(static_cast<long>(bal.speech) - static_cast<long>(bal.non_speech)), 1) << name;
  }
  EXPECT_EQ(to_json(split_dataset(m, {0.6, 0.2, 0.2}, 42).records[17]), to_json(s.records[17]));
  EXPECT_THROW(split_dataset(m, {0.5, 0.2, 0.2}, 1), ConfigError);
}

TEST(Playback, DistanceIsPureAndAttenuates) {
  const auto x = tone(1000.0);
  EXPECT_EQ(apply_distance(x, 10.0), apply_distance(x, 10.0));
  double prev = band_power(x, 300, 3400) * 2;
  for (int d : kPlaybackDistances) {
    const double p = band_power(apply_distance(x, d), 300, 3400);
    EXPECT_LT(p, prev) << d;
    prev = p;
  }
  EXPECT_THROW(apply_distance(x, 0.5), std::invalid_argument);
}

TEST(Playback, FourDistanceGroupsSharedScenes) {
  const auto dir = scratch("playback");
  const auto m = build_playback_set(small_pools(), 6, 4, dir);
  ASSERT_EQ(m.records.size(), 24u);
  std::map<int, std::vector<const ClipRecord*>> groups;
  for (const auto& r : m.records) groups[*r.distance_m].push_back(&r);
  ASSERT_EQ(groups.size(), 4u);
  for (auto& [d, g] : groups) {
    ASSERT_EQ(g.size(), 6u);
    for (std::size_t s = 0; s < 6; ++s) {
      EXPECT_EQ(g[s]->label, groups[1][s]->label);
      EXPECT_EQ(g[s]->sources.front().file, groups[1][s]->sources.front().file);
      if (g[s]->label) {
        EXPECT_GE(*g[s]->snr_db, 6.0);
        EXPECT_LE(*g[s]->snr_db, 18.0);
      }
    }
  }
}

TEST(Spectrograms, CacheGivesSameInputs) {
  const auto dir = scratch("spec");
  auto m = split_dataset(build_dataset(small_pools(), 10, 8, dir), {0.6, 0.2, 0.2}, 8);
  const auto a = load_split(m, dir, "train", true);
  EXPECT_EQ(a.size(), 6u);
  EXPECT_TRUE(fs::exists(dir / (m.records[0].path + ".mels")));
  const auto b = load_split(m, dir, "train", true);
  const auto c = load_split(m, dir, "train", false);
  EXPECT_EQ(a.inputs, b.inputs);
  EXPECT_EQ(a.inputs, c.inputs);
  EXPECT_THROW(load_split(m, dir, "nosuch"), DataError);
}
