#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <utility>
#include <vector>

namespace dvad {

/// Philox4x32-10 counter-based generator.
///
/// The 64-bit seed is the key; the 128-bit counter is split into a
/// 64-bit stream id and a 64-bit position. Deriving independent streams
/// with `fork` makes per-record randomness independent of evaluation order.
class Philox {
 public:
  explicit Philox(std::uint64_t seed = 0, std::uint64_t stream = 0)
      : seed_(seed), stream_(stream) {}

  std::uint64_t seed() const { return seed_; }
  std::uint64_t stream() const { return stream_; }
  std::uint64_t position() const { return position_; }

  /// Independent generator sharing this seed on another stream.
  Philox fork(std::uint64_t stream) const {
    return Philox(seed_, mix(stream_ ^ mix(stream + 0x9E3779B97F4A7C15ULL)));
  }

  static std::array<std::uint32_t, 4> block(std::uint64_t key,
                                            std::uint64_t stream,
                                            std::uint64_t position) {
    std::array<std::uint32_t, 4> ctr{
        static_cast<std::uint32_t>(position),
        static_cast<std::uint32_t>(position >> 32),
        static_cast<std::uint32_t>(stream),
        static_cast<std::uint32_t>(stream >> 32)};
    std::array<std::uint32_t, 2> k{static_cast<std::uint32_t>(key),
                                   static_cast<std::uint32_t>(key >> 32)};
    constexpr std::uint32_t kM0 = 0xD2511F53u, kM1 = 0xCD9E8D57u;
    constexpr std::uint32_t kW0 = 0x9E3779B9u, kW1 = 0xBB67AE85u;
    for (int round = 0; round < 10; ++round) {
      const std::uint64_t p0 = std::uint64_t{kM0} * ctr[0];
      const std::uint64_t p1 = std::uint64_t{kM1} * ctr[2];
      ctr = {static_cast<std::uint32_t>(p1 >> 32) ^ ctr[1] ^ k[0],
             static_cast<std::uint32_t>(p1),
             static_cast<std::uint32_t>(p0 >> 32) ^ ctr[3] ^ k[1],
             static_cast<std::uint32_t>(p0)};
      k[0] += kW0;
      k[1] += kW1;
    }
    return ctr;
  }

  std::uint32_t next_u32() {
    if (lane_ == 4) [[unlikely]] refill();
    return buffer_[lane_++];
  }

  /// f(u) for each of the next n 32-bit draws; same values as n next_u32() calls.
  template <typename F>
  void for_each_u32(std::size_t n, F&& f) {
    std::size_t i = 0;
    for (; i < n && lane_ < 4; ++i) f(buffer_[lane_++]);
    for (; i + 4 <= n; i += 4) {
      const auto b = block(seed_, stream_, position_++);
      f(b[0]), f(b[1]), f(b[2]), f(b[3]);
    }
    for (; i < n; ++i) f(next_u32());
  }

  std::uint64_t next_u64() {
    const std::uint64_t hi = next_u32();
    return (hi << 32) | next_u32();
  }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n), unbiased.
  std::uint64_t below(std::uint64_t n) {
    if (n <= 1) return 0;
    const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
    std::uint64_t v;
    do {
      v = next_u64();
    } while (v >= limit);
    return v % n;
  }

  bool bernoulli(double p) { return uniform() < p; }

  /// Standard normal via Box-Muller (one value per call, no caching).
  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  template <typename Vec>
  void shuffle(Vec& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      using std::swap;
      swap(v[i - 1], v[below(i)]);
    }
  }

 private:
  void refill() {
    buffer_ = block(seed_, stream_, position_++);
    lane_ = 0;
  }

  static std::uint64_t mix(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  std::uint64_t seed_;
  std::uint64_t stream_;
  std::uint64_t position_ = 0;
  std::array<std::uint32_t, 4> buffer_{};
  int lane_ = 4;
};

}  // namespace dvad
