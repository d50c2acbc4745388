#pragma once

#include <bit>
#include <cstdint>
#include <random>
#include <string_view>

namespace qvote {

/// Seeded random source. Every draw is derived from the raw 64-bit engine
/// output so sequences are reproducible across standard libraries.
class Rng {
 public:
  using result_type = std::uint64_t;

  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  static constexpr result_type min() { return std::mt19937_64::min(); }
  static constexpr result_type max() { return std::mt19937_64::max(); }
  result_type operator()() { return engine_(); }

  std::uint8_t bit() {
    if (available_ == 0) {
      buffer_ = engine_();
      available_ = 64;
    }
    std::uint8_t b = static_cast<std::uint8_t>(buffer_ & 1u);
    buffer_ >>= 1;
    --available_;
    return b;
  }

  /// Uniform in [0, 1) with 53 bits of resolution.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  bool bernoulli(double p) { return uniform() < p; }

  /// Uniform in [0, n), unbiased by rejection. n must be positive.
  std::uint64_t below(std::uint64_t n) {
    const std::uint64_t limit = max() - max() % n;
    std::uint64_t x;
    do x = engine_();
    while (x >= limit);
    return x % n;
  }

  /// Number of ones among `n` fair coin flips.
  std::uint64_t count_ones(std::uint64_t n) {
    std::uint64_t ones = 0;
    for (; n >= 64; n -= 64) ones += static_cast<std::uint64_t>(std::popcount(engine_()));
    if (n > 0) ones += static_cast<std::uint64_t>(std::popcount(engine_() >> (64 - n)));
    return ones;
  }

  /// Independent child seed for stream `stream` (splitmix64 finalizer).
  static std::uint64_t derive(std::uint64_t seed, std::uint64_t stream) {
    std::uint64_t z = seed + 0x9e3779b97f4a7c15ull * (stream + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  /// FNV-1a, used to turn identifiers into seed streams.
  static std::uint64_t hash(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : s) {
      h ^= c;
      h *= 0x100000001b3ull;
    }
    return h;
  }

 private:
  std::mt19937_64 engine_;
  std::uint64_t buffer_ = 0;
  int available_ = 0;
};

}  // namespace qvote
