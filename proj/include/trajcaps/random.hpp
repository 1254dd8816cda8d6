#pragma once

#include <cstdint>
#include <random>

namespace trajcaps {

/// Seeded generator. Draws are derived from the raw 64-bit engine output so
/// sequences do not depend on the standard library's distribution code.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : seed_(seed), engine_(seed) {}

  std::uint64_t seed() const noexcept { return seed_; }

  std::uint64_t next() { return engine_(); }

  /// Uniform in [0, 1).
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n), n > 0, by rejection.
  std::uint64_t below(std::uint64_t n) {
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t x = engine_();
    while (x >= limit) x = engine_();
    return x % n;
  }

  /// Independent child stream, e.g. one per subsystem.
  Rng fork(std::uint64_t stream) {
    return Rng(engine_() ^ (0x9E3779B97F4A7C15ULL * (stream + 1)));
  }

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
};

}  // namespace trajcaps
