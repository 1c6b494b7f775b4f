#pragma once

#include "common.hpp"

#include <cstdint>
#include <random>
#include <vector>

namespace carl {

inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/**
 * Seeded random stream.
 *
 * All randomness in the library flows through explicit Rng values; nothing
 * reads global state. split(salt) derives an independent stream from the
 * ORIGINAL seed and the salt, not from the engine position, so replaying
 * `Rng(seed).split(k)` always reproduces the same stream regardless of how
 * much the parent has been consumed. Rollout engines rely on this to keep
 * per-trajectory streams replayable.
 */
class Rng {
 public:
  explicit Rng(uint64_t seed) : seed_(seed), engine_(splitmix64(seed)) {}

  uint64_t seed() const { return seed_; }

  Rng split(uint64_t salt) const {
    return Rng(splitmix64(seed_ ^ splitmix64(salt + 0x51ed2701a7b5e175ULL)));
  }

  uint64_t next_u64() { return engine_(); }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform01() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  /// Uniform integer in [0, n).
  int uniform_int(int n) {
    if (n <= 0) throw PreconditionError("uniform_int: n must be positive");
    // Rejection sampling keeps the draw exactly uniform.
    const uint64_t bound = n;
    const uint64_t limit = UINT64_MAX - UINT64_MAX % bound;
    uint64_t x;
    do {
      x = engine_();
    } while (x >= limit);
    return static_cast<int>(x % bound);
  }

  double uniform_range(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

  /// Index drawn from an explicit probability vector (CDF walk, stable order).
  int categorical(const std::vector<double>& probs) {
    const double u = uniform01();
    double acc = 0.0;
    for (size_t i = 0; i < probs.size(); ++i) {
      acc += probs[i];
      if (u < acc) return static_cast<int>(i);
    }
    // Guard against accumulated rounding at the top of the CDF.
    for (size_t i = probs.size(); i-- > 0;) {
      if (probs[i] > 0.0) return static_cast<int>(i);
    }
    throw NumericalError("categorical: no positive mass");
  }

 private:
  uint64_t seed_;
  std::mt19937_64 engine_;
};

}  // namespace carl
