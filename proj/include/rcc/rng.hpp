#pragma once

#include <array>
#include <cstdint>
#include <string_view>

namespace rcc {

// Deterministic xoshiro256++ generator (Blackman & Vigna), seeded through
// splitmix64. All randomness in the library flows from one of these so a run
// is fully determined by its root seed, independent of platform or stdlib.
class Rng {
 public:
  explicit Rng(uint64_t seed);

  uint64_t next_u64();

  // Uniform in [0, 1) with 53 random mantissa bits.
  double uniform();
  double uniform(double lo, double hi);

  // Standard normal via Box-Muller on the uniform stream.
  double normal();
  double normal(double mean, double stddev);

  // Uniform integer in [lo, hi] inclusive. Rejection-free modulo is fine here;
  // ranges are tiny compared to 2^64 so the bias is far below observability.
  int64_t uniform_int(int64_t lo, int64_t hi);

  bool bernoulli(double p);

  // Child stream for a named purpose ("init", "data", ...). Children of the
  // same parent with different labels are decorrelated; same seed + same label
  // always yields the same stream.
  Rng derive(std::string_view label) const;

  uint64_t seed() const { return seed_; }

 private:
  std::array<uint64_t, 4> state_;
  uint64_t seed_;
  double spare_normal_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace rcc
