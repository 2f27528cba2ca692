#pragma once

#include <cstdint>
#include <random>
#include <string>

namespace scat {

// Deterministic RNG used everywhere randomness matters. All distributions are
// implemented on top of the raw mt19937_64 stream with fixed draw counts or
// fixed rejection rules, so sequences are reproducible across platforms
// (std::*_distribution would not be).
class Rng {
 public:
  explicit Rng(uint64_t seed = 0) : engine_(seed) {}

  uint64_t u64() { return engine_(); }

  // [0, 1), 53-bit resolution
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // unbiased integer in [0, n)
  uint64_t uniform_int(uint64_t n);

  // Box-Muller, always consumes exactly two uniforms, no cached spare
  double normal();
  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  // Knuth product method; suitable for the small rates used by shot noise
  int poisson(double lambda);

  std::string serialize() const;
  void deserialize(const std::string& s);

  // independent substream seed derived via splitmix64 mixing
  static uint64_t mix(uint64_t a, uint64_t b);

 private:
  std::mt19937_64 engine_;
};

}  // namespace scat
