#pragma once

#include <cmath>
#include <cstdint>

namespace pyrec {

// splitmix64 step; also used as a stateless mixing function.
inline uint64_t mix64(uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline uint64_t hash_combine(uint64_t a, uint64_t b) {
  return mix64(a ^ (b + 0x9e3779b97f4a7c15ULL + (a << 6) + (a >> 2)));
}

/// Deterministic RNG with identical output on every platform. The standard
/// <random> distributions are implementation-defined, so datasets and noise
/// draws go through this instead.
class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(seed) {}

  uint64_t next_u64() {
    state_ += 0x9e3779b97f4a7c15ULL;
    uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  /// Uniform in [0, 1).
  float uniform() {
    return static_cast<float>(next_u64() >> 40) * 0x1.0p-24f;
  }

  /// Uniform in [lo, hi).
  float uniform(float lo, float hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [lo, hi] inclusive.
  int uniform_int(int lo, int hi) {
    return lo + static_cast<int>(next_u64() % static_cast<uint64_t>(hi - lo + 1));
  }

  /// Standard normal via Box-Muller.
  float gauss() {
    float u1 = uniform();
    float u2 = uniform();
    if (u1 < 1e-12f) u1 = 1e-12f;
    return std::sqrt(-2.0f * std::log(u1)) * std::cos(6.28318530717958647692f * u2);
  }

 private:
  uint64_t state_;
};

/// Counter-based noise stream: every (level, index, channel) triple maps to a
/// fixed draw for a given seed, so parallel scans are reproducible and a scan
/// can be re-evaluated with the same noise.
struct NoiseSource {
  uint64_t seed = 0;

  float gauss(int level, int index) const {
    Rng r(hash_combine(seed, hash_combine(0x67617573ULL, (uint64_t(level) << 32) | uint32_t(index))));
    return r.gauss();
  }

  float uniform(int level, int index) const {
    Rng r(hash_combine(seed, hash_combine(0x756e6966ULL, (uint64_t(level) << 32) | uint32_t(index))));
    return r.uniform();
  }
};

}  // namespace pyrec
