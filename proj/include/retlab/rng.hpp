#pragma once

#include <cmath>
#include <cstdint>

// Counter-based PRNG. Draws are a pure function of the key words, so gate
// sampling keyed by (seed, step, layer, token) is reproducible regardless of
// call order, and parallel replications can derive disjoint streams.

namespace retlab::rng {

// splitmix64 finalizer
inline std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t hash_key(std::uint64_t a, std::uint64_t b = 0,
                              std::uint64_t c = 0, std::uint64_t d = 0,
                              std::uint64_t e = 0) {
  std::uint64_t h = mix64(a);
  h = mix64(h ^ b);
  h = mix64(h ^ c);
  h = mix64(h ^ d);
  h = mix64(h ^ e);
  return h;
}

// Uniform in (0, 1): 53 mantissa bits, offset by half an ulp so neither
// endpoint is reachable.
inline double to_unit_open(std::uint64_t bits) {
  return (static_cast<double>(bits >> 11) + 0.5) * 0x1.0p-53;
}

inline double uniform(std::uint64_t a, std::uint64_t b = 0, std::uint64_t c = 0,
                      std::uint64_t d = 0, std::uint64_t e = 0) {
  return to_unit_open(hash_key(a, b, c, d, e));
}

// Sequential stream over a hashed key, for consumers that just need a
// deterministic sequence (init, shuffles, noise).
class Stream {
 public:
  explicit Stream(std::uint64_t a, std::uint64_t b = 0, std::uint64_t c = 0,
                  std::uint64_t d = 0)
      : key_(hash_key(a, b, c, d)), counter_(0) {}

  std::uint64_t next_u64() { return mix64(key_ ^ ++counter_); }

  double next_unit_open() { return to_unit_open(next_u64()); }

  // Uniform in [lo, hi)
  double next_uniform(double lo, double hi) {
    return lo + (hi - lo) * next_unit_open();
  }

  // Standard normal via Box-Muller.
  double next_normal() {
    const double u1 = next_unit_open();
    const double u2 = next_unit_open();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }

  // Uniform integer in [0, n)
  std::uint64_t next_below(std::uint64_t n) { return next_u64() % n; }

 private:
  std::uint64_t key_;
  std::uint64_t counter_;
};

}  // namespace retlab::rng
