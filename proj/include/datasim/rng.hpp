#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace datasim {

// SplitMix64 finalizer (Steele, Lea & Flood). Used as a stateless mixing
// function: the same 64-bit input always yields the same output.
constexpr std::uint64_t mix64(std::uint64_t x) noexcept {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

// Counter-based draw: a pseudo-random 64-bit value that depends only on
// (seed, stream, counter). Evaluation order and thread count do not matter.
constexpr std::uint64_t counter_hash(std::uint64_t seed, std::uint64_t stream,
                                     std::uint64_t counter) noexcept {
  return mix64(mix64(mix64(seed) ^ stream) ^ counter);
}

// Maps 64 random bits to a double in [0, 1) using the top 53 bits.
constexpr double to_unit_double(std::uint64_t bits) noexcept {
  return static_cast<double>(bits >> 11) * 0x1.0p-53;
}

// Sequential generator with platform-independent derived distributions.
// std::uniform_*_distribution is implementation-defined, so it is avoided.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(mix64(seed)) {}

  std::uint64_t next() { return engine_(); }

  double uniform() { return to_unit_double(engine_()); }

  // Uniform integer in [0, bound); the biased tail of the 64-bit range is rejected.
  std::uint64_t below(std::uint64_t bound) {
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % bound;
    std::uint64_t x;
    do {
      x = engine_();
    } while (x >= limit);
    return x % bound;
  }

  // Standard normal via Box-Muller.
  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }

 private:
  std::mt19937_64 engine_;
};

}  // namespace datasim
