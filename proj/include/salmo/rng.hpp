#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>

namespace salmo {

// Portable counter-based generator: SplitMix64 (Steele, Lea & Flood 2014).
// All randomness in the library flows through this class so that a fixed seed
// reproduces every draw bit-for-bit on any conforming platform.  Distribution
// layers are fixed algorithms on top of the raw stream:
//   uniform     : 53-bit mantissa fill, result in [0, 1)
//   normal      : Box-Muller, second deviate cached
//   gamma       : Marsaglia-Tsang squeeze (alpha >= 1), boost for alpha < 1
//   uniform_int : Lemire multiply-with-rejection, exact uniformity
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() {
    std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  // Independent stream derived from this generator's seed and a stream tag.
  // Never advances this generator.
  [[nodiscard]] Rng derive(std::uint64_t stream) const {
    Rng mixer(state_ ^ (0xA0761D6478BD642FULL * (stream + 1)));
    Rng out(mixer.next_u64());
    return out;
  }

  double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

  // Uniform on [lo, hi).
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform on {0, ..., n-1} without modulo bias.
  std::uint64_t uniform_int(std::uint64_t n) {
    if (n == 0) throw std::invalid_argument("uniform_int: n must be positive");
    for (;;) {
      std::uint64_t x = next_u64();
      __uint128_t m = static_cast<__uint128_t>(x) * n;
      auto lo = static_cast<std::uint64_t>(m);
      if (lo >= n || lo >= (0ULL - n) % n) return static_cast<std::uint64_t>(m >> 64);
    }
  }

  double normal() {
    if (have_cached_) {
      have_cached_ = false;
      return cached_;
    }
    // u1 in (0, 1] so the log is finite.
    double u1 = 1.0 - uniform();
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 2.0 * M_PI * u2;
    cached_ = r * std::sin(a);
    have_cached_ = true;
    return r * std::cos(a);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  // Gamma(shape alpha, rate beta), mean alpha / beta.
  double gamma(double alpha, double beta) {
    if (alpha <= 0.0 || beta <= 0.0)
      throw std::invalid_argument("gamma: shape and rate must be positive");
    if (alpha < 1.0) {
      double u = uniform();
      while (u <= 0.0) u = uniform();
      return gamma(alpha + 1.0, beta) * std::pow(u, 1.0 / alpha);
    }
    double d = alpha - 1.0 / 3.0;
    double c = 1.0 / std::sqrt(9.0 * d);
    for (;;) {
      double x = normal();
      double v = 1.0 + c * x;
      if (v <= 0.0) continue;
      v = v * v * v;
      double u = uniform();
      if (u < 1.0 - 0.0331 * x * x * x * x) return d * v / beta;
      if (u > 0.0 && std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v))) return d * v / beta;
    }
  }

 private:
  std::uint64_t state_;
  double cached_ = 0.0;
  bool have_cached_ = false;
};

}  // namespace salmo
