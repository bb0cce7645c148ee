#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <random>

#include "missfactor/errors.hpp"

namespace missfactor {

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

}  // namespace detail

// Deterministic stream keyed by (seed, path...).  Every parallel work item
// derives its own stream from the item index, so results do not depend on
// thread scheduling.  Distribution draws are hand-rolled on top of the raw
// 64-bit output because the std:: distributions are not byte-stable across
// standard library implementations.
class RngStream {
 public:
  explicit RngStream(std::uint64_t seed) : gen_(detail::splitmix64(seed)) {}

  RngStream(std::uint64_t seed, std::initializer_list<std::uint64_t> path)
      : gen_(mix(seed, path)) {}

  // Uniform on [0, 1) with 53 random bits.
  double uniform() {
    return static_cast<double>(gen_() >> 11) * 0x1.0p-53;
  }

  // Uniform on (0, 1), safe as a log() argument.
  double uniform_pos() {
    double u;
    do {
      u = uniform();
    } while (u <= 0.0);
    return u;
  }

  std::uint64_t uniform_index(std::uint64_t n) {
    // Rejection step removes the modulo bias.
    const std::uint64_t lim = n * (UINT64_MAX / n);
    std::uint64_t x;
    do {
      x = gen_();
    } while (x >= lim);
    return x % n;
  }

  // Box-Muller; the spare deviate is cached within the stream.
  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    const double u1 = uniform_pos();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(a);
    have_spare_ = true;
    return r * std::cos(a);
  }

  double normal(double mean, double sd) { return mean + sd * normal(); }

  // Marsaglia-Tsang squeeze; shape < 1 handled by the boost relation
  // G(a) = G(a + 1) * U^{1/a}.
  double gamma(double shape, double rate) {
    if (!(shape > 0.0) || !(rate > 0.0)) {
      throw NumericError("gamma draw requires positive shape and rate");
    }
    if (shape < 1.0) {
      const double g = gamma(shape + 1.0, 1.0);
      return g * std::pow(uniform_pos(), 1.0 / shape) / rate;
    }
    const double d = shape - 1.0 / 3.0;
    const double c = 1.0 / std::sqrt(9.0 * d);
    for (;;) {
      double x, v;
      do {
        x = normal();
        v = 1.0 + c * x;
      } while (v <= 0.0);
      v = v * v * v;
      const double u = uniform_pos();
      if (u < 1.0 - 0.0331 * x * x * x * x) return d * v / rate;
      if (std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v))) {
        return d * v / rate;
      }
    }
  }

  bool bernoulli(double p) { return uniform() < p; }

  std::uint64_t raw() { return gen_(); }

 private:
  static std::uint64_t mix(std::uint64_t seed,
                           std::initializer_list<std::uint64_t> path) {
    std::uint64_t h = detail::splitmix64(seed);
    for (std::uint64_t tag : path) {
      h = detail::splitmix64(h ^ detail::splitmix64(tag + 0x51ed2701a9e3cb1dULL));
    }
    return h;
  }

  std::mt19937_64 gen_;
  double spare_ = 0.0;
  bool have_spare_ = false;
};

}  // namespace missfactor
