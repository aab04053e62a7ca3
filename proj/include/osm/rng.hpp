#pragma once

#include <cmath>
#include <cstdint>
#include <random>

#include "osm/matrix.hpp"

namespace osm {

// Deterministic RNG built on the mt19937_64 engine. Variate generation is
// hand-rolled (the std distributions are implementation-defined), so streams
// are reproducible across compilers and platforms.
class Rng {
 public:
  explicit Rng(uint64_t seed) : eng_(seed) {}

  uint64_t next_u64() { return eng_(); }

  // Uniform on [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Uniform integer in [0, n). Modulo bias is < 2^-50 for any n used here.
  int64_t uniform_int(int64_t n) {
    if (n <= 0) throw InvalidInputError("Rng::uniform_int: n must be positive");
    return static_cast<int64_t>(next_u64() % static_cast<uint64_t>(n));
  }

  // Standard normal via Box-Muller; caches the second variate.
  double gaussian() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * 3.14159265358979323846 * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

 private:
  std::mt19937_64 eng_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

// splitmix64; used to derive independent child seeds from (seed, indices).
inline uint64_t mix_seed(uint64_t a, uint64_t b = 0, uint64_t c = 0) {
  uint64_t x = a * 0x9e3779b97f4a7c15ULL + b * 0xbf58476d1ce4e5b9ULL +
               c * 0x94d049bb133111ebULL + 0x2545f4914f6cdd1dULL;
  x ^= x >> 30;
  x *= 0xbf58476d1ce4e5b9ULL;
  x ^= x >> 27;
  x *= 0x94d049bb133111ebULL;
  x ^= x >> 31;
  return x;
}

inline Matrix random_gaussian(int rows, int cols, Field field, Rng& rng,
                              double stddev = 1.0) {
  Matrix m(rows, cols, field);
  for (double& v : m.re_data()) v = stddev * rng.gaussian();
  for (double& v : m.im_data()) v = stddev * rng.gaussian();
  return m;
}

}  // namespace osm
