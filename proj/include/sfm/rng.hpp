#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace sfm {

// Deterministic random streams.  mt19937_64 supplies the raw bits; the
// variate transforms are written out here because the std::*_distribution
// sequences are implementation-defined and we promise byte-identical output
// for a given seed everywhere.

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Independent stream seed for task `index` of a run seeded with `base`.
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t index) {
  return splitmix64(base ^ splitmix64(index + 0x51ed2701fb1cf3a5ULL));
}

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  // Uniform on [0, 1) with 53 random bits.
  double uniform() {
    return std::ldexp(static_cast<double>(engine_() >> 11), -53);
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Standard normal via Box-Muller (pairs cached; no rejection, so the
  // stream position is a fixed function of the call count).
  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double two_pi = 6.283185307179586476925286766559;
    spare_ = r * std::sin(two_pi * u2);
    have_spare_ = true;
    return r * std::cos(two_pi * u2);
  }

  // Integer in [0, n).
  std::uint64_t below(std::uint64_t n) {
    // Modulo bias is < 2^-40 for the n used here (n << 2^24); acceptable.
    return engine_() % n;
  }

  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
  double spare_ = 0.0;
  bool have_spare_ = false;
};

}  // namespace sfm
