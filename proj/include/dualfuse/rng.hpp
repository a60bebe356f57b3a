#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <utility>
#include <vector>

namespace dualfuse {

/// PCG32 (XSH-RR output, 64-bit LCG state), the reference `pcg32` from
/// pcg-random.org. Seeding follows `pcg32_srandom_r(seed, stream)`.
///
/// Derived draws are fixed so other implementations can replay a stream:
///   uniform()  = ((u32 >> 5) * 2^26 + (u32 >> 6)) * 2^-53   (two draws)
///   normal()   = sqrt(-2 ln(1 - u1)) * cos(2 pi u2)          (Box-Muller, two uniforms,
///                                                             sine branch discarded)
///   below(n)   = rejection sampling as in pcg32_boundedrand_r
class Rng {
 public:
  static constexpr std::uint64_t kDefaultStream = 54u;

  explicit Rng(std::uint64_t seed = 42, std::uint64_t stream = kDefaultStream) { reseed(seed, stream); }

  void reseed(std::uint64_t seed, std::uint64_t stream = kDefaultStream) {
    state_ = 0;
    inc_ = (stream << 1u) | 1u;
    next_u32();
    state_ += seed;
    next_u32();
  }

  std::uint32_t next_u32() {
    const std::uint64_t old = state_;
    state_ = old * 6364136223846793005ULL + inc_;
    const auto xorshifted = static_cast<std::uint32_t>(((old >> 18u) ^ old) >> 27u);
    const auto rot = static_cast<std::uint32_t>(old >> 59u);
    return (xorshifted >> rot) | (xorshifted << ((-rot) & 31u));
  }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() {
    const std::uint64_t a = next_u32() >> 5;
    const std::uint64_t b = next_u32() >> 6;
    return static_cast<double>(a * 67108864ULL + b) * (1.0 / 9007199254740992.0);
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  double normal() {
    const double u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(1.0 - u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  /// Uniform integer in [0, bound).
  std::uint32_t below(std::uint32_t bound) {
    const std::uint32_t threshold = (-bound) % bound;
    for (;;) {
      const std::uint32_t r = next_u32();
      if (r >= threshold) return r % bound;
    }
  }

  /// Fisher-Yates, walking from the back.
  template <class Vec>
  void shuffle(Vec& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      const std::size_t j = below(static_cast<std::uint32_t>(i));
      using std::swap;
      swap(v[i - 1], v[j]);
    }
  }

  /// Independent child stream; used to give each model/fold its own generator.
  Rng split() {
    const std::uint64_t seed = (static_cast<std::uint64_t>(next_u32()) << 32) | next_u32();
    const std::uint64_t stream = (static_cast<std::uint64_t>(next_u32()) << 32) | next_u32();
    return Rng(seed, stream);
  }

 private:
  std::uint64_t state_ = 0;
  std::uint64_t inc_ = 0;
};

}  // namespace dualfuse
