#pragma once

#include <cmath>
#include <cstdint>
#include <limits>

namespace cowlib {

/// SplitMix64: a 64-bit counter-based generator. Each toy uses its own
/// stream seeded with base_seed + toy_index; the output mixer decorrelates
/// neighbouring seeds.
class SplitMix64 {
 public:
  using result_type = std::uint64_t;

  explicit SplitMix64(std::uint64_t seed = 0) noexcept : state_(seed) {}

  static constexpr result_type min() noexcept { return 0; }
  static constexpr result_type max() noexcept { return std::numeric_limits<result_type>::max(); }

  result_type operator()() noexcept {
    std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  /// Uniform double in [0, 1) with 53 random bits.
  double uniform() noexcept { return static_cast<double>((*this)() >> 11) * 0x1.0p-53; }

  /// Uniform double in the open interval (0, 1).
  double uniform_open() noexcept {
    double u;
    do u = uniform();
    while (u == 0.0);
    return u;
  }

 private:
  std::uint64_t state_;
};

inline std::uint64_t toy_seed(std::uint64_t base_seed, std::uint64_t toy_index) noexcept {
  return base_seed + toy_index;
}

}  // namespace cowlib
