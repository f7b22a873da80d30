#pragma once

// PCG-XSL-RR 128/64 ("pcg64"). Every stochastic draw in the toolkit is keyed
// by (seed, stream) so any single draw can be recomputed in isolation.

#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>
#include <utility>

namespace xpatch {

class Pcg64 {
 public:
  using result_type = std::uint64_t;

  explicit Pcg64(std::uint64_t seed, std::uint64_t stream = 0) {
    inc_ = (static_cast<u128>(stream) << 1u) | 1u;
    state_ = 0;
    step();
    state_ += static_cast<u128>(seed) ^ (static_cast<u128>(0x9e3779b97f4a7c15ULL) << 64);
    step();
  }

  static constexpr result_type min() { return 0; }
  static constexpr result_type max() { return ~result_type{0}; }

  result_type operator()() {
    step();
    const auto rot = static_cast<unsigned>(state_ >> 122u);
    const auto xored = static_cast<std::uint64_t>(state_ >> 64u) ^ static_cast<std::uint64_t>(state_);
    return (xored >> rot) | (xored << ((64u - rot) & 63u));
  }

  /// Unbiased integer in [0, bound) (Lemire's multiply-shift with rejection).
  std::uint64_t bounded(std::uint64_t bound) {
    if (bound <= 1) return 0;
    u128 m = static_cast<u128>((*this)()) * bound;
    auto low = static_cast<std::uint64_t>(m);
    if (low < bound) {
      const std::uint64_t threshold = (0 - bound) % bound;
      while (low < threshold) {
        m = static_cast<u128>((*this)()) * bound;
        low = static_cast<std::uint64_t>(m);
      }
    }
    return static_cast<std::uint64_t>(m >> 64u);
  }

  /// Uniform double in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>((*this)() >> 11u) * 0x1.0p-53; }

  bool coin() { return ((*this)() >> 63u) != 0; }

  /// Standard normal via Box-Muller; one value per call, no caching.
  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  template <typename T>
  void shuffle(std::span<T> items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      const auto j = static_cast<std::size_t>(bounded(i));
      std::swap(items[i - 1], items[j]);
    }
  }

 private:
  using u128 = unsigned __int128;
  static constexpr u128 kMultiplier =
      (static_cast<u128>(2549297995355413924ULL) << 64) | 4865540595714422341ULL;

  void step() { state_ = state_ * kMultiplier + inc_; }

  u128 state_{};
  u128 inc_{};
};

/// Mixes a label into a seed so distinct analyses draw from distinct streams.
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (salt + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace xpatch
