#pragma once

#include <cmath>
#include <cstdint>
#include <utility>
#include <vector>

namespace tdu {

// Counter-based 64-bit generator (splitmix64 core). The value stream is a
// pure function of (state, counter), so identical seeds reproduce identical
// streams on every platform and independent substreams can be forked cheaply.
struct Prng {
  std::uint64_t state = 0;
  std::uint64_t counter = 0;

  static constexpr std::uint64_t kGamma = 0x9E3779B97F4A7C15ull;

  static std::uint64_t mix(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  }

  static Prng seeded(std::uint64_t seed) { return Prng{seed, 0}; }

  std::uint64_t next_u64() {
    ++counter;
    state += kGamma;
    return mix(state);
  }

  // Derive an independent stream without disturbing this one.
  Prng fork(std::uint64_t salt) const {
    std::uint64_t child = mix(state + kGamma * (salt + 1)) ^ mix(salt + 0x632BE59BD9B4E019ull);
    return Prng::seeded(child);
  }

  // Uniform in [0, 1), 53 significant bits.
  double next_double() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * next_double(); }

  // Uniform integer in [0, n); n > 0.
  std::uint64_t next_below(std::uint64_t n) {
    return static_cast<std::uint64_t>(
        (static_cast<unsigned __int128>(next_u64()) * n) >> 64);
  }

  bool bernoulli(double p) { return next_double() < p; }

  // Box-Muller; both uniforms are always drawn so the stream advance is
  // independent of the returned value.
  double next_gaussian() {
    double u1 = 1.0 - next_double();
    double u2 = next_double();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }

  // Normal(0, sigma) truncated by resampling to |z| <= clip_sigmas * sigma.
  double truncated_normal(double sigma, double clip_sigmas = 2.0) {
    for (;;) {
      double z = next_gaussian();
      if (std::fabs(z) <= clip_sigmas) return z * sigma;
    }
  }

  template <typename V>
  void shuffle(std::vector<V>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(next_below(i));
      std::swap(v[i - 1], v[j]);
    }
  }
};

}  // namespace tdu
