#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

namespace cfl {

/// Counter-based pseudo-random generator. Every draw is a pure function of
/// (key, counter), so child streams split off a parent without sharing
/// state, and the same seed reproduces the same sequence on any platform.
/// The mixer is the splitmix64 finalizer.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : key_(mix(seed ^ 0x6A09E667F3BCC909ull)) {}

  std::uint64_t next_u64() { return mix(key_ + kGamma * ++counter_); }

  /// Child generator for an independent named stream. Pure function of the
  /// parent key and the stream id; does not consume parent state.
  Rng split(std::uint64_t stream) const {
    return Rng(mix(key_ ^ mix(stream + 0x9E3779B97F4A7C15ull)), 0);
  }

  /// Uniform in [0, 1), 53-bit resolution.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Integer in [0, n). n must be > 0.
  std::int64_t uniform_int(std::int64_t n) {
    return static_cast<std::int64_t>(next_u64() % static_cast<std::uint64_t>(n));
  }

  /// Standard normal via Box-Muller. Two uniforms per draw, no cached spare,
  /// so the stream position stays a simple function of the draw count.
  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * kPi * u2);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  /// Fisher-Yates; std::shuffle is implementation-defined and would break
  /// cross-platform reproducibility.
  template <class T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      const auto j = static_cast<std::size_t>(uniform_int(static_cast<std::int64_t>(i)));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  Rng(std::uint64_t key, int) : key_(key) {}

  static std::uint64_t mix(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  }

  static constexpr std::uint64_t kGamma = 0x9E3779B97F4A7C15ull;
  static constexpr double kPi = 3.141592653589793238462643383279502884;

  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

}  // namespace cfl
