#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

namespace zslab {

/// Counter-based generator: draw i of stream `seed` is a pure function of
/// (seed, i), so the whole state is two integers and streams can be split
/// without coordination.
class CounterRng {
 public:
  static constexpr std::string_view kAlgorithm = "splitmix64-counter";

  struct State {
    std::uint64_t seed = 0;
    std::uint64_t counter = 0;
    bool operator==(const State&) const = default;
  };

  CounterRng() = default;
  explicit CounterRng(std::uint64_t seed, std::uint64_t counter = 0) : state_{seed, counter} {}
  explicit CounterRng(State s) : state_(s) {}

  const State& state() const { return state_; }

  std::uint64_t next_u64() { return hash(state_.seed, state_.counter++); }

  /// Uniform on the open interval (0, 1).
  double uniform() { return (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) {
    // Rejection keeps the draw unbiased; expected iterations < 2.
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    for (;;) {
      const std::uint64_t x = next_u64();
      if (x < limit) return x % n;
    }
  }

  double normal() {
    const double u1 = uniform(), u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }

  /// Independent child stream.
  CounterRng split(std::uint64_t stream) const {
    return CounterRng(hash(state_.seed ^ 0xA0761D6478BD642FULL, stream + 0x9E3779B97F4A7C15ULL * state_.counter));
  }

 private:
  static std::uint64_t mix(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }
  static std::uint64_t hash(std::uint64_t seed, std::uint64_t counter) {
    return mix(mix(seed + 0x9E3779B97F4A7C15ULL * (counter + 1)) ^ seed);
  }

  State state_;
};

}  // namespace zslab
