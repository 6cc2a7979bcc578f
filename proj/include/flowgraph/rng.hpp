#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "flowgraph/error.hpp"

namespace flowgraph {

// SplitMix64 finalizer.
constexpr std::uint64_t mix64(std::uint64_t z) noexcept {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

constexpr std::uint64_t hash_key(std::uint64_t seed) noexcept { return mix64(seed); }

template <class... Rest>
constexpr std::uint64_t hash_key(std::uint64_t seed, std::uint64_t first, Rest... rest) noexcept {
  return hash_key(mix64(seed ^ (first * 0xd1342543de82ef95ULL + 0x632be59bd9b4e019ULL)), rest...);
}

/// Counter-based random stream.
///
/// A stream is identified by a 64-bit key; the i-th draw is a pure function of
/// (key, i). Streams keyed by (seed, chain, step, dimension) give results that
/// do not depend on evaluation order or thread assignment.
class Rng {
 public:
  Rng() = default;
  explicit Rng(std::uint64_t key) : key_(key) {}

  template <class... Keys>
  static Rng keyed(std::uint64_t seed, Keys... keys) {
    return Rng(hash_key(seed, static_cast<std::uint64_t>(keys)...));
  }

  std::uint64_t next_u64() noexcept { return mix64(key_ ^ mix64(counter_++)); }

  // Uniform on [0, 1) with 53 random bits.
  double uniform() noexcept { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Uniform integer on [0, n).
  std::uint64_t below(std::uint64_t n) {
    require(n > 0, "Rng::below: n must be positive");
    const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
    std::uint64_t x;
    do {
      x = next_u64();
    } while (x >= limit);
    return x % n;
  }

  // Uniform integer on [lo, hi].
  long long between(long long lo, long long hi) {
    require(lo <= hi, "Rng::between: empty range");
    return lo + static_cast<long long>(below(static_cast<std::uint64_t>(hi - lo) + 1));
  }

  bool bernoulli(double p) noexcept { return uniform() < p; }

  double normal() noexcept {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  // Draw an index from an (unnormalized, non-negative) weight vector.
  int categorical(std::span<const double> weights) noexcept {
    double total = 0.0;
    for (double w : weights) total += w;
    const double u = uniform() * total;
    double acc = 0.0;
    int last_positive = 0;
    for (int k = 0; k < static_cast<int>(weights.size()); ++k) {
      if (weights[k] <= 0.0) continue;
      acc += weights[k];
      last_positive = k;
      if (u < acc) return k;
    }
    return last_positive;
  }

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      const std::size_t j = below(i);
      std::swap(v[i - 1], v[j]);
    }
  }

  std::uint64_t key() const noexcept { return key_; }

 private:
  std::uint64_t key_ = 0;
  std::uint64_t counter_ = 0;
};

}  // namespace flowgraph
