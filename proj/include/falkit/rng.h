#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>

namespace fal {

/// Counter-based splittable generator. Output i of a stream with key `seed`
/// is splitmix64_mix(seed + (i + 1) * golden_gamma), so every value is a pure
/// function of (seed, counter). Child streams are keyed by hashing the parent
/// key with a stream id, which makes per-seed and per-scene substreams
/// independent of the order in which they are consumed.
///
/// Gaussians use the Box-Muller transform with both outputs consumed in order;
/// no platform distribution objects are involved, so sequences are identical
/// across standard libraries.
class Rng {
 public:
  static constexpr const char* kAlgorithm = "splitmix64-counter/box-muller";

  explicit Rng(std::uint64_t seed) : key_(mix(seed ^ 0x6a09e667f3bcc909ULL)) {}

  std::uint64_t next_u64() {
    ++counter_;
    return mix(key_ + counter_ * kGamma);
  }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) {
    return lo + (hi - lo) * uniform();
  }

  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) {
    // Rejection sampling on the top bits keeps the draw unbiased.
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t x;
    do {
      x = next_u64();
    } while (x >= limit);
    return x % n;
  }

  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1;
    do {
      u1 = uniform();
    } while (u1 <= 0.0);
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

  double normal(double mean, double stddev) {
    return mean + stddev * normal();
  }

  /// Independent child stream; does not advance this generator.
  Rng split(std::uint64_t stream_id) const {
    Rng child(0);
    child.key_ = mix(key_ ^ mix(stream_id + kGamma));
    return child;
  }

 private:
  static constexpr std::uint64_t kGamma = 0x9e3779b97f4a7c15ULL;

  static std::uint64_t mix(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  std::uint64_t key_;
  std::uint64_t counter_ = 0;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

} // namespace fal
