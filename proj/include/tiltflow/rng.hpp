#pragma once

// Counter-based generator: each output is a hash of (key, counter), so streams
// are pure values and reruns are byte-identical on a given build. Standard
// library distributions are implementation-defined and would break that, so
// uniform and normal draws are derived here with fixed consumption: one u64
// per uniform, two per normal pair (trig Box-Muller).

#include <cstdint>
#include <string_view>

#include "tiltflow/common.hpp"

namespace tiltflow {

namespace detail {

// 64-bit finalizer (murmur3); bijective, good avalanche.
inline std::uint64_t mix64(std::uint64_t z) {
  z ^= z >> 33;
  z *= 0xff51afd7ed558ccdULL;
  z ^= z >> 33;
  z *= 0xc4ceb9fe1a85ec53ULL;
  z ^= z >> 33;
  return z;
}

inline std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace detail

class Rng {
 public:
  Rng() : Rng(0) {}
  explicit Rng(std::uint64_t seed) : key_(detail::mix64(seed + 0x9e3779b97f4a7c15ULL)) {}

  // Substream derived from (seed, purpose tag, index); independent of draws
  // already made from this stream.
  Rng stream(std::string_view tag, std::uint64_t index = 0) const {
    Rng r;
    r.key_ = detail::mix64(detail::mix64(key_ ^ detail::fnv1a(tag)) + index);
    return r;
  }

  std::uint64_t next_u64() {
    return detail::mix64(key_ ^ (0x9e3779b97f4a7c15ULL * ++ctr_));
  }

  // [0, 1)
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Index in [0, n); n must be >= 1. Modulo bias is < n/2^64, irrelevant here.
  std::uint64_t below(std::uint64_t n) { return next_u64() % n; }

  // Standard normal; pairs share two uniforms, second value is cached.
  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    // u1 in (0, 1] so the log is finite.
    const double u1 = static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53;
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double th = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(th);
    have_spare_ = true;
    return r * std::cos(th);
  }

  Vec2 normal2() {
    const double a = normal();
    const double b = normal();
    return {a, b};
  }

 private:
  std::uint64_t key_ = 0;
  std::uint64_t ctr_ = 0;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace tiltflow
