#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>

namespace dwts {

// Keyed random stream. Streams are derived from a 64-bit key by mixing in
// labels or indices (splitmix64 finalizer), never by consuming draws from the
// parent, so per-arm / per-replication generation is order-independent:
// child("offline").child(3) yields the same stream no matter what was drawn
// from any other stream in between.
//
// All variates are produced from raw mt19937_64 output, not from
// std::*_distribution, so sequences are identical across standard libraries.
class RandomStream {
 public:
  explicit RandomStream(std::uint64_t seed) : key_(seed), eng_(mix(seed)) {}

  RandomStream child(std::string_view label) const {
    return RandomStream(mix(key_ ^ mix(fnv1a(label))));
  }
  RandomStream child(std::uint64_t index) const {
    return RandomStream(mix(key_ ^ mix(index + 0x635d2dff)));
  }

  std::uint64_t key() const { return key_; }

  std::uint64_t next_u64() { return eng_(); }

  // Uniform on [0, 1), 53-bit resolution.
  double uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  // Uniform integer in [0, bound). bound >= 1.
  std::uint64_t uniform_int(std::uint64_t bound) {
    // Rejection to avoid modulo bias.
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % bound;
    std::uint64_t x;
    do {
      x = next_u64();
    } while (x >= limit);
    return x % bound;
  }

  // Standard normal via Box-Muller; the second variate is cached.
  double gaussian() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    const double u1 = 1.0 - uniform();  // (0, 1]
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
  }

  double gaussian(double mean, double sd) { return mean + sd * gaussian(); }

 private:
  static std::uint64_t mix(std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  static std::uint64_t fnv1a(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
      h ^= c;
      h *= 0x100000001b3ULL;
    }
    return h;
  }

  std::uint64_t key_;
  std::mt19937_64 eng_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace dwts
