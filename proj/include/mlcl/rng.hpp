#pragma once

#include <cmath>
#include <cstdint>
#include <istream>
#include <ostream>
#include <random>
#include <stdexcept>
#include <string_view>

namespace mlcl {

// Deterministic RNG used across the project. All distributions are derived
// from the raw 64-bit stream, so sampled values never depend on the standard
// library's distribution implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  // Uniform in [0, 1) with 53-bit resolution.
  double uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  // Uniform in (0, 1).
  double uniform_open() {
    double u = uniform();
    return u > 0.0 ? u : 0x1.0p-53;
  }

  // Uniform in [lo, hi).
  double range(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Standard normal via Box-Muller. One fresh pair of uniforms per draw so
  // the engine state advances identically regardless of call pattern.
  double normal() {
    constexpr double two_pi = 6.283185307179586476925286766559;
    double u1 = uniform_open();
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(two_pi * u2);
  }

  // Standard Gumbel(0,1).
  double gumbel() { return -std::log(-std::log(uniform_open())); }

  // Uniform integer in [0, n). Rejection sampling, no modulo bias.
  std::uint64_t below(std::uint64_t n) {
    if (n == 0) throw std::invalid_argument("Rng::below: n must be positive");
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t x;
    do {
      x = next_u64();
    } while (x >= limit);
    return x % n;
  }

  bool coin(double p) { return uniform() < p; }

  void save(std::ostream& os) const { os << engine_; }
  void load(std::istream& is) {
    if (!(is >> engine_)) throw std::runtime_error("Rng::load: bad stream state");
  }

  // Stable derivation of independent stream seeds from a base seed and a tag.
  static std::uint64_t derive(std::uint64_t seed, std::string_view tag) {
    std::uint64_t h = 0xcbf29ce484222325ull ^ seed;
    for (char c : tag) {
      h ^= static_cast<unsigned char>(c);
      h *= 0x100000001b3ull;
    }
    return splitmix(h);
  }

  static std::uint64_t derive(std::uint64_t seed, std::string_view tag, std::uint64_t n) {
    return splitmix(derive(seed, tag) ^ (0x9e3779b97f4a7c15ull * (n + 1)));
  }

 private:
  static std::uint64_t splitmix(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
  }

  std::mt19937_64 engine_;
};

}  // namespace mlcl
