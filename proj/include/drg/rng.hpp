// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>

namespace drg {

inline std::uint64_t splitmix64(std::uint64_t& state) {
  state += 0x9e3779b97f4a7c15ull;
  std::uint64_t z = state;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

/// Deterministic random stream. mt19937_64 output is pinned by the standard,
/// so identical seeds give bit-identical streams on every platform. The
/// std::*_distribution adapters are implementation-defined and must not be
/// used here; all variate transforms are spelled out below.
class RngStream {
 public:
  explicit RngStream(std::uint64_t seed) : seed_(seed), gen_(seed) {}

  std::uint64_t seed() const { return seed_; }

  std::uint64_t next_u64() { return gen_(); }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n). Modulo bias is below 2^-53 for any n used
  /// in this project.
  std::uint64_t uniform_int(std::uint64_t n) { return next_u64() % n; }

  /// Standard normal via Box-Muller; computes a fresh pair each call and
  /// discards the second so the stream position is call-count determined.
  double normal() {
    double u1 = 1.0 - uniform();  // (0, 1]
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) *
           std::cos(2.0 * std::numbers::pi * u2);
  }

  bool bernoulli(double p) { return uniform() < p; }

  /// Derive an independent child stream. Depends only on (seed, tag), not on
  /// how far this stream has been consumed, so per-item forks commute with
  /// processing order.
  RngStream fork(std::uint64_t tag) const {
    std::uint64_t s = seed_ ^ 0x6a09e667f3bcc909ull;
    std::uint64_t a = splitmix64(s);
    s = a ^ (tag * 0x9e3779b97f4a7c15ull + 0x2545f4914f6cdd1dull);
    std::uint64_t b = splitmix64(s);
    return RngStream(b);
  }

 private:
  std::uint64_t seed_;
  std::mt19937_64 gen_;
};

}  // namespace drg
