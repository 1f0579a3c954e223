#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

namespace decalign {

/// Counter-based deterministic generator (splitmix64 over a stream/counter
/// pair). Every random draw in the library goes through one of these; there
/// is no global RNG state, so runs are reproducible bit-for-bit regardless
/// of call order elsewhere.
class Rng {
 public:
  explicit Rng(uint64_t seed, uint64_t stream = 0)
      : seed_(seed), stream_(stream), counter_(0) {}

  /// Independent substream; draws from the child never collide with the
  /// parent or with siblings forked under different ids.
  Rng fork(uint64_t id) const { return Rng(mix(seed_ ^ mix(id + 0x9e3779b97f4a7c15ULL)), stream_); }

  uint64_t next_u64() {
    uint64_t x = seed_ + 0x9e3779b97f4a7c15ULL * (++counter_) + mix(stream_);
    return mix(x);
  }

  /// Uniform in [0, 1).
  double next_double() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  /// Uniform in [lo, hi).
  double uniform(double lo, double hi) { return lo + (hi - lo) * next_double(); }

  /// Uniform integer in [0, n).
  uint64_t next_below(uint64_t n) { return n ? next_u64() % n : 0; }

  /// Standard normal via Box-Muller; draws two uniforms per pair and caches
  /// the second value, keeping the draw count deterministic.
  double next_gaussian() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = next_double(), u2 = next_double();
    while (u1 <= 1e-300) u1 = next_double();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 2.0 * M_PI * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
  }

  std::vector<double> gaussians(size_t n) {
    std::vector<double> out(n);
    for (auto& v : out) v = next_gaussian();
    return out;
  }

  /// Fisher-Yates shuffle of 0..n-1.
  std::vector<int> permutation(int n) {
    std::vector<int> p(n);
    for (int i = 0; i < n; ++i) p[i] = i;
    for (int i = n - 1; i > 0; --i) {
      int j = static_cast<int>(next_below(static_cast<uint64_t>(i) + 1));
      std::swap(p[i], p[j]);
    }
    return p;
  }

 private:
  static uint64_t mix(uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  uint64_t seed_;
  uint64_t stream_;
  uint64_t counter_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace decalign
