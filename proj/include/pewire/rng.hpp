#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

namespace pewire {

// Deterministic sampling layer. std::mt19937_64's output stream is pinned by
// the standard; the distributions here are hand-rolled so that generated
// values do not depend on the standard library vendor.
class Rng {
 public:
  explicit Rng(uint64_t seed) : engine_(seed) {}

  uint64_t next() { return engine_(); }

  // Uniform integer in [0, n). Rejection sampling, no modulo bias.
  uint64_t below(uint64_t n) {
    if (n == 0) return 0;
    const uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    uint64_t v = engine_();
    while (v >= limit) v = engine_();
    return v % n;
  }

  // Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  // Standard normal via Box-Muller, one value per call (no cached spare, so
  // the stream position is easy to reason about).
  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  // Normal(0, std) truncated to [-2*std, 2*std], the usual ViT weight init.
  double trunc_normal(double stddev) {
    double v = normal();
    while (v < -2.0 || v > 2.0) v = normal();
    return v * stddev;
  }

  // Fisher-Yates.
  template <class V>
  void shuffle(std::vector<V>& xs) {
    for (size_t i = xs.size(); i > 1; --i) {
      const size_t j = static_cast<size_t>(below(i));
      std::swap(xs[i - 1], xs[j]);
    }
  }

  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
};

}  // namespace pewire
