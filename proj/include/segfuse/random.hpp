#pragma once

#include <cstdint>
#include <random>

namespace segfuse {

// mt19937_64 has a standard-mandated sequence; the conversions below avoid
// library-specific distribution implementations so runs are reproducible
// across toolchains.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}

  // [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // [0, n); n > 0. Modulo bias is negligible for the small n used here.
  std::uint64_t index(std::uint64_t n) { return gen_() % n; }

  std::uint64_t bits() { return gen_(); }

 private:
  std::mt19937_64 gen_;
};

}  // namespace segfuse
