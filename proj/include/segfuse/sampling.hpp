#pragma once

// Resampling coordinate kernels shared by the differentiable tensor resize and
// the plain image resizers. Pixel centers sit at half-integer positions
// (align-corners false).

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

namespace segfuse::sampling {

// value = (1 - weight) * in[lo] + weight * in[hi]
struct LinearTap {
  std::size_t lo = 0;
  std::size_t hi = 0;
  double weight = 0.0;
};

inline std::vector<LinearTap> linear_taps(std::size_t in_size, std::size_t out_size) {
  std::vector<LinearTap> taps(out_size);
  const double scale = static_cast<double>(in_size) / static_cast<double>(out_size);
  const double max_src = static_cast<double>(in_size - 1);
  for (std::size_t d = 0; d < out_size; ++d) {
    double src = (static_cast<double>(d) + 0.5) * scale - 0.5;
    src = std::clamp(src, 0.0, max_src);
    const auto lo = static_cast<std::size_t>(std::floor(src));
    taps[d].lo = lo;
    taps[d].hi = std::min(lo + 1, in_size - 1);
    taps[d].weight = src - static_cast<double>(lo);
  }
  return taps;
}

// Source index whose pixel cell contains the destination pixel center.
inline std::vector<std::size_t> nearest_taps(std::size_t in_size, std::size_t out_size) {
  std::vector<std::size_t> taps(out_size);
  for (std::size_t d = 0; d < out_size; ++d) {
    const std::size_t src = ((2 * d + 1) * in_size) / (2 * out_size);
    taps[d] = std::min(src, in_size - 1);
  }
  return taps;
}

}  // namespace segfuse::sampling
