#pragma once

// Seeded toy RGB-D scenes with three classes:
//   0 background  gray, far
//   1 marker      colored, near
//   2 ghost       same gray as the background, near: only depth reveals it

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <vector>

#include "segfuse/image.hpp"
#include "segfuse/random.hpp"

namespace segfuse::synthetic {

inline constexpr std::size_t kClasses = 3;
inline constexpr std::uint8_t kBackground = 0, kMarker = 1, kGhost = 2;

struct SceneOptions {
  std::size_t height = 32;
  std::size_t width = 32;
  std::size_t min_objects = 1;
  std::size_t max_objects = 3;
  double min_extent = 0.25;  // object half-size as a fraction of the image side
  double max_extent = 0.45;
  double background_depth = 8.0;  // meters
  double near_min = 2.0, near_max = 4.0;
  double rgb_noise = 12.0;   // uniform +- on 0..255
  double depth_noise = 0.1;  // uniform +- meters
};

struct Scene {
  RgbImage rgb;
  DepthMap depth;
  LabelMap label;
};

inline Scene make_scene(Rng& rng, const SceneOptions& o = {}) {
  const std::size_t h = o.height, w = o.width;
  Scene s{RgbImage(h, w, 3), DepthMap(h, w, 1), LabelMap(h, w, 1, kBackground)};
  std::vector<double> depth(h * w, o.background_depth);
  std::vector<std::array<double, 3>> color(h * w, {128.0, 128.0, 128.0});

  const std::size_t count = o.min_objects + rng.index(o.max_objects - o.min_objects + 1);
  for (std::size_t k = 0; k < count; ++k) {
    const std::uint8_t cls = rng.uniform() < 0.5 ? kMarker : kGhost;
    const bool ellipse = rng.uniform() < 0.5;
    const double cy = rng.uniform(0.0, static_cast<double>(h)), cx = rng.uniform(0.0, static_cast<double>(w));
    const double ry = rng.uniform(o.min_extent, o.max_extent) * static_cast<double>(h);
    const double rx = rng.uniform(o.min_extent, o.max_extent) * static_cast<double>(w);
    const double z = rng.uniform(o.near_min, o.near_max);
    std::array<double, 3> c{128.0, 128.0, 128.0};
    if (cls == kMarker) c = {rng.uniform(170, 230), rng.uniform(40, 90), rng.uniform(40, 90)};
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) {
        const double dy = (static_cast<double>(y) + 0.5 - cy) / ry, dx = (static_cast<double>(x) + 0.5 - cx) / rx;
        const bool inside = ellipse ? dy * dy + dx * dx <= 1.0 : std::abs(dy) <= 1.0 && std::abs(dx) <= 1.0;
        if (!inside) continue;
        s.label(y, x) = cls;
        depth[y * w + x] = z;
        color[y * w + x] = c;
      }
    }
  }
  for (std::size_t i = 0; i < h * w; ++i) {
    s.depth.data()[i] = depth[i] + rng.uniform(-o.depth_noise, o.depth_noise);
    for (std::size_t c = 0; c < 3; ++c) {
      const double v = color[i][c] + rng.uniform(-o.rgb_noise, o.rgb_noise);
      s.rgb.data()[i * 3 + c] = static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 255.0)));
    }
  }
  return s;
}

inline std::vector<Scene> make_scenes(std::uint64_t seed, std::size_t count, const SceneOptions& o = {}) {
  Rng rng(seed);
  std::vector<Scene> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) out.push_back(make_scene(rng, o));
  return out;
}

}  // namespace segfuse::synthetic
