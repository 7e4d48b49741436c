#pragma once

// LiDAR point cloud -> sparse depth image -> window-pooled dense depth.

#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "segfuse/bytes.hpp"
#include "segfuse/error.hpp"
#include "segfuse/image.hpp"

namespace segfuse::geometry {

struct Point {
  float x = 0, y = 0, z = 0, intensity = 0;
};

using PointCloud = std::vector<Point>;

// Little-endian float32 records x, y, z, intensity (16 bytes each).
inline PointCloud read_point_cloud(std::istream& in, const std::string& what = "point cloud") {
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() % 16 != 0) {
    throw DataError(what + ": size " + std::to_string(bytes.size()) + " is not a multiple of 16 bytes");
  }
  std::istringstream s(bytes);
  PointCloud cloud(bytes.size() / 16);
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    Point& p = cloud[i];
    p.x = bytes::read_f32(s);
    p.y = bytes::read_f32(s);
    p.z = bytes::read_f32(s);
    p.intensity = bytes::read_f32(s);
    if (!std::isfinite(p.x) || !std::isfinite(p.y) || !std::isfinite(p.z)) {
      throw DataError(what + ": point " + std::to_string(i) + " has non-finite coordinates");
    }
  }
  return cloud;
}

inline PointCloud load_point_cloud(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open point cloud " + path);
  return read_point_cloud(in, path);
}

inline void write_point_cloud(std::ostream& out, const PointCloud& cloud) {
  for (const auto& p : cloud) {
    bytes::write_f32(out, p.x);
    bytes::write_f32(out, p.y);
    bytes::write_f32(out, p.z);
    bytes::write_f32(out, p.intensity);
  }
}

inline void save_point_cloud(const std::string& path, const PointCloud& cloud) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open " + path + " for writing");
  write_point_cloud(out, cloud);
}

// Pinhole camera; camera-frame point = R * sensor point + t.
struct CameraModel {
  double fx = 1, fy = 1, cx = 0, cy = 0;
  std::array<double, 9> rotation{1, 0, 0, 0, 1, 0, 0, 0, 1};  // row-major
  std::array<double, 3> translation{0, 0, 0};
  std::size_t height = 1, width = 1;

  void validate() const {
    if (!(fx > 0) || !(fy > 0) || !std::isfinite(fx) || !std::isfinite(fy)) {
      throw DataError("camera: focal lengths must be positive");
    }
    if (!std::isfinite(cx) || !std::isfinite(cy)) throw DataError("camera: principal point must be finite");
    if (height == 0 || width == 0) throw DataError("camera: image size must be positive");
    for (double v : translation) {
      if (!std::isfinite(v)) throw DataError("camera: translation must be finite");
    }
    for (int i = 0; i < 3; ++i) {
      for (int j = 0; j < 3; ++j) {
        double dot = 0.0;
        for (int k = 0; k < 3; ++k) dot += rotation[i * 3 + k] * rotation[j * 3 + k];
        if (!(std::abs(dot - (i == j ? 1.0 : 0.0)) <= 1e-9)) throw DataError("camera: rotation is not orthonormal");
      }
    }
  }

  std::array<double, 3> to_camera(const Point& p) const {
    const double s[3] = {p.x, p.y, p.z};
    std::array<double, 3> c{};
    for (int i = 0; i < 3; ++i) {
      c[i] = translation[i];
      for (int k = 0; k < 3; ++k) c[i] += rotation[i * 3 + k] * s[k];
    }
    return c;
  }
};

// Calibration text, whitespace separated, '#' comments allowed:
//   fx fy cx cy
//   r00 r01 r02 t0
//   r10 r11 r12 t1
//   r20 r21 r22 t2
//   height width
inline CameraModel read_calibration(std::istream& in, const std::string& what = "calibration") {
  std::string text, line;
  while (std::getline(in, line)) {
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    text += line + "\n";
  }
  std::istringstream s(text);
  CameraModel cam;
  double v[18];
  for (double& x : v) {
    if (!(s >> x)) throw DataError(what + ": expected 4 intrinsics, a 3x4 extrinsic matrix and an image size");
  }
  std::string extra;
  if (s >> extra) throw DataError(what + ": unexpected trailing value '" + extra + "'");
  cam.fx = v[0];
  cam.fy = v[1];
  cam.cx = v[2];
  cam.cy = v[3];
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 3; ++c) cam.rotation[r * 3 + c] = v[4 + r * 4 + c];
    cam.translation[r] = v[4 + r * 4 + 3];
  }
  if (v[16] < 1 || v[17] < 1 || v[16] != std::floor(v[16]) || v[17] != std::floor(v[17])) {
    throw DataError(what + ": image size must be positive integers");
  }
  cam.height = static_cast<std::size_t>(v[16]);
  cam.width = static_cast<std::size_t>(v[17]);
  try {
    cam.validate();
  } catch (const DataError& e) {
    throw DataError(what + ": " + e.what());
  }
  return cam;
}

inline CameraModel load_calibration(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open calibration " + path);
  return read_calibration(in, path);
}

inline void write_calibration(std::ostream& out, const CameraModel& cam) {
  out.precision(17);
  out << cam.fx << " " << cam.fy << " " << cam.cx << " " << cam.cy << "\n";
  for (int r = 0; r < 3; ++r) {
    out << cam.rotation[r * 3] << " " << cam.rotation[r * 3 + 1] << " " << cam.rotation[r * 3 + 2] << " "
        << cam.translation[r] << "\n";
  }
  out << cam.height << " " << cam.width << "\n";
}

// Sparse depth in meters. Points behind the camera or outside the image are
// dropped; the nearest point wins a shared pixel.
inline DepthMap project_cloud(const PointCloud& cloud, const CameraModel& cam) {
  cam.validate();
  DepthMap depth(cam.height, cam.width, 1, 0.0);
  const double w = static_cast<double>(cam.width), h = static_cast<double>(cam.height);
  for (const auto& p : cloud) {
    const auto c = cam.to_camera(p);
    if (!(c[2] > 0.0)) continue;
    const double u = std::round(cam.fx * c[0] / c[2] + cam.cx);
    const double v = std::round(cam.fy * c[1] / c[2] + cam.cy);
    if (!(u >= 0.0 && u < w && v >= 0.0 && v < h)) continue;
    double& d = depth(static_cast<std::size_t>(v), static_cast<std::size_t>(u));
    if (d == 0.0 || c[2] < d) d = c[2];
  }
  return depth;
}

enum class PoolMode {
  max,          // literal window maximum
  min_nonzero,  // nearest valid depth in the window; favors foreground
};

// Sliding window, stride 1, zero padding, output size = input size.
inline DepthMap densify_maxpool(const DepthMap& depth, std::size_t window = 7, PoolMode mode = PoolMode::max) {
  if (window == 0 || window % 2 == 0) {
    throw std::invalid_argument("densify: window must be odd, got " + std::to_string(window));
  }
  if (depth.channels() != 1) throw std::invalid_argument("densify: expected a single-channel depth map");
  const std::size_t h = depth.height(), w = depth.width(), r = window / 2;
  // Both reductions are separable over a square window. For min_nonzero,
  // missing depth acts as +inf.
  const double empty = mode == PoolMode::max ? 0.0 : std::numeric_limits<double>::infinity();
  auto combine = [mode](double a, double b) { return mode == PoolMode::max ? std::max(a, b) : std::min(a, b); };
  auto load = [&](double v) { return mode == PoolMode::min_nonzero && v == 0.0 ? empty : v; };

  std::vector<double> rows(h * w, empty);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const std::size_t lo = x >= r ? x - r : 0, hi = std::min(w - 1, x + r);
      double acc = empty;
      for (std::size_t k = lo; k <= hi; ++k) acc = combine(acc, load(depth(y, k)));
      rows[y * w + x] = acc;
    }
  }
  DepthMap out(h, w, 1, 0.0);
  for (std::size_t y = 0; y < h; ++y) {
    const std::size_t lo = y >= r ? y - r : 0, hi = std::min(h - 1, y + r);
    for (std::size_t x = 0; x < w; ++x) {
      double acc = empty;
      for (std::size_t k = lo; k <= hi; ++k) acc = combine(acc, rows[k * w + x]);
      out(y, x) = std::isinf(acc) ? 0.0 : acc;
    }
  }
  return out;
}

inline double coverage(const DepthMap& depth) {
  if (depth.empty()) return 0.0;
  std::size_t n = 0;
  for (double v : depth.data()) n += v != 0.0;
  return static_cast<double>(n) / static_cast<double>(depth.size());
}

struct Margins {
  std::size_t top = 0, bottom = 0, left = 0, right = 0;
  bool zero() const { return top == 0 && bottom == 0 && left == 0 && right == 0; }
};

// Any subset of the aligned modalities; absent ones stay empty.
struct AlignedImages {
  std::optional<RgbImage> rgb;
  std::optional<LabelMap> label;
  std::optional<DepthMap> depth;
};

// Crops every present image identically and resizes back to the original size:
// bilinear for RGB, nearest for labels and depth.
inline AlignedImages crop_and_restore(const AlignedImages& in, const Margins& m) {
  std::size_t h = 0, w = 0;
  auto check = [&](std::size_t ih, std::size_t iw) {
    if (h == 0 && w == 0) {
      h = ih;
      w = iw;
    } else if (ih != h || iw != w) {
      throw std::invalid_argument("crop_and_restore: images are not aligned");
    }
  };
  if (in.rgb) check(in.rgb->height(), in.rgb->width());
  if (in.label) check(in.label->height(), in.label->width());
  if (in.depth) check(in.depth->height(), in.depth->width());
  if (h == 0) return in;
  if (2 * m.top >= h || 2 * m.bottom >= h || 2 * m.left >= w || 2 * m.right >= w) {
    throw std::invalid_argument("crop_and_restore: margins must be smaller than half the image");
  }
  AlignedImages out;
  if (in.rgb) out.rgb = resize_bilinear(crop(*in.rgb, m.top, m.bottom, m.left, m.right), h, w);
  if (in.label) out.label = resize_nearest(crop(*in.label, m.top, m.bottom, m.left, m.right), h, w);
  if (in.depth) out.depth = resize_nearest(crop(*in.depth, m.top, m.bottom, m.left, m.right), h, w);
  return out;
}

}  // namespace segfuse::geometry
