#pragma once

// Plain interleaved (H x W x C) rasters for file-level data: RGB images,
// label maps and depth maps.

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "segfuse/sampling.hpp"

namespace segfuse {

inline constexpr std::uint8_t kIgnoreId = 255;

template <typename T>
class Image {
 public:
  Image() = default;
  Image(std::size_t height, std::size_t width, std::size_t channels = 1, T fill = T{})
      : height_(height), width_(width), channels_(channels), data_(height * width * channels, fill) {}
  Image(std::size_t height, std::size_t width, std::size_t channels, std::vector<T> data)
      : height_(height), width_(width), channels_(channels), data_(std::move(data)) {
    if (data_.size() != height * width * channels) throw std::invalid_argument("image data size mismatch");
  }

  std::size_t height() const { return height_; }
  std::size_t width() const { return width_; }
  std::size_t channels() const { return channels_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T& operator()(std::size_t y, std::size_t x, std::size_t c = 0) { return data_[(y * width_ + x) * channels_ + c]; }
  const T& operator()(std::size_t y, std::size_t x, std::size_t c = 0) const {
    return data_[(y * width_ + x) * channels_ + c];
  }

  std::vector<T>& data() { return data_; }
  const std::vector<T>& data() const { return data_; }

  template <typename U>
  bool same_size(const Image<U>& o) const {
    return height_ == o.height() && width_ == o.width();
  }
  bool operator==(const Image& o) const = default;

 private:
  std::size_t height_ = 0;
  std::size_t width_ = 0;
  std::size_t channels_ = 0;
  std::vector<T> data_;
};

using LabelMap = Image<std::uint8_t>;
using RgbImage = Image<std::uint8_t>;  // 3 channels
using DepthMap = Image<double>;        // meters, 0 = missing

template <typename T>
Image<T> resize_nearest(const Image<T>& in, std::size_t out_h, std::size_t out_w) {
  if (in.empty() || out_h == 0 || out_w == 0) throw std::invalid_argument("resize_nearest: empty size");
  const auto ty = sampling::nearest_taps(in.height(), out_h);
  const auto tx = sampling::nearest_taps(in.width(), out_w);
  Image<T> out(out_h, out_w, in.channels());
  for (std::size_t y = 0; y < out_h; ++y) {
    for (std::size_t x = 0; x < out_w; ++x) {
      for (std::size_t c = 0; c < in.channels(); ++c) out(y, x, c) = in(ty[y], tx[x], c);
    }
  }
  return out;
}

// Bilinear with half-pixel centers; integral pixel types are rounded to nearest.
template <typename T>
Image<T> resize_bilinear(const Image<T>& in, std::size_t out_h, std::size_t out_w) {
  if (in.empty() || out_h == 0 || out_w == 0) throw std::invalid_argument("resize_bilinear: empty size");
  const auto ty = sampling::linear_taps(in.height(), out_h);
  const auto tx = sampling::linear_taps(in.width(), out_w);
  Image<T> out(out_h, out_w, in.channels());
  for (std::size_t y = 0; y < out_h; ++y) {
    const auto& ry = ty[y];
    for (std::size_t x = 0; x < out_w; ++x) {
      const auto& rx = tx[x];
      for (std::size_t c = 0; c < in.channels(); ++c) {
        const double top = (1.0 - rx.weight) * static_cast<double>(in(ry.lo, rx.lo, c)) +
                           rx.weight * static_cast<double>(in(ry.lo, rx.hi, c));
        const double bottom = (1.0 - rx.weight) * static_cast<double>(in(ry.hi, rx.lo, c)) +
                              rx.weight * static_cast<double>(in(ry.hi, rx.hi, c));
        const double v = (1.0 - ry.weight) * top + ry.weight * bottom;
        if constexpr (std::is_integral_v<T>) {
          out(y, x, c) = static_cast<T>(std::lround(v));
        } else {
          out(y, x, c) = static_cast<T>(v);
        }
      }
    }
  }
  return out;
}

template <typename T>
Image<T> crop(const Image<T>& in, std::size_t top, std::size_t bottom, std::size_t left, std::size_t right) {
  if (top + bottom >= in.height() || left + right >= in.width()) throw std::invalid_argument("crop: empty result");
  const std::size_t h = in.height() - top - bottom, w = in.width() - left - right;
  Image<T> out(h, w, in.channels());
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      for (std::size_t c = 0; c < in.channels(); ++c) out(y, x, c) = in(y + top, x + left, c);
    }
  }
  return out;
}

}  // namespace segfuse
