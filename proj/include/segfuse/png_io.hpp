#pragma once

// PNG reading/writing via libpng: 8-bit gray labels, 8-bit RGB images and
// 16-bit millimeter depth maps.

#include <png.h>

#include <csetjmp>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <memory>
#include <string>
#include <vector>

#include "segfuse/error.hpp"
#include "segfuse/image.hpp"

namespace segfuse::png {

namespace detail {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

struct RawImage {
  std::size_t height = 0, width = 0, channels = 0, bit_depth = 0;
  std::vector<std::uint16_t> samples;
};

inline void png_warning_handler(png_structp, png_const_charp) {}

// libpng reports errors by longjmp; every object touched after setjmp is
// constructed before it.
inline RawImage read_raw(const std::string& path) {
  FilePtr file(std::fopen(path.c_str(), "rb"));
  if (!file) throw DataError("cannot open " + path);
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, png_warning_handler);
  if (!png) throw DataError("png_create_read_struct failed");
  png_infop info = png_create_info_struct(png);
  RawImage raw;
  std::vector<unsigned char> buf;
  std::vector<png_bytep> rows;
  if (!info || setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw DataError(path + ": unreadable PNG");
  }
  png_init_io(png, file.get());
  png_read_info(png, info);
  const int color = png_get_color_type(png, info);
  const int depth = png_get_bit_depth(png, info);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  png_read_update_info(png, info);

  raw.height = png_get_image_height(png, info);
  raw.width = png_get_image_width(png, info);
  raw.channels = png_get_channels(png, info);
  raw.bit_depth = png_get_bit_depth(png, info);
  const std::size_t rowbytes = png_get_rowbytes(png, info);
  buf.resize(rowbytes * raw.height);
  rows.resize(raw.height);
  for (std::size_t y = 0; y < raw.height; ++y) rows[y] = buf.data() + y * rowbytes;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);

  const std::size_t n = raw.height * raw.width * raw.channels;
  raw.samples.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (raw.bit_depth == 16) {
      raw.samples[i] = static_cast<std::uint16_t>((buf[2 * i] << 8) | buf[2 * i + 1]);  // big-endian on disk
    } else {
      raw.samples[i] = buf[i];
    }
  }
  return raw;
}

inline void write_raw(const std::string& path, std::size_t height, std::size_t width, int color_type, int bit_depth,
                      const std::vector<unsigned char>& rowdata) {
  FilePtr file(std::fopen(path.c_str(), "wb"));
  if (!file) throw DataError("cannot open " + path + " for writing");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, png_warning_handler);
  if (!png) throw DataError("png_create_write_struct failed");
  png_infop info = png_create_info_struct(png);
  const std::size_t rowbytes = rowdata.size() / height;
  if (!info || setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw DataError(path + ": PNG encoding failed");
  }
  png_init_io(png, file.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), bit_depth, color_type,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (std::size_t y = 0; y < height; ++y) {
    png_write_row(png, const_cast<png_bytep>(rowdata.data() + y * rowbytes));
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

}  // namespace detail

inline LabelMap read_label(const std::string& path) {
  auto raw = detail::read_raw(path);
  if (raw.channels != 1 || raw.bit_depth != 8) throw DataError(path + ": label PNG must be 8-bit single channel");
  LabelMap out(raw.height, raw.width, 1);
  for (std::size_t i = 0; i < raw.samples.size(); ++i) out.data()[i] = static_cast<std::uint8_t>(raw.samples[i]);
  return out;
}

inline void write_label(const std::string& path, const LabelMap& label) {
  std::vector<unsigned char> rows(label.data().begin(), label.data().end());
  detail::write_raw(path, label.height(), label.width(), PNG_COLOR_TYPE_GRAY, 8, rows);
}

inline RgbImage read_rgb(const std::string& path) {
  auto raw = detail::read_raw(path);
  if (raw.bit_depth != 8) throw DataError(path + ": RGB PNG must be 8-bit");
  RgbImage out(raw.height, raw.width, 3);
  for (std::size_t p = 0; p < raw.height * raw.width; ++p) {
    for (std::size_t c = 0; c < 3; ++c) {
      const std::size_t src = raw.channels == 1 ? p : p * raw.channels + c;
      out.data()[p * 3 + c] = static_cast<std::uint8_t>(raw.samples[src]);
    }
  }
  return out;
}

inline void write_rgb(const std::string& path, const RgbImage& rgb) {
  if (rgb.channels() != 3) throw DataError("write_rgb: image must have 3 channels");
  std::vector<unsigned char> rows(rgb.data().begin(), rgb.data().end());
  detail::write_raw(path, rgb.height(), rgb.width(), PNG_COLOR_TYPE_RGB, 8, rows);
}

inline constexpr double kMaxEncodableDepth = 65.535;

// 16-bit millimeters; 0 = missing.
inline DepthMap read_depth(const std::string& path) {
  auto raw = detail::read_raw(path);
  if (raw.channels != 1) throw DataError(path + ": depth PNG must be single channel");
  DepthMap out(raw.height, raw.width, 1);
  for (std::size_t i = 0; i < raw.samples.size(); ++i) out.data()[i] = raw.samples[i] * 1e-3;
  return out;
}

// Returns the number of pixels dropped (set to 0) for exceeding 65.535 m.
inline std::size_t write_depth(const std::string& path, const DepthMap& depth) {
  std::vector<unsigned char> rows(depth.size() * 2);
  std::size_t dropped = 0;
  for (std::size_t i = 0; i < depth.size(); ++i) {
    const double mm = std::round(depth.data()[i] * 1000.0);
    std::uint16_t v = 0;
    if (mm > 65535.0) {
      ++dropped;
    } else if (mm > 0.0) {
      v = static_cast<std::uint16_t>(mm);
    }
    rows[2 * i] = static_cast<unsigned char>(v >> 8);  // PNG stores big-endian
    rows[2 * i + 1] = static_cast<unsigned char>(v & 0xFF);
  }
  detail::write_raw(path, depth.height(), depth.width(), PNG_COLOR_TYPE_GRAY, 16, rows);
  return dropped;
}

}  // namespace segfuse::png
