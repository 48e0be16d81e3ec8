#pragma once

// Thin libpng wrapper: grayscale reads (any color type collapsed to gray),
// 8-bit grayscale writes for anomaly maps, and a red-heat overlay writer.

#include "fbclip/linalg.hpp"

#include <png.h>

#include <cstdio>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace fbclip::io {

struct PngError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

namespace detail {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f != nullptr) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

}  // namespace detail

// Reads any PNG as a grayscale matrix in [0, 1] (RGB collapses via luma).
inline Mat read_png_gray(const std::string& path) {
  detail::FilePtr fp(std::fopen(path.c_str(), "rb"));
  if (!fp) throw PngError("cannot open " + path);
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (png == nullptr) throw PngError("png_create_read_struct failed");
  png_infop info = png_create_info_struct(png);
  if (info == nullptr) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    throw PngError("png_create_info_struct failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw PngError("libpng failure reading " + path);
  }
  png_init_io(png, fp.get());
  png_read_info(png, info);

  png_set_strip_16(png);
  png_set_strip_alpha(png);
  if (png_get_color_type(png, info) == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (png_get_color_type(png, info) == PNG_COLOR_TYPE_GRAY &&
      png_get_bit_depth(png, info) < 8)
    png_set_expand_gray_1_2_4_to_8(png);
  if (png_get_color_type(png, info) & PNG_COLOR_MASK_COLOR)
    png_set_rgb_to_gray_fixed(png, 1, -1, -1);  // default luma coefficients
  png_read_update_info(png, info);

  const png_uint_32 h = png_get_image_height(png, info);
  const png_uint_32 w = png_get_image_width(png, info);
  std::vector<std::vector<png_byte>> rows(h, std::vector<png_byte>(png_get_rowbytes(png, info)));
  std::vector<png_bytep> row_ptrs(h);
  for (png_uint_32 i = 0; i < h; ++i) row_ptrs[i] = rows[i].data();
  png_read_image(png, row_ptrs.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);

  Mat out(static_cast<Eigen::Index>(h), static_cast<Eigen::Index>(w));
  for (png_uint_32 y = 0; y < h; ++y)
    for (png_uint_32 x = 0; x < w; ++x)
      out(static_cast<Eigen::Index>(y), static_cast<Eigen::Index>(x)) =
          static_cast<double>(rows[y][x]) / 255.0;
  return out;
}

namespace detail {

inline void write_png(const std::string& path, int width, int height, int color_type,
                      const std::vector<png_byte>& pixels, int channels) {
  FilePtr fp(std::fopen(path.c_str(), "wb"));
  if (!fp) throw PngError("cannot write " + path);
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (png == nullptr) throw PngError("png_create_write_struct failed");
  png_infop info = png_create_info_struct(png);
  if (info == nullptr) {
    png_destroy_write_struct(&png, nullptr);
    throw PngError("png_create_info_struct failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw PngError("libpng failure writing " + path);
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), 8,
               color_type, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  std::vector<png_bytep> row_ptrs(static_cast<std::size_t>(height));
  for (int y = 0; y < height; ++y)
    row_ptrs[static_cast<std::size_t>(y)] = const_cast<png_bytep>(
        pixels.data() + static_cast<std::size_t>(y) * static_cast<std::size_t>(width) *
                            static_cast<std::size_t>(channels));
  png_write_image(png, row_ptrs.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

inline png_byte to_byte(double v) {
  return static_cast<png_byte>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

}  // namespace detail

// 8-bit grayscale from a [0,1] matrix.
inline void write_png_gray(const std::string& path, const Mat& m) {
  std::vector<png_byte> pixels(static_cast<std::size_t>(m.size()));
  for (Eigen::Index y = 0; y < m.rows(); ++y)
    for (Eigen::Index x = 0; x < m.cols(); ++x)
      pixels[static_cast<std::size_t>(y * m.cols() + x)] = detail::to_byte(m(y, x));
  detail::write_png(path, static_cast<int>(m.cols()), static_cast<int>(m.rows()),
                    PNG_COLOR_TYPE_GRAY, pixels, 1);
}

// RGB overlay: the base image in gray with the heat map blended into red.
inline void write_png_overlay(const std::string& path, const Mat& base, const Mat& heat) {
  require(base.rows() == heat.rows() && base.cols() == heat.cols(),
          "write_png_overlay: shape mismatch");
  std::vector<png_byte> pixels(static_cast<std::size_t>(base.size()) * 3);
  std::size_t at = 0;
  for (Eigen::Index y = 0; y < base.rows(); ++y) {
    for (Eigen::Index x = 0; x < base.cols(); ++x) {
      const double g = std::clamp(base(y, x), 0.0, 1.0);
      const double h = std::clamp(heat(y, x), 0.0, 1.0);
      pixels[at++] = detail::to_byte(g * (1.0 - h) + h);  // red channel saturates with heat
      pixels[at++] = detail::to_byte(g * (1.0 - h));
      pixels[at++] = detail::to_byte(g * (1.0 - h));
    }
  }
  detail::write_png(path, static_cast<int>(base.cols()), static_cast<int>(base.rows()),
                    PNG_COLOR_TYPE_RGB, pixels, 3);
}

}  // namespace fbclip::io
