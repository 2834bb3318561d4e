// Copyright (c) 2026 The flowpose authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "flowpose/pngio.hpp"

#include <png.h>

#include <cmath>
#include <cstdio>
#include <memory>
#include <vector>

namespace flowpose::pngio {

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

inline uint8_t quant(double v) {
  v = std::min(std::max(v, 0.0), 1.0);
  return static_cast<uint8_t>(std::lround(v * 255.0));
}

void write_png(const std::string& path, int w, int h, int channels,
               const std::vector<uint8_t>& bytes) {
  FilePtr fp(std::fopen(path.c_str(), "wb"));
  if (!fp) throw std::runtime_error("png write: cannot open " + path);
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw std::runtime_error("png write failed: " + path);
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h), 8,
               channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  std::vector<png_bytep> rows(static_cast<size_t>(h));
  for (int y = 0; y < h; ++y)
    rows[static_cast<size_t>(y)] =
        const_cast<png_bytep>(bytes.data() + static_cast<size_t>(y) * w * channels);
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

std::vector<uint8_t> read_png(const std::string& path, int expect_channels, int& w, int& h) {
  FilePtr fp(std::fopen(path.c_str(), "rb"));
  if (!fp) throw std::runtime_error("png read: cannot open " + path);
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw std::runtime_error("png read failed: " + path);
  }
  png_init_io(png, fp.get());
  png_read_info(png, info);
  w = static_cast<int>(png_get_image_width(png, info));
  h = static_cast<int>(png_get_image_height(png, info));
  const png_byte color = png_get_color_type(png, info);
  const png_byte depth = png_get_bit_depth(png, info);
  if (depth == 16) png_set_strip_16(png);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
  if (expect_channels == 3) {
    if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA)
      png_set_gray_to_rgb(png);
    png_set_strip_alpha(png);
  } else {
    if (color == PNG_COLOR_TYPE_RGB || color == PNG_COLOR_TYPE_RGB_ALPHA ||
        color == PNG_COLOR_TYPE_PALETTE)
      png_set_rgb_to_gray_fixed(png, 1, -1, -1);
    png_set_strip_alpha(png);
  }
  png_read_update_info(png, info);
  std::vector<uint8_t> bytes(static_cast<size_t>(h) * w * expect_channels);
  std::vector<png_bytep> rows(static_cast<size_t>(h));
  for (int y = 0; y < h; ++y)
    rows[static_cast<size_t>(y)] = bytes.data() + static_cast<size_t>(y) * w * expect_channels;
  png_read_image(png, rows.data());
  png_destroy_read_struct(&png, &info, nullptr);
  return bytes;
}

}  // namespace

void write_rgb(const core::ImageGrid& img, const std::string& path) {
  const int h = img.height(), w = img.width();
  std::vector<uint8_t> bytes(static_cast<size_t>(h) * w * 3);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c)
        bytes[(static_cast<size_t>(y) * w + x) * 3 + c] = quant(img.data.at3(c, y, x));
  write_png(path, w, h, 3, bytes);
}

core::ImageGrid read_rgb(const std::string& path) {
  int w = 0, h = 0;
  const std::vector<uint8_t> bytes = read_png(path, 3, w, h);
  core::ImageGrid img{Tensor({3, h, w})};
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c)
        img.data.at3(c, y, x) = bytes[(static_cast<size_t>(y) * w + x) * 3 + c] / 255.0;
  return img;
}

void write_gray(const Tensor& plane, const std::string& path) {
  if (plane.rank() != 3 || plane.dim(0) != 1)
    throw std::invalid_argument("write_gray: expected 1 x H x W");
  const int h = plane.dim(1), w = plane.dim(2);
  std::vector<uint8_t> bytes(static_cast<size_t>(h) * w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) bytes[static_cast<size_t>(y) * w + x] = quant(plane.at3(0, y, x));
  write_png(path, w, h, 1, bytes);
}

Tensor read_gray(const std::string& path) {
  int w = 0, h = 0;
  const std::vector<uint8_t> bytes = read_png(path, 1, w, h);
  Tensor plane({1, h, w});
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) plane.at3(0, y, x) = bytes[static_cast<size_t>(y) * w + x] / 255.0;
  return plane;
}

}  // namespace flowpose::pngio
