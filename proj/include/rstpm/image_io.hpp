// Copyright 2026 The rstpm Authors
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

#pragma once

#include <jpeglib.h>
#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "rstpm/tensor.hpp"

// 8-bit PNG/JPEG decoding into [0, 1] float tensors and PNG encoding back.
namespace rstpm::image_io {

struct ImageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Interleaved 8-bit pixels.
struct Raster {
  int width = 0;
  int height = 0;
  int channels = 0;  // 1 or 3
  std::vector<std::uint8_t> pixels;
};

inline std::string lower_ext(const std::filesystem::path& p) {
  std::string e = p.extension().string();
  std::transform(e.begin(), e.end(), e.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return e;
}

inline Raster read_png(const std::string& path, int channels) {
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.c_str()))
    throw ImageError("cannot decode PNG '" + path + "': " + img.message);
  img.format = channels == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  Raster r{static_cast<int>(img.width), static_cast<int>(img.height), channels, {}};
  r.pixels.resize(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, r.pixels.data(), 0, nullptr)) {
    std::string msg = img.message;
    png_image_free(&img);
    throw ImageError("cannot decode PNG '" + path + "': " + msg);
  }
  return r;
}

namespace detail {

struct JpegErrorMgr {
  jpeg_error_mgr base;
  char message[JMSG_LENGTH_MAX];
};

[[noreturn]] inline void jpeg_throw(j_common_ptr cinfo) {
  auto* err = reinterpret_cast<JpegErrorMgr*>(cinfo->err);
  (*cinfo->err->format_message)(cinfo, err->message);
  throw ImageError(err->message);
}

}  // namespace detail

inline Raster read_jpeg(const std::string& path, int channels) {
  std::unique_ptr<FILE, int (*)(FILE*)> file(std::fopen(path.c_str(), "rb"), &std::fclose);
  if (!file) throw ImageError("cannot open '" + path + "'");
  jpeg_decompress_struct cinfo{};
  detail::JpegErrorMgr err{};
  cinfo.err = jpeg_std_error(&err.base);
  err.base.error_exit = detail::jpeg_throw;
  Raster r;
  try {
    jpeg_create_decompress(&cinfo);
    jpeg_stdio_src(&cinfo, file.get());
    jpeg_read_header(&cinfo, TRUE);
    cinfo.out_color_space = channels == 1 ? JCS_GRAYSCALE : JCS_RGB;
    jpeg_start_decompress(&cinfo);
    r.width = static_cast<int>(cinfo.output_width);
    r.height = static_cast<int>(cinfo.output_height);
    r.channels = channels;
    r.pixels.resize(static_cast<std::size_t>(r.width) * r.height * channels);
    while (cinfo.output_scanline < cinfo.output_height) {
      JSAMPROW row = r.pixels.data() + static_cast<std::size_t>(cinfo.output_scanline) * r.width * channels;
      jpeg_read_scanlines(&cinfo, &row, 1);
    }
    jpeg_finish_decompress(&cinfo);
    jpeg_destroy_decompress(&cinfo);
  } catch (const ImageError& e) {
    jpeg_destroy_decompress(&cinfo);
    throw ImageError("cannot decode JPEG '" + path + "': " + e.what());
  }
  return r;
}

inline Raster read_raster(const std::string& path, int channels) {
  const std::string ext = lower_ext(path);
  if (ext == ".png") return read_png(path, channels);
  if (ext == ".jpg" || ext == ".jpeg") return read_jpeg(path, channels);
  throw ImageError("unsupported image format '" + path + "'");
}

inline void write_png(const std::string& path, const Raster& r) {
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(r.width);
  img.height = static_cast<png_uint_32>(r.height);
  img.format = r.channels == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&img, path.c_str(), 0, r.pixels.data(), 0, nullptr))
    throw ImageError("cannot write PNG '" + path + "': " + img.message);
}

inline std::uint8_t to_byte(float v) {
  const float c = std::clamp(v, 0.0f, 1.0f);
  return static_cast<std::uint8_t>(std::lround(c * 255.0f));
}

/// RGB image as (1, 3, H, W) in [0, 1].
inline Tensor<float> read_image(const std::string& path) {
  Raster r = read_raster(path, 3);
  Tensor<float> t(Shape{1, 3, r.height, r.width});
  for (int y = 0; y < r.height; ++y)
    for (int x = 0; x < r.width; ++x)
      for (int c = 0; c < 3; ++c)
        t(0, c, y, x) = r.pixels[(static_cast<std::size_t>(y) * r.width + x) * 3 + c] / 255.0f;
  return t;
}

/// Grayscale image as (1, 1, H, W) in [0, 1].
inline Tensor<float> read_gray(const std::string& path) {
  Raster r = read_raster(path, 1);
  Tensor<float> t(Shape{1, 1, r.height, r.width});
  for (std::size_t i = 0; i < r.pixels.size(); ++i) t[i] = r.pixels[i] / 255.0f;
  return t;
}

/// Writes a (1, 3, H, W) [0, 1] image as 8-bit RGB PNG.
inline void write_rgb(const std::string& path, const Tensor<float>& img) {
  RSTPM_REQUIRE(img.c() == 3, ShapeError, "write_rgb expects 3 channels");
  Raster r{img.w(), img.h(), 3, std::vector<std::uint8_t>(static_cast<std::size_t>(img.w()) * img.h() * 3)};
  for (int y = 0; y < img.h(); ++y)
    for (int x = 0; x < img.w(); ++x)
      for (int c = 0; c < 3; ++c) r.pixels[(static_cast<std::size_t>(y) * img.w() + x) * 3 + c] = to_byte(img(0, c, y, x));
  write_png(path, r);
}

/// Writes plane (0, 0) of a [0, 1] tensor as 8-bit grayscale PNG.
inline void write_gray(const std::string& path, const Tensor<float>& img) {
  Raster r{img.w(), img.h(), 1, std::vector<std::uint8_t>(img.shape().plane())};
  const float* p = img.plane(0, 0);
  for (std::size_t i = 0; i < r.pixels.size(); ++i) r.pixels[i] = to_byte(p[i]);
  write_png(path, r);
}

/// Per-image min-max scaling to [0, 1] then 8-bit grayscale PNG. For viewing only.
inline void write_heatmap(const std::string& path, const Tensor<float>& map) {
  const float* p = map.plane(0, 0);
  const std::size_t n = map.shape().plane();
  const auto [lo, hi] = std::minmax_element(p, p + n);
  Tensor<float> scaled(Shape{1, 1, map.h(), map.w()});
  const float range = *hi - *lo;
  for (std::size_t i = 0; i < n; ++i) scaled[i] = range > 0 ? (p[i] - *lo) / range : 0.0f;
  write_gray(path, scaled);
}

}  // namespace rstpm::image_io
