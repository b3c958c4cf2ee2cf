#pragma once

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "partseg/errors.hpp"

namespace partseg {

/// Real-valued image, channel-major (C x H x W), values nominally in [0, 1].
struct Image {
  std::size_t channels = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> data;

  Image() = default;
  Image(std::size_t c, std::size_t h, std::size_t w, double fill = 0.0)
      : channels(c), height(h), width(w), data(c * h * w, fill) {}

  double& at(std::size_t c, std::size_t y, std::size_t x) { return data[(c * height + y) * width + x]; }
  double at(std::size_t c, std::size_t y, std::size_t x) const {
    return data[(c * height + y) * width + x];
  }
  bool operator==(const Image&) const = default;
};

/// Integer label grid (H x W); 0 is background, k >= 1 a part id.
struct LabelMap {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<int> labels;

  LabelMap() = default;
  LabelMap(std::size_t h, std::size_t w, int fill = 0) : height(h), width(w), labels(h * w, fill) {}

  int& at(std::size_t y, std::size_t x) { return labels[y * width + x]; }
  int at(std::size_t y, std::size_t x) const { return labels[y * width + x]; }
  bool operator==(const LabelMap&) const = default;
};

/// Zero-pads (bottom/right) so both sides are multiples of `stride`.
inline Image pad_to_multiple(const Image& img, std::size_t stride) {
  const std::size_t h = (img.height + stride - 1) / stride * stride;
  const std::size_t w = (img.width + stride - 1) / stride * stride;
  if (h == img.height && w == img.width) return img;
  Image out(img.channels, h, w, 0.0);
  for (std::size_t c = 0; c < img.channels; ++c)
    for (std::size_t y = 0; y < img.height; ++y)
      for (std::size_t x = 0; x < img.width; ++x) out.at(c, y, x) = img.at(c, y, x);
  return out;
}

/// Background-pads (bottom/right) so both sides are multiples of `stride`.
inline LabelMap pad_to_multiple(const LabelMap& mask, std::size_t stride) {
  const std::size_t h = (mask.height + stride - 1) / stride * stride;
  const std::size_t w = (mask.width + stride - 1) / stride * stride;
  if (h == mask.height && w == mask.width) return mask;
  LabelMap out(h, w, 0);
  for (std::size_t y = 0; y < mask.height; ++y)
    for (std::size_t x = 0; x < mask.width; ++x) out.at(y, x) = mask.at(y, x);
  return out;
}

namespace png {

namespace detail {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using File = std::unique_ptr<std::FILE, FileCloser>;

inline void write_raw(const std::filesystem::path& path, std::size_t width, std::size_t height,
                      int color_type, int channels, const std::vector<std::uint8_t>& pixels) {
  File file(std::fopen(path.string().c_str(), "wb"));
  if (!file) throw IoError("cannot open for writing: " + path.string());
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw IoError("libpng initialization failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError("libpng failed writing " + path.string());
  }
  png_init_io(png, file.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), 8,
               color_type, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (std::size_t y = 0; y < height; ++y) {
    png_write_row(png, const_cast<png_bytep>(pixels.data() + y * width * channels));
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

struct Raw {
  std::size_t width = 0, height = 0, channels = 0;
  std::vector<std::uint8_t> pixels;
};

inline Raw read_raw(const std::filesystem::path& path) {
  File file(std::fopen(path.string().c_str(), "rb"));
  if (!file) throw IoError("cannot open for reading: " + path.string());
  png_byte header[8];
  if (std::fread(header, 1, 8, file.get()) != 8 || png_sig_cmp(header, 0, 8)) {
    throw IoError("not a PNG file: " + path.string());
  }
  Raw raw;
  std::vector<png_bytep> rows;
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("libpng initialization failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("libpng failed reading " + path.string());
  }
  png_init_io(png, file.get());
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);
  const int bit_depth = png_get_bit_depth(png, info);
  const int color_type = png_get_color_type(png, info);
  if (bit_depth == 16) png_set_strip_16(png);
  if (bit_depth < 8 && color_type == PNG_COLOR_TYPE_GRAY) png_set_expand_gray_1_2_4_to_8(png);
  if (color_type & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  // Palette images are read as their indices, which is how indexed masks are stored.
  if (color_type == PNG_COLOR_TYPE_PALETTE && bit_depth < 8) png_set_packing(png);
  png_read_update_info(png, info);
  raw.width = png_get_image_width(png, info);
  raw.height = png_get_image_height(png, info);
  raw.channels = png_get_channels(png, info);
  const std::size_t rowbytes = png_get_rowbytes(png, info);
  raw.pixels.resize(rowbytes * raw.height);
  rows.resize(raw.height);
  for (std::size_t y = 0; y < raw.height; ++y) rows[y] = raw.pixels.data() + y * rowbytes;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return raw;
}

inline std::uint8_t to_byte(double v) {
  const double c = std::clamp(v, 0.0, 1.0);
  return static_cast<std::uint8_t>(std::lround(c * 255.0));
}

}  // namespace detail

/// Writes an 8-bit RGB PNG (1-channel images are replicated to gray RGB).
inline void write_rgb(const std::filesystem::path& path, const Image& img) {
  if (img.channels != 3 && img.channels != 1) throw ArgumentError("write_rgb expects 1 or 3 channels");
  std::vector<std::uint8_t> px(img.height * img.width * 3);
  for (std::size_t y = 0; y < img.height; ++y)
    for (std::size_t x = 0; x < img.width; ++x)
      for (std::size_t c = 0; c < 3; ++c)
        px[(y * img.width + x) * 3 + c] =
            detail::to_byte(img.at(img.channels == 3 ? c : 0, y, x));
  detail::write_raw(path, img.width, img.height, PNG_COLOR_TYPE_RGB, 3, px);
}

/// Reads an 8-bit PNG as a 3-channel image in [0, 1].
inline Image read_rgb(const std::filesystem::path& path) {
  const auto raw = detail::read_raw(path);
  if (raw.channels != 3 && raw.channels != 1) {
    throw ValidationError("unsupported channel count in " + path.string());
  }
  Image img(3, raw.height, raw.width);
  for (std::size_t y = 0; y < raw.height; ++y)
    for (std::size_t x = 0; x < raw.width; ++x)
      for (std::size_t c = 0; c < 3; ++c) {
        const std::size_t src = raw.channels == 3 ? c : 0;
        img.at(c, y, x) = raw.pixels[(y * raw.width + x) * raw.channels + src] / 255.0;
      }
  return img;
}

/// Writes a single-channel 8-bit PNG whose pixel values are the labels.
inline void write_labels(const std::filesystem::path& path, const LabelMap& mask) {
  std::vector<std::uint8_t> px(mask.labels.size());
  for (std::size_t i = 0; i < px.size(); ++i) {
    const int v = mask.labels[i];
    if (v < 0 || v > 255) throw ArgumentError("label out of 8-bit range: " + std::to_string(v));
    px[i] = static_cast<std::uint8_t>(v);
  }
  detail::write_raw(path, mask.width, mask.height, PNG_COLOR_TYPE_GRAY, 1, px);
}

inline LabelMap read_labels(const std::filesystem::path& path) {
  const auto raw = detail::read_raw(path);
  if (raw.channels != 1) throw ValidationError("mask must be single-channel: " + path.string());
  LabelMap mask(raw.height, raw.width);
  for (std::size_t i = 0; i < mask.labels.size(); ++i) mask.labels[i] = raw.pixels[i];
  return mask;
}

}  // namespace png
}  // namespace partseg
