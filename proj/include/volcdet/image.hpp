#pragma once

// 8-bit RGB images, colormaps and PNG encoding (libpng).

#include <png.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "volcdet/detail/io.hpp"
#include "volcdet/error.hpp"
#include "volcdet/raster.hpp"

namespace volcdet {

struct Rgb {
  std::uint8_t r = 0, g = 0, b = 0;
  bool operator==(const Rgb&) const = default;
};

inline constexpr Rgb kMaskedGray{128, 128, 128};

struct RgbImage {
  std::uint32_t width = 0;
  std::uint32_t height = 0;
  std::vector<Rgb> pixels;

  RgbImage() = default;
  RgbImage(std::uint32_t w, std::uint32_t h, Rgb fill = {}) : width(w), height(h), pixels(std::size_t{w} * h, fill) {}

  Rgb& at(std::uint32_t x, std::uint32_t y) { return pixels[std::size_t{y} * width + x]; }
  const Rgb& at(std::uint32_t x, std::uint32_t y) const { return pixels[std::size_t{y} * width + x]; }

  void set(long x, long y, Rgb c) {
    if (x >= 0 && y >= 0 && x < long(width) && y < long(height)) at(std::uint32_t(x), std::uint32_t(y)) = c;
  }
};

/// HSV with full saturation and value; hue in degrees, any real (taken mod 360).
inline Rgb hue_to_rgb(double hue_deg) {
  double h = std::fmod(hue_deg, 360.0);
  if (h < 0) h += 360.0;
  const double hp = h / 60.0;
  const double x = 1.0 - std::abs(std::fmod(hp, 2.0) - 1.0);
  double r = 0, g = 0, b = 0;
  switch (static_cast<int>(hp) % 6) {
    case 0: r = 1, g = x; break;
    case 1: r = x, g = 1; break;
    case 2: g = 1, b = x; break;
    case 3: g = x, b = 1; break;
    case 4: r = x, b = 1; break;
    default: r = 1, b = x; break;
  }
  auto q = [](double v) { return static_cast<std::uint8_t>(std::lround(v * 255.0)); };
  return {q(r), q(g), q(b)};
}

/// Cyclic phase colormap: hue = (phi + pi) / 2pi * 360.
inline Rgb phase_color(float phi) {
  if (is_masked(phi)) return kMaskedGray;
  return hue_to_rgb((static_cast<double>(phi) + kPi) / kTwoPi * 360.0);
}

/// Sequential probability colormap: 0 -> light gray, 1 -> red.
inline Rgb probability_color(float v) {
  if (is_masked(v)) return kMaskedGray;
  const double t = std::clamp(static_cast<double>(v), 0.0, 1.0);
  auto lerp = [t](double a, double b) { return static_cast<std::uint8_t>(std::lround(a + (b - a) * t)); };
  return {lerp(220, 255), lerp(220, 0), lerp(220, 0)};
}

/// Maps a row-major float field through `cmap`, subsampling by an integer stride if it exceeds `max_side`.
template <class ColorMap>
RgbImage colorize(const RasterView& v, ColorMap cmap, std::uint32_t max_side = 0) {
  std::uint32_t step = 1;
  if (max_side > 0)
    while ((v.width + step - 1) / step > max_side || (v.height + step - 1) / step > max_side) ++step;
  RgbImage img((v.width + step - 1) / step, (v.height + step - 1) / step);
  for (std::uint32_t y = 0; y < img.height; ++y)
    for (std::uint32_t x = 0; x < img.width; ++x) img.at(x, y) = cmap(v.at(x * step, y * step));
  return img;
}

inline RgbImage render_phase(const RasterView& v) { return colorize(v, phase_color); }

namespace detail {

inline void png_write_to_vector(png_structp png, png_bytep data, png_size_t len) {
  auto* out = static_cast<std::vector<std::uint8_t>*>(png_get_io_ptr(png));
  out->insert(out->end(), data, data + len);
}

inline void png_flush_noop(png_structp) {}

}  // namespace detail

inline std::vector<std::uint8_t> encode_png(const RgbImage& img) {
  if (img.width == 0 || img.height == 0) throw InvalidArgument("encode_png: empty image");
  std::vector<std::uint8_t> out;
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw IoError("png_create_write_struct failed");
  png_infop info = png_create_info_struct(png);
  if (!info || setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, info ? &info : nullptr);
    throw IoError("PNG encoding failed");
  }
  png_set_write_fn(png, &out, detail::png_write_to_vector, detail::png_flush_noop);
  png_set_IHDR(png, info, img.width, img.height, 8, PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (std::uint32_t y = 0; y < img.height; ++y) {
    auto* row = const_cast<png_bytep>(reinterpret_cast<const std::uint8_t*>(&img.pixels[std::size_t{y} * img.width]));
    png_write_row(png, row);
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  return out;
}

inline void write_png(const RgbImage& img, const std::filesystem::path& path) {
  const auto bytes = encode_png(img);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed: " + path.string());
}

/// Decodes an 8-bit RGB PNG produced by encode_png; used by tests and the service.
inline RgbImage decode_png(std::span<const std::uint8_t> bytes) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&image, bytes.data(), bytes.size()))
    throw ParseError("png", image.message);
  image.format = PNG_FORMAT_RGB;
  RgbImage img(image.width, image.height);
  if (!png_image_finish_read(&image, nullptr, img.pixels.data(), 0, nullptr)) {
    png_image_free(&image);
    throw ParseError("png", image.message);
  }
  return img;
}

inline void render_png(const PhaseRaster& raster, const std::filesystem::path& path) {
  write_png(render_phase(raster.view()), path);
}

inline void draw_rect(RgbImage& img, long x0, long y0, long x1, long y1, Rgb c) {
  for (long x = x0; x <= x1; ++x) img.set(x, y0, c), img.set(x, y1, c);
  for (long y = y0; y <= y1; ++y) img.set(x0, y, c), img.set(x1, y, c);
}

inline void draw_line(RgbImage& img, double x0, double y0, double x1, double y1, Rgb c) {
  const int n = static_cast<int>(std::ceil(std::max(std::abs(x1 - x0), std::abs(y1 - y0)))) + 1;
  for (int i = 0; i <= n; ++i) {
    const double t = static_cast<double>(i) / n;
    img.set(std::lround(x0 + (x1 - x0) * t), std::lround(y0 + (y1 - y0) * t), c);
  }
}

}  // namespace volcdet
