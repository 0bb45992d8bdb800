#pragma once

// Wrapped-phase rasters: principal-value arithmetic, wrap-aware gradients and
// the FPH1 single-band float file format.
//
// FPH1 layout (little-endian):
//   0..3   "FPH1"
//   4..7   u32 width
//   8..11  u32 height
//   12..15 u32 flags (0 = wrapped phase, 1 = probability heatmap)
//   16..   width*height float32, row-major, row 0 at the top; quiet NaN = masked

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "volcdet/detail/io.hpp"
#include "volcdet/error.hpp"

namespace volcdet {

inline constexpr double kPi = std::numbers::pi;
inline constexpr double kTwoPi = 2.0 * std::numbers::pi;
/// float(pi) rounds up, so the storage range is (-kPiF, kPiF] in float arithmetic.
inline constexpr float kPiF = static_cast<float>(std::numbers::pi);
inline constexpr float kMasked = std::numeric_limits<float>::quiet_NaN();

inline bool is_masked(float v) { return std::isnan(v); }

/// Principal value of `phi` in (-pi, pi].
inline double wrap_phase(double phi) {
  if (!std::isfinite(phi)) throw InvalidArgument("wrap_phase: non-finite input");
  if (phi > -kPi && phi <= kPi) return phi;
  double r = phi - kTwoPi * std::ceil((phi - kPi) / kTwoPi);
  if (r <= -kPi) r += kTwoPi;
  if (r > kPi) r -= kTwoPi;
  return r;
}

/// Wraps and rounds to storage precision, keeping the half-open rule after rounding.
inline float wrap_to_float(double phi) {
  float f = static_cast<float>(wrap_phase(phi));
  if (f <= -kPiF) f = kPiF;
  return f;
}

inline bool in_phase_range(float v) { return v > -kPiF && v <= kPiF; }

/// Plain row-major 2-D array. Carries unwrapped phase, probabilities, weights.
template <class T>
struct Grid {
  std::uint32_t width = 0;
  std::uint32_t height = 0;
  std::vector<T> values;

  Grid() = default;
  Grid(std::uint32_t w, std::uint32_t h, T fill = T{})
      : width(w), height(h), values(static_cast<std::size_t>(w) * h, fill) {}

  T& at(std::uint32_t x, std::uint32_t y) { return values[static_cast<std::size_t>(y) * width + x]; }
  const T& at(std::uint32_t x, std::uint32_t y) const {
    return values[static_cast<std::size_t>(y) * width + x];
  }
};

using FloatGrid = Grid<float>;

/// Non-owning window onto row-major float data (a raster, a patch, a band).
struct RasterView {
  std::uint32_t width = 0;
  std::uint32_t height = 0;
  std::span<const float> values;

  float at(std::uint32_t x, std::uint32_t y) const { return values[static_cast<std::size_t>(y) * width + x]; }
};

/// Wrapped interferometric phase. Immutable after construction.
class PhaseRaster {
 public:
  PhaseRaster(std::uint32_t width, std::uint32_t height, std::vector<float> values,
              double pixel_spacing_m = 100.0)
      : width_(width), height_(height), spacing_(pixel_spacing_m), values_(std::move(values)) {
    if (width_ == 0 || height_ == 0) throw InvalidArgument("PhaseRaster: zero dimension");
    if (values_.size() != static_cast<std::size_t>(width_) * height_)
      throw InvalidArgument("PhaseRaster: values.size() != width*height");
    if (!(spacing_ > 0.0)) throw InvalidArgument("PhaseRaster: pixel_spacing_m must be > 0");
    for (float v : values_)
      if (!is_masked(v) && !in_phase_range(v))
        throw InvalidArgument("PhaseRaster: value outside (-pi, pi]: " + std::to_string(v));
  }

  /// Wraps every non-masked value of an unwrapped grid.
  static PhaseRaster from_unwrapped(const FloatGrid& g, double pixel_spacing_m = 100.0) {
    std::vector<float> v(g.values.size());
    std::transform(g.values.begin(), g.values.end(), v.begin(),
                   [](float x) { return is_masked(x) ? kMasked : wrap_to_float(x); });
    return PhaseRaster(g.width, g.height, std::move(v), pixel_spacing_m);
  }

  std::uint32_t width() const { return width_; }
  std::uint32_t height() const { return height_; }
  double pixel_spacing_m() const { return spacing_; }
  std::span<const float> values() const { return values_; }
  float at(std::uint32_t x, std::uint32_t y) const { return values_[static_cast<std::size_t>(y) * width_ + x]; }
  RasterView view() const { return {width_, height_, values_}; }

  /// Copy of the window [x0, x0+w) x [y0, y0+h).
  std::vector<float> window(std::uint32_t x0, std::uint32_t y0, std::uint32_t w, std::uint32_t h) const {
    if (x0 + w > width_ || y0 + h > height_) throw InvalidArgument("PhaseRaster::window out of bounds");
    std::vector<float> out(static_cast<std::size_t>(w) * h);
    for (std::uint32_t r = 0; r < h; ++r) {
      const auto* src = values_.data() + static_cast<std::size_t>(y0 + r) * width_ + x0;
      std::copy(src, src + w, out.begin() + static_cast<std::ptrdiff_t>(r) * w);
    }
    return out;
  }

 private:
  std::uint32_t width_;
  std::uint32_t height_;
  double spacing_;
  std::vector<float> values_;
};

/// Per-pixel magnitude of the wrapped phase gradient, radians/pixel. NaN where masked.
struct GradientField {
  std::uint32_t width = 0;
  std::uint32_t height = 0;
  std::vector<float> magnitude;
};

/// Forward differences of principal values; the last column/row fall back to backward
/// differences. A pixel is masked if any pixel of its stencil is masked.
inline GradientField phase_gradient(const RasterView& r) {
  if (r.width < 2 || r.height < 2) throw InvalidArgument("phase_gradient: raster must be at least 2x2");
  GradientField g{r.width, r.height, std::vector<float>(r.values.size())};
  const std::uint32_t w = r.width, h = r.height;
  for (std::uint32_t y = 0; y < h; ++y) {
    const std::uint32_t ya = (y + 1 < h) ? y : y - 1;
    const std::uint32_t yb = ya + 1;
    for (std::uint32_t x = 0; x < w; ++x) {
      const std::uint32_t xa = (x + 1 < w) ? x : x - 1;
      const std::uint32_t xb = xa + 1;
      const float c = r.at(x, y);
      const float x0 = r.at(xa, y), x1 = r.at(xb, y);
      const float y0 = r.at(x, ya), y1 = r.at(x, yb);
      float& out = g.magnitude[static_cast<std::size_t>(y) * w + x];
      if (is_masked(c) || is_masked(x0) || is_masked(x1) || is_masked(y0) || is_masked(y1)) {
        out = kMasked;
        continue;
      }
      const double dx = wrap_phase(static_cast<double>(x1) - x0);
      const double dy = wrap_phase(static_cast<double>(y1) - y0);
      out = static_cast<float>(std::sqrt(dx * dx + dy * dy));
    }
  }
  return g;
}

inline GradientField phase_gradient(const PhaseRaster& r) { return phase_gradient(r.view()); }

// ---------------------------------------------------------------------------
// FPH1

inline constexpr std::array<char, 4> kFphMagic{'F', 'P', 'H', '1'};
inline constexpr std::size_t kFphHeaderBytes = 16;
inline constexpr std::uint32_t kFphFlagPhase = 0;
inline constexpr std::uint32_t kFphFlagProbability = 1;

struct FphHeader {
  std::uint32_t width = 0;
  std::uint32_t height = 0;
  std::uint32_t flags = 0;

  std::uint64_t payload_bytes() const { return static_cast<std::uint64_t>(width) * height * 4; }
};

inline std::vector<std::uint8_t> encode_fph_header(const FphHeader& h) {
  std::vector<std::uint8_t> out(kFphMagic.begin(), kFphMagic.end());
  detail::put_u32(out, h.width);
  detail::put_u32(out, h.height);
  detail::put_u32(out, h.flags);
  return out;
}

inline FphHeader parse_fph_header(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < kFphHeaderBytes)
    throw ParseError("header", "expected 16 bytes, got " + std::to_string(bytes.size()));
  if (!std::equal(kFphMagic.begin(), kFphMagic.end(), bytes.begin()))
    throw ParseError("magic", "expected \"FPH1\"");
  FphHeader h{detail::get_u32(&bytes[4]), detail::get_u32(&bytes[8]), detail::get_u32(&bytes[12])};
  if (h.width == 0) throw ParseError("width", "must be positive");
  if (h.height == 0) throw ParseError("height", "must be positive");
  if (h.flags > kFphFlagProbability) throw ParseError("flags", "unknown value " + std::to_string(h.flags));
  return h;
}

/// Random-access reader; only the requested rows are ever resident.
class FphReader {
 public:
  explicit FphReader(const std::filesystem::path& path) : path_(path), in_(path, std::ios::binary) {
    if (!in_) throw IoError("cannot open " + path.string());
    std::array<std::uint8_t, kFphHeaderBytes> buf{};
    in_.read(reinterpret_cast<char*>(buf.data()), buf.size());
    header_ = parse_fph_header(std::span(buf.data(), static_cast<std::size_t>(in_.gcount())));
    in_.clear();
    in_.seekg(0, std::ios::end);
    const auto actual = static_cast<std::uint64_t>(in_.tellg()) - kFphHeaderBytes;
    if (actual != header_.payload_bytes())
      throw ParseError("payload length", "expected " + std::to_string(header_.payload_bytes()) +
                                             " bytes, got " + std::to_string(actual));
  }

  const FphHeader& header() const { return header_; }
  std::uint32_t width() const { return header_.width; }
  std::uint32_t height() const { return header_.height; }

  void read_rows(std::uint32_t y0, std::uint32_t rows, std::span<float> out) {
    read_window(0, y0, header_.width, rows, out);
  }

  void read_window(std::uint32_t x0, std::uint32_t y0, std::uint32_t w, std::uint32_t h, std::span<float> out) {
    if (x0 + w > header_.width || y0 + h > header_.height || out.size() < static_cast<std::size_t>(w) * h)
      throw InvalidArgument("FphReader: window out of bounds");
    buf_.resize(static_cast<std::size_t>(w) * 4);
    for (std::uint32_t r = 0; r < h; ++r) {
      const auto off = kFphHeaderBytes + (static_cast<std::uint64_t>(y0 + r) * header_.width + x0) * 4;
      in_.seekg(static_cast<std::streamoff>(off));
      if (!in_.read(reinterpret_cast<char*>(buf_.data()), static_cast<std::streamsize>(buf_.size())))
        throw IoError("short read in " + path_.string());
      detail::decode_f32(buf_.data(), out.subspan(static_cast<std::size_t>(r) * w, w));
    }
  }

  std::vector<float> read_all() {
    std::vector<float> v(static_cast<std::size_t>(header_.width) * header_.height);
    read_rows(0, header_.height, v);
    return v;
  }

 private:
  std::filesystem::path path_;
  std::ifstream in_;
  FphHeader header_;
  std::vector<std::uint8_t> buf_;
};

/// Sequential writer: header first, then rows in order.
class FphWriter {
 public:
  FphWriter(const std::filesystem::path& path, FphHeader header)
      : path_(path), header_(header), out_(path, std::ios::binary | std::ios::trunc) {
    if (!out_) throw IoError("cannot write " + path.string());
    const auto h = encode_fph_header(header_);
    out_.write(reinterpret_cast<const char*>(h.data()), static_cast<std::streamsize>(h.size()));
  }

  void write_rows(std::span<const float> rows) {
    if (rows.size() % header_.width != 0) throw InvalidArgument("FphWriter: partial row");
    rows_written_ += static_cast<std::uint32_t>(rows.size() / header_.width);
    if (rows_written_ > header_.height) throw InvalidArgument("FphWriter: too many rows");
    buf_.resize(rows.size_bytes());
    detail::encode_f32(rows, buf_.data());
    out_.write(reinterpret_cast<const char*>(buf_.data()), static_cast<std::streamsize>(buf_.size()));
  }

  void close() {
    if (rows_written_ != header_.height)
      throw InvalidArgument("FphWriter: wrote " + std::to_string(rows_written_) + " of " +
                            std::to_string(header_.height) + " rows");
    out_.flush();
    if (!out_) throw IoError("write failed: " + path_.string());
    out_.close();
  }

 private:
  std::filesystem::path path_;
  FphHeader header_;
  std::ofstream out_;
  std::uint32_t rows_written_ = 0;
  std::vector<std::uint8_t> buf_;
};

inline void write_fph(const std::filesystem::path& path, std::uint32_t width, std::uint32_t height,
                      std::uint32_t flags, std::span<const float> values) {
  FphWriter w(path, {width, height, flags});
  w.write_rows(values);
  w.close();
}

inline void write_raster(const PhaseRaster& raster, const std::filesystem::path& path) {
  write_fph(path, raster.width(), raster.height(), kFphFlagPhase, raster.values());
}

/// Whole-file read with validation of every header field.
inline std::pair<FphHeader, std::vector<float>> read_fph(const std::filesystem::path& path) {
  const auto bytes = detail::read_file_bytes(path);
  const auto header = parse_fph_header(bytes);
  const std::uint64_t actual = bytes.size() - kFphHeaderBytes;
  if (actual != header.payload_bytes())
    throw ParseError("payload length", "expected " + std::to_string(header.payload_bytes()) + " bytes, got " +
                                           std::to_string(actual));
  std::vector<float> values(static_cast<std::size_t>(header.width) * header.height);
  detail::decode_f32(bytes.data() + kFphHeaderBytes, values);
  return {header, std::move(values)};
}

inline PhaseRaster read_raster(const std::filesystem::path& path, double pixel_spacing_m = 100.0) {
  auto [h, values] = read_fph(path);
  if (h.flags != kFphFlagPhase) throw ParseError("flags", "expected 0 (phase), got " + std::to_string(h.flags));
  for (float v : values)
    if (!is_masked(v) && !in_phase_range(v)) throw ParseError("payload", "phase value outside (-pi, pi]");
  return PhaseRaster(h.width, h.height, std::move(values), pixel_spacing_m);
}

/// 64-bit FNV-1a over the raw payload bytes of an FPH1 file, read in row bands.
inline std::uint64_t fph_payload_digest(const std::filesystem::path& path) {
  FphReader reader(path);
  detail::Fnv1a64 hash;
  const std::uint32_t band = std::max<std::uint32_t>(1, (1u << 22) / reader.width());
  std::vector<float> rows;
  std::vector<std::uint8_t> bytes;
  for (std::uint32_t y = 0; y < reader.height(); y += band) {
    const std::uint32_t n = std::min(band, reader.height() - y);
    rows.resize(static_cast<std::size_t>(n) * reader.width());
    reader.read_rows(y, n, rows);
    bytes.resize(rows.size() * 4);
    detail::encode_f32(rows, bytes.data());
    hash.update(bytes.data(), bytes.size());
  }
  return hash.value();
}

}  // namespace volcdet
