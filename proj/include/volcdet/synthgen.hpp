#pragma once

// Synthetic wrapped interferograms: point-pressure (Mogi) deformation sources
// observed along a radar line of sight, plus power-law turbulent atmosphere.

#include <unsupported/Eigen/FFT>

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"
#include "volcdet/detail/io.hpp"
#include "volcdet/error.hpp"
#include "volcdet/manifest.hpp"
#include "volcdet/raster.hpp"

namespace volcdet {

inline constexpr double kSentinelWavelengthM = 0.0556;

struct MogiParams {
  double center_x = 0;  ///< pixels
  double center_y = 0;  ///< pixels
  double depth_m = 3000;
  double delta_volume_m3 = 1e6;  ///< positive = inflation
  double poisson = 0.25;
  double look_incidence_deg = 34.0;
  double look_azimuth_deg = 0.0;

  void validate() const {
    if (!(depth_m > 0)) throw InvalidArgument("MogiParams: depth_m must be > 0");
    if (!(poisson > 0 && poisson < 0.5)) throw InvalidArgument("MogiParams: poisson must be in (0, 0.5)");
    if (!(look_incidence_deg >= 0 && look_incidence_deg < 90))
      throw InvalidArgument("MogiParams: look_incidence_deg must be in [0, 90)");
    if (!std::isfinite(delta_volume_m3) || delta_volume_m3 == 0)
      throw InvalidArgument("MogiParams: delta_volume_m3 must be finite and nonzero");
  }
};

struct AtmosphereParams {
  double std_rad = 1.0;
  double beta = 2.7;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(std_rad >= 0)) throw InvalidArgument("AtmosphereParams: std_rad must be >= 0");
    if (!(beta >= 1 && beta <= 4)) throw InvalidArgument("AtmosphereParams: beta must be in [1, 4]");
  }
};

inline void to_json(nlohmann::json& j, const MogiParams& p) {
  j = {{"center_x", p.center_x}, {"center_y", p.center_y},   {"depth_m", p.depth_m},
       {"delta_volume_m3", p.delta_volume_m3}, {"poisson", p.poisson}, {"look_incidence_deg", p.look_incidence_deg},
       {"look_azimuth_deg", p.look_azimuth_deg}};
}

inline void from_json(const nlohmann::json& j, MogiParams& p) {
  p.center_x = j.at("center_x").get<double>();
  p.center_y = j.at("center_y").get<double>();
  p.depth_m = j.at("depth_m").get<double>();
  p.delta_volume_m3 = j.at("delta_volume_m3").get<double>();
  p.poisson = j.value("poisson", 0.25);
  p.look_incidence_deg = j.value("look_incidence_deg", 34.0);
  p.look_azimuth_deg = j.value("look_azimuth_deg", 0.0);
}

inline void to_json(nlohmann::json& j, const AtmosphereParams& p) {
  j = {{"std_rad", p.std_rad}, {"beta", p.beta}, {"seed", p.seed}};
}

inline void from_json(const nlohmann::json& j, AtmosphereParams& p) {
  p.std_rad = j.at("std_rad").get<double>();
  p.beta = j.at("beta").get<double>();
  p.seed = j.at("seed").get<std::uint64_t>();
}

struct Displacement {
  double east = 0, north = 0, up = 0;
};

/// Surface displacement (m) at horizontal offset (east, north) metres from a point source.
inline Displacement mogi_displacement(const MogiParams& p, double east_m, double north_m) {
  const double c = (1.0 - p.poisson) * p.delta_volume_m3 / kPi;
  const double r2 = east_m * east_m + north_m * north_m + p.depth_m * p.depth_m;
  const double inv_r3 = 1.0 / (r2 * std::sqrt(r2));
  return {c * east_m * inv_r3, c * north_m * inv_r3, c * p.depth_m * inv_r3};
}

/// Line-of-sight phase (radians, unwrapped) of the displacement at the given offset.
inline double mogi_los_at(const MogiParams& p, double east_m, double north_m,
                          double wavelength_m = kSentinelWavelengthM) {
  const double th = p.look_incidence_deg * kPi / 180.0;
  const double al = p.look_azimuth_deg * kPi / 180.0;
  const auto u = mogi_displacement(p, east_m, north_m);
  const double los = u.east * std::sin(th) * std::cos(al) + u.north * std::sin(th) * std::sin(al) + u.up * std::cos(th);
  return -(4.0 * kPi / wavelength_m) * los;
}

/// Unwrapped LOS phase over a width x height grid. Columns increase eastward, rows southward.
inline FloatGrid mogi_los_phase(const MogiParams& p, std::uint32_t width, std::uint32_t height,
                                double pixel_spacing_m = 100.0, double wavelength_m = kSentinelWavelengthM) {
  p.validate();
  if (!(wavelength_m > 0)) throw InvalidArgument("mogi_los_phase: wavelength_m must be > 0");
  if (!(pixel_spacing_m > 0)) throw InvalidArgument("mogi_los_phase: pixel_spacing_m must be > 0");
  FloatGrid g(width, height);
  for (std::uint32_t y = 0; y < height; ++y) {
    const double north = (p.center_y - y) * pixel_spacing_m;
    for (std::uint32_t x = 0; x < width; ++x)
      g.at(x, y) = static_cast<float>(mogi_los_at(p, (x - p.center_x) * pixel_spacing_m, north, wavelength_m));
  }
  return g;
}

inline double peak_abs(const FloatGrid& g) {
  double m = 0;
  for (float v : g.values) m = std::max(m, static_cast<double>(std::abs(v)));
  return m;
}

/// Signed spatial frequency (cycles/pixel) of DFT bin `i` of `n`.
inline double fft_frequency(std::uint32_t i, std::uint32_t n) {
  const double f = static_cast<double>(i) / n;
  return i <= (n - 1) / 2 ? f : f - 1.0;  // matches numpy.fft.fftfreq
}

namespace detail {

/// In-place 2-D inverse DFT of a row-major complex array (unnormalized scale is irrelevant here).
inline void inverse_fft_2d(std::vector<std::complex<double>>& data, std::uint32_t w, std::uint32_t h) {
  Eigen::FFT<double> fft;
  std::vector<std::complex<double>> in, out;
  in.resize(w);
  for (std::uint32_t y = 0; y < h; ++y) {
    std::copy_n(data.begin() + std::ptrdiff_t{y} * w, w, in.begin());
    fft.inv(out, in);
    std::copy_n(out.begin(), w, data.begin() + std::ptrdiff_t{y} * w);
  }
  in.resize(h);
  for (std::uint32_t x = 0; x < w; ++x) {
    for (std::uint32_t y = 0; y < h; ++y) in[y] = data[std::size_t{y} * w + x];
    fft.inv(out, in);
    for (std::uint32_t y = 0; y < h; ++y) data[std::size_t{y} * w + x] = out[y];
  }
}

inline void forward_fft_2d(std::vector<std::complex<double>>& data, std::uint32_t w, std::uint32_t h) {
  Eigen::FFT<double> fft;
  std::vector<std::complex<double>> in, out;
  in.resize(w);
  for (std::uint32_t y = 0; y < h; ++y) {
    std::copy_n(data.begin() + std::ptrdiff_t{y} * w, w, in.begin());
    fft.fwd(out, in);
    std::copy_n(out.begin(), w, data.begin() + std::ptrdiff_t{y} * w);
  }
  in.resize(h);
  for (std::uint32_t x = 0; x < w; ++x) {
    for (std::uint32_t y = 0; y < h; ++y) in[y] = data[std::size_t{y} * w + x];
    fft.fwd(out, in);
    for (std::uint32_t y = 0; y < h; ++y) data[std::size_t{y} * w + x] = out[y];
  }
}

}  // namespace detail

/// Spectral synthesis of a power-law random field: complex Gaussian spectrum scaled by
/// k^(-beta/2), DC removed, real part of the inverse transform, rescaled to mean 0 and
/// sample standard deviation `std_rad`. The result is periodic in both axes.
inline FloatGrid turbulent_atmosphere(const AtmosphereParams& p, std::uint32_t width, std::uint32_t height) {
  p.validate();
  if (width < 8 || height < 8) throw InvalidArgument("turbulent_atmosphere: width and height must be >= 8");
  FloatGrid g(width, height, 0.0f);
  if (p.std_rad == 0) return g;

  std::mt19937_64 rng(p.seed);
  std::normal_distribution<double> normal;
  std::vector<std::complex<double>> spec(std::size_t{width} * height);
  for (std::uint32_t y = 0; y < height; ++y) {
    const double ky = fft_frequency(y, height);
    for (std::uint32_t x = 0; x < width; ++x) {
      const double re = normal(rng);
      const double im = normal(rng);
      const double kx = fft_frequency(x, width);
      const double k = std::sqrt(kx * kx + ky * ky);
      spec[std::size_t{y} * width + x] = k > 0 ? std::complex<double>(re, im) * std::pow(k, -p.beta / 2) : 0.0;
    }
  }
  detail::inverse_fft_2d(spec, width, height);

  const double n = static_cast<double>(spec.size());
  double mean = 0;
  for (const auto& c : spec) mean += c.real();
  mean /= n;
  double ss = 0;
  for (const auto& c : spec) ss += (c.real() - mean) * (c.real() - mean);
  const double sd = std::sqrt(ss / (n - 1));
  const double scale = sd > 0 ? p.std_rad / sd : 0.0;
  for (std::size_t i = 0; i < spec.size(); ++i) g.values[i] = static_cast<float>((spec[i].real() - mean) * scale);
  return g;
}

struct Interferogram {
  PhaseRaster raster;
  SampleRecord record;
};

/// Detectability threshold: a source must produce at least one full fringe.
inline constexpr double kMinDetectablePeakRad = kTwoPi;

/// Wrapped sum of an optional deformation source and an atmospheric screen. The record's
/// label is 1 only when the source's peak |phase| reaches one fringe.
inline Interferogram make_interferogram(const std::optional<MogiParams>& mogi, const AtmosphereParams& atmo,
                                        std::uint32_t width, std::uint32_t height, double pixel_spacing_m = 100.0,
                                        double wavelength_m = kSentinelWavelengthM) {
  const auto screen = turbulent_atmosphere(atmo, width, height);
  std::vector<float> wrapped(screen.values.size());
  SampleRecord rec;
  rec.seed = atmo.seed;
  rec.params = {{"atmosphere", atmo}, {"mogi", nullptr}, {"pixel_spacing_m", pixel_spacing_m},
                {"wavelength_m", wavelength_m}};
  if (mogi) {
    if (mogi->center_x < 0 || mogi->center_x > width - 1 || mogi->center_y < 0 || mogi->center_y > height - 1)
      throw InvalidArgument("make_interferogram: source center outside raster");
    const auto deformation = mogi_los_phase(*mogi, width, height, pixel_spacing_m, wavelength_m);
    for (std::size_t i = 0; i < wrapped.size(); ++i)
      wrapped[i] = wrap_to_float(static_cast<double>(deformation.values[i]) + static_cast<double>(screen.values[i]));
    rec.label = peak_abs(deformation) >= kMinDetectablePeakRad ? kLabelDeformation : kLabelBackground;
    rec.center = std::array<double, 2>{mogi->center_x, mogi->center_y};
    rec.params["mogi"] = *mogi;
    rec.params["peak_abs_phase"] = peak_abs(deformation);
  } else {
    for (std::size_t i = 0; i < wrapped.size(); ++i) wrapped[i] = wrap_to_float(screen.values[i]);
    rec.label = kLabelBackground;
  }
  return {PhaseRaster(width, height, std::move(wrapped), pixel_spacing_m), std::move(rec)};
}

/// Any number of sources over one atmosphere, wrapped. Used for scene-level experiments.
inline PhaseRaster compose_scene(std::uint32_t width, std::uint32_t height, const std::vector<MogiParams>& sources,
                                 const AtmosphereParams& atmo, double pixel_spacing_m = 100.0,
                                 double wavelength_m = kSentinelWavelengthM) {
  const auto screen = turbulent_atmosphere(atmo, width, height);
  std::vector<double> sum(screen.values.begin(), screen.values.end());
  for (const auto& s : sources) {
    const auto d = mogi_los_phase(s, width, height, pixel_spacing_m, wavelength_m);
    for (std::size_t i = 0; i < sum.size(); ++i) sum[i] += d.values[i];
  }
  std::vector<float> wrapped(sum.size());
  std::transform(sum.begin(), sum.end(), wrapped.begin(), wrap_to_float);
  return PhaseRaster(width, height, std::move(wrapped), pixel_spacing_m);
}

/// Rescales `p.delta_volume_m3` (keeping its sign) so the source's peak |phase| over a
/// width x height grid equals `target_peak_rad`. Phase is linear in volume change.
inline MogiParams with_peak_phase(MogiParams p, double target_peak_rad, std::uint32_t width, std::uint32_t height,
                                  double pixel_spacing_m = 100.0, double wavelength_m = kSentinelWavelengthM) {
  const double peak = peak_abs(mogi_los_phase(p, width, height, pixel_spacing_m, wavelength_m));
  p.delta_volume_m3 *= target_peak_rad / peak;
  return p;
}

/// Streams a large scene straight to an FPH1 file, one row at a time. The atmosphere is a
/// periodic `tile` x `tile` screen repeated across the raster, so memory stays O(tile^2 + width).
inline void write_scene_fph(const std::filesystem::path& path, std::uint32_t width, std::uint32_t height,
                            const std::vector<MogiParams>& sources, const AtmosphereParams& atmo,
                            std::uint32_t tile = 1024, double pixel_spacing_m = 100.0,
                            double wavelength_m = kSentinelWavelengthM) {
  for (const auto& s : sources) s.validate();
  const auto screen = turbulent_atmosphere(atmo, tile, tile);
  FphWriter writer(path, {width, height, kFphFlagPhase});
  std::vector<float> row(width);
  for (std::uint32_t y = 0; y < height; ++y) {
    const float* arow = &screen.values[std::size_t{y % tile} * tile];
    for (std::uint32_t x = 0; x < width; ++x) {
      double v = arow[x % tile];
      for (const auto& s : sources)
        v += mogi_los_at(s, (x - s.center_x) * pixel_spacing_m, (s.center_y - y) * pixel_spacing_m, wavelength_m);
      row[x] = wrap_to_float(v);
    }
    writer.write_rows(row);
  }
  writer.close();
}

struct Range {
  double lo = 0, hi = 0;
  double sample(std::mt19937_64& rng) const { return std::uniform_real_distribution<double>(lo, hi)(rng); }
};

struct ParamRanges {
  Range depth_m{1500, 5000};
  Range abs_delta_volume_m3{0.5e6, 5e6};  ///< sign drawn separately
  Range atmo_std_rad{0.3, 1.5};
  Range atmo_beta{2.3, 3.1};
};

struct DatasetOptions {
  std::size_t count = 2000;
  double positive_fraction = 0.5;
  std::uint32_t size = 224;
  ParamRanges ranges;
  std::uint64_t master_seed = 1;
  double pixel_spacing_m = 100.0;
  double wavelength_m = kSentinelWavelengthM;
  double look_incidence_deg = 34.0;
  double look_azimuth_deg = 0.0;
};

/// Draws one labelled sample with the given child seed. Positives are resampled until the
/// source clears the one-fringe threshold; their centers lie in the central half of the patch.
inline Interferogram draw_sample(bool positive, std::uint64_t seed, const DatasetOptions& opt) {
  std::mt19937_64 rng(seed);
  AtmosphereParams atmo{opt.ranges.atmo_std_rad.sample(rng), opt.ranges.atmo_beta.sample(rng), rng()};
  if (!positive) return make_interferogram(std::nullopt, atmo, opt.size, opt.size, opt.pixel_spacing_m, opt.wavelength_m);
  const Range center{opt.size / 4.0, 3.0 * opt.size / 4.0};
  for (int attempt = 0; attempt < 1000; ++attempt) {
    MogiParams m;
    m.center_x = center.sample(rng);
    m.center_y = center.sample(rng);
    m.depth_m = opt.ranges.depth_m.sample(rng);
    m.delta_volume_m3 = opt.ranges.abs_delta_volume_m3.sample(rng) * (rng() & 1 ? 1.0 : -1.0);
    m.look_incidence_deg = opt.look_incidence_deg;
    m.look_azimuth_deg = opt.look_azimuth_deg;
    auto ifg = make_interferogram(m, atmo, opt.size, opt.size, opt.pixel_spacing_m, opt.wavelength_m);
    if (ifg.record.label == kLabelDeformation) return ifg;
  }
  throw InvalidArgument("draw_sample: parameter ranges never produce a detectable source");
}

/// Writes `count` samples as FPH1 files under `out_dir/rasters` and the manifest
/// `out_dir/manifest.jsonl`. Output is a pure function of the options.
inline DatasetManifest build_dataset(const DatasetOptions& opt, const std::filesystem::path& out_dir) {
  if (opt.count < 2) throw InvalidArgument("build_dataset: count must be >= 2");
  if (!(opt.positive_fraction >= 0 && opt.positive_fraction <= 1))
    throw InvalidArgument("build_dataset: positive_fraction must be in [0, 1]");
  std::error_code ec;
  std::filesystem::create_directories(out_dir / "rasters", ec);
  if (ec) throw IoError("cannot create " + (out_dir / "rasters").string() + ": " + ec.message());

  const auto n_pos = static_cast<std::size_t>(std::llround(static_cast<double>(opt.count) * opt.positive_fraction));
  std::vector<bool> positive(opt.count, false);
  std::fill_n(positive.begin(), n_pos, true);
  std::mt19937_64 order_rng(detail::child_seed(opt.master_seed, ~std::uint64_t{0}));
  std::shuffle(positive.begin(), positive.end(), order_rng);

  std::vector<SampleRecord> records(opt.count);
  for (std::size_t i = 0; i < opt.count; ++i) {
    const auto seed = detail::child_seed(opt.master_seed, i);
    auto ifg = draw_sample(positive[i], seed, opt);
    char name[32];
    std::snprintf(name, sizeof name, "s%06zu", i);
    ifg.record.id = std::string("syn-") + (name + 1);
    ifg.record.path = std::string("rasters/") + name + ".fph";
    ifg.record.seed = seed;
    ifg.record.origin = SampleOrigin::synthetic;
    write_raster(ifg.raster, out_dir / ifg.record.path);
    records[i] = std::move(ifg.record);
  }
  DatasetManifest manifest(out_dir / "manifest.jsonl", std::move(records));
  manifest.save();
  return manifest;
}

}  // namespace volcdet
