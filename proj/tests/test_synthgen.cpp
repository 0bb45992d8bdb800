#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "test_util.hpp"
#include "volcdet/synthgen.hpp"

using namespace volcdet;

namespace {

MogiParams vertical_source(double dv = 1e6) {
  MogiParams m;
  m.depth_m = 3000;
  m.delta_volume_m3 = dv;
  m.look_incidence_deg = 0;
  return m;
}

}  // namespace

// Reference values from tests/oracles/derive_values.py (independent numpy evaluation).
TEST(Mogi, CenterValuesMatchOracle) {
  const auto m = vertical_source();
  EXPECT_NEAR(mogi_displacement(m, 0, 0).up, 0.026525824, 1e-9);
  EXPECT_NEAR(mogi_los_at(m, 0, 0), -5.995203837, 1e-8);
  EXPECT_NEAR(mogi_los_at(vertical_source(1.1e6), 0, 0), -6.594724221, 1e-8);
}

TEST(Mogi, LinearInVolumeAndRadiallySymmetric) {
  const auto a = vertical_source(1e6), b = vertical_source(-2.5e6);
  for (double r : {0.0, 500.0, 2000.0, 9000.0}) {
    EXPECT_NEAR(mogi_los_at(b, r, 0), -2.5 * mogi_los_at(a, r, 0), 1e-9);
    EXPECT_NEAR(mogi_los_at(a, r, 0), mogi_los_at(a, 0, -r), 1e-12);
    EXPECT_NEAR(mogi_los_at(a, r * 0.6, r * 0.8), mogi_los_at(a, r, 0), 1e-12);
  }
  EXPECT_LT(std::abs(mogi_los_at(a, 20000, 0)), std::abs(mogi_los_at(a, 1000, 0)));
}

TEST(Mogi, GridPeakAndRescale) {
  auto m = vertical_source();
  m.center_x = m.center_y = 32;
  EXPECT_NEAR(peak_abs(mogi_los_phase(m, 64, 64)), 5.995203837, 1e-5);
  const auto s = with_peak_phase(m, 3 * kTwoPi, 64, 64);
  EXPECT_NEAR(peak_abs(mogi_los_phase(s, 64, 64)), 3 * kTwoPi, 1e-4);
  EXPECT_GT(s.delta_volume_m3, 0);
}

TEST(Mogi, ValidatesParameters) {
  auto m = vertical_source();
  m.depth_m = 0;
  EXPECT_THROW(mogi_los_phase(m, 8, 8), InvalidArgument);
  m = vertical_source();
  m.poisson = 0.5;
  EXPECT_THROW(mogi_los_phase(m, 8, 8), InvalidArgument);
}

TEST(Atmosphere, ZeroMeanTargetStdDeterministic) {
  const AtmosphereParams p{0.8, 2.7, 42};
  const auto a = turbulent_atmosphere(p, 128, 96);
  const auto b = turbulent_atmosphere(p, 128, 96);
  EXPECT_EQ(a.values, b.values);
  const double n = a.values.size();
  const double mean = std::accumulate(a.values.begin(), a.values.end(), 0.0) / n;
  double ss = 0;
  for (float v : a.values) ss += (v - mean) * (v - mean);
  EXPECT_NEAR(mean, 0, 1e-5);
  EXPECT_NEAR(std::sqrt(ss / (n - 1)), 0.8, 1e-4);
  EXPECT_NE(turbulent_atmosphere({0.8, 2.7, 43}, 128, 96).values, a.values);
}

TEST(Atmosphere, SteeperSpectrumIsSmoother) {
  // Mean |gradient| falls as beta rises at fixed variance.
  auto roughness = [](double beta) {
    const auto g = turbulent_atmosphere({1.0, beta, 3}, 128, 128);
    double s = 0;
    for (std::uint32_t y = 0; y < 128; ++y)
      for (std::uint32_t x = 0; x + 1 < 128; ++x) s += std::abs(g.at(x + 1, y) - g.at(x, y));
    return s;
  };
  EXPECT_GT(roughness(2.0), roughness(2.7));
  EXPECT_GT(roughness(2.7), roughness(3.5));
}

TEST(Atmosphere, Validation) {
  EXPECT_THROW(turbulent_atmosphere({-1, 2.7, 0}, 16, 16), InvalidArgument);
  EXPECT_THROW(turbulent_atmosphere({1, 5, 0}, 16, 16), InvalidArgument);
  EXPECT_THROW(turbulent_atmosphere({1, 2.7, 0}, 4, 16), InvalidArgument);
  const auto flat = turbulent_atmosphere({0, 2.7, 0}, 16, 16);
  for (float v : flat.values) EXPECT_EQ(v, 0.0f);
}

TEST(Interferogram, LabelFollowsOneFringeRule) {
  auto m = vertical_source();
  m.center_x = m.center_y = 31.5;
  const AtmosphereParams calm{0, 2.7, 1};
  auto weak = with_peak_phase(m, 0.9 * kTwoPi, 64, 64);
  auto strong = with_peak_phase(m, 1.1 * kTwoPi, 64, 64);
  EXPECT_EQ(make_interferogram(weak, calm, 64, 64).record.label, kLabelBackground);
  const auto s = make_interferogram(strong, calm, 64, 64);
  EXPECT_EQ(s.record.label, kLabelDeformation);
  ASSERT_TRUE(s.record.center);
  EXPECT_DOUBLE_EQ((*s.record.center)[0], 31.5);
  EXPECT_EQ(make_interferogram(std::nullopt, {1, 2.7, 1}, 64, 64).record.label, kLabelBackground);
  m.center_x = 70;
  EXPECT_THROW(make_interferogram(m, calm, 64, 64), InvalidArgument);
}

TEST(Interferogram, WrappedSumOfParts) {
  auto m = vertical_source(4e6);
  m.center_x = 20;
  m.center_y = 25;
  const AtmosphereParams atmo{0.7, 2.5, 8};
  const auto ifg = make_interferogram(m, atmo, 48, 40);
  const auto d = mogi_los_phase(m, 48, 40);
  const auto a = turbulent_atmosphere(atmo, 48, 40);
  for (std::size_t i = 0; i < d.values.size(); ++i)
    ASSERT_FLOAT_EQ(ifg.raster.values()[i], wrap_to_float(double(d.values[i]) + double(a.values[i])));
}

TEST(Dataset, DeterministicAndBalanced) {
  testutil::TempDir d1("ds1"), d2("ds2");
  DatasetOptions opt;
  opt.count = 24;
  opt.size = 64;
  opt.master_seed = 5;
  const auto a = build_dataset(opt, d1.path());
  const auto b = build_dataset(opt, d2.path());
  ASSERT_EQ(a.size(), 24u);
  EXPECT_EQ(a.count_label(kLabelDeformation), 12u);
  EXPECT_EQ(a.digest(), b.digest());
  for (std::size_t i = 0; i < a.size(); ++i) {
    const auto& r = a.records()[i];
    EXPECT_EQ(detail::read_file_bytes(a.resolve(r)), detail::read_file_bytes(b.resolve(b.records()[i])));
    if (r.label == kLabelDeformation) {
      ASSERT_TRUE(r.center);
      EXPECT_GE(r.params.at("peak_abs_phase").get<double>(), kTwoPi);
    } else {
      EXPECT_TRUE(r.params.at("mogi").is_null());  // negatives are pure atmosphere
    }
  }
  const auto reloaded = DatasetManifest::load(d1 / "manifest.jsonl");
  EXPECT_EQ(reloaded.digest(), a.digest());
  opt.master_seed = 6;
  testutil::TempDir d3("ds3");
  EXPECT_NE(build_dataset(opt, d3.path()).digest(), a.digest());
}

TEST(Dataset, Validation) {
  testutil::TempDir d("dsbad");
  DatasetOptions opt;
  opt.count = 1;
  EXPECT_THROW(build_dataset(opt, d.path()), InvalidArgument);
  opt.count = 4;
  opt.positive_fraction = 1.5;
  EXPECT_THROW(build_dataset(opt, d.path()), InvalidArgument);
}

TEST(Scene, StreamedWriterMatchesInMemoryCompose) {
  testutil::TempDir d("scene");
  auto m = vertical_source(2e6);
  m.center_x = 40;
  m.center_y = 30;
  const AtmosphereParams atmo{0.5, 2.7, 4};
  write_scene_fph(d / "s.fph", 96, 64, {m}, atmo, 64);
  const auto r = read_raster(d / "s.fph");
  // rows < 64 and columns < 64 are inside the first atmosphere tile
  const auto screen = turbulent_atmosphere(atmo, 64, 64);
  for (std::uint32_t y = 0; y < 64; ++y)
    for (std::uint32_t x = 0; x < 96; ++x) {
      const double want = screen.at(x % 64, y) + mogi_los_at(m, (x - 40.0) * 100, (30.0 - y) * 100);
      ASSERT_FLOAT_EQ(r.at(x, y), wrap_to_float(want)) << x << "," << y;
    }
}
