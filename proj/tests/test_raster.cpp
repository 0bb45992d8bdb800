#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <random>

#include "test_util.hpp"
#include "volcdet/raster.hpp"

using namespace volcdet;

TEST(WrapPhase, PrincipalInterval) {
  EXPECT_DOUBLE_EQ(wrap_phase(0.0), 0.0);
  EXPECT_DOUBLE_EQ(wrap_phase(kPi), kPi);
  EXPECT_DOUBLE_EQ(wrap_phase(-kPi), kPi);  // half-open: -pi maps to +pi
  EXPECT_NEAR(wrap_phase(3 * kPi), kPi, 1e-12);
  EXPECT_NEAR(wrap_phase(kTwoPi + 0.25), 0.25, 1e-12);
  EXPECT_NEAR(wrap_phase(-kTwoPi - 0.25), -0.25, 1e-12);
  EXPECT_THROW(wrap_phase(std::nan("")), InvalidArgument);
  EXPECT_THROW(wrap_phase(INFINITY), InvalidArgument);
}

TEST(WrapPhase, IdempotentAndPeriodic) {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(-1e4, 1e4);
  std::uniform_int_distribution<int> k(-50, 50);
  for (int i = 0; i < 20000; ++i) {
    const double x = u(rng);
    const double w = wrap_phase(x);
    ASSERT_GT(w, -kPi);
    ASSERT_LE(w, kPi);
    ASSERT_EQ(wrap_phase(w), w);
    // same angle: compare on the circle so values near +-pi don't count as far apart
    const double shifted = wrap_phase(x + kTwoPi * k(rng));
    ASSERT_LT(std::abs(wrap_phase(shifted - w)), 1e-6) << x;
  }
}

TEST(WrapPhase, FloatStorageKeepsHalfOpenRule) {
  for (double x : {-kPi, -kPi + 1e-9, kPi, 3 * kPi, -3 * kPi + 1e-10}) {
    const float f = wrap_to_float(x);
    EXPECT_TRUE(in_phase_range(f)) << x << " -> " << f;
  }
}

TEST(PhaseRaster, RejectsOutOfRangeAndBadShape) {
  EXPECT_THROW(PhaseRaster(2, 2, {0, 0, 0}), InvalidArgument);
  EXPECT_THROW(PhaseRaster(0, 2, {}), InvalidArgument);
  EXPECT_THROW(PhaseRaster(1, 1, {4.0f}), InvalidArgument);
  EXPECT_THROW(PhaseRaster(1, 1, {0.0f}, 0.0), InvalidArgument);
  EXPECT_NO_THROW(PhaseRaster(1, 2, {kMasked, kPiF}));
}

TEST(PhaseGradient, WrappedRampHasConstantGradient) {
  // A ramp whose total excursion crosses many fringe seams still has gradient = slope.
  for (double slope : {0.3, 1.1, 2.5, -2.9}) {
    const std::uint32_t w = 40, h = 30;
    FloatGrid g(w, h);
    for (std::uint32_t y = 0; y < h; ++y)
      for (std::uint32_t x = 0; x < w; ++x) g.at(x, y) = static_cast<float>(slope * x + 0.5 * slope * y);
    const auto r = PhaseRaster::from_unwrapped(g);
    const auto grad = phase_gradient(r);
    const double expect = std::abs(slope) * std::sqrt(1.25);
    for (float m : grad.magnitude) ASSERT_NEAR(m, expect, 1e-4) << slope;
  }
}

TEST(PhaseGradient, MaskPropagatesToStencil) {
  std::vector<float> v(16, 0.1f);
  v[5] = kMasked;  // (1,1)
  const auto g = phase_gradient(RasterView{4, 4, v});
  EXPECT_TRUE(is_masked(g.magnitude[5]));
  EXPECT_TRUE(is_masked(g.magnitude[4]));   // (0,1) uses (1,1) as its x neighbour
  EXPECT_TRUE(is_masked(g.magnitude[1]));   // (1,0) uses (1,1) as its y neighbour
  EXPECT_FALSE(is_masked(g.magnitude[15]));
}

TEST(Fph, RoundTripIsBitExact) {
  testutil::TempDir dir("fph");
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<float> u(-kPiF, kPiF);
  for (auto [w, h] : {std::pair{1u, 1u}, {7u, 3u}, {64u, 65u}}) {
    std::vector<float> v(std::size_t{w} * h);
    for (auto& x : v) x = u(rng) == 0 ? kPiF : u(rng);
    if (v.size() > 2) v[1] = kMasked;
    const auto p = dir / "r.fph";
    write_fph(p, w, h, kFphFlagPhase, v);
    const auto [hdr, back] = read_fph(p);
    EXPECT_EQ(hdr.width, w);
    EXPECT_EQ(hdr.height, h);
    ASSERT_EQ(back.size(), v.size());
    EXPECT_EQ(std::memcmp(back.data(), v.data(), v.size() * 4), 0);
    EXPECT_EQ(std::filesystem::file_size(p), 16 + v.size() * 4);
  }
}

TEST(Fph, HeaderLayoutIsLittleEndian) {
  const auto h = encode_fph_header({3, 258, 1});
  const std::vector<std::uint8_t> expect{'F', 'P', 'H', '1', 3, 0, 0, 0, 2, 1, 0, 0, 1, 0, 0, 0};
  EXPECT_EQ(h, expect);
}

namespace {

std::string parse_field(const std::filesystem::path& p) {
  try {
    read_fph(p);
  } catch (const ParseError& e) {
    return e.field();
  }
  return "";
}

void write_bytes(const std::filesystem::path& p, const std::vector<std::uint8_t>& b) {
  std::ofstream(p, std::ios::binary).write(reinterpret_cast<const char*>(b.data()), std::streamsize(b.size()));
}

}  // namespace

TEST(Fph, CorruptionNamesTheField) {
  testutil::TempDir dir("fphbad");
  const auto p = dir / "bad.fph";
  auto good = encode_fph_header({2, 2, 0});
  good.resize(16 + 16, 0);

  write_bytes(p, {'F', 'P', 'H'});
  EXPECT_EQ(parse_field(p), "header");
  auto b = good;
  b[3] = '2';
  write_bytes(p, b);
  EXPECT_EQ(parse_field(p), "magic");
  b = good;
  b[4] = 0;
  write_bytes(p, b);
  EXPECT_EQ(parse_field(p), "width");
  b = good;
  b[8] = 0;
  write_bytes(p, b);
  EXPECT_EQ(parse_field(p), "height");
  b = good;
  b[12] = 9;
  write_bytes(p, b);
  EXPECT_EQ(parse_field(p), "flags");
  b = good;
  b.pop_back();
  write_bytes(p, b);
  EXPECT_EQ(parse_field(p), "payload length");
  b = good;
  b.push_back(0);
  write_bytes(p, b);
  EXPECT_EQ(parse_field(p), "payload length");
  EXPECT_THROW(FphReader{p}, ParseError);
}

TEST(Fph, ReadRasterRejectsProbabilityAndOutOfRange) {
  testutil::TempDir dir("fphkind");
  std::vector<float> v{0.5f, 0.25f};
  write_fph(dir / "prob.fph", 2, 1, kFphFlagProbability, v);
  EXPECT_THROW(read_raster(dir / "prob.fph"), ParseError);
  v[0] = 7.0f;
  write_fph(dir / "big.fph", 2, 1, kFphFlagPhase, v);
  EXPECT_THROW(read_raster(dir / "big.fph"), ParseError);
}

TEST(Fph, ReaderWindowsMatchWholeRead) {
  testutil::TempDir dir("fphwin");
  const auto r = testutil::noise_raster(37, 23, 4);
  write_raster(r, dir / "n.fph");
  FphReader rd(dir / "n.fph");
  std::vector<float> w(5 * 4);
  rd.read_window(30, 19, 5, 4, w);
  EXPECT_EQ(w, r.window(30, 19, 5, 4));
  EXPECT_THROW(rd.read_window(33, 0, 5, 1, w), InvalidArgument);
}

TEST(Fph, DigestCoversPayloadOnly) {
  testutil::TempDir dir("fphdig");
  const auto r = testutil::noise_raster(50, 40, 8);
  write_raster(r, dir / "a.fph");
  const auto d = fph_payload_digest(dir / "a.fph");
  detail::Fnv1a64 h;
  std::vector<std::uint8_t> raw(r.values().size() * 4);
  detail::encode_f32(r.values(), raw.data());
  h.update(raw.data(), raw.size());
  EXPECT_EQ(d, h.value());
  auto v = r.window(0, 0, 50, 40);
  v[1234] = wrap_to_float(v[1234] + 0.001);
  write_fph(dir / "b.fph", 50, 40, kFphFlagPhase, v);
  EXPECT_NE(fph_payload_digest(dir / "b.fph"), d);
}
