#include <gtest/gtest.h>

#include <random>
#include <set>

#include "test_util.hpp"
#include "volcdet/evalkit.hpp"

using namespace volcdet;

namespace {

double concordance(const std::vector<double>& s, const std::vector<int>& y) {
  double c = 0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < s.size(); ++i)
    for (std::size_t j = 0; j < s.size(); ++j) {
      if (y[i] != 1 || y[j] != 0) continue;
      c += s[i] > s[j] ? 1.0 : s[i] == s[j] ? 0.5 : 0.0;
      ++n;
    }
  return c / static_cast<double>(n);
}

}  // namespace

TEST(Roc, ToyExample) {
  const std::vector<double> s{0.9, 0.7, 0.8, 0.3};
  const std::vector<int> y{1, 1, 0, 0};
  const auto c = roc(s, y);
  EXPECT_DOUBLE_EQ(c.auc, 0.75);
  ASSERT_EQ(c.points.size(), 5u);
  EXPECT_TRUE(std::isinf(c.points[0].threshold));
  EXPECT_EQ(c.points[0].fpr, 0);
  EXPECT_EQ(c.points.back().tpr, 1);
  EXPECT_EQ(c.points.back().fpr, 1);
}

// Threshold table from the oracle script: 0.9 -> (0.5, 1.0), 0.8 -> (0.5, 0.5), 0.7 -> (1.0, 0.5).
TEST(Roc, OperatingPointRule) {
  const std::vector<double> s{0.9, 0.7, 0.8, 0.3};
  const std::vector<int> y{1, 1, 0, 0};
  const auto c = roc(s, y);
  auto op = operating_point(c, 0.75);
  EXPECT_EQ(op.tpr, 0.5);
  EXPECT_EQ(op.tnr, 1.0);
  EXPECT_EQ(op.threshold, 0.9);
  op = operating_point(c, 0.5);  // max tpr subject to tnr >= 0.5
  EXPECT_EQ(op.tpr, 1.0);
  EXPECT_EQ(op.tnr, 0.5);
  EXPECT_EQ(op.threshold, 0.7);
  op = operating_point(c, 0.0);
  EXPECT_EQ(op.tpr, 1.0);
  EXPECT_EQ(op.tnr, 0.5);  // tie on tpr broken toward higher tnr
}

TEST(Roc, AucEqualsConcordanceWithTies) {
  std::mt19937_64 rng(31);
  for (int t = 0; t < 100; ++t) {
    const std::size_t n = std::uniform_int_distribution<std::size_t>(2, 500)(rng);
    std::vector<double> s(n);
    std::vector<int> y(n);
    const int levels = t % 3 == 0 ? 5 : 1000000;  // every third set is heavily tied
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = std::uniform_int_distribution<int>(0, levels)(rng) / double(levels);
      y[i] = int(rng() & 1);
    }
    y[0] = 1, y[1] = 0;
    ASSERT_NEAR(roc(s, y).auc, concordance(s, y), 1e-9) << "set " << t;
  }
}

TEST(Roc, CurveIsMonotoneAndValidated) {
  const std::vector<double> s{0.1, 0.4, 0.4, 0.35, 0.8, 0.2};
  const std::vector<int> y{0, 1, 0, 1, 1, 0};
  const auto c = roc(s, y);
  for (std::size_t i = 1; i < c.points.size(); ++i) {
    EXPECT_GE(c.points[i].fpr, c.points[i - 1].fpr);
    EXPECT_GE(c.points[i].tpr, c.points[i - 1].tpr);
    EXPECT_LT(c.points[i].threshold, c.points[i - 1].threshold);
  }
  EXPECT_THROW(roc(std::vector<double>{0.1, 0.2}, std::vector<int>{1, 1}), InvalidArgument);
  EXPECT_THROW(roc(std::vector<double>{0.1}, std::vector<int>{1, 0}), InvalidArgument);
  EXPECT_THROW(roc(std::vector<double>{0.1, NAN}, std::vector<int>{1, 0}), InvalidArgument);
  EXPECT_THROW(roc(std::vector<double>{0.1, 0.2}, std::vector<int>{1, 2}), InvalidArgument);
}

TEST(Roc, DownsampleKeepsEndpoints) {
  std::vector<RocPoint> pts(1000);
  for (std::size_t i = 0; i < pts.size(); ++i) pts[i] = {i / 999.0, i / 999.0, 1.0 - i / 999.0};
  const auto d = downsample(pts, 256);
  ASSERT_EQ(d.size(), 256u);
  EXPECT_EQ(d.front().fpr, 0);
  EXPECT_EQ(d.back().fpr, 1);
  EXPECT_EQ(downsample(pts, 2000).size(), 1000u);
}

TEST(KFold, StratifiedPartitionDeterministic) {
  std::vector<int> y(103);
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = i % 3 == 0;
  for (std::uint32_t k : {2u, 3u, 5u}) {
    const auto f = kfold_split(y, k, 9);
    ASSERT_EQ(f.size(), k);
    std::set<std::size_t> all;
    std::size_t minpos = SIZE_MAX, maxpos = 0, mins = SIZE_MAX, maxs = 0;
    for (const auto& fold : f) {
      std::size_t pos = 0;
      for (auto i : fold) {
        pos += y[i];
        EXPECT_TRUE(all.insert(i).second);
      }
      minpos = std::min(minpos, pos), maxpos = std::max(maxpos, pos);
      mins = std::min(mins, fold.size()), maxs = std::max(maxs, fold.size());
    }
    EXPECT_EQ(all.size(), y.size());
    EXPECT_LE(maxpos - minpos, 1u);
    EXPECT_LE(maxs - mins, 1u);
    EXPECT_EQ(f, kfold_split(y, k, 9));
  }
  EXPECT_NE(kfold_split(y, 2, 1), kfold_split(y, 2, 2));
  EXPECT_THROW(kfold_split(y, 1, 0), InvalidArgument);
  EXPECT_THROW(kfold_split(std::vector<int>{1, 0, 0, 0}, 2, 0), InvalidArgument);
}

TEST(Candidates, KnownNames) {
  for (const auto& n : known_candidates()) EXPECT_EQ(make_candidate(n).name, n);
  EXPECT_TRUE(std::holds_alternative<SvmHyper>(make_candidate("svm").model));
  for (const auto& n : {"cnn", "cnn-wide", "cnn-shallow"})
    EXPECT_NO_THROW(build_network<float>(std::get<ModelConfig>(make_candidate(n).model)));
  EXPECT_THROW(make_candidate("resnet"), InvalidArgument);
}

TEST(CrossValidate, SmallDatasetReportShape) {
  testutil::TempDir dir("cv");
  DatasetOptions opt;
  opt.count = 40;
  opt.master_seed = 2;
  const auto m = build_dataset(opt, dir.path());
  CvOptions cv;
  cv.hyper.epochs = 2;
  const std::vector<Candidate> cands{make_candidate("cnn-shallow"), make_candidate("svm")};
  const auto r = cross_validate(m, cands, cv);
  ASSERT_EQ(r.curves.size(), 4u);
  EXPECT_EQ(r.config_names(), (std::vector<std::string>{"cnn-shallow", "svm"}));
  save_report(r, dir / "report.json");
  const auto j = nlohmann::json::parse(detail::read_file_text(dir / "report.json"));
  EXPECT_EQ(j.at("folds"), 2);
  EXPECT_EQ(j.at("curves").size(), 4u);
  const auto& c0 = j.at("curves")[0];
  EXPECT_EQ(c0.at("points").size(), c0.at("thresholds").size());
  EXPECT_TRUE(c0.at("thresholds")[0].is_null());  // +inf start point
  EXPECT_LE(c0.at("points").size(), 256u);
  EXPECT_TRUE(c0.at("operating_point").contains("tnr"));
  EXPECT_NEAR(j.at("mean_auc").at("svm").get<double>(), r.mean_auc("svm"), 1e-12);
  EXPECT_TRUE(std::filesystem::exists(dir / "report.png"));
  EXPECT_THROW(r.mean_auc("cnn"), NotFound);
}
