#include <gtest/gtest.h>

#include "test_util.hpp"

using namespace volcdet;
namespace fs = std::filesystem;

namespace {

RunConfig base_config(const testutil::TempDir& dir, const std::string& raster, const std::string& out) {
  RunConfig c;
  c.model_path = dir / "model.mnv";
  c.input_path = dir / raster;
  c.output_dir = dir / out;
  return c;
}

}  // namespace

TEST(Detect, TwoBlobsGiveTwoDetections) {
  testutil::TempDir dir("det");
  testutil::write_constant_model(dir / "model.mnv", 0.9);
  write_raster(testutil::two_blob_raster(), dir / "scene.fph");
  const auto rec = detect_image(base_config(dir, "scene.fph", "run"));

  EXPECT_EQ(rec.counts.patches_total, grid_count(1200, 224, PatchSpec{}));
  EXPECT_EQ(rec.counts.patches_tested + rec.counts.patches_skipped_by_edge_gate, rec.counts.patches_total);
  EXPECT_EQ(rec.counts.patches_tested, 6u);  // x = 0, 112, 224 and 784, 896, 976
  ASSERT_EQ(rec.detections.size(), 2u);
  for (std::size_t i = 0; i < 2; ++i) {
    EXPECT_EQ(rec.detections[i].id, detection_id(rec.run_id, i));
    EXPECT_EQ(rec.detections[i].status, DetectionStatus::pending);
    EXPECT_NEAR(rec.detections[i].peak_score, 0.9, 1e-5);
  }
  EXPECT_EQ(rec.raster_digest, detail::hex64(fph_payload_digest(dir / "scene.fph")));
  EXPECT_EQ(rec.model_version, "fnv:" + detail::hex64(model_digest(dir / "model.mnv")));

  // heatmap: probability flag, masked where no patch was tested
  const auto [hdr, heat] = read_fph(dir / "run" / "heatmap.fph");
  EXPECT_EQ(hdr.flags, kFphFlagProbability);
  EXPECT_NEAR(heat[10], 0.9, 1e-5);
  EXPECT_TRUE(is_masked(heat[600]));
  EXPECT_TRUE(fs::exists(dir / "run" / "heatmap.png"));

  const auto back = load_run(dir / "run");
  EXPECT_EQ(back.detections, rec.detections);
  EXPECT_EQ(back.config.at("patch_spec").at("patch_size"), 224);
  EXPECT_EQ(back.config.at("sigma"), 56.0);
  const auto j = nlohmann::json::parse(detail::read_file_text(dir / "run" / "run.json"));
  EXPECT_EQ(j.at("policy").at("merge"), "gaussian_weighted_average");
  for (const char* k : {"read", "edge_gate", "classify", "merge", "extract", "total"})
    EXPECT_TRUE(j.at("timings_ms").contains(k)) << k;
}

TEST(Detect, ConstantRasterTestsNothing) {
  testutil::TempDir dir("detflat");
  testutil::write_constant_model(dir / "model.mnv", 0.9);
  write_fph(dir / "flat.fph", 500, 300, kFphFlagPhase, std::vector<float>(500 * 300, 1.0f));
  const auto rec = detect_image(base_config(dir, "flat.fph", "run"));
  EXPECT_EQ(rec.counts.patches_tested, 0u);
  EXPECT_EQ(rec.counts.patches_skipped_by_edge_gate, rec.counts.patches_total);
  EXPECT_TRUE(rec.detections.empty());
  const auto [hdr, heat] = read_fph(dir / "run" / "heatmap.fph");
  for (float v : heat) ASSERT_TRUE(is_masked(v));
}

TEST(Detect, WorkersDoNotChangeResults) {
  testutil::TempDir dir("detwk");
  testutil::write_random_model(dir / "model.mnv", 3);
  write_raster(testutil::noise_raster(700, 500, 6), dir / "n.fph");
  auto c1 = base_config(dir, "n.fph", "one");
  auto c3 = base_config(dir, "n.fph", "three");
  c1.run_id = c3.run_id = "fixed";
  c1.detection_threshold = c3.detection_threshold = 0.3;
  c3.workers = 3;
  const auto a = detect_image(c1);
  const auto b = detect_image(c3);
  EXPECT_EQ(a.detections, b.detections);
  EXPECT_EQ(detail::read_file_bytes(dir / "one" / "heatmap.fph"), detail::read_file_bytes(dir / "three" / "heatmap.fph"));
}

TEST(Detect, FailuresLeaveNoRunDirectory) {
  testutil::TempDir dir("detfail");
  testutil::write_constant_model(dir / "model.mnv", 0.9);
  write_raster(testutil::noise_raster(300, 300, 1), dir / "n.fph");

  auto c = base_config(dir, "n.fph", "tight");
  c.budget_mib = 1;
  EXPECT_THROW(detect_image(c), InvalidArgument);
  EXPECT_FALSE(fs::exists(dir / "tight"));

  c = base_config(dir, "missing.fph", "x");
  EXPECT_THROW(detect_image(c), IoError);
  c = base_config(dir, "n.fph", "x");
  c.model_path = dir / "nope.mnv";
  EXPECT_THROW(detect_image(c), IoError);

  write_fph(dir / "small.fph", 100, 300, kFphFlagPhase, std::vector<float>(100 * 300, 0.0f));
  c = base_config(dir, "small.fph", "small");
  EXPECT_THROW(detect_image(c), InvalidArgument);
  EXPECT_FALSE(fs::exists(dir / "small"));

  c = base_config(dir, "n.fph", "run");
  detect_image(c);
  EXPECT_THROW(detect_image(c), Conflict);  // never overwrites a previous run
}

TEST(Detect, MemoryEstimateScalesWithWidthOnly) {
  const auto a = estimate_run_bytes(19500, 224, 1, 2048ull * 2048);
  EXPECT_LT(a, 256ull << 20);
  EXPECT_GT(estimate_run_bytes(200000, 224, 1, 0), 256ull << 20);
  EXPECT_EQ(detail::preview_step(19500, 19700), 10u);
  EXPECT_EQ(detail::preview_step(2048, 100), 1u);
}

TEST(RunConfig, JsonRoundTripAndUnknownFields) {
  RunConfig c;
  c.model_path = "m.mnv";
  c.input_path = "in.fph";
  c.detection_threshold = 0.7;
  c.patch_spec.grad_threshold_rad_per_px = 0.2;
  const nlohmann::json j = c;
  const auto back = j.get<RunConfig>();
  EXPECT_EQ(back.detection_threshold, 0.7);
  EXPECT_EQ(back.patch_spec.grad_threshold_rad_per_px, 0.2);
  EXPECT_EQ(back.effective_sigma(), 56.0);
  auto bad = j;
  bad["thresold"] = 0.5;
  EXPECT_THROW(bad.get<RunConfig>(), InvalidArgument);
}

TEST(Ids, DetectionIdsEmbedTheRun) {
  EXPECT_EQ(detection_id("20260101T000000Z-ab12", 7), "20260101T000000Z-ab12-d007");
  EXPECT_EQ(run_of_detection("20260101T000000Z-ab12-d007"), "20260101T000000Z-ab12");
  EXPECT_EQ(run_of_detection("r-d1-d12"), "r-d1");
  EXPECT_THROW(run_of_detection("nodash"), NotFound);
  EXPECT_THROW(run_of_detection("r-dx"), NotFound);
  EXPECT_NE(make_run_id(), make_run_id());
}

class DataDirTest : public ::testing::Test {
 protected:
  void SetUp() override {
    data_ = std::make_unique<DataDir>(testutil::make_data_dir(dir_.path()));
    testutil::write_constant_model(dir_ / "model.mnv", 0.9);
    write_raster(testutil::two_blob_raster(), dir_ / "scene.fph");
    RunConfig c;
    c.model_path = dir_ / "model.mnv";
    c.input_path = dir_ / "scene.fph";
    c.run_id = "r1";
    run_ = detect_into(*data_, c);
  }

  testutil::TempDir dir_{"data"};
  std::unique_ptr<DataDir> data_;
  RunRecord run_;
};

TEST_F(DataDirTest, DetectIntoWritesUnderRuns) {
  EXPECT_TRUE(fs::exists(dir_ / "runs" / "r1" / "run.json"));
  EXPECT_EQ(data_->run_ids(), std::vector<std::string>{"r1"});
  EXPECT_EQ(data_->run("r1").detections.size(), 2u);
  EXPECT_THROW(data_->run("../r1"), NotFound);
  EXPECT_THROW(data_->run("r2"), NotFound);
  RunConfig c;
  c.input_path = dir_ / "scene.fph";
  EXPECT_THROW(detect_into(*data_, c), NotFound);  // no registered model yet
}

TEST_F(DataDirTest, FalsePositiveBecomesFeedbackSampleOnce) {
  const auto id = run_.detections[0].id;
  const auto before = DatasetManifest::load(data_->manifest_path()).size();
  const auto r = label_detection(*data_, "r1", id, Verdict::false_positive);
  EXPECT_TRUE(r.manifest_changed);
  EXPECT_EQ(r.feedback_record_id, "fb-" + id);
  EXPECT_EQ(r.detection.status, DetectionStatus::false_positive);

  const auto m = DatasetManifest::load(data_->manifest_path());
  ASSERT_EQ(m.size(), before + 1);
  const auto& rec = m.records().back();
  EXPECT_EQ(rec.label, kLabelBackground);
  EXPECT_EQ(rec.origin, SampleOrigin::feedback);
  const auto patch = read_raster(m.resolve(rec));
  EXPECT_EQ(patch.width(), 224u);
  // the patch is the window of the source raster centred on the detection
  const auto src = read_raster(dir_ / "scene.fph");
  const auto o = centered_window(r.detection.centroid_x, r.detection.centroid_y, 224, 1200, 224);
  EXPECT_EQ(std::vector<float>(patch.values().begin(), patch.values().end()), src.window(o.x, o.y, 224, 224));
  EXPECT_EQ(data_->run("r1").detections[0].status, DetectionStatus::false_positive);

  EXPECT_THROW(label_detection(*data_, "r1", id, Verdict::false_positive), Conflict);
  const auto again = label_detection(*data_, "r1", id, Verdict::false_positive, true);
  EXPECT_FALSE(again.manifest_changed);
  EXPECT_EQ(DatasetManifest::load(data_->manifest_path()).size(), before + 1);
}

TEST_F(DataDirTest, TruePositiveLeavesManifestAlone) {
  const auto bytes = detail::read_file_bytes(data_->manifest_path());
  const auto r = label_detection(*data_, "r1", run_.detections[1].id, Verdict::true_positive);
  EXPECT_FALSE(r.manifest_changed);
  EXPECT_TRUE(r.feedback_record_id.empty());
  EXPECT_EQ(detail::read_file_bytes(data_->manifest_path()), bytes);
  EXPECT_THROW(label_detection(*data_, "r1", "r1-d999", Verdict::true_positive), NotFound);
  EXPECT_THROW(parse_verdict("yes"), InvalidArgument);
}

TEST_F(DataDirTest, RetrainRegistersVersionsAndHonorsTheLock) {
  RetrainOptions opt;
  Hyper h;
  h.epochs = 1;
  opt.hyper = h;
  const auto v1 = retrain(*data_, opt);
  EXPECT_EQ(v1.version, 1u);
  EXPECT_EQ(v1.path, "model-v0001.mnv");
  EXPECT_FALSE(v1.mean_auc.has_value());
  EXPECT_EQ(v1.manifest_records, 16u);
  EXPECT_TRUE(fs::exists(dir_ / "models" / "model-v0001.mnv"));

  label_detection(*data_, "r1", run_.detections[0].id, Verdict::false_positive);
  const auto v2 = retrain(*data_, opt);
  EXPECT_EQ(v2.version, 2u);
  EXPECT_EQ(v2.feedback_records, 1u);
  EXPECT_NE(v2.manifest_digest, v1.manifest_digest);
  ASSERT_EQ(data_->registry().size(), 2u);
  EXPECT_EQ(data_->current_model()->version, 2u);
  EXPECT_NE(detail::read_file_bytes(data_->model_file(v1)), detail::read_file_bytes(data_->model_file(v2)));

  {
    TrainingLock held(data_->models_dir() / ".train.lock");
    EXPECT_THROW(retrain(*data_, opt), Busy);
  }
  EXPECT_EQ(data_->registry().size(), 2u);

  // with a registered model, detect_into uses it and records the version
  RunConfig c;
  c.input_path = dir_ / "scene.fph";
  c.run_id = "r2";
  EXPECT_EQ(detect_into(*data_, c).model_version, "v2");
}

TEST_F(DataDirTest, TrainingSettingsDriveEvalFolds) {
  TrainingSettings s;
  s.hyper.epochs = 1;
  s.eval_folds = 2;
  data_->save_training(s);
  EXPECT_EQ(data_->training().eval_folds, 2u);
  const auto e = retrain(*data_);
  ASSERT_TRUE(e.mean_auc.has_value());
  EXPECT_GE(*e.mean_auc, 0.0);
  EXPECT_LE(*e.mean_auc, 1.0);
  EXPECT_EQ(e.hyper.at("epochs"), 1);
}
