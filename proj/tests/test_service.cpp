#include <gtest/gtest.h>

#include <chrono>
#include <condition_variable>
#include <fstream>

#include "test_util.hpp"
#include "volcdet/service.hpp"

using namespace volcdet;
using nlohmann::json;

namespace {

bool is_png(const std::string& body) { return body.size() > 8 && body.compare(1, 3, "PNG") == 0; }

/// Gate the retrain hook waits on, so a job can be held in the running state.
struct Gate {
  std::mutex mu;
  std::condition_variable cv;
  bool open = false;
  bool entered = false;

  void wait() {
    std::unique_lock lk(mu);
    entered = true;
    cv.notify_all();
    cv.wait(lk, [&] { return open; });
  }
  void wait_entered() {
    std::unique_lock lk(mu);
    cv.wait_for(lk, std::chrono::seconds(30), [&] { return entered; });
  }
  void release() {
    std::lock_guard lk(mu);
    open = true;
    cv.notify_all();
  }
};

}  // namespace

class ServiceTest : public ::testing::Test {
 protected:
  void SetUp() override {
    DataDir data = testutil::make_data_dir(dir_.path());
    testutil::write_constant_model(dir_ / "model.mnv", 0.9);
    write_raster(testutil::two_blob_raster(), dir_ / "scene.fph");
    RunConfig c;
    c.model_path = dir_ / "model.mnv";
    c.input_path = dir_ / "scene.fph";
    c.run_id = "r1";
    run_ = detect_into(data, c);

    std::filesystem::create_directories(dir_ / "static");
    std::ofstream(dir_ / "static" / "index.html") << "<html>ui</html>";

    ServiceOptions opt;
    opt.data_dir = dir_.path();
    opt.static_dir = dir_ / "static";
    Hyper h;
    h.epochs = 1;
    opt.hyper = h;
    opt.before_train = [this] { gate_.wait(); };
    svc_ = std::make_unique<Service>(opt);
    port_ = svc_->bind("127.0.0.1", 0);
    svc_->start();
    cli_ = std::make_unique<httplib::Client>("127.0.0.1", port_);
    cli_->set_read_timeout(60, 0);
  }

  void TearDown() override {
    gate_.release();
    svc_->wait_for_jobs();
    svc_->stop();
  }

  json get_json(const std::string& path, int want = 200) {
    auto r = cli_->Get(path);
    EXPECT_TRUE(r) << path;
    if (!r) return {};
    EXPECT_EQ(r->status, want) << path << ": " << r->body;
    return json::parse(r->body);
  }

  httplib::Result post(const std::string& path, const std::string& body) {
    return cli_->Post(path, body, "application/json");
  }

  testutil::TempDir dir_{"svc"};
  RunRecord run_;
  Gate gate_;
  std::unique_ptr<Service> svc_;
  std::unique_ptr<httplib::Client> cli_;
  int port_ = 0;
};

TEST_F(ServiceTest, RunsAndDetections) {
  const auto runs = get_json("/api/runs");
  ASSERT_EQ(runs.size(), 1u);
  EXPECT_EQ(runs[0].at("run_id"), "r1");
  EXPECT_EQ(runs[0].at("detections"), 2);
  EXPECT_EQ(runs[0].at("pending"), 2);

  const auto r = get_json("/api/runs/r1");
  EXPECT_EQ(r.at("detections").size(), 2u);
  EXPECT_EQ(r.at("counts").at("patches_tested"), 6);
  get_json("/api/runs/nope", 404);
  EXPECT_EQ(cli_->Get("/api/runs/r1/heatmap.png")->status, 200);

  const auto dets = get_json("/api/detections?status=pending");
  ASSERT_EQ(dets.size(), 2u);
  EXPECT_EQ(dets[0].at("patch_url"), "/api/detections/" + run_.detections[0].id + "/patch.png");
  EXPECT_EQ(get_json("/api/detections?status=true_positive").size(), 0u);
  get_json("/api/detections?status=maybe", 400);

  const auto id = run_.detections[0].id;
  EXPECT_EQ(get_json("/api/detections/" + id).at("id"), id);
  get_json("/api/detections/r1-d099", 404);
  get_json("/api/detections/garbage", 404);
  for (const char* kind : {"patch.png", "context.png"}) {
    const auto res = cli_->Get("/api/detections/" + id + "/" + kind);
    ASSERT_TRUE(res);
    EXPECT_EQ(res->status, 200);
    EXPECT_TRUE(is_png(res->body)) << kind;
    EXPECT_EQ(res->get_header_value("Content-Type"), "image/png");
  }
}

TEST_F(ServiceTest, LabelFlow) {
  const auto id = run_.detections[1].id;
  const auto path = "/api/detections/" + id + "/label";
  auto r = post(path, R"({"verdict":"false_positive"})");
  ASSERT_TRUE(r);
  ASSERT_EQ(r->status, 200) << r->body;
  auto j = json::parse(r->body);
  EXPECT_EQ(j.at("status"), "false_positive");
  EXPECT_EQ(j.at("manifest_changed"), true);
  EXPECT_EQ(j.at("feedback_record_id"), "fb-" + id);

  EXPECT_EQ(post(path, R"({"verdict":"false_positive"})")->status, 409);
  r = post(path, R"({"verdict":"false_positive","force":true})");
  EXPECT_EQ(r->status, 200);
  EXPECT_EQ(json::parse(r->body).at("manifest_changed"), false);

  EXPECT_EQ(post(path, "{not json")->status, 400);
  EXPECT_EQ(post(path, R"({"verdict":"maybe"})")->status, 400);
  EXPECT_EQ(post(path, R"({"other":1})")->status, 400);
  EXPECT_EQ(post("/api/detections/r1-d777/label", R"({"verdict":"true_positive"})")->status, 404);

  EXPECT_EQ(get_json("/api/detections?status=false_positive").size(), 1u);
  const auto m = get_json("/api/models");
  EXPECT_EQ(m.at("feedback_records"), 1);
  EXPECT_EQ(m.at("manifest_records"), 17);
}

TEST_F(ServiceTest, RetrainJobLifecycle) {
  auto m = get_json("/api/models");
  EXPECT_TRUE(m.at("current").is_null());
  EXPECT_EQ(m.at("training"), false);

  auto r = post("/api/retrain", "");
  ASSERT_TRUE(r);
  ASSERT_EQ(r->status, 201) << r->body;
  const auto job = json::parse(r->body).at("job_id").get<std::string>();
  gate_.wait_entered();
  EXPECT_EQ(post("/api/retrain", "")->status, 409);
  EXPECT_EQ(get_json("/api/retrain/" + job).at("state"), "running");
  EXPECT_EQ(get_json("/api/models").at("training"), true);

  gate_.release();
  json state;
  for (int i = 0; i < 600; ++i) {
    state = get_json("/api/retrain/" + job);
    if (state.at("state") != "running") break;
    std::this_thread::sleep_for(std::chrono::milliseconds(100));
  }
  ASSERT_EQ(state.at("state"), "done") << state.dump();
  EXPECT_EQ(state.at("model_version"), 1);
  svc_->wait_for_jobs();

  m = get_json("/api/models");
  EXPECT_EQ(m.at("current"), 1);
  ASSERT_EQ(m.at("models").size(), 1u);
  EXPECT_EQ(m.at("models")[0].at("path"), "model-v0001.mnv");
  EXPECT_EQ(m.at("models")[0].at("hyper").at("epochs"), 1);
  get_json("/api/retrain/job-99", 404);
  EXPECT_EQ(post("/api/retrain", R"({"hyper": 3})")->status, 400);
}

TEST_F(ServiceTest, StaticMount) {
  const auto r = cli_->Get("/index.html");
  ASSERT_TRUE(r);
  EXPECT_EQ(r->status, 200);
  EXPECT_EQ(r->body, "<html>ui</html>");
}

TEST(ServiceSetup, RequiresManifestAndStaticDir) {
  testutil::TempDir dir("svc0");
  ServiceOptions opt;
  opt.data_dir = dir.path();
  EXPECT_THROW(Service s(opt), NotFound);
  testutil::make_data_dir(dir.path(), 4);
  opt.static_dir = dir / "missing";
  EXPECT_THROW(Service s(opt), IoError);
}
