#pragma once

// HTTP front end for the review loop. All state lives in the data directory; the service
// only adds the retrain job table and the in-process training flag.

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

// Eigen must be seen before httplib: <resolv.h> defines a `_res` macro that collides with
// Eigen parameter names.
#include "json.hpp"
#include "volcdet/error.hpp"
#include "volcdet/image.hpp"
#include "volcdet/pipeline.hpp"
#include "httplib.h"

namespace volcdet {

struct ServiceOptions {
  std::filesystem::path data_dir;
  std::optional<std::filesystem::path> static_dir;  ///< review UI assets, mounted at /
  std::optional<Hyper> hyper;                       ///< retrain override
  std::function<void()> before_train;               ///< test hook: runs inside each retrain job
  std::function<void(const std::string&)> log;
};

enum class JobState { running, done, failed };

inline const char* to_string(JobState s) {
  switch (s) {
    case JobState::running: return "running";
    case JobState::done: return "done";
    case JobState::failed: return "failed";
  }
  return "?";
}

struct RetrainJob {
  std::string id;
  JobState state = JobState::running;
  std::optional<std::uint32_t> model_version;
  std::string error;
};

class Service {
 public:
  explicit Service(ServiceOptions opt) : opt_(std::move(opt)), data_(opt_.data_dir) {
    data_.init();
    routes();
  }

  ~Service() {
    stop();
    std::lock_guard lk(jobs_mu_);
    for (auto& t : workers_)
      if (t.joinable()) t.join();
  }

  Service(const Service&) = delete;
  Service& operator=(const Service&) = delete;

  /// Binds to host:port (0 picks a free port) and returns the bound port.
  int bind(const std::string& host, int port) {
    if (port == 0) {
      const int p = server_.bind_to_any_port(host);
      if (p < 0) throw IoError("cannot bind to " + host);
      return p;
    }
    if (!server_.bind_to_port(host, port)) throw IoError("port " + std::to_string(port) + " is in use or unavailable");
    return port;
  }

  /// Blocks serving requests until stop().
  void listen() { server_.listen_after_bind(); }

  /// Serves on a background thread; returns once the listener is accepting.
  void start() {
    thread_ = std::thread([this] { listen(); });
    server_.wait_until_ready();
  }

  void stop() {
    server_.stop();
    if (thread_.joinable()) thread_.join();
  }

  /// Blocks until no retrain job is running.
  void wait_for_jobs() {
    std::vector<std::thread> ts;
    {
      std::lock_guard lk(jobs_mu_);
      ts.swap(workers_);
    }
    for (auto& t : ts) t.join();
  }

  httplib::Server& server() { return server_; }

 private:
  using Req = httplib::Request;
  using Res = httplib::Response;

  static void send_json(Res& res, const nlohmann::json& j, int status = 200) {
    res.status = status;
    res.set_content(j.dump(), "application/json; charset=utf-8");
  }

  static void send_error(Res& res, int status, const std::string& msg) { send_json(res, {{"error", msg}}, status); }

  /// Maps library exceptions onto status codes.
  template <class F>
  static void guarded(Res& res, F&& f) {
    try {
      f();
    } catch (const NotFound& e) {
      send_error(res, 404, e.what());
    } catch (const Conflict& e) {
      send_error(res, 409, e.what());
    } catch (const Busy& e) {
      send_error(res, 409, e.what());
    } catch (const InvalidArgument& e) {
      send_error(res, 400, e.what());
    } catch (const nlohmann::json::exception& e) {
      send_error(res, 400, std::string("malformed body: ") + e.what());
    } catch (const std::exception& e) {
      send_error(res, 500, e.what());
    }
  }

  nlohmann::json run_summary(const RunRecord& r) const {
    std::size_t pending = 0;
    for (const auto& d : r.detections) pending += d.status == DetectionStatus::pending;
    return {{"run_id", r.run_id},
            {"created_at", r.created_at},
            {"width", r.width},
            {"height", r.height},
            {"model_version", r.model_version},
            {"raster_digest", r.raster_digest},
            {"counts",
             {{"patches_total", r.counts.patches_total},
              {"patches_tested", r.counts.patches_tested},
              {"patches_skipped_by_edge_gate", r.counts.patches_skipped_by_edge_gate}}},
            {"detections", r.detections.size()},
            {"pending", pending}};
  }

  static nlohmann::json detection_json(const Detection& d) {
    nlohmann::json j = d;
    j["patch_url"] = "/api/detections/" + d.id + "/patch.png";
    j["context_url"] = "/api/detections/" + d.id + "/context.png";
    return j;
  }

  std::pair<RunRecord, Detection> find_detection(const std::string& id) const {
    auto run = data_.run(run_of_detection(id));
    for (const auto& d : run.detections)
      if (d.id == id) return {run, d};
    throw NotFound("unknown detection \"" + id + "\"");
  }

  static void send_png(Res& res, const RgbImage& img) {
    const auto bytes = encode_png(img);
    res.status = 200;
    res.set_content(std::string(bytes.begin(), bytes.end()), "image/png");
  }

  void routes() {
    server_.Get("/api/runs", [this](const Req&, Res& res) {
      guarded(res, [&] {
        auto arr = nlohmann::json::array();
        for (const auto& id : data_.run_ids()) arr.push_back(run_summary(data_.run(id)));
        send_json(res, arr);
      });
    });

    server_.Get("/api/runs/:run_id", [this](const Req& req, Res& res) {
      guarded(res, [&] { send_json(res, data_.run(req.path_params.at("run_id"))); });
    });

    server_.Get("/api/runs/:run_id/heatmap.png", [this](const Req& req, Res& res) {
      guarded(res, [&] {
        const auto id = req.path_params.at("run_id");
        data_.run(id);
        const auto bytes = detail::read_file_bytes(data_.run_dir(id) / "heatmap.png");
        res.set_content(std::string(bytes.begin(), bytes.end()), "image/png");
      });
    });

    server_.Get("/api/detections", [this](const Req& req, Res& res) {
      guarded(res, [&] {
        std::optional<DetectionStatus> filter;
        if (req.has_param("status")) filter = parse_status(req.get_param_value("status"));
        std::vector<Detection> all;
        for (const auto& id : data_.run_ids())
          for (const auto& d : data_.run(id).detections)
            if (!filter || d.status == *filter) all.push_back(d);
        std::stable_sort(all.begin(), all.end(),
                         [](const Detection& a, const Detection& b) { return a.peak_score > b.peak_score; });
        auto arr = nlohmann::json::array();
        for (const auto& d : all) arr.push_back(detection_json(d));
        send_json(res, arr);
      });
    });

    server_.Get("/api/detections/:id", [this](const Req& req, Res& res) {
      guarded(res, [&] { send_json(res, detection_json(find_detection(req.path_params.at("id")).second)); });
    });

    server_.Get("/api/detections/:id/patch.png", [this](const Req& req, Res& res) {
      guarded(res, [&] {
        const auto [run, d] = find_detection(req.path_params.at("id"));
        const auto P = run.config.at("patch_spec").get<PatchSpec>().patch_size;
        FphReader src(run.source_path);
        const auto o = centered_window(d.centroid_x, d.centroid_y, P, src.width(), src.height());
        std::vector<float> w(std::size_t{P} * P);
        src.read_window(o.x, o.y, P, P, w);
        send_png(res, render_phase({P, P, w}));
      });
    });

    server_.Get("/api/detections/:id/context.png", [this](const Req& req, Res& res) {
      guarded(res, [&] {
        const auto [run, d] = find_detection(req.path_params.at("id"));
        const auto P = run.config.at("patch_spec").get<PatchSpec>().patch_size;
        FphReader heat(data_.run_dir(run.run_id) / "heatmap.fph");
        const std::uint32_t cw = std::min(heat.width(), 3 * P), ch = std::min(heat.height(), 3 * P);
        const auto ox = centered_window(d.centroid_x, d.centroid_y, cw, heat.width(), heat.width()).x;
        const auto oy = centered_window(d.centroid_x, d.centroid_y, ch, heat.height(), heat.height()).y;
        std::vector<float> w(std::size_t{cw} * ch);
        heat.read_window(ox, oy, cw, ch, w);
        auto img = colorize({cw, ch, w}, probability_color);
        draw_rect(img, long(d.bbox.x0) - ox, long(d.bbox.y0) - oy, long(d.bbox.x1) - ox, long(d.bbox.y1) - oy,
                  {0, 0, 0});
        send_png(res, img);
      });
    });

    server_.Post("/api/detections/:id/label", [this](const Req& req, Res& res) {
      guarded(res, [&] {
        const auto body = nlohmann::json::parse(req.body);
        if (!body.is_object() || !body.contains("verdict") || !body.at("verdict").is_string())
          throw InvalidArgument("body must be {\"verdict\": \"true_positive\" | \"false_positive\"}");
        const auto verdict = parse_verdict(body.at("verdict").get<std::string>());
        const bool force = body.value("force", false);
        const auto id = req.path_params.at("id");
        std::lock_guard lk(label_mu_);
        const auto r = label_detection(data_, run_of_detection(id), id, verdict, force);
        auto j = detection_json(r.detection);
        j["manifest_changed"] = r.manifest_changed;
        if (!r.feedback_record_id.empty()) j["feedback_record_id"] = r.feedback_record_id;
        send_json(res, j);
      });
    });

    server_.Post("/api/retrain", [this](const Req& req, Res& res) {
      guarded(res, [&] {
        std::optional<Hyper> hyper = opt_.hyper;
        if (!req.body.empty()) {
          const auto body = nlohmann::json::parse(req.body);
          if (body.contains("hyper")) hyper = body.at("hyper").get<Hyper>();
        }
        if (training_.exchange(true)) throw Busy("a retrain is already running");
        std::lock_guard lk(jobs_mu_);
        const auto id = "job-" + std::to_string(++job_counter_);
        jobs_[id] = RetrainJob{id, JobState::running, std::nullopt, {}};
        workers_.emplace_back([this, id, hyper] { run_job(id, hyper); });
        send_json(res, {{"job_id", id}, {"state", "running"}}, 201);
      });
    });

    server_.Get("/api/retrain/:job_id", [this](const Req& req, Res& res) {
      guarded(res, [&] {
        std::lock_guard lk(jobs_mu_);
        const auto it = jobs_.find(req.path_params.at("job_id"));
        if (it == jobs_.end()) throw NotFound("unknown job \"" + req.path_params.at("job_id") + "\"");
        nlohmann::json j{{"job_id", it->second.id},
                         {"state", to_string(it->second.state)},
                         {"model_version", it->second.model_version ? nlohmann::json(*it->second.model_version)
                                                                    : nlohmann::json(nullptr)}};
        if (!it->second.error.empty()) j["error"] = it->second.error;
        send_json(res, j);
      });
    });

    server_.Get("/api/models", [this](const Req&, Res& res) {
      guarded(res, [&] {
        const auto reg = data_.registry();
        const auto manifest = DatasetManifest::load(data_.manifest_path());
        std::size_t feedback = 0;
        for (const auto& r : manifest.records()) feedback += r.origin == SampleOrigin::feedback;
        send_json(res, {{"models", reg},
                        {"current", reg.empty() ? nlohmann::json(nullptr) : nlohmann::json(reg.back().version)},
                        {"training", training_.load()},
                        {"manifest_records", manifest.size()},
                        {"feedback_records", feedback}});
      });
    });

    if (opt_.static_dir && !server_.set_mount_point("/", opt_.static_dir->string()))
      throw IoError("static directory not found: " + opt_.static_dir->string());
  }

  void run_job(const std::string& id, std::optional<Hyper> hyper) {
    RetrainJob result{id, JobState::done, std::nullopt, {}};
    try {
      RetrainOptions ro;
      ro.hyper = hyper;
      ro.before_train = opt_.before_train;
      ro.log = opt_.log;
      result.model_version = retrain(data_, ro).version;
    } catch (const std::exception& e) {
      result.state = JobState::failed;
      result.error = e.what();
    }
    {
      std::lock_guard lk(jobs_mu_);
      jobs_[id] = result;
    }
    training_ = false;
  }

  ServiceOptions opt_;
  DataDir data_;
  httplib::Server server_;
  std::thread thread_;
  std::mutex label_mu_;
  std::mutex jobs_mu_;
  std::map<std::string, RetrainJob> jobs_;
  std::vector<std::thread> workers_;
  std::uint64_t job_counter_ = 0;
  std::atomic<bool> training_{false};
};

}  // namespace volcdet
