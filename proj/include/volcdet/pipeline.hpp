#pragma once

// End-to-end detection over large rasters, run persistence, expert labeling and retraining.
//
// Data directory layout:
//   manifest.jsonl            training manifest (append-only)
//   rasters/                  synthetic training samples
//   feedback/<det>.fph        patches cut around false positives
//   runs/<run_id>/            run.json, heatmap.fph, heatmap.png
//   models/registry.json      model versions; models/model-vNNNN.mnv
//   training.json             model configuration and training hyperparameters

#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"
#include "volcdet/cnn.hpp"
#include "volcdet/detail/io.hpp"
#include "volcdet/error.hpp"
#include "volcdet/evalkit.hpp"
#include "volcdet/image.hpp"
#include "volcdet/manifest.hpp"
#include "volcdet/merger.hpp"
#include "volcdet/model_io.hpp"
#include "volcdet/raster.hpp"
#include "volcdet/tiler.hpp"

namespace volcdet {

inline constexpr const char* kMergeRule = "gaussian_weighted_average";
inline constexpr const char* kFeedbackPolicy = "false_positives_only";
inline constexpr const char* kRetrainPolicy = "fresh_init";

struct RunConfig {
  std::filesystem::path model_path;
  PatchSpec patch_spec;
  double sigma = 0;  ///< 0 selects patch_size / 4
  double detection_threshold = 0.5;
  std::uint64_t min_area_px = 100;
  std::filesystem::path input_path;
  std::filesystem::path output_dir;  ///< the run directory; created, must not hold a previous run
  std::string run_id;                ///< generated when empty
  double budget_mib = 256;
  std::uint32_t workers = 1;
  std::string model_version;  ///< recorded as given; the model file digest when empty

  double effective_sigma() const { return sigma > 0 ? sigma : patch_spec.patch_size / 4.0; }
};

inline void to_json(nlohmann::json& j, const RunConfig& c) {
  j = {{"model_path", c.model_path.string()},
       {"patch_spec", c.patch_spec},
       {"sigma", c.effective_sigma()},
       {"detection_threshold", c.detection_threshold},
       {"min_area_px", c.min_area_px},
       {"input_path", c.input_path.string()},
       {"output_dir", c.output_dir.string()},
       {"run_id", c.run_id},
       {"budget_mib", c.budget_mib},
       {"workers", c.workers},
       {"model_version", c.model_version}};
}

inline void from_json(const nlohmann::json& j, RunConfig& c) {
  static const char* known[] = {"model_path", "patch_spec",  "sigma",  "detection_threshold", "min_area_px",
                                "input_path", "output_dir",  "run_id", "budget_mib",          "workers",
                                "model_version"};
  for (const auto& [k, v] : j.items())
    if (std::find_if(std::begin(known), std::end(known), [&](const char* s) { return k == s; }) == std::end(known))
      throw InvalidArgument("RunConfig: unknown field \"" + k + "\"");
  RunConfig d;
  c.model_path = j.value("model_path", std::string{});
  c.patch_spec = j.contains("patch_spec") ? j.at("patch_spec").get<PatchSpec>() : d.patch_spec;
  c.sigma = j.value("sigma", d.sigma);
  c.detection_threshold = j.value("detection_threshold", d.detection_threshold);
  c.min_area_px = j.value("min_area_px", d.min_area_px);
  c.input_path = j.value("input_path", std::string{});
  c.output_dir = j.value("output_dir", std::string{});
  c.run_id = j.value("run_id", std::string{});
  c.budget_mib = j.value("budget_mib", d.budget_mib);
  c.workers = j.value("workers", d.workers);
  c.model_version = j.value("model_version", std::string{});
}

struct RunCounts {
  std::uint64_t patches_total = 0;
  std::uint64_t patches_tested = 0;
  std::uint64_t patches_skipped_by_edge_gate = 0;
};

struct RunRecord {
  std::string run_id;
  nlohmann::json config;
  std::string raster_digest;  ///< FNV-1a 64 of the input payload, hex
  std::string source_path;    ///< absolute path of the input raster
  std::uint32_t width = 0, height = 0;
  std::vector<Detection> detections;
  std::string model_version;
  std::string model_digest;
  nlohmann::json timings_ms = nlohmann::json::object();
  RunCounts counts;
  std::string created_at;
};

inline void to_json(nlohmann::json& j, const RunRecord& r) {
  j = {{"run_id", r.run_id},
       {"config", r.config},
       {"raster_digest", r.raster_digest},
       {"source_path", r.source_path},
       {"width", r.width},
       {"height", r.height},
       {"detections", r.detections},
       {"model_version", r.model_version},
       {"model_digest", r.model_digest},
       {"timings_ms", r.timings_ms},
       {"counts",
        {{"patches_total", r.counts.patches_total},
         {"patches_tested", r.counts.patches_tested},
         {"patches_skipped_by_edge_gate", r.counts.patches_skipped_by_edge_gate}}},
       {"policy", {{"merge", kMergeRule}, {"feedback", kFeedbackPolicy}, {"retrain", kRetrainPolicy}}},
       {"created_at", r.created_at}};
}

inline void from_json(const nlohmann::json& j, RunRecord& r) {
  r.run_id = j.at("run_id").get<std::string>();
  r.config = j.at("config");
  r.raster_digest = j.at("raster_digest").get<std::string>();
  r.source_path = j.at("source_path").get<std::string>();
  r.width = j.at("width").get<std::uint32_t>();
  r.height = j.at("height").get<std::uint32_t>();
  r.detections = j.at("detections").get<std::vector<Detection>>();
  r.model_version = j.at("model_version").get<std::string>();
  r.model_digest = j.value("model_digest", std::string{});
  r.timings_ms = j.value("timings_ms", nlohmann::json::object());
  const auto& c = j.at("counts");
  r.counts = {c.at("patches_total").get<std::uint64_t>(), c.at("patches_tested").get<std::uint64_t>(),
              c.at("patches_skipped_by_edge_gate").get<std::uint64_t>()};
  r.created_at = j.value("created_at", std::string{});
}

inline std::string make_run_id() {
  static thread_local std::mt19937_64 rng{std::random_device{}()};
  return detail::utc_timestamp_compact() + "-" + detail::hex64(rng()).substr(0, 4);
}

inline std::string detection_id(const std::string& run_id, std::size_t index) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "-d%03zu", index);
  return run_id + buf;
}

/// Run id embedded in a detection id ("<run_id>-dNNN").
inline std::string run_of_detection(const std::string& det_id) {
  const auto p = det_id.rfind("-d");
  if (p == std::string::npos || p == 0 || p + 2 >= det_id.size() ||
      !std::all_of(det_id.begin() + static_cast<std::ptrdiff_t>(p) + 2, det_id.end(), ::isdigit))
    throw NotFound("malformed detection id \"" + det_id + "\"");
  return det_id.substr(0, p);
}

/// Resident-memory estimate of a streaming run: one patch-high band of input, the merge
/// ring (numerator and denominator in double), per-worker patch buffers, the preview image
/// and a fixed allowance for the process itself.
inline std::uint64_t estimate_run_bytes(std::uint32_t width, std::uint32_t patch_size, std::uint32_t workers,
                                        std::uint64_t preview_pixels) {
  const std::uint64_t band = std::uint64_t{patch_size} * width * 4;
  const std::uint64_t ring = std::uint64_t{patch_size} * width * 16;
  const std::uint64_t per_worker = std::uint64_t{patch_size} * patch_size * 4 * 4;
  const std::uint64_t fixed = 24ull << 20;
  return band + ring + std::uint64_t{workers} * per_worker + preview_pixels * 3 + width * 8 + fixed;
}

inline constexpr std::uint32_t kPreviewMaxSide = 2048;

namespace detail {

inline std::uint32_t preview_step(std::uint32_t w, std::uint32_t h) {
  return std::max<std::uint32_t>(1, (std::max(w, h) + kPreviewMaxSide - 1) / kPreviewMaxSide);
}

inline double ms_since(std::chrono::steady_clock::time_point t) {
  return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t).count();
}

}  // namespace detail

/// grid_positions -> band read -> edge gate -> predict_patch -> merge -> extract_detections,
/// streaming row bands of patch_size rows. Writes run.json, heatmap.fph (flags 1) and a
/// heatmap.png preview (at most 2048 px on a side) into config.output_dir.
inline RunRecord detect_image(RunConfig cfg) {
  using clock = std::chrono::steady_clock;
  const auto t_start = clock::now();
  cfg.patch_spec.validate();
  if (!(cfg.detection_threshold >= 0 && cfg.detection_threshold <= 1))
    throw InvalidArgument("detect: detection_threshold must be in [0, 1]");
  if (cfg.workers == 0) cfg.workers = 1;
  if (cfg.run_id.empty()) cfg.run_id = make_run_id();
  if (cfg.output_dir.empty()) throw InvalidArgument("detect: output_dir is required");
  if (!std::filesystem::exists(cfg.model_path)) throw IoError("model not found: " + cfg.model_path.string());
  if (!std::filesystem::exists(cfg.input_path)) throw IoError("raster not found: " + cfg.input_path.string());

  const auto net = load_model(cfg.model_path);
  FphReader reader(cfg.input_path);
  if (reader.header().flags != kFphFlagPhase) throw ParseError("flags", "input raster is not a phase raster");
  const std::uint32_t W = reader.width(), H = reader.height(), P = cfg.patch_spec.patch_size;
  if (P % net.config.input_side != 0)
    throw InvalidArgument("detect: patch_size " + std::to_string(P) + " not divisible by model input side " +
                          std::to_string(net.config.input_side));
  const auto xs = axis_positions(W, P, cfg.patch_spec.stride, "width");
  const auto ys = axis_positions(H, P, cfg.patch_spec.stride, "height");
  const std::uint32_t step = detail::preview_step(W, H);
  const std::uint32_t pw = (W + step - 1) / step, ph = (H + step - 1) / step;
  const auto need = estimate_run_bytes(W, P, cfg.workers, std::uint64_t{pw} * ph);
  const auto budget = static_cast<std::uint64_t>(cfg.budget_mib * 1024 * 1024);
  if (need > budget)
    throw InvalidArgument("detect: memory budget " + std::to_string(cfg.budget_mib) + " MiB is below one band (needs " +
                          std::to_string((need + (1 << 20) - 1) >> 20) + " MiB for width " + std::to_string(W) + ")");

  namespace fs = std::filesystem;
  if (fs::exists(cfg.output_dir) && !fs::is_empty(cfg.output_dir))
    throw Conflict("detect: output directory " + cfg.output_dir.string() + " is not empty");
  const bool created = !fs::exists(cfg.output_dir);
  fs::create_directories(cfg.output_dir);

  RunRecord rec;
  try {
    rec.run_id = cfg.run_id;
    rec.source_path = fs::absolute(cfg.input_path).lexically_normal().string();
    rec.width = W;
    rec.height = H;
    rec.model_digest = detail::hex64(model_digest(cfg.model_path));
    rec.model_version = cfg.model_version.empty() ? "fnv:" + rec.model_digest : cfg.model_version;
    rec.config = cfg;
    rec.created_at = detail::utc_timestamp_iso();
    rec.counts.patches_total = std::uint64_t{xs.size()} * ys.size();

    FphWriter heat(cfg.output_dir / "heatmap.fph", {W, H, kFphFlagProbability});
    ComponentExtractor cc(W, cfg.detection_threshold, cfg.min_area_px);
    RgbImage preview(pw, ph, kMaskedGray);
    double t_read = 0, t_gate = 0, t_classify = 0, t_merge = 0, t_extract = 0;
    BandMerger merger(W, H, P, cfg.effective_sigma(), [&](std::uint32_t y, std::span<const float> row) {
      const auto t0 = clock::now();
      heat.write_rows(row);
      if (y % step == 0)
        for (std::uint32_t x = 0; x < W; x += step) preview.at(x / step, y / step) = probability_color(row[x]);
      t_merge += detail::ms_since(t0);
      const auto t1 = clock::now();
      cc.push_row(y, row);
      t_extract += detail::ms_since(t1);
    });

    detail::Fnv1a64 digest;
    std::uint32_t hashed = 0;
    std::vector<float> band(std::size_t{P} * W);
    std::vector<std::uint8_t> raw;
    struct Slot {
      bool tested = false;
      double p = 0;
      double gate_ms = 0, classify_ms = 0;
    };
    std::vector<Slot> slots(xs.size());
    auto work = [&](std::size_t begin, std::size_t end) {
      std::vector<float> patch(std::size_t{P} * P);
      for (std::size_t i = begin; i < end; ++i) {
        const auto t0 = clock::now();
        for (std::uint32_t r = 0; r < P; ++r)
          std::copy_n(band.begin() + static_cast<std::ptrdiff_t>(std::size_t{r} * W + xs[i]), P,
                      patch.begin() + static_cast<std::ptrdiff_t>(std::size_t{r} * P));
        const RasterView view{P, P, patch};
        slots[i].tested = edge_score(view, cfg.patch_spec.grad_threshold_rad_per_px) >=
                          cfg.patch_spec.edge_fraction_threshold;
        slots[i].gate_ms = detail::ms_since(t0);
        if (slots[i].tested) {
          const auto t1 = clock::now();
          slots[i].p = predict_patch(net, view);
          slots[i].classify_ms = detail::ms_since(t1);
        }
      }
    };

    for (auto y : ys) {
      auto t0 = clock::now();
      reader.read_rows(y, P, band);
      if (y + P > hashed) {
        const std::uint32_t from = std::max(hashed, y);
        const auto first = band.begin() + static_cast<std::ptrdiff_t>(std::size_t{from - y} * W);
        const std::span<const float> fresh(&*first, std::size_t{y + P - from} * W);
        raw.resize(fresh.size() * 4);
        detail::encode_f32(fresh, raw.data());
        digest.update(raw.data(), raw.size());
        hashed = y + P;
      }
      t_read += detail::ms_since(t0);

      if (cfg.workers <= 1 || xs.size() < 2) {
        work(0, xs.size());
      } else {
        std::vector<std::thread> pool;
        const std::size_t n = std::min<std::size_t>(cfg.workers, xs.size());
        for (std::size_t w = 0; w < n; ++w)
          pool.emplace_back(work, xs.size() * w / n, xs.size() * (w + 1) / n);
        for (auto& t : pool) t.join();
      }
      for (std::size_t i = 0; i < xs.size(); ++i) {
        t_gate += slots[i].gate_ms;
        t_classify += slots[i].classify_ms;
        if (!slots[i].tested) {
          ++rec.counts.patches_skipped_by_edge_gate;
          continue;
        }
        ++rec.counts.patches_tested;
        merger.add({xs[i], y}, slots[i].p);
      }
    }
    merger.finish();
    heat.close();
    if (hashed != H) throw IoError("detect: raster rows not fully covered by bands");
    rec.raster_digest = detail::hex64(digest.value());

    rec.detections = cc.finish();
    for (std::size_t i = 0; i < rec.detections.size(); ++i) {
      rec.detections[i].id = detection_id(rec.run_id, i);
      rec.detections[i].run_id = rec.run_id;
      rec.detections[i].status = DetectionStatus::pending;
    }
    auto t0 = clock::now();
    write_png(preview, cfg.output_dir / "heatmap.png");
    t_merge += detail::ms_since(t0);
    rec.timings_ms = {{"read", t_read},
                      {"edge_gate", t_gate},
                      {"classify", t_classify},
                      {"merge", t_merge},
                      {"extract", t_extract},
                      {"total", detail::ms_since(t_start)}};
    detail::write_file_atomic(cfg.output_dir / "run.json", nlohmann::json(rec).dump(2) + "\n");
  } catch (...) {
    std::error_code ec;
    if (created)
      fs::remove_all(cfg.output_dir, ec);
    else
      for (const char* f : {"heatmap.fph", "heatmap.png", "run.json"}) fs::remove(cfg.output_dir / f, ec);
    throw;
  }
  return rec;
}

inline RunRecord load_run(const std::filesystem::path& run_dir) {
  const auto p = run_dir / "run.json";
  if (!std::filesystem::exists(p)) throw NotFound("no run at " + run_dir.string());
  try {
    return nlohmann::json::parse(detail::read_file_text(p)).get<RunRecord>();
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("run.json", e.what());
  }
}

inline void save_run(const std::filesystem::path& run_dir, const RunRecord& r) {
  detail::write_file_atomic(run_dir / "run.json", nlohmann::json(r).dump(2) + "\n");
}

/// Origin of the patch_size window centred (as nearly as bounds allow) on (cx, cy).
inline PatchOrigin centered_window(double cx, double cy, std::uint32_t patch, std::uint32_t width,
                                   std::uint32_t height) {
  const auto clamp = [&](double c, std::uint32_t extent) {
    const long o = std::lround(c) - static_cast<long>(patch / 2);
    return static_cast<std::uint32_t>(std::clamp<long>(o, 0, static_cast<long>(extent) - patch));
  };
  return {clamp(cx, width), clamp(cy, height)};
}

// ---------------------------------------------------------------------------
// Training settings and the model registry

struct TrainingSettings {
  ModelConfig model;
  Hyper hyper;
  std::uint32_t eval_folds = 0;  ///< > 1: record a k-fold mean AUC with every retrain
};

inline void to_json(nlohmann::json& j, const TrainingSettings& s) {
  j = {{"model", s.model}, {"hyper", s.hyper}, {"eval_folds", s.eval_folds}};
}

inline void from_json(const nlohmann::json& j, TrainingSettings& s) {
  s.model = j.contains("model") ? j.at("model").get<ModelConfig>() : ModelConfig{};
  s.hyper = j.contains("hyper") ? j.at("hyper").get<Hyper>() : Hyper{};
  s.eval_folds = j.value("eval_folds", 0u);
}

struct ModelRegistryEntry {
  std::uint32_t version = 0;
  std::string path;  ///< relative to the models directory
  std::string manifest_digest;
  std::string created_at;
  std::optional<double> mean_auc;
  std::uint64_t manifest_records = 0;
  std::uint64_t feedback_records = 0;
  std::string policy = kRetrainPolicy;
  nlohmann::json hyper;
};

inline void to_json(nlohmann::json& j, const ModelRegistryEntry& e) {
  j = {{"version", e.version},
       {"path", e.path},
       {"manifest_digest", e.manifest_digest},
       {"created_at", e.created_at},
       {"mean_auc", e.mean_auc ? nlohmann::json(*e.mean_auc) : nlohmann::json(nullptr)},
       {"manifest_records", e.manifest_records},
       {"feedback_records", e.feedback_records},
       {"policy", e.policy},
       {"hyper", e.hyper}};
}

inline void from_json(const nlohmann::json& j, ModelRegistryEntry& e) {
  e.version = j.at("version").get<std::uint32_t>();
  e.path = j.at("path").get<std::string>();
  e.manifest_digest = j.at("manifest_digest").get<std::string>();
  e.created_at = j.value("created_at", std::string{});
  e.mean_auc = j.contains("mean_auc") && !j.at("mean_auc").is_null() ? std::optional(j.at("mean_auc").get<double>())
                                                                      : std::nullopt;
  e.manifest_records = j.value("manifest_records", std::uint64_t{0});
  e.feedback_records = j.value("feedback_records", std::uint64_t{0});
  e.policy = j.value("policy", std::string(kRetrainPolicy));
  e.hyper = j.value("hyper", nlohmann::json::object());
}

/// Handle on a data directory (see the layout at the top of this file).
class DataDir {
 public:
  explicit DataDir(std::filesystem::path root) : root_(std::move(root)) {}

  const std::filesystem::path& root() const { return root_; }
  std::filesystem::path manifest_path() const { return root_ / "manifest.jsonl"; }
  std::filesystem::path runs_dir() const { return root_ / "runs"; }
  std::filesystem::path run_dir(const std::string& run_id) const { return runs_dir() / run_id; }
  std::filesystem::path feedback_dir() const { return root_ / "feedback"; }
  std::filesystem::path models_dir() const { return root_ / "models"; }
  std::filesystem::path registry_path() const { return models_dir() / "registry.json"; }
  std::filesystem::path training_path() const { return root_ / "training.json"; }

  /// Creates the subdirectories; the manifest must already exist.
  void init() const {
    if (!std::filesystem::exists(manifest_path()))
      throw NotFound("data directory " + root_.string() + " has no manifest.jsonl");
    for (const auto& d : {runs_dir(), feedback_dir(), models_dir()}) std::filesystem::create_directories(d);
  }

  TrainingSettings training() const {
    if (!std::filesystem::exists(training_path())) return {};
    return nlohmann::json::parse(detail::read_file_text(training_path())).get<TrainingSettings>();
  }

  void save_training(const TrainingSettings& s) const {
    detail::write_file_atomic(training_path(), nlohmann::json(s).dump(2) + "\n");
  }

  std::vector<ModelRegistryEntry> registry() const {
    if (!std::filesystem::exists(registry_path())) return {};
    const auto j = nlohmann::json::parse(detail::read_file_text(registry_path()));
    return j.at("models").get<std::vector<ModelRegistryEntry>>();
  }

  std::optional<ModelRegistryEntry> current_model() const {
    auto r = registry();
    if (r.empty()) return std::nullopt;
    return r.back();
  }

  std::filesystem::path model_file(const ModelRegistryEntry& e) const { return models_dir() / e.path; }

  /// Registry ids are "v<version>".
  static std::string version_string(std::uint32_t v) { return "v" + std::to_string(v); }

  std::vector<std::string> run_ids() const {
    std::vector<std::string> ids;
    if (!std::filesystem::exists(runs_dir())) return ids;
    for (const auto& e : std::filesystem::directory_iterator(runs_dir()))
      if (e.is_directory() && std::filesystem::exists(e.path() / "run.json")) ids.push_back(e.path().filename());
    std::sort(ids.begin(), ids.end());
    return ids;
  }

  RunRecord run(const std::string& run_id) const {
    if (run_id.empty() || run_id.find('/') != std::string::npos || run_id.find("..") != std::string::npos)
      throw NotFound("unknown run \"" + run_id + "\"");
    return load_run(run_dir(run_id));
  }

 private:
  std::filesystem::path root_;
};

/// Runs detect_image with the current registered model into runs/<run_id>.
inline RunRecord detect_into(const DataDir& data, RunConfig cfg) {
  data.init();
  if (cfg.model_path.empty()) {
    const auto m = data.current_model();
    if (!m) throw NotFound("no registered model; run retrain first");
    cfg.model_path = data.model_file(*m);
    if (cfg.model_version.empty()) cfg.model_version = DataDir::version_string(m->version);
  }
  if (cfg.run_id.empty()) cfg.run_id = make_run_id();
  cfg.output_dir = data.run_dir(cfg.run_id);
  return detect_image(cfg);
}

// ---------------------------------------------------------------------------
// Labeling

enum class Verdict { true_positive, false_positive };

inline Verdict parse_verdict(const std::string& s) {
  if (s == "true_positive") return Verdict::true_positive;
  if (s == "false_positive") return Verdict::false_positive;
  throw InvalidArgument("verdict must be \"true_positive\" or \"false_positive\", got \"" + s + "\"");
}

struct LabelResult {
  Detection detection;
  bool manifest_changed = false;
  std::string feedback_record_id;  ///< empty for true positives
};

/// Records an expert verdict. False positives additionally cut the patch_size window around
/// the centroid out of the run's source raster and append it to the manifest as a label-0
/// feedback sample (record id "fb-<detection id>", so repeats never duplicate it).
inline LabelResult label_detection(const DataDir& data, const std::string& run_id, const std::string& det_id,
                                   Verdict verdict, bool force = false) {
  auto run = data.run(run_id);
  auto it = std::find_if(run.detections.begin(), run.detections.end(), [&](auto& d) { return d.id == det_id; });
  if (it == run.detections.end()) throw NotFound("unknown detection \"" + det_id + "\" in run " + run_id);
  if (it->status != DetectionStatus::pending && !force)
    throw Conflict("detection " + det_id + " already labeled " + to_string(it->status));

  LabelResult res;
  if (verdict == Verdict::false_positive) {
    const auto patch = run.config.at("patch_spec").get<PatchSpec>().patch_size;
    FphReader src(run.source_path);
    const auto o = centered_window(it->centroid_x, it->centroid_y, patch, src.width(), src.height());
    std::vector<float> window(std::size_t{patch} * patch);
    src.read_window(o.x, o.y, patch, patch, window);
    std::filesystem::create_directories(data.feedback_dir());
    const auto rel = std::filesystem::path("feedback") / (det_id + ".fph");
    const auto tmp = data.root() / (rel.string() + ".tmp");
    write_fph(tmp, patch, patch, kFphFlagPhase, window);
    std::filesystem::rename(tmp, data.root() / rel);

    SampleRecord r;
    r.id = "fb-" + det_id;
    r.path = rel.string();
    r.label = kLabelBackground;
    r.origin = SampleOrigin::feedback;
    r.params = {{"run_id", run_id},
                {"detection_id", det_id},
                {"source", run.source_path},
                {"origin_x", o.x},
                {"origin_y", o.y},
                {"peak_score", it->peak_score}};
    res.manifest_changed = DatasetManifest::append(data.manifest_path(), r);
    res.feedback_record_id = r.id;
  }
  it->status = verdict == Verdict::true_positive ? DetectionStatus::true_positive : DetectionStatus::false_positive;
  save_run(data.run_dir(run_id), run);
  res.detection = *it;
  return res;
}

// ---------------------------------------------------------------------------
// Retraining

/// Exclusive advisory lock on models/.train.lock; released by the kernel if the holder dies.
class TrainingLock {
 public:
  explicit TrainingLock(const std::filesystem::path& path) {
    fd_ = ::open(path.c_str(), O_CREAT | O_RDWR | O_CLOEXEC, 0644);
    if (fd_ < 0) throw IoError("cannot open lock " + path.string());
    if (::flock(fd_, LOCK_EX | LOCK_NB) != 0) {
      ::close(fd_);
      throw Busy("a retrain is already running");
    }
  }
  ~TrainingLock() {
    ::flock(fd_, LOCK_UN);
    ::close(fd_);
  }
  TrainingLock(const TrainingLock&) = delete;
  TrainingLock& operator=(const TrainingLock&) = delete;

 private:
  int fd_ = -1;
};

struct RetrainOptions {
  std::optional<Hyper> hyper;                 ///< overrides training.json
  std::function<void()> before_train;         ///< test hook, runs while the lock is held
  std::function<void(const std::string&)> log;
};

/// Trains a fresh model on the whole current manifest and registers it as version N+1.
/// The seeds of version N are child seeds of the configured ones, so retrains on an unchanged
/// manifest differ only by seed lineage.
inline ModelRegistryEntry retrain(const DataDir& data, const RetrainOptions& opt = {}) {
  data.init();
  TrainingLock lock(data.models_dir() / ".train.lock");
  if (opt.before_train) opt.before_train();

  const auto manifest = DatasetManifest::load(data.manifest_path());
  const auto pos = manifest.count_label(kLabelDeformation);
  if (pos == 0 || pos == manifest.size())
    throw InvalidArgument("retrain: manifest must contain both classes (" + std::to_string(pos) + " of " +
                          std::to_string(manifest.size()) + " positive)");
  auto settings = data.training();
  if (opt.hyper) settings.hyper = *opt.hyper;
  const auto reg = data.registry();
  const std::uint32_t version = reg.empty() ? 1 : reg.back().version + 1;
  ModelConfig cfg = settings.model;
  Hyper hyper = settings.hyper;
  cfg.seed = detail::child_seed(cfg.seed, version);
  hyper.seed = detail::child_seed(hyper.seed, version);

  ModelRegistryEntry e;
  e.version = version;
  e.manifest_digest = detail::hex64(manifest.digest());
  e.manifest_records = manifest.size();
  for (const auto& r : manifest.records()) e.feedback_records += r.origin == SampleOrigin::feedback;
  e.hyper = hyper;

  if (settings.eval_folds > 1) {
    const Candidate c{"cnn", cfg};
    CvOptions cv;
    cv.k = settings.eval_folds;
    cv.seed = hyper.seed;
    cv.hyper = hyper;
    cv.log = opt.log;
    e.mean_auc = cross_validate(manifest, std::span(&c, 1), cv).mean_auc("cnn");
  }
  const auto samples = encode_manifest(manifest, cfg.input_side);
  const auto trained = train(cfg, hyper, samples, [&](std::uint32_t ep, double loss) {
    if (opt.log) opt.log("epoch " + std::to_string(ep + 1) + " loss " + std::to_string(loss));
  });

  char name[32];
  std::snprintf(name, sizeof name, "model-v%04u.mnv", version);
  e.path = name;
  if (std::filesystem::exists(data.models_dir() / e.path))
    throw Conflict("model file " + e.path + " already exists");
  save_model(trained.model, data.models_dir() / e.path);
  e.created_at = detail::utc_timestamp_iso();
  auto entries = reg;
  entries.push_back(e);
  detail::write_file_atomic(data.registry_path(), nlohmann::json{{"models", entries}}.dump(2) + "\n");
  return e;
}

}  // namespace volcdet
