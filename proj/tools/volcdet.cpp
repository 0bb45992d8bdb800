// volcdet command-line interface.
//
// Exit codes: 0 success, 1 usage error, 2 runtime error.

#include <csignal>
#include <cstdio>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "volcdet/service.hpp"
#include "volcdet/volcdet.hpp"

namespace {

using namespace volcdet;
namespace fs = std::filesystem;

void log_line(const std::string& s) { std::cerr << s << std::endl; }

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::stringstream in(s);
  for (std::string part; std::getline(in, part, sep);)
    if (!part.empty()) out.push_back(part);
  return out;
}

/// "x,y,peak_rad[,depth_m]"; the peak is signed (negative = subsidence).
MogiParams parse_source(const std::string& text, std::uint32_t width, std::uint32_t height) {
  const auto f = split(text, ',');
  if (f.size() < 3 || f.size() > 4) throw CLI::ValidationError("--source", "expected x,y,peak_rad[,depth_m]");
  MogiParams m;
  m.center_x = std::stod(f[0]);
  m.center_y = std::stod(f[1]);
  if (f.size() == 4) m.depth_m = std::stod(f[3]);
  const double peak = std::stod(f[2]);
  if (peak == 0) throw CLI::ValidationError("--source", "peak must be nonzero");
  m.delta_volume_m3 = peak > 0 ? 1e6 : -1e6;
  // The peak sits at the source; a local window suffices and keeps huge scenes cheap.
  const std::uint32_t win = std::min<std::uint32_t>(513, std::min(width, height));
  MogiParams local = m;
  local.center_x = local.center_y = (win - 1) / 2.0;
  m.delta_volume_m3 = with_peak_phase(local, std::abs(peak), win, win).delta_volume_m3;
  return m;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Volcano deformation detection in wrapped-phase interferograms"};
  app.require_subcommand(1);

  // gen-dataset
  auto* gen = app.add_subcommand("gen-dataset", "Write a seeded synthetic training set");
  DatasetOptions dopt;
  fs::path gen_out;
  gen->add_option("--out", gen_out, "Output directory")->required();
  gen->add_option("--count", dopt.count, "Number of samples")->check(CLI::Range(2, 10000000));
  gen->add_option("--positive-fraction", dopt.positive_fraction)->check(CLI::Range(0.0, 1.0));
  gen->add_option("--seed", dopt.master_seed);
  gen->add_option("--size", dopt.size, "Patch side in pixels")->check(CLI::Range(8, 4096));

  // gen-scene
  auto* scene = app.add_subcommand("gen-scene", "Write a synthetic scene raster (streamed, any size)");
  fs::path scene_out;
  std::uint32_t scene_w = 672, scene_h = 672, scene_tile = 1024;
  std::vector<std::string> scene_sources;
  AtmosphereParams scene_atmo{0.5, 2.7, 1};
  scene->add_option("--out", scene_out, "Output .fph")->required();
  scene->add_option("--width", scene_w)->check(CLI::Range(1u, 1u << 20));
  scene->add_option("--height", scene_h)->check(CLI::Range(1u, 1u << 20));
  scene->add_option("--source", scene_sources, "x,y,peak_rad[,depth_m]; repeatable");
  scene->add_option("--atmo-std", scene_atmo.std_rad)->check(CLI::Range(0.0, 100.0));
  scene->add_option("--atmo-beta", scene_atmo.beta)->check(CLI::Range(1.0, 4.0));
  scene->add_option("--seed", scene_atmo.seed);
  scene->add_option("--tile", scene_tile, "Atmosphere tile side (periodic)")->check(CLI::Range(8u, 8192u));

  // train
  auto* trn = app.add_subcommand("train", "Train a CNN on a manifest");
  fs::path trn_manifest, trn_out;
  Hyper hyper;
  trn->add_option("--manifest", trn_manifest)->required()->check(CLI::ExistingFile);
  trn->add_option("--out", trn_out, "Output .mnv")->required();
  trn->add_option("--epochs", hyper.epochs)->check(CLI::Range(1u, 100000u));
  trn->add_option("--lr", hyper.learning_rate)->check(CLI::PositiveNumber);
  trn->add_option("--seed", hyper.seed);
  trn->add_option("--batch", hyper.batch_size)->check(CLI::Range(1u, 65536u));

  // detect
  auto* det = app.add_subcommand("detect", "Run the detection pipeline on a raster");
  fs::path det_config, det_data;
  RunConfig rc;
  std::optional<double> det_threshold, det_sigma, det_budget;
  std::optional<std::uint64_t> det_min_area;
  std::optional<std::uint32_t> det_workers;
  std::string det_model, det_image, det_out;
  det->add_option("--config", det_config, "JSON file with RunConfig fields")->check(CLI::ExistingFile);
  det->add_option("--data", det_data, "Data directory: use the current model and write under runs/");
  det->add_option("--model", det_model);
  det->add_option("--image", det_image);
  det->add_option("--out", det_out, "Run directory");
  det->add_option("--threshold", det_threshold)->check(CLI::Range(0.0, 1.0));
  det->add_option("--sigma", det_sigma)->check(CLI::PositiveNumber);
  det->add_option("--budget-mib", det_budget)->check(CLI::PositiveNumber);
  det->add_option("--min-area", det_min_area);
  det->add_option("--workers", det_workers)->check(CLI::Range(1u, 256u));

  // eval
  auto* ev = app.add_subcommand("eval", "k-fold cross-validation of CNN configs and the SVM baseline");
  fs::path ev_manifest, ev_out;
  CvOptions cv;
  std::string ev_configs = "cnn,svm";
  ev->add_option("--manifest", ev_manifest)->required()->check(CLI::ExistingFile);
  ev->add_option("--folds", cv.k)->check(CLI::Range(2u, 100u));
  ev->add_option("--seed", cv.seed);
  ev->add_option("--configs", ev_configs, "Comma list of cnn, cnn-wide, cnn-shallow, svm");
  ev->add_option("--out", ev_out, "Report .json (a .png plot is written alongside)")->required();
  ev->add_option("--epochs", cv.hyper.epochs)->check(CLI::Range(1u, 100000u));
  ev->add_option("--min-tnr", cv.min_tnr)->check(CLI::Range(0.0, 1.0));

  // serve
  auto* srv = app.add_subcommand("serve", "HTTP API for review and retraining");
  int srv_port = 8080;
  std::string srv_host = "127.0.0.1";
  fs::path srv_data, srv_static;
  srv->add_option("--port", srv_port)->check(CLI::Range(0, 65535));
  srv->add_option("--host", srv_host);
  srv->add_option("--data", srv_data)->required()->check(CLI::ExistingDirectory);
  srv->add_option("--static", srv_static, "Review UI assets")->check(CLI::ExistingDirectory);

  // retrain
  auto* rt = app.add_subcommand("retrain", "Train and register a new model version from the data directory");
  fs::path rt_data;
  std::optional<std::uint32_t> rt_epochs;
  rt->add_option("--data", rt_data)->required()->check(CLI::ExistingDirectory);
  rt->add_option("--epochs", rt_epochs)->check(CLI::Range(1u, 100000u));

  // label
  auto* lb = app.add_subcommand("label", "Record an expert verdict on a detection");
  fs::path lb_data;
  std::string lb_id, lb_verdict;
  bool lb_force = false;
  lb->add_option("--data", lb_data)->required()->check(CLI::ExistingDirectory);
  lb->add_option("--detection", lb_id)->required();
  lb->add_option("--verdict", lb_verdict)->required()->check(CLI::IsMember({"true_positive", "false_positive"}));
  lb->add_flag("--force", lb_force, "Allow relabeling");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc_parse = app.exit(e);
    return rc_parse == 0 ? 0 : 1;
  }

  try {
    if (*gen) {
      const auto m = build_dataset(dopt, gen_out);
      std::cout << nlohmann::json{{"manifest", m.path().string()},
                                  {"count", m.size()},
                                  {"positives", m.count_label(kLabelDeformation)}}
                       .dump()
                << "\n";
    } else if (*scene) {
      std::vector<MogiParams> sources;
      for (const auto& s : scene_sources) sources.push_back(parse_source(s, scene_w, scene_h));
      scene_atmo.validate();
      write_scene_fph(scene_out, scene_w, scene_h, sources, scene_atmo, std::min({scene_tile, scene_w, scene_h}));
      std::cout << nlohmann::json{{"path", scene_out.string()}, {"width", scene_w}, {"height", scene_h}}.dump() << "\n";
    } else if (*trn) {
      const auto manifest = DatasetManifest::load(trn_manifest);
      ModelConfig cfg;
      const auto samples = encode_manifest(manifest, cfg.input_side);
      const auto result = train(cfg, hyper, samples, [](std::uint32_t ep, double loss) {
        log_line("epoch " + std::to_string(ep + 1) + " loss " + std::to_string(loss));
      });
      save_model(result.model, trn_out);
      std::cout << nlohmann::json{{"model", trn_out.string()}, {"samples", samples.size()},
                                  {"final_loss", result.epoch_loss.back()}}
                       .dump()
                << "\n";
    } else if (*det) {
      if (!det_config.empty()) rc = nlohmann::json::parse(detail::read_file_text(det_config)).get<RunConfig>();
      if (!det_model.empty()) rc.model_path = det_model;
      if (!det_image.empty()) rc.input_path = det_image;
      if (!det_out.empty()) rc.output_dir = det_out;
      if (det_threshold) rc.detection_threshold = *det_threshold;
      if (det_sigma) rc.sigma = *det_sigma;
      if (det_budget) rc.budget_mib = *det_budget;
      if (det_min_area) rc.min_area_px = *det_min_area;
      if (det_workers) rc.workers = *det_workers;
      if (rc.input_path.empty()) {
        std::cerr << "detect: --image (or input_path in --config) is required\n";
        return 1;
      }
      RunRecord rec;
      if (!det_data.empty()) {
        rec = detect_into(DataDir(det_data), rc);
      } else {
        if (rc.model_path.empty() || rc.output_dir.empty()) {
          std::cerr << "detect: --model and --out are required without --data\n";
          return 1;
        }
        rec = detect_image(rc);
      }
      nlohmann::json j = rec;
      j.erase("config");
      std::cout << j.dump() << "\n";
    } else if (*ev) {
      std::vector<Candidate> cands;
      for (const auto& name : split(ev_configs, ',')) {
        try {
          cands.push_back(make_candidate(name));
        } catch (const InvalidArgument& e) {
          std::cerr << e.what() << "\n";
          return 1;
        }
      }
      cv.log = log_line;
      const auto report = cross_validate(DatasetManifest::load(ev_manifest), cands, cv);
      save_report(report, ev_out);
      nlohmann::json summary;
      for (const auto& n : report.config_names()) summary[n] = report.mean_auc(n);
      std::cout << nlohmann::json{{"report", ev_out.string()}, {"mean_auc", summary}}.dump() << "\n";
    } else if (*srv) {
      ServiceOptions so;
      so.data_dir = srv_data;
      if (!srv_static.empty()) so.static_dir = srv_static;
      so.log = log_line;
      Service service(so);
      const int port = service.bind(srv_host, srv_port);
      log_line("listening on http://" + srv_host + ":" + std::to_string(port));
      service.listen();
    } else if (*rt) {
      RetrainOptions ro;
      ro.log = log_line;
      const DataDir data(rt_data);
      if (rt_epochs) {
        auto h = data.training().hyper;
        h.epochs = *rt_epochs;
        ro.hyper = h;
      }
      const auto e = retrain(data, ro);
      std::cout << nlohmann::json(e).dump() << "\n";
    } else if (*lb) {
      const DataDir data(lb_data);
      const auto r = label_detection(data, run_of_detection(lb_id), lb_id, parse_verdict(lb_verdict), lb_force);
      std::cout << nlohmann::json{{"detection", r.detection}, {"manifest_changed", r.manifest_changed}}.dump() << "\n";
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
