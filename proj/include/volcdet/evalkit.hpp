#pragma once

// ROC analysis, stratified k-fold splits, and cross-validated comparison of CNN
// configurations against the texture-feature SVM baseline.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <map>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "json.hpp"
#include "volcdet/cnn.hpp"
#include "volcdet/error.hpp"
#include "volcdet/image.hpp"
#include "volcdet/manifest.hpp"
#include "volcdet/texture.hpp"

namespace volcdet {

struct RocPoint {
  double fpr = 0, tpr = 0;
  double threshold = 0;  ///< scores >= threshold are called positive; +inf at (0, 0)
};

struct RocCurve {
  std::vector<RocPoint> points;  ///< (0,0) first, (1,1) last, both coordinates non-decreasing
  double auc = 0;
  std::size_t positives = 0, negatives = 0;
};

struct OperatingPoint {
  double threshold = 0;
  double tpr = 0;
  double tnr = 0;
};

/// One step per distinct score (descending), trapezoidal AUC on integer counts.
inline RocCurve roc(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw InvalidArgument("roc: scores and labels differ in length");
  std::size_t P = 0;
  for (int l : labels) {
    if (l != 0 && l != 1) throw InvalidArgument("roc: labels must be 0 or 1");
    P += l == 1;
  }
  const std::size_t N = labels.size() - P;
  if (P == 0 || N == 0) throw InvalidArgument("roc: both classes must be present");
  for (double s : scores)
    if (std::isnan(s)) throw InvalidArgument("roc: NaN score");

  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](auto a, auto b) { return scores[a] > scores[b]; });

  RocCurve c;
  c.positives = P;
  c.negatives = N;
  c.points.push_back({0, 0, std::numeric_limits<double>::infinity()});
  std::uint64_t tp = 0, fp = 0;
  long double area2 = 0;  // twice the area, in units of count pairs
  for (std::size_t i = 0; i < order.size();) {
    const double s = scores[order[i]];
    const auto tp0 = tp, fp0 = fp;
    for (; i < order.size() && scores[order[i]] == s; ++i) (labels[order[i]] == 1 ? tp : fp) += 1;
    area2 += static_cast<long double>(fp - fp0) * static_cast<long double>(tp + tp0);
    c.points.push_back({static_cast<double>(fp) / N, static_cast<double>(tp) / P, s});
  }
  c.auc = static_cast<double>(area2 / (2.0L * P * N));
  return c;
}

/// Highest tpr among points with tnr >= min_tnr (ties: higher tnr); if none qualifies, the
/// point of maximal tnr.
inline OperatingPoint operating_point(const RocCurve& curve, double min_tnr) {
  if (curve.points.empty()) throw InvalidArgument("operating_point: empty curve");
  const RocPoint* best = nullptr;
  for (const auto& p : curve.points) {
    if (1.0 - p.fpr < min_tnr - 1e-12) continue;
    if (!best || p.tpr > best->tpr || (p.tpr == best->tpr && p.fpr < best->fpr)) best = &p;
  }
  if (!best) {
    best = &curve.points.front();
    for (const auto& p : curve.points)
      if (p.fpr < best->fpr || (p.fpr == best->fpr && p.tpr > best->tpr)) best = &p;
  }
  return {best->threshold, best->tpr, 1.0 - best->fpr};
}

/// Evenly spaced subsample keeping both endpoints.
inline std::vector<RocPoint> downsample(const std::vector<RocPoint>& pts, std::size_t max_points = 256) {
  if (pts.size() <= max_points || max_points < 2) return pts;
  std::vector<RocPoint> out;
  for (std::size_t i = 0; i < max_points; ++i)
    out.push_back(pts[static_cast<std::size_t>(std::llround(double(i) * (pts.size() - 1) / (max_points - 1)))]);
  return out;
}

/// Stratified folds of sample indices: each class is shuffled by `seed`, then the classes
/// (positives first) are dealt round-robin as one continuous sequence.
inline std::vector<std::vector<std::size_t>> kfold_split(std::span<const int> labels, std::uint32_t k,
                                                         std::uint64_t seed) {
  if (k < 2) throw InvalidArgument("kfold_split: k must be >= 2");
  std::vector<std::size_t> pos, neg;
  for (std::size_t i = 0; i < labels.size(); ++i) (labels[i] == kLabelDeformation ? pos : neg).push_back(i);
  if (pos.size() < k || neg.size() < k)
    throw InvalidArgument("kfold_split: each class needs >= k members (have " + std::to_string(pos.size()) +
                          " positive, " + std::to_string(neg.size()) + " negative, k = " + std::to_string(k) + ")");
  std::mt19937_64 rng(seed);
  std::shuffle(pos.begin(), pos.end(), rng);
  std::shuffle(neg.begin(), neg.end(), rng);
  std::vector<std::vector<std::size_t>> folds(k);
  std::size_t next = 0;
  for (auto i : pos) folds[next++ % k].push_back(i);
  for (auto i : neg) folds[next++ % k].push_back(i);
  for (auto& f : folds) std::sort(f.begin(), f.end());
  return folds;
}

inline std::vector<std::vector<std::size_t>> kfold_split(const DatasetManifest& m, std::uint32_t k,
                                                         std::uint64_t seed) {
  std::vector<int> labels;
  for (const auto& r : m.records()) labels.push_back(r.label);
  return kfold_split(labels, k, seed);
}

// ---------------------------------------------------------------------------
// Cross-validation

/// A named model family: a CNN architecture or the SVM baseline.
struct Candidate {
  std::string name;
  std::variant<ModelConfig, SvmHyper> model;
};

inline std::vector<std::string> known_candidates() { return {"cnn", "cnn-wide", "cnn-shallow", "svm"}; }

inline Candidate make_candidate(const std::string& name) {
  using L = LayerSpec;
  ModelConfig cfg;
  if (name == "cnn") return {name, cfg};
  if (name == "cnn-wide") {
    cfg.layers = {L::conv(5, 16), L::relu(), L::maxpool(2), L::conv(5, 32), L::relu(), L::maxpool(2), L::conv(3, 48),
                  L::relu(),      L::maxpool(2), L::flatten(), L::dense(96), L::relu(), L::dense(2), L::softmax()};
    return {name, cfg};
  }
  if (name == "cnn-shallow") {
    cfg.layers = {L::conv(5, 8), L::relu(), L::maxpool(4), L::flatten(), L::dense(32), L::relu(), L::dense(2),
                  L::softmax()};
    return {name, cfg};
  }
  if (name == "svm") return {name, SvmHyper{}};
  throw InvalidArgument("unknown model config \"" + name + "\"");
}

struct FoldCurve {
  std::string config_name;
  std::uint32_t fold = 0;
  RocCurve curve;
  OperatingPoint operating;
};

struct EvalReport {
  std::uint32_t folds = 0;
  std::uint64_t seed = 0;
  double min_tnr = 0.95;
  std::vector<FoldCurve> curves;

  std::vector<std::string> config_names() const {
    std::vector<std::string> names;
    for (const auto& c : curves)
      if (std::find(names.begin(), names.end(), c.config_name) == names.end()) names.push_back(c.config_name);
    return names;
  }

  double mean_auc(const std::string& name) const {
    double s = 0;
    std::size_t n = 0;
    for (const auto& c : curves)
      if (c.config_name == name) s += c.curve.auc, ++n;
    if (n == 0) throw NotFound("no curves for config \"" + name + "\"");
    return s / static_cast<double>(n);
  }
};

inline nlohmann::json threshold_json(double t) {
  return std::isfinite(t) ? nlohmann::json(t) : nlohmann::json(nullptr);
}

inline nlohmann::json to_json_value(const EvalReport& r) {
  nlohmann::json curves = nlohmann::json::array();
  for (const auto& c : r.curves) {
    nlohmann::json pts = nlohmann::json::array(), thr = nlohmann::json::array();
    for (const auto& p : downsample(c.curve.points)) {
      pts.push_back({p.fpr, p.tpr});
      thr.push_back(threshold_json(p.threshold));
    }
    curves.push_back({{"config_name", c.config_name},
                      {"fold", c.fold},
                      {"auc", c.curve.auc},
                      {"points", pts},
                      {"thresholds", thr},
                      {"operating_point",
                       {{"threshold", threshold_json(c.operating.threshold)},
                        {"tpr", c.operating.tpr},
                        {"tnr", c.operating.tnr}}}});
  }
  nlohmann::json mean = nlohmann::json::object();
  for (const auto& n : r.config_names()) mean[n] = r.mean_auc(n);
  return {{"folds", r.folds}, {"seed", r.seed}, {"min_tnr", r.min_tnr}, {"curves", curves}, {"mean_auc", mean}};
}

/// ROC plot of every curve on [0,1]^2 with the chance diagonal; one color per config.
inline RgbImage plot_report(const EvalReport& r, std::uint32_t side = 480) {
  static constexpr Rgb palette[] = {{200, 30, 30}, {30, 90, 200}, {30, 150, 60}, {160, 60, 170}, {230, 140, 20}};
  RgbImage img(side, side, {255, 255, 255});
  const double m = 30, span = side - 2 * m;
  auto px = [&](double fpr) { return m + fpr * span; };
  auto py = [&](double tpr) { return side - m - tpr * span; };
  draw_line(img, px(0), py(1), px(1), py(0), {190, 190, 190});
  draw_rect(img, std::lround(px(0)), std::lround(py(1)), std::lround(px(1)), std::lround(py(0)), {0, 0, 0});
  const auto names = r.config_names();
  for (const auto& c : r.curves) {
    const auto idx = std::find(names.begin(), names.end(), c.config_name) - names.begin();
    const Rgb col = palette[static_cast<std::size_t>(idx) % std::size(palette)];
    const auto pts = downsample(c.curve.points, 1024);
    for (std::size_t i = 1; i < pts.size(); ++i)
      draw_line(img, px(pts[i - 1].fpr), py(pts[i - 1].tpr), px(pts[i].fpr), py(pts[i].tpr), col);
    // legend swatch
    for (long dy = 0; dy < 8; ++dy)
      for (long dx = 0; dx < 16; ++dx) img.set(long(side) - 60 + dx, long(m) + 14 * idx + 10 + dy, col);
  }
  return img;
}

inline void save_report(const EvalReport& r, const std::filesystem::path& json_path) {
  detail::write_file_atomic(json_path, to_json_value(r).dump(2) + "\n");
  auto png = json_path;
  png.replace_extension(".png");
  write_png(plot_report(r), png);
}

struct CvOptions {
  std::uint32_t k = 2;
  std::uint64_t seed = 1;
  double min_tnr = 0.95;
  Hyper hyper;
  std::function<void(const std::string&)> log;
};

/// Trains each candidate on all folds but one and scores the held-out fold, for every fold.
/// Rasters are read once; CNN encodings are shared between configs with the same input side.
inline EvalReport cross_validate(const DatasetManifest& manifest, std::span<const Candidate> candidates,
                                 const CvOptions& opt = {}) {
  if (candidates.empty()) throw InvalidArgument("cross_validate: no candidates");
  std::vector<int> labels;
  for (const auto& r : manifest.records()) labels.push_back(r.label);
  const auto folds = kfold_split(labels, opt.k, opt.seed);

  std::map<std::uint32_t, std::vector<std::vector<float>>> encoded;  // input_side -> per-record input
  bool need_features = false;
  for (const auto& c : candidates) {
    if (auto* cfg = std::get_if<ModelConfig>(&c.model))
      encoded[cfg->input_side];
    else
      need_features = true;
  }
  std::vector<std::vector<double>> features;
  for (std::size_t i = 0; i < manifest.size(); ++i) {
    const auto raster = read_raster(manifest.resolve(manifest.records()[i]));
    for (auto& [side, vec] : encoded) vec.push_back(encode_patch(raster.view(), side));
    if (need_features) {
      const auto f = texture_features(raster.view());
      features.emplace_back(f.begin(), f.end());
    }
  }
  if (opt.log) opt.log("encoded " + std::to_string(manifest.size()) + " samples");

  EvalReport report{opt.k, opt.seed, opt.min_tnr, {}};
  for (const auto& cand : candidates) {
    for (std::uint32_t f = 0; f < opt.k; ++f) {
      std::vector<bool> held(manifest.size(), false);
      for (auto i : folds[f]) held[i] = true;
      std::vector<double> scores;
      std::vector<int> test_labels;
      for (auto i : folds[f]) test_labels.push_back(labels[i]);

      if (auto* cfg = std::get_if<ModelConfig>(&cand.model)) {
        const auto& enc = encoded.at(cfg->input_side);
        std::vector<EncodedSample> train_set;
        for (std::size_t i = 0; i < manifest.size(); ++i)
          if (!held[i]) train_set.push_back({enc[i], labels[i]});
        const auto trained = train(*cfg, opt.hyper, train_set);
        Workspace<float> ws;
        for (auto i : folds[f]) {
          forward_sample(trained.model, enc[i].data(), ws);
          scores.push_back(ws.acts.back()[0]);
        }
      } else {
        std::vector<std::vector<double>> xs;
        std::vector<int> ys;
        for (std::size_t i = 0; i < manifest.size(); ++i)
          if (!held[i]) xs.push_back(features[i]), ys.push_back(labels[i]);
        const auto svm = train_svm(xs, ys, std::get<SvmHyper>(cand.model));
        for (auto i : folds[f]) scores.push_back(svm.score(features[i]));
      }
      auto curve = roc(scores, test_labels);
      const auto op = operating_point(curve, opt.min_tnr);
      if (opt.log)
        opt.log(cand.name + " fold " + std::to_string(f) + ": auc " + std::to_string(curve.auc) + ", tpr " +
                std::to_string(op.tpr) + " at tnr " + std::to_string(op.tnr));
      report.curves.push_back({cand.name, f, std::move(curve), op});
    }
  }
  return report;
}

}  // namespace volcdet
