#pragma once

// Gaussian-weighted averaging of patch probabilities into a per-pixel heatmap, and
// extraction of 8-connected above-threshold components. Both work on row streams so a
// gigapixel heatmap never has to be resident.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "volcdet/error.hpp"
#include "volcdet/raster.hpp"
#include "volcdet/tiler.hpp"

namespace volcdet {

/// w(i, j) = exp(-((i-c)^2 + (j-c)^2) / (2 sigma^2)), c = (P-1)/2, unnormalized. Row-major [P][P].
inline std::vector<double> gaussian_kernel(std::uint32_t patch_size, double sigma) {
  if (!(sigma > 0)) throw InvalidArgument("gaussian_kernel: sigma must be > 0");
  if (patch_size == 0) throw InvalidArgument("gaussian_kernel: patch_size must be > 0");
  const double c = (patch_size - 1) / 2.0;
  const double inv = 1.0 / (2.0 * sigma * sigma);
  std::vector<double> axis(patch_size);
  for (std::uint32_t i = 0; i < patch_size; ++i) axis[i] = (i - c) * (i - c);
  std::vector<double> w(std::size_t{patch_size} * patch_size);
  for (std::uint32_t i = 0; i < patch_size; ++i)
    for (std::uint32_t j = 0; j < patch_size; ++j) w[std::size_t{i} * patch_size + j] = std::exp(-(axis[i] + axis[j]) * inv);
  return w;
}

struct PatchProbability {
  PatchOrigin origin;
  double probability = 0;
};

/// Per-pixel merged probability; masked where no tested patch covers the pixel.
struct Heatmap {
  FloatGrid grid;

  std::uint32_t width() const { return grid.width; }
  std::uint32_t height() const { return grid.height; }
  RasterView view() const { return {grid.width, grid.height, grid.values}; }
};

/// Accumulates patches whose origins arrive in non-decreasing y and emits each heatmap row
/// once no later patch can touch it. Holds only patch_size rows of numerator/denominator.
class BandMerger {
 public:
  using RowSink = std::function<void(std::uint32_t y, std::span<const float> row)>;

  BandMerger(std::uint32_t width, std::uint32_t height, std::uint32_t patch_size, double sigma, RowSink sink)
      : width_(width), height_(height), p_(patch_size), kernel_(gaussian_kernel(patch_size, sigma)),
        num_(std::size_t{patch_size} * width, 0.0), den_(std::size_t{patch_size} * width, 0.0), row_(width),
        sink_(std::move(sink)) {
    if (width < patch_size || height < patch_size) throw InvalidArgument("merge: raster smaller than patch_size");
  }

  void add(PatchOrigin o, double p) {
    if (o.x > width_ - p_ || o.y > height_ - p_)
      throw InvalidArgument("merge: patch origin (" + std::to_string(o.x) + ", " + std::to_string(o.y) +
                            ") out of bounds");
    if (!(p >= 0 && p <= 1)) throw InvalidArgument("merge: probability outside [0, 1]");
    if (o.y < next_) throw InvalidArgument("merge: patches must arrive in non-decreasing y order");
    flush_until(o.y);
    for (std::uint32_t r = 0; r < p_; ++r) {
      const std::size_t slot = std::size_t{(o.y + r) % p_} * width_ + o.x;
      const double* w = kernel_.data() + std::size_t{r} * p_;
      double* num = num_.data() + slot;
      double* den = den_.data() + slot;
#pragma omp simd
      for (std::uint32_t c = 0; c < p_; ++c) {
        num[c] += p * w[c];
        den[c] += w[c];
      }
    }
  }

  /// Emits all remaining rows.
  void finish() { flush_until(height_); }

 private:
  void flush_until(std::uint32_t y) {
    for (; next_ < y; ++next_) {
      const std::size_t slot = std::size_t{next_ % p_} * width_;
      for (std::uint32_t x = 0; x < width_; ++x) {
        const double d = den_[slot + x];
        row_[x] = d > 0 ? static_cast<float>(std::clamp(num_[slot + x] / d, 0.0, 1.0)) : kMasked;
      }
      std::fill_n(num_.begin() + static_cast<std::ptrdiff_t>(slot), width_, 0.0);
      std::fill_n(den_.begin() + static_cast<std::ptrdiff_t>(slot), width_, 0.0);
      sink_(next_, row_);
    }
  }

  std::uint32_t width_, height_, p_;
  std::vector<double> kernel_;
  std::vector<double> num_, den_;
  std::vector<float> row_;
  RowSink sink_;
  std::uint32_t next_ = 0;
};

/// H(x) = sum p_i w_i(x) / sum w_i(x) over patches covering x. Patches are accumulated in
/// sorted (y, x, p) order regardless of input order.
inline Heatmap merge(std::vector<PatchProbability> probs, std::uint32_t width, std::uint32_t height,
                     std::uint32_t patch_size, double sigma) {
  std::sort(probs.begin(), probs.end(), [](const auto& a, const auto& b) {
    if (a.origin != b.origin) return a.origin < b.origin;
    return a.probability < b.probability;
  });
  Heatmap h{FloatGrid(width, height, kMasked)};
  BandMerger m(width, height, patch_size, sigma, [&](std::uint32_t y, std::span<const float> row) {
    std::copy(row.begin(), row.end(), h.grid.values.begin() + static_cast<std::ptrdiff_t>(y) * width);
  });
  for (const auto& p : probs) m.add(p.origin, p.probability);
  m.finish();
  return h;
}

// ---------------------------------------------------------------------------
// Detections

enum class DetectionStatus { pending, true_positive, false_positive };

inline const char* to_string(DetectionStatus s) {
  switch (s) {
    case DetectionStatus::pending: return "pending";
    case DetectionStatus::true_positive: return "true_positive";
    case DetectionStatus::false_positive: return "false_positive";
  }
  return "?";
}

inline DetectionStatus parse_status(const std::string& s) {
  if (s == "pending") return DetectionStatus::pending;
  if (s == "true_positive") return DetectionStatus::true_positive;
  if (s == "false_positive") return DetectionStatus::false_positive;
  throw InvalidArgument("unknown detection status \"" + s + "\"");
}

struct BBox {
  std::uint32_t x0 = 0, y0 = 0, x1 = 0, y1 = 0;  ///< inclusive
  bool contains(double x, double y) const { return x >= x0 && x <= x1 && y >= y0 && y <= y1; }
  bool operator==(const BBox&) const = default;
};

struct Detection {
  std::string id;
  double centroid_x = 0, centroid_y = 0;  ///< score-weighted mean pixel
  double peak_score = 0;
  std::uint64_t area_px = 0;
  BBox bbox;
  DetectionStatus status = DetectionStatus::pending;
  std::string run_id;

  bool operator==(const Detection&) const = default;
};

inline void to_json(nlohmann::json& j, const Detection& d) {
  j = {{"id", d.id},
       {"centroid", {d.centroid_x, d.centroid_y}},
       {"peak_score", d.peak_score},
       {"area_px", d.area_px},
       {"bbox", {d.bbox.x0, d.bbox.y0, d.bbox.x1, d.bbox.y1}},
       {"status", to_string(d.status)},
       {"run_id", d.run_id}};
}

inline void from_json(const nlohmann::json& j, Detection& d) {
  d.id = j.at("id").get<std::string>();
  d.centroid_x = j.at("centroid").at(0).get<double>();
  d.centroid_y = j.at("centroid").at(1).get<double>();
  d.peak_score = j.at("peak_score").get<double>();
  d.area_px = j.at("area_px").get<std::uint64_t>();
  const auto& b = j.at("bbox");
  d.bbox = {b.at(0).get<std::uint32_t>(), b.at(1).get<std::uint32_t>(), b.at(2).get<std::uint32_t>(),
            b.at(3).get<std::uint32_t>()};
  d.status = parse_status(j.at("status").get<std::string>());
  d.run_id = j.value("run_id", std::string{});
}

/// Single-pass 8-connected labeling of {v >= threshold} over rows fed top to bottom.
/// Memory is proportional to the number of above-threshold runs, not to the raster.
class ComponentExtractor {
 public:
  ComponentExtractor(std::uint32_t width, double threshold, std::uint64_t min_area_px)
      : width_(width), threshold_(threshold), min_area_(min_area_px) {}

  void push_row(std::uint32_t y, std::span<const float> row) {
    if (row.size() != width_) throw InvalidArgument("ComponentExtractor: row width mismatch");
    if (y != next_y_) throw InvalidArgument("ComponentExtractor: rows must be consecutive");
    ++next_y_;
    cur_.clear();
    for (std::uint32_t x = 0; x < width_;) {
      if (!(row[x] >= threshold_)) {
        ++x;
        continue;
      }
      const std::uint32_t x0 = x;
      Stats s;
      s.bbox = {x0, y, x0, y};
      while (x < width_ && row[x] >= threshold_) {
        const double v = row[x];
        s.area += 1;
        s.sum_v += v;
        s.sum_vx += v * x;
        s.sum_vy += v * y;
        s.sum_x += x;
        s.sum_y += y;
        s.peak = std::max(s.peak, v);
        ++x;
      }
      s.bbox.x1 = x - 1;
      const auto label = static_cast<std::uint32_t>(parent_.size());
      parent_.push_back(label);
      stats_.push_back(s);
      cur_.push_back({x0, x - 1, label});
    }
    // 8-connectivity: runs touch if their column ranges overlap after widening by one.
    std::size_t j = 0;
    for (const auto& c : cur_) {
      while (j < prev_.size() && prev_[j].x1 + 1 < c.x0) ++j;
      for (std::size_t k = j; k < prev_.size() && prev_[k].x0 <= c.x1 + 1; ++k) unite(c.label, prev_[k].label);
    }
    std::swap(prev_, cur_);
  }

  /// Components with area >= min_area, by descending peak then (centroid y, centroid x).
  std::vector<Detection> finish() {
    std::vector<Detection> out;
    for (std::uint32_t i = 0; i < parent_.size(); ++i) {
      if (find(i) != i) continue;
      const auto& s = stats_[i];
      if (s.area < min_area_) continue;
      Detection d;
      if (s.sum_v > 0) {
        d.centroid_x = s.sum_vx / s.sum_v;
        d.centroid_y = s.sum_vy / s.sum_v;
      } else {
        d.centroid_x = s.sum_x / static_cast<double>(s.area);
        d.centroid_y = s.sum_y / static_cast<double>(s.area);
      }
      d.peak_score = s.peak;
      d.area_px = s.area;
      d.bbox = s.bbox;
      out.push_back(d);
    }
    std::sort(out.begin(), out.end(), [](const Detection& a, const Detection& b) {
      if (a.peak_score != b.peak_score) return a.peak_score > b.peak_score;
      if (a.centroid_y != b.centroid_y) return a.centroid_y < b.centroid_y;
      return a.centroid_x < b.centroid_x;
    });
    for (std::size_t i = 0; i < out.size(); ++i) out[i].id = "d" + std::to_string(i);
    return out;
  }

 private:
  struct Run {
    std::uint32_t x0, x1, label;
  };
  struct Stats {
    std::uint64_t area = 0;
    double sum_v = 0, sum_vx = 0, sum_vy = 0, sum_x = 0, sum_y = 0;
    double peak = -1;
    BBox bbox;
  };

  std::uint32_t find(std::uint32_t a) {
    while (parent_[a] != a) a = parent_[a] = parent_[parent_[a]];
    return a;
  }

  void unite(std::uint32_t a, std::uint32_t b) {
    a = find(a);
    b = find(b);
    if (a == b) return;
    if (b < a) std::swap(a, b);
    parent_[b] = a;
    auto& s = stats_[a];
    const auto& t = stats_[b];
    s.area += t.area;
    s.sum_v += t.sum_v;
    s.sum_vx += t.sum_vx;
    s.sum_vy += t.sum_vy;
    s.sum_x += t.sum_x;
    s.sum_y += t.sum_y;
    s.peak = std::max(s.peak, t.peak);
    s.bbox = {std::min(s.bbox.x0, t.bbox.x0), std::min(s.bbox.y0, t.bbox.y0), std::max(s.bbox.x1, t.bbox.x1),
              std::max(s.bbox.y1, t.bbox.y1)};
  }

  std::uint32_t width_;
  double threshold_;
  std::uint64_t min_area_;
  std::uint32_t next_y_ = 0;
  std::vector<std::uint32_t> parent_;
  std::vector<Stats> stats_;
  std::vector<Run> prev_, cur_;
};

/// Detections get ids "d0", "d1", ... in output order; callers may prefix them.
inline std::vector<Detection> extract_detections(const Heatmap& heatmap, double threshold = 0.5,
                                                 std::uint64_t min_area_px = 100) {
  ComponentExtractor cc(heatmap.width(), threshold, min_area_px);
  const auto v = heatmap.view();
  for (std::uint32_t y = 0; y < heatmap.height(); ++y)
    cc.push_row(y, v.values.subspan(std::size_t{y} * heatmap.width(), heatmap.width()));
  return cc.finish();
}

}  // namespace volcdet
