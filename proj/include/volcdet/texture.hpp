#pragma once

// Hand-crafted texture features and a linear SVM baseline trained by
// subgradient descent on the regularized hinge loss.

#include <algorithm>
#include <array>
#include <cmath>
#include <complex>
#include <cstdint>
#include <numeric>
#include <random>
#include <span>
#include <vector>

#include "volcdet/error.hpp"
#include "volcdet/raster.hpp"
#include "volcdet/synthgen.hpp"

namespace volcdet {

inline constexpr std::size_t kTextureDims = 18;

/// [0..7]  gradient-magnitude histogram, bins of width pi/8, last bin open-ended (sums to 1)
/// [8..15] radially averaged power spectrum of exp(i*phi) in 8 equal bands over (0, 0.5]
///         cycles/pixel, corners folded into the last band (sums to 1)
/// [16]    mean gradient magnitude
/// [17]    standard deviation of gradient magnitude
using TextureFeatures = std::array<double, kTextureDims>;

inline TextureFeatures texture_features(const RasterView& patch) {
  TextureFeatures f{};
  const auto g = phase_gradient(patch);
  std::size_t valid = 0;
  double sum = 0, sq = 0;
  for (float m : g.magnitude) {
    if (is_masked(m)) continue;
    const auto bin = std::min<std::size_t>(7, static_cast<std::size_t>(m / (0.125 * kPi)));
    f[bin] += 1;
    ++valid;
    sum += m;
    sq += double(m) * m;
  }
  if (valid == 0) {
    f[0] = 1;
  } else {
    for (std::size_t i = 0; i < 8; ++i) f[i] /= static_cast<double>(valid);
    f[16] = sum / valid;
    f[17] = std::sqrt(std::max(0.0, sq / valid - f[16] * f[16]));
  }

  std::vector<std::complex<double>> z(patch.values.size());
  for (std::size_t i = 0; i < z.size(); ++i)
    z[i] = is_masked(patch.values[i]) ? 0.0 : std::polar(1.0, static_cast<double>(patch.values[i]));
  detail::forward_fft_2d(z, patch.width, patch.height);
  std::array<double, 8> power{};
  std::array<std::size_t, 8> count{};
  for (std::uint32_t y = 0; y < patch.height; ++y) {
    const double fy = fft_frequency(y, patch.height);
    for (std::uint32_t x = 0; x < patch.width; ++x) {
      const double fx = fft_frequency(x, patch.width);
      const double k = std::sqrt(fx * fx + fy * fy);
      if (k == 0) continue;
      const auto bin = std::min<std::size_t>(7, static_cast<std::size_t>(k / 0.5 * 8));
      power[bin] += std::norm(z[std::size_t{y} * patch.width + x]);
      ++count[bin];
    }
  }
  double total = 0;
  for (std::size_t b = 0; b < 8; ++b) {
    power[b] = count[b] ? power[b] / static_cast<double>(count[b]) : 0.0;
    total += power[b];
  }
  for (std::size_t b = 0; b < 8; ++b) f[8 + b] = total > 0 ? power[b] / total : 1.0 / 8;
  return f;
}

struct SvmHyper {
  double lambda = 1e-3;
  double eta0 = 0.1;  ///< initial step; step_t = eta0 / (1 + eta0 * lambda * t)
  std::uint32_t epochs = 50;
  std::uint64_t seed = 3;
};

/// Linear decision function on standardized features.
struct LinearSvm {
  std::vector<double> w;
  double b = 0;
  std::vector<double> mean;
  std::vector<double> scale;  ///< training-set standard deviation (1 where degenerate)

  std::size_t dims() const { return w.size(); }

  double score(std::span<const double> x) const {
    if (x.size() != w.size()) throw InvalidArgument("LinearSvm: feature dimension mismatch");
    double s = b;
    for (std::size_t i = 0; i < w.size(); ++i) s += w[i] * (x[i] - mean[i]) / scale[i];
    return s;
  }
};

/// True when the hinge term has a non-zero subgradient at a standardized sample, y in {-1, +1}.
inline bool hinge_active(std::span<const double> w, double b, std::span<const double> x, double y) {
  double m = b;
  for (std::size_t i = 0; i < w.size(); ++i) m += w[i] * x[i];
  return y * m < 1.0;
}

/// Minimizes mean hinge loss max(0, 1 - y(w.x + b)) + (lambda/2)|w|^2 by stochastic subgradient
/// descent. `labels` are sample labels (1 = deformation -> y = +1).
inline LinearSvm train_svm(std::span<const std::vector<double>> features, std::span<const int> labels,
                           const SvmHyper& hyper = {}) {
  if (features.size() != labels.size() || features.empty())
    throw InvalidArgument("train_svm: features and labels must be non-empty and equal length");
  const std::size_t n = features.size(), d = features[0].size();
  const auto pos = std::count(labels.begin(), labels.end(), 1);
  if (pos == 0 || static_cast<std::size_t>(pos) == n)
    throw InvalidArgument("train_svm: need at least one sample of each class");

  LinearSvm svm{std::vector<double>(d, 0.0), 0.0, std::vector<double>(d, 0.0), std::vector<double>(d, 0.0)};
  for (const auto& x : features) {
    if (x.size() != d) throw InvalidArgument("train_svm: ragged features");
    for (std::size_t i = 0; i < d; ++i) svm.mean[i] += x[i];
  }
  for (auto& m : svm.mean) m /= static_cast<double>(n);
  for (const auto& x : features)
    for (std::size_t i = 0; i < d; ++i) svm.scale[i] += (x[i] - svm.mean[i]) * (x[i] - svm.mean[i]);
  for (auto& s : svm.scale) s = s > 0 ? std::sqrt(s / static_cast<double>(n)) : 1.0;

  std::vector<std::vector<double>> z(n, std::vector<double>(d));
  for (std::size_t j = 0; j < n; ++j)
    for (std::size_t i = 0; i < d; ++i) z[j][i] = (features[j][i] - svm.mean[i]) / svm.scale[i];

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(hyper.seed);
  std::uint64_t t = 0;
  for (std::uint32_t e = 0; e < hyper.epochs; ++e) {
    std::shuffle(order.begin(), order.end(), rng);
    for (auto j : order) {
      const double eta = hyper.eta0 / (1.0 + hyper.eta0 * hyper.lambda * static_cast<double>(t++));
      const double y = labels[j] == 1 ? 1.0 : -1.0;
      const bool active = hinge_active(svm.w, svm.b, z[j], y);
      for (auto& w : svm.w) w *= 1.0 - eta * hyper.lambda;
      if (active) {
        for (std::size_t i = 0; i < d; ++i) svm.w[i] += eta * y * z[j][i];
        svm.b += eta * y;
      }
    }
  }
  return svm;
}

inline double svm_score(const LinearSvm& svm, const RasterView& patch) {
  const auto f = texture_features(patch);
  return svm.score(f);
}

}  // namespace volcdet
