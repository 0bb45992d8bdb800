#pragma once

// Central finite-difference verification of the analytic gradients, run in double. The
// five-point stencil keeps truncation error (O(eps^4)) far below the tolerance even where a
// gradient is small relative to the loss curvature.
//
// A perturbation that flips a ReLU mask or a pooling winner crosses a kink, and the plain
// difference quotient then mixes two linear regions. Such coordinates are detected through
// the activation-pattern hash and re-evaluated with the base pattern frozen (ReLU masks and
// pooling winners replayed), which is the same function on the current region and smooth
// across it. Both kinds of comparison are counted.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "volcdet/cnn.hpp"

namespace volcdet {

struct GradCheckReport {
  std::string what;
  double max_rel_error = 0;
  std::size_t checked = 0;
  std::size_t frozen = 0;  ///< comparisons that needed the frozen-pattern evaluation
  std::vector<std::pair<std::string, std::size_t>> checked_per_tensor;  ///< network checks only

  bool passed(double tol) const { return checked > 0 && max_rel_error < tol; }
};

inline double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-7});
}

namespace detail {

struct Probe {
  double value;
  std::uint64_t pattern;
};

/// Compares `analytic` against the five-point central difference with step eps,
/// (-f(x+2e) + 8f(x+e) - 8f(x-e) + f(x-2e)) / 12e, at a mutable coordinate. Falls back to
/// `frozen_f` when any probe changes the activation pattern.
template <class F, class G>
void fd_compare(GradCheckReport& rep, double& coord, double analytic, double eps, std::uint64_t base_pattern, F&& f,
                G&& frozen_f) {
  const double saved = coord;
  static constexpr double kOffsets[4] = {2, 1, -1, -2};
  static constexpr double kWeights[4] = {-1, 8, -8, 1};
  auto stencil = [&](auto&& fn, bool check) {
    double acc = 0;
    bool kink = false;
    for (int i = 0; i < 4; ++i) {
      coord = saved + kOffsets[i] * eps;
      const Probe p = fn();
      kink = kink || (check && p.pattern != base_pattern);
      acc += kWeights[i] * p.value;
    }
    coord = saved;
    return std::pair{acc / (12 * eps), kink};
  };
  auto [numeric, kink] = stencil(f, true);
  if (kink) {
    numeric = stencil(frozen_f, false).first;
    ++rep.frozen;
  }
  rep.max_rel_error = std::max(rep.max_rel_error, relative_error(analytic, numeric));
  ++rep.checked;
}

}  // namespace detail

/// Checks one layer in isolation against the scalar functional L = sum_s <r_s, layer(x_s)>
/// with random parameters, inputs and projections. Parameter and input gradients are both checked.
inline GradCheckReport check_layer(const LayerSpec& spec, Shape3 in, std::uint64_t seed, double eps = 1e-3,
                                   std::size_t batch = 4) {
  if (in.h != in.w) throw InvalidArgument("check_layer: input must be square");
  Network<double> net;
  net.config.channels_in = in.c;
  net.config.input_side = in.h;
  net.config.layers = {spec};
  const bool flat = in.h == 1 && spec.kind != LayerKind::conv && spec.kind != LayerKind::maxpool;
  net.layers.push_back(infer_layer<double>(spec, in, flat, to_string(spec.kind)));
  auto& layer = net.layers[0];

  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (auto& w : layer.weights) w = 0.5 * normal(rng);
  for (auto& b : layer.bias) b = 0.5 * normal(rng);
  std::vector<std::vector<double>> xs(batch, std::vector<double>(in.size())), rs(batch);
  for (std::size_t s = 0; s < batch; ++s) {
    for (auto& v : xs[s]) v = normal(rng);
    rs[s].resize(layer.out.size());
    for (auto& v : rs[s]) v = normal(rng);
  }

  Workspace<double> ws;
  ws.track_pattern = true;
  std::vector<Workspace<double>> base(batch);
  auto functional = [&]() {
    detail::Probe p{0, 0};
    for (std::size_t s = 0; s < batch; ++s) {
      forward_sample(net, xs[s].data(), ws);
      detail::mix_pattern(p.pattern, ws.pattern);
      for (std::size_t j = 0; j < rs[s].size(); ++j) p.value += rs[s][j] * ws.acts[1][j];
    }
    return p;
  };
  auto frozen = [&]() {
    detail::Probe p{0, 0};
    for (std::size_t s = 0; s < batch; ++s) {
      forward_sample(net, xs[s].data(), base[s]);
      for (std::size_t j = 0; j < rs[s].size(); ++j) p.value += rs[s][j] * base[s].acts[1][j];
    }
    return p;
  };

  auto g = Gradients<double>::zeros_like(net);
  std::vector<std::vector<double>> dx(batch);
  std::uint64_t pattern = 0;
  for (std::size_t s = 0; s < batch; ++s) {
    base[s].track_pattern = true;
    forward_sample(net, xs[s].data(), base[s]);
    detail::mix_pattern(pattern, base[s].pattern);
    base[s].grads[1].assign(rs[s].begin(), rs[s].end());
    layer_backward(net, 0, base[s], g);
    dx[s].assign(base[s].grads[0].begin(), base[s].grads[0].end());
    base[s].track_pattern = false;
    base[s].frozen = true;
  }

  GradCheckReport rep{std::string(to_string(spec.kind)), 0, 0, 0, {}};
  for (std::size_t j = 0; j < layer.weights.size(); ++j)
    detail::fd_compare(rep, layer.weights[j], g.weights[0][j], eps, pattern, functional, frozen);
  for (std::size_t j = 0; j < layer.bias.size(); ++j)
    detail::fd_compare(rep, layer.bias[j], g.bias[0][j], eps, pattern, functional, frozen);
  for (std::size_t s = 0; s < batch; ++s)
    for (std::size_t j = 0; j < xs[s].size(); ++j) detail::fd_compare(rep, xs[s][j], dx[s][j], eps, pattern, functional, frozen);
  return rep;
}

/// Checks d(loss)/d(theta) of a whole network (cross-entropy plus weight decay) on a batch of
/// random inputs. At most `max_per_tensor` coordinates of each parameter tensor are probed,
/// chosen by a seeded shuffle; smaller tensors are checked exhaustively.
inline GradCheckReport check_network(const ModelConfig& cfg, std::uint64_t seed, double eps = 1e-3,
                                     std::size_t batch = 4, std::size_t max_per_tensor = 512,
                                     double weight_decay = 1e-4) {
  auto net = make_network<double>(cfg);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> uni(-1.0, 1.0);
  std::normal_distribution<double> normal(0.0, 0.1);
  for (auto& l : net.layers)
    for (auto& b : l.bias) b = normal(rng);  // non-zero biases exercise the bias paths
  Tensor<double> x({batch, cfg.channels_in, cfg.input_side, cfg.input_side});
  for (auto& v : x.data) v = uni(rng);
  std::vector<int> labels(batch);
  for (std::size_t s = 0; s < batch; ++s) labels[s] = s % 2 == 0 ? kLabelDeformation : kLabelBackground;

  const auto analytic = loss_and_gradients(net, x, labels, weight_decay, true);

  auto make_loss = [&](std::vector<Workspace<double>>& wss) {
    return [&]() {
      detail::Probe p{0, 0};
      double ce = 0;
      for (std::size_t s = 0; s < batch; ++s) {
        forward_sample(net, x.row(s), wss[s]);
        detail::mix_pattern(p.pattern, wss[s].pattern);
        ce -= std::log(std::max(wss[s].acts.back()[class_index(labels[s])], kProbabilityFloor));
      }
      p.value = ce / static_cast<double>(batch) + weight_decay_term(net, weight_decay);
      return p;
    };
  };
  std::vector<Workspace<double>> live(batch), base(batch);
  for (auto& w : live) w.track_pattern = true;
  for (auto& w : base) w.track_pattern = true;
  make_loss(base)();
  for (auto& w : base) w.track_pattern = false, w.frozen = true;
  auto loss = make_loss(live);
  auto frozen = make_loss(base);

  GradCheckReport rep{"network", 0, 0, 0, {}};
  auto probe = [&](auto& params, const auto& grads, std::string name) {
    const auto before = rep.checked;
    std::vector<std::size_t> idx(params.size());
    for (std::size_t j = 0; j < idx.size(); ++j) idx[j] = j;
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(std::min(idx.size(), max_per_tensor));
    for (auto j : idx) detail::fd_compare(rep, params[j], grads[j], eps, analytic.pattern, loss, frozen);
    rep.checked_per_tensor.emplace_back(std::move(name), rep.checked - before);
  };
  for (std::size_t i = 0; i < net.layers.size(); ++i) {
    if (!net.layers[i].has_params()) continue;
    const auto tag = "layer" + std::to_string(i) + "." + to_string(net.layers[i].spec.kind);
    probe(net.layers[i].weights, analytic.grads.weights[i], tag + ".weights");
    probe(net.layers[i].bias, analytic.grads.bias[i], tag + ".bias");
  }
  return rep;
}

}  // namespace volcdet
