#pragma once

// Small convolutional classifier trained from scratch.
//
// Activations are laid out channel-major ([C][H][W]); convolutions are "valid"
// with stride 1, pooling is non-overlapping max with floor semantics. The scalar
// type is a template parameter: float for production, double for gradient checks.
// Class 0 is "deformation", class 1 is "background".

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "json.hpp"
#include "volcdet/error.hpp"
#include "volcdet/manifest.hpp"
#include "volcdet/raster.hpp"
#include "volcdet/tensor.hpp"

namespace volcdet {

enum class LayerKind : std::uint8_t { conv = 1, relu = 2, maxpool = 3, flatten = 4, dense = 5, softmax = 6 };

inline const char* to_string(LayerKind k) {
  switch (k) {
    case LayerKind::conv: return "conv";
    case LayerKind::relu: return "relu";
    case LayerKind::maxpool: return "maxpool";
    case LayerKind::flatten: return "flatten";
    case LayerKind::dense: return "dense";
    case LayerKind::softmax: return "softmax";
  }
  return "?";
}

struct LayerSpec {
  LayerKind kind = LayerKind::relu;
  std::uint32_t units = 0;   ///< conv: output channels; dense: output units
  std::uint32_t kernel = 0;  ///< conv: kernel side; maxpool: window

  static LayerSpec conv(std::uint32_t k, std::uint32_t out) { return {LayerKind::conv, out, k}; }
  static LayerSpec relu() { return {LayerKind::relu, 0, 0}; }
  static LayerSpec maxpool(std::uint32_t w) { return {LayerKind::maxpool, 0, w}; }
  static LayerSpec flatten() { return {LayerKind::flatten, 0, 0}; }
  static LayerSpec dense(std::uint32_t n) { return {LayerKind::dense, n, 0}; }
  static LayerSpec softmax() { return {LayerKind::softmax, 0, 0}; }

  bool operator==(const LayerSpec&) const = default;
};

inline std::vector<LayerSpec> default_layers() {
  using L = LayerSpec;
  return {L::conv(5, 8),  L::relu(), L::maxpool(2), L::conv(5, 16), L::relu(), L::maxpool(2), L::conv(3, 32),
          L::relu(),      L::maxpool(2), L::flatten(), L::dense(64), L::relu(), L::dense(2), L::softmax()};
}

struct ModelConfig {
  std::uint32_t input_side = 56;
  std::uint32_t channels_in = 2;
  std::vector<LayerSpec> layers = default_layers();
  std::uint64_t seed = 7;
};

inline void to_json(nlohmann::json& j, const LayerSpec& l) {
  j = {{"kind", to_string(l.kind)}};
  if (l.kind == LayerKind::conv) j["kernel"] = l.kernel, j["channels"] = l.units;
  if (l.kind == LayerKind::maxpool) j["window"] = l.kernel;
  if (l.kind == LayerKind::dense) j["units"] = l.units;
}

inline void from_json(const nlohmann::json& j, LayerSpec& l) {
  const auto k = j.at("kind").get<std::string>();
  if (k == "conv")
    l = LayerSpec::conv(j.at("kernel").get<std::uint32_t>(), j.at("channels").get<std::uint32_t>());
  else if (k == "relu")
    l = LayerSpec::relu();
  else if (k == "maxpool")
    l = LayerSpec::maxpool(j.at("window").get<std::uint32_t>());
  else if (k == "flatten")
    l = LayerSpec::flatten();
  else if (k == "dense")
    l = LayerSpec::dense(j.at("units").get<std::uint32_t>());
  else if (k == "softmax")
    l = LayerSpec::softmax();
  else
    throw InvalidArgument("unknown layer kind \"" + k + "\"");
}

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = {{"input_side", c.input_side}, {"channels_in", c.channels_in}, {"layers", c.layers}, {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  ModelConfig d;
  c.input_side = j.value("input_side", d.input_side);
  c.channels_in = j.value("channels_in", d.channels_in);
  c.layers = j.contains("layers") ? j.at("layers").get<std::vector<LayerSpec>>() : d.layers;
  c.seed = j.value("seed", d.seed);
}

/// Activation shape. Vectors are {n, 1, 1}.
struct Shape3 {
  std::uint32_t c = 0, h = 0, w = 0;
  std::size_t size() const { return std::size_t{c} * h * w; }
  bool operator==(const Shape3&) const = default;
};

/// Parameter and activation storage. A fixed base alignment keeps Eigen's and the
/// vectorizer's peeling identical from run to run, so training is bit-reproducible.
template <class T>
using AlignedVector = std::vector<T, Eigen::aligned_allocator<T>>;

template <class T>
struct Layer {
  LayerSpec spec;
  Shape3 in, out;
  AlignedVector<T> weights;  ///< conv [out][in][k][k]; dense [out][in]
  AlignedVector<T> bias;

  bool has_params() const { return spec.kind == LayerKind::conv || spec.kind == LayerKind::dense; }
  std::uint32_t fan_in() const {
    return spec.kind == LayerKind::conv ? in.c * spec.kernel * spec.kernel : static_cast<std::uint32_t>(in.size());
  }
};

template <class T>
struct Network {
  ModelConfig config;
  std::vector<Layer<T>> layers;

  Shape3 input_shape() const { return {config.channels_in, config.input_side, config.input_side}; }
  std::size_t input_size() const { return input_shape().size(); }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& l : layers) n += l.weights.size() + l.bias.size();
    return n;
  }

  template <class U>
  Network<U> cast() const {
    Network<U> out;
    out.config = config;
    for (const auto& l : layers)
      out.layers.push_back(Layer<U>{l.spec, l.in, l.out, std::vector<U>(l.weights.begin(), l.weights.end()),
                                    std::vector<U>(l.bias.begin(), l.bias.end())});
    return out;
  }
};

/// Output shape and zero-initialized parameters of one layer applied to `in`.
/// `flat` tells whether a flatten precedes it.
template <class T>
Layer<T> infer_layer(const LayerSpec& spec, Shape3 in, bool flat, const std::string& where) {
  Layer<T> l{spec, in, in, {}, {}};
  switch (spec.kind) {
    case LayerKind::conv:
      if (flat) throw InvalidArgument(where + ": conv after flatten");
      if (spec.kernel == 0 || spec.units == 0) throw InvalidArgument(where + ": zero kernel or channels");
      if (spec.kernel > in.h || spec.kernel > in.w) throw InvalidArgument(where + ": kernel larger than input");
      l.out = {spec.units, in.h - spec.kernel + 1, in.w - spec.kernel + 1};
      l.weights.assign(std::size_t{spec.units} * in.c * spec.kernel * spec.kernel, T{0});
      l.bias.assign(spec.units, T{0});
      break;
    case LayerKind::relu:
    case LayerKind::softmax:
      break;
    case LayerKind::maxpool:
      if (flat) throw InvalidArgument(where + ": maxpool after flatten");
      if (spec.kernel == 0 || spec.kernel > in.h || spec.kernel > in.w)
        throw InvalidArgument(where + ": bad pooling window");
      l.out = {in.c, in.h / spec.kernel, in.w / spec.kernel};
      break;
    case LayerKind::flatten:
      l.out = {static_cast<std::uint32_t>(in.size()), 1, 1};
      break;
    case LayerKind::dense:
      if (!flat) throw InvalidArgument(where + ": dense requires a preceding flatten");
      if (spec.units == 0) throw InvalidArgument(where + ": zero units");
      l.out = {spec.units, 1, 1};
      l.weights.assign(std::size_t{spec.units} * in.size(), T{0});
      l.bias.assign(spec.units, T{0});
      break;
    default:
      throw InvalidArgument(where + ": unknown layer kind");
  }
  return l;
}

/// Shape inference plus zero-initialized parameters.
template <class T>
Network<T> build_network(const ModelConfig& cfg) {
  if (cfg.layers.empty()) throw InvalidArgument("ModelConfig: no layers");
  Network<T> net;
  net.config = cfg;
  Shape3 s{cfg.channels_in, cfg.input_side, cfg.input_side};
  if (s.size() == 0) throw InvalidArgument("ModelConfig: empty input");
  bool flat = false;
  for (std::size_t i = 0; i < cfg.layers.size(); ++i) {
    const auto& spec = cfg.layers[i];
    const std::string where = "layer " + std::to_string(i) + " (" + to_string(spec.kind) + ")";
    if (spec.kind == LayerKind::softmax && i + 1 != cfg.layers.size())
      throw InvalidArgument(where + ": softmax must be the final layer");
    auto l = infer_layer<T>(spec, s, flat, where);
    flat = flat || spec.kind == LayerKind::flatten;
    s = l.out;
    net.layers.push_back(std::move(l));
  }
  if (cfg.layers.back().kind != LayerKind::softmax || s.size() != 2)
    throw InvalidArgument("ModelConfig: network must end in a softmax over exactly 2 classes");
  return net;
}

/// He initialization: weights ~ N(0, sqrt(2 / fan_in)), biases zero.
template <class T>
void init_he(Network<T>& net, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  for (auto& l : net.layers) {
    if (!l.has_params()) continue;
    std::normal_distribution<double> normal(0.0, std::sqrt(2.0 / l.fan_in()));
    for (auto& w : l.weights) w = static_cast<T>(normal(rng));
    std::fill(l.bias.begin(), l.bias.end(), T{0});
  }
}

template <class T>
Network<T> make_network(const ModelConfig& cfg) {
  auto net = build_network<T>(cfg);
  init_he(net, cfg.seed);
  return net;
}

/// Per-parameter gradients, same layout as the network's parameters.
template <class T>
struct Gradients {
  std::vector<AlignedVector<T>> weights;
  std::vector<AlignedVector<T>> bias;

  static Gradients zeros_like(const Network<T>& net) {
    Gradients g;
    for (const auto& l : net.layers) {
      g.weights.emplace_back(l.weights.size(), T{0});
      g.bias.emplace_back(l.bias.size(), T{0});
    }
    return g;
  }
};

/// Scratch buffers for one sample's forward/backward pass.
template <class T>
struct Workspace {
  std::vector<AlignedVector<T>> acts;   ///< acts[0] = input, acts[i+1] = output of layer i
  std::vector<AlignedVector<T>> grads;  ///< d loss / d acts[i]
  std::vector<std::vector<std::uint32_t>> argmax;  ///< maxpool winners, per layer
  std::vector<AlignedVector<T>> cols;   ///< im2col buffers, per conv layer
  AlignedVector<T> dcols;
  std::uint64_t pattern = 0;             ///< hash of ReLU masks and pooling winners
  bool track_pattern = false;            ///< also records ReLU masks
  bool frozen = false;                   ///< replay recorded ReLU masks and pooling winners
  std::vector<std::vector<std::uint8_t>> relu_mask;

  void prepare(const Network<T>& net) {
    const std::size_t n = net.layers.size();
    acts.resize(n + 1);
    grads.resize(n + 1);
    argmax.resize(n);
    cols.resize(n);
    relu_mask.resize(n);
    acts[0].resize(net.input_size());
    grads[0].resize(net.input_size());
    for (std::size_t i = 0; i < n; ++i) {
      acts[i + 1].resize(net.layers[i].out.size());
      grads[i + 1].resize(net.layers[i].out.size());
      if (net.layers[i].spec.kind == LayerKind::maxpool) argmax[i].resize(net.layers[i].out.size());
    }
  }
};

namespace detail {

inline void mix_pattern(std::uint64_t& h, std::uint64_t v) {
  h ^= v + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2);
}

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Unfolds the input into a [C*k*k] x [oh*ow] column matrix.
template <class T>
void im2col(const Layer<T>& l, const T* in, T* cols) {
  const auto k = l.spec.kernel;
  const auto oh = l.out.h, ow = l.out.w, iw = l.in.w;
  for (std::uint32_t c = 0; c < l.in.c; ++c)
    for (std::uint32_t ky = 0; ky < k; ++ky)
      for (std::uint32_t kx = 0; kx < k; ++kx) {
        T* dst = cols + ((std::size_t{c} * k + ky) * k + kx) * oh * ow;
        for (std::uint32_t y = 0; y < oh; ++y) {
          const T* src = in + (std::size_t{c} * l.in.h + y + ky) * iw + kx;
          std::copy(src, src + ow, dst + std::size_t{y} * ow);
        }
      }
}

template <class T>
void col2im_add(const Layer<T>& l, const T* cols, T* din) {
  const auto k = l.spec.kernel;
  const auto oh = l.out.h, ow = l.out.w, iw = l.in.w;
  std::fill(din, din + l.in.size(), T{0});
  for (std::uint32_t c = 0; c < l.in.c; ++c)
    for (std::uint32_t ky = 0; ky < k; ++ky)
      for (std::uint32_t kx = 0; kx < k; ++kx) {
        const T* src = cols + ((std::size_t{c} * k + ky) * k + kx) * oh * ow;
        for (std::uint32_t y = 0; y < oh; ++y) {
          T* d = din + (std::size_t{c} * l.in.h + y + ky) * iw + kx;
          const T* s = src + std::size_t{y} * ow;
#pragma omp simd
          for (std::uint32_t x = 0; x < ow; ++x) d[x] += s[x];
        }
      }
}

template <class T>
std::size_t col_rows(const Layer<T>& l) {
  return std::size_t{l.in.c} * l.spec.kernel * l.spec.kernel;
}

/// out[O x N] = W[O x K] * cols[K x N] + b.
template <class T>
void conv_forward(const Layer<T>& l, const T* in, T* out, AlignedVector<T>& cols) {
  const std::size_t K = col_rows(l), N = std::size_t{l.out.h} * l.out.w;
  cols.resize(K * N);
  im2col(l, in, cols.data());
  Eigen::Map<const RowMat<T>> W(l.weights.data(), l.out.c, K);
  Eigen::Map<const RowMat<T>> X(cols.data(), K, N);
  Eigen::Map<RowMat<T>> Y(out, l.out.c, N);
  Y.noalias() = W * X;
  for (std::uint32_t o = 0; o < l.out.c; ++o) Y.row(o).array() += l.bias[o];
}

/// dW += dY * cols^T, db += row sums of dY, din = col2im(W^T * dY).
template <class T>
void conv_backward(const Layer<T>& l, const AlignedVector<T>& cols, const T* dout, T* din, T* dw, T* db,
                   AlignedVector<T>& dcols) {
  const std::size_t K = col_rows(l), N = std::size_t{l.out.h} * l.out.w;
  Eigen::Map<const RowMat<T>> X(cols.data(), K, N);
  Eigen::Map<const RowMat<T>> dY(dout, l.out.c, N);
  Eigen::Map<RowMat<T>> dW(dw, l.out.c, K);
  dW.noalias() += dY * X.transpose();
  for (std::uint32_t o = 0; o < l.out.c; ++o) db[o] += dY.row(o).sum();
  if (din) {
    dcols.resize(K * N);
    Eigen::Map<const RowMat<T>> W(l.weights.data(), l.out.c, K);
    Eigen::Map<RowMat<T>> dX(dcols.data(), K, N);
    dX.noalias() = W.transpose() * dY;
    col2im_add(l, dcols.data(), din);
  }
}

template <class T>
void maxpool_forward(const Layer<T>& l, const T* in, T* out, std::uint32_t* arg) {
  const auto k = l.spec.kernel;
  for (std::uint32_t c = 0; c < l.out.c; ++c)
    for (std::uint32_t y = 0; y < l.out.h; ++y)
      for (std::uint32_t x = 0; x < l.out.w; ++x) {
        std::uint32_t best = (c * l.in.h + y * k) * l.in.w + x * k;
        for (std::uint32_t dy = 0; dy < k; ++dy)
          for (std::uint32_t dx = 0; dx < k; ++dx) {
            const std::uint32_t idx = (c * l.in.h + y * k + dy) * l.in.w + x * k + dx;
            if (in[idx] > in[best]) best = idx;
          }
        const std::size_t o = (std::size_t{c} * l.out.h + y) * l.out.w + x;
        out[o] = in[best];
        arg[o] = best;
      }
}

template <class T>
void dense_forward(const Layer<T>& l, const T* in, T* out) {
  const std::size_t n = l.in.size();
  for (std::uint32_t o = 0; o < l.out.c; ++o) {
    const T* w = l.weights.data() + o * n;
    T acc = 0;
#pragma omp simd reduction(+ : acc)
    for (std::size_t i = 0; i < n; ++i) acc += w[i] * in[i];
    out[o] = acc + l.bias[o];
  }
}

template <class T>
void dense_backward(const Layer<T>& l, const T* in, const T* dout, T* din, T* dw, T* db) {
  const std::size_t n = l.in.size();
  if (din) std::fill(din, din + n, T{0});
  for (std::uint32_t o = 0; o < l.out.c; ++o) {
    const T g = dout[o];
    const T* w = l.weights.data() + o * n;
    T* gw = dw + o * n;
    db[o] += g;
#pragma omp simd
    for (std::size_t i = 0; i < n; ++i) gw[i] += g * in[i];
    if (din) {
#pragma omp simd
      for (std::size_t i = 0; i < n; ++i) din[i] += g * w[i];
    }
  }
}

}  // namespace detail

/// Forward pass of layer `i` on workspace activations.
template <class T>
void layer_forward(const Network<T>& net, std::size_t i, Workspace<T>& ws) {
  const auto& l = net.layers[i];
  const T* in = ws.acts[i].data();
  T* out = ws.acts[i + 1].data();
  const std::size_t n = l.in.size();
  switch (l.spec.kind) {
    case LayerKind::conv: detail::conv_forward(l, in, out, ws.cols[i]); break;
    case LayerKind::relu:
      if (ws.frozen) {
        for (std::size_t j = 0; j < n; ++j) out[j] = ws.relu_mask[i][j] ? in[j] : T{0};
        break;
      }
      for (std::size_t j = 0; j < n; ++j) {
        out[j] = in[j] > T{0} ? in[j] : T{0};
      }
      if (ws.track_pattern) {
        ws.relu_mask[i].resize(n);
        for (std::size_t j = 0; j < n; ++j) {
          ws.relu_mask[i][j] = in[j] > T{0};
          if (in[j] > T{0}) detail::mix_pattern(ws.pattern, i * 1000003 + j);
        }
      }
      break;
    case LayerKind::maxpool:
      if (ws.frozen) {
        for (std::size_t j = 0; j < ws.argmax[i].size(); ++j) out[j] = in[ws.argmax[i][j]];
        break;
      }
      detail::maxpool_forward(l, in, out, ws.argmax[i].data());
      if (ws.track_pattern)
        for (auto a : ws.argmax[i]) detail::mix_pattern(ws.pattern, a);
      break;
    case LayerKind::flatten: std::copy(in, in + n, out); break;
    case LayerKind::dense: detail::dense_forward(l, in, out); break;
    case LayerKind::softmax: {
      const T mx = *std::max_element(in, in + n);
      T sum = 0;
      for (std::size_t j = 0; j < n; ++j) sum += (out[j] = std::exp(in[j] - mx));
      for (std::size_t j = 0; j < n; ++j) out[j] /= sum;
      break;
    }
  }
}

/// Backward pass of layer `i`: reads ws.grads[i+1], writes ws.grads[i] (unless `skip_input_grad`)
/// and accumulates parameter gradients into `g`.
template <class T>
void layer_backward(const Network<T>& net, std::size_t i, Workspace<T>& ws, Gradients<T>& g,
                    bool skip_input_grad = false) {
  const auto& l = net.layers[i];
  const T* in = ws.acts[i].data();
  const T* out = ws.acts[i + 1].data();
  const T* dout = ws.grads[i + 1].data();
  T* din = skip_input_grad ? nullptr : ws.grads[i].data();
  const std::size_t n = l.in.size();
  switch (l.spec.kind) {
    case LayerKind::conv:
      detail::conv_backward(l, ws.cols[i], dout, din, g.weights[i].data(), g.bias[i].data(), ws.dcols);
      break;
    case LayerKind::dense: detail::dense_backward(l, in, dout, din, g.weights[i].data(), g.bias[i].data()); break;
    case LayerKind::relu:
      if (din)
        for (std::size_t j = 0; j < n; ++j) din[j] = in[j] > T{0} ? dout[j] : T{0};
      break;
    case LayerKind::maxpool:
      if (din) {
        std::fill(din, din + n, T{0});
        const auto& arg = ws.argmax[i];
        for (std::size_t j = 0; j < arg.size(); ++j) din[arg[j]] += dout[j];
      }
      break;
    case LayerKind::flatten:
      if (din) std::copy(dout, dout + n, din);
      break;
    case LayerKind::softmax:
      if (din) {
        T dot = 0;
        for (std::size_t j = 0; j < n; ++j) dot += dout[j] * out[j];
        for (std::size_t j = 0; j < n; ++j) din[j] = out[j] * (dout[j] - dot);
      }
      break;
  }
}

/// Runs one sample through the network; probabilities end up in ws.acts.back().
template <class T>
void forward_sample(const Network<T>& net, const T* input, Workspace<T>& ws) {
  ws.prepare(net);
  ws.pattern = 0;
  std::copy(input, input + net.input_size(), ws.acts[0].begin());
  for (std::size_t i = 0; i < net.layers.size(); ++i) layer_forward(net, i, ws);
}

inline int class_index(int label) { return label == kLabelDeformation ? 0 : 1; }

inline constexpr double kProbabilityFloor = 1e-12;

template <class T>
void check_batch(const Network<T>& net, const Tensor<T>& batch) {
  const std::vector<std::size_t> expected{batch.shape.empty() ? 0 : batch.shape[0], net.config.channels_in,
                                          net.config.input_side, net.config.input_side};
  if (batch.shape != expected)
    throw InvalidArgument("forward: batch shape " + shape_string(batch.shape) + " does not match model input " +
                          shape_string(expected));
}

/// Class probabilities, shape [N, 2]. Column 0 is the deformation class.
template <class T>
Tensor<T> forward(const Network<T>& net, const Tensor<T>& batch) {
  check_batch(net, batch);
  const std::size_t n = batch.shape[0];
  Tensor<T> out({n, 2});
  Workspace<T> ws;
  for (std::size_t s = 0; s < n; ++s) {
    forward_sample(net, batch.row(s), ws);
    std::copy(ws.acts.back().begin(), ws.acts.back().end(), out.row(s));
  }
  return out;
}

template <class T>
T weight_decay_term(const Network<T>& net, double weight_decay) {
  T sq = 0;
  for (const auto& l : net.layers)
    for (T w : l.weights) sq += w * w;
  return static_cast<T>(weight_decay / 2) * sq;
}

template <class T>
struct LossAndGradients {
  T loss = 0;
  Gradients<T> grads;
  std::uint64_t pattern = 0;  ///< combined activation pattern of the batch (for kink detection)
};

/// Mean cross-entropy over the batch plus (weight_decay/2) * sum of squared weights.
/// `labels` are sample labels (1 = deformation).
template <class T>
LossAndGradients<T> loss_and_gradients(const Network<T>& net, const Tensor<T>& batch, std::span<const int> labels,
                                       double weight_decay, bool track_pattern = false) {
  check_batch(net, batch);
  const std::size_t n = batch.shape[0];
  if (labels.size() != n) throw InvalidArgument("loss_and_gradients: labels/batch size mismatch");
  LossAndGradients<T> r{0, Gradients<T>::zeros_like(net), 0};
  Workspace<T> ws;
  ws.track_pattern = track_pattern;
  const T inv_n = T{1} / static_cast<T>(n);
  T ce = 0;
  for (std::size_t s = 0; s < n; ++s) {
    if (labels[s] != 0 && labels[s] != 1) throw InvalidArgument("loss_and_gradients: labels must be 0 or 1");
    forward_sample(net, batch.row(s), ws);
    detail::mix_pattern(r.pattern, ws.pattern);
    const auto& p = ws.acts.back();
    const int cls = class_index(labels[s]);
    const T pc = p[cls];
    ce -= std::log(std::max(pc, static_cast<T>(kProbabilityFloor)));
    auto& dp = ws.grads.back();
    std::fill(dp.begin(), dp.end(), T{0});
    if (pc >= static_cast<T>(kProbabilityFloor)) dp[cls] = -inv_n / pc;
    for (std::size_t i = net.layers.size(); i-- > 0;) layer_backward(net, i, ws, r.grads, i == 0);
  }
  r.loss = ce * inv_n + weight_decay_term(net, weight_decay);
  const T wd = static_cast<T>(weight_decay);
  for (std::size_t i = 0; i < net.layers.size(); ++i)
    for (std::size_t j = 0; j < net.layers[i].weights.size(); ++j) r.grads.weights[i][j] += wd * net.layers[i].weights[j];
  return r;
}

// ---------------------------------------------------------------------------
// Input encoding

/// cos/sin of the phase (masked -> 0 in both), each average-pooled by patch_side / input_side.
/// Output layout [2][input_side][input_side].
inline std::vector<float> encode_patch(const RasterView& patch, std::uint32_t input_side) {
  if (patch.width != patch.height) throw InvalidArgument("encode_patch: patch must be square");
  if (input_side == 0 || patch.width % input_side != 0)
    throw InvalidArgument("encode_patch: patch size " + std::to_string(patch.width) + " not divisible by input_side " +
                          std::to_string(input_side));
  const std::uint32_t f = patch.width / input_side;
  const std::size_t plane = std::size_t{input_side} * input_side;
  std::vector<double> acc(2 * plane, 0.0);
  for (std::uint32_t y = 0; y < patch.height; ++y)
    for (std::uint32_t x = 0; x < patch.width; ++x) {
      const float v = patch.at(x, y);
      if (is_masked(v)) continue;
      const std::size_t o = std::size_t{y / f} * input_side + x / f;
      acc[o] += std::cos(static_cast<double>(v));
      acc[plane + o] += std::sin(static_cast<double>(v));
    }
  std::vector<float> out(2 * plane);
  const double inv = 1.0 / (double(f) * f);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<float>(acc[i] * inv);
  return out;
}

inline Tensor<float> encode_batch(std::span<const RasterView> patches, std::uint32_t input_side) {
  Tensor<float> t({patches.size(), 2, input_side, input_side});
  for (std::size_t i = 0; i < patches.size(); ++i) {
    const auto e = encode_patch(patches[i], input_side);
    std::copy(e.begin(), e.end(), t.row(i));
  }
  return t;
}

/// Probability of the deformation class for one patch.
inline double predict_patch(const Network<float>& net, const RasterView& patch) {
  const auto e = encode_patch(patch, net.config.input_side);
  Workspace<float> ws;
  forward_sample(net, e.data(), ws);
  return std::clamp(static_cast<double>(ws.acts.back()[0]), 0.0, 1.0);
}

// ---------------------------------------------------------------------------
// Training

struct Hyper {
  double learning_rate = 0.01;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  std::uint32_t batch_size = 32;
  std::uint32_t epochs = 20;
  std::uint64_t seed = 11;

  void validate() const {
    if (!(learning_rate > 0)) throw InvalidArgument("Hyper: learning_rate must be > 0");
    if (!(momentum >= 0 && momentum < 1)) throw InvalidArgument("Hyper: momentum must be in [0, 1)");
    if (!(weight_decay >= 0)) throw InvalidArgument("Hyper: weight_decay must be >= 0");
    if (batch_size == 0) throw InvalidArgument("Hyper: batch_size must be > 0");
  }
};

inline void to_json(nlohmann::json& j, const Hyper& h) {
  j = {{"learning_rate", h.learning_rate}, {"momentum", h.momentum}, {"weight_decay", h.weight_decay},
       {"batch_size", h.batch_size},       {"epochs", h.epochs},     {"seed", h.seed}};
}

inline void from_json(const nlohmann::json& j, Hyper& h) {
  Hyper d;
  h.learning_rate = j.value("learning_rate", d.learning_rate);
  h.momentum = j.value("momentum", d.momentum);
  h.weight_decay = j.value("weight_decay", d.weight_decay);
  h.batch_size = j.value("batch_size", d.batch_size);
  h.epochs = j.value("epochs", d.epochs);
  h.seed = j.value("seed", d.seed);
}

/// An encoded input ([2][S][S]) with its sample label.
struct EncodedSample {
  std::vector<float> input;
  int label = 0;
};

struct TrainResult {
  Network<float> model;
  std::vector<double> epoch_loss;  ///< mean training loss of each epoch
};

using EpochCallback = std::function<void(std::uint32_t epoch, double mean_loss)>;

/// Mini-batch SGD with momentum from a fresh He initialization (seeded by config.seed);
/// sample order is a per-epoch seeded permutation (hyper.seed).
inline TrainResult train(const ModelConfig& cfg, const Hyper& hyper, std::span<const EncodedSample> samples,
                         const EpochCallback& on_epoch = {}) {
  hyper.validate();
  std::size_t pos = 0;
  for (const auto& s : samples) pos += s.label == kLabelDeformation;
  if (pos == 0 || pos == samples.size())
    throw InvalidArgument("train: need at least one sample of each class (got " + std::to_string(pos) + " of " +
                          std::to_string(samples.size()) + " positive)");
  TrainResult result{make_network<float>(cfg), {}};
  auto& net = result.model;
  for (const auto& s : samples)
    if (s.input.size() != net.input_size()) throw InvalidArgument("train: encoded sample size mismatch");

  auto velocity = Gradients<float>::zeros_like(net);
  std::vector<std::size_t> order(samples.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(hyper.seed);
  const auto lr = static_cast<float>(hyper.learning_rate);
  const auto mu = static_cast<float>(hyper.momentum);

  Tensor<float> batch;
  std::vector<int> labels;
  for (std::uint32_t epoch = 0; epoch < hyper.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double total = 0;
    for (std::size_t start = 0; start < order.size(); start += hyper.batch_size) {
      const std::size_t n = std::min<std::size_t>(hyper.batch_size, order.size() - start);
      batch = Tensor<float>({n, cfg.channels_in, cfg.input_side, cfg.input_side});
      labels.resize(n);
      for (std::size_t b = 0; b < n; ++b) {
        const auto& s = samples[order[start + b]];
        std::copy(s.input.begin(), s.input.end(), batch.row(b));
        labels[b] = s.label;
      }
      const auto lg = loss_and_gradients(net, batch, labels, hyper.weight_decay);
      total += static_cast<double>(lg.loss) * n;
      for (std::size_t i = 0; i < net.layers.size(); ++i) {
        auto& l = net.layers[i];
        for (std::size_t j = 0; j < l.weights.size(); ++j) {
          velocity.weights[i][j] = mu * velocity.weights[i][j] - lr * lg.grads.weights[i][j];
          l.weights[j] += velocity.weights[i][j];
        }
        for (std::size_t j = 0; j < l.bias.size(); ++j) {
          velocity.bias[i][j] = mu * velocity.bias[i][j] - lr * lg.grads.bias[i][j];
          l.bias[j] += velocity.bias[i][j];
        }
      }
    }
    result.epoch_loss.push_back(total / static_cast<double>(order.size()));
    if (on_epoch) on_epoch(epoch, result.epoch_loss.back());
  }
  return result;
}

/// Loads and encodes the manifest records selected by `keep` (all when empty).
inline std::vector<EncodedSample> encode_manifest(const DatasetManifest& manifest, std::uint32_t input_side,
                                                  const std::function<bool(std::size_t)>& keep = {}) {
  std::vector<EncodedSample> out;
  for (std::size_t i = 0; i < manifest.size(); ++i) {
    if (keep && !keep(i)) continue;
    const auto& r = manifest.records()[i];
    const auto raster = read_raster(manifest.resolve(r));
    if (raster.width() != raster.height())
      throw InvalidArgument("encode_manifest: sample " + r.id + " is not square");
    out.push_back({encode_patch(raster.view(), input_side), r.label});
  }
  return out;
}

}  // namespace volcdet
