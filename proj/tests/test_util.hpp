#pragma once

#include <cmath>
#include <filesystem>
#include <random>
#include <string>

#include "volcdet/volcdet.hpp"

namespace testutil {

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag = "t") {
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() /
            ("volcdet-" + tag + "-" + std::to_string(rd()) + std::to_string(rd()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& s) const { return path_ / s; }

 private:
  std::filesystem::path path_;
};

/// Untrained but valid default model (He init), saved to `path`.
inline void write_random_model(const std::filesystem::path& path, std::uint64_t seed = 7) {
  volcdet::ModelConfig cfg;
  cfg.seed = seed;
  volcdet::save_model(volcdet::make_network<float>(cfg), path);
}

/// Default-architecture model whose output is `p` for every input: all weights zero and the
/// final logits fixed by the last dense bias.
inline void write_constant_model(const std::filesystem::path& path, double p) {
  auto net = volcdet::make_network<float>(volcdet::ModelConfig{});
  for (auto& l : net.layers) {
    std::fill(l.weights.begin(), l.weights.end(), 0.0f);
    std::fill(l.bias.begin(), l.bias.end(), 0.0f);
  }
  auto& last = net.layers[net.layers.size() - 2];
  last.bias = {static_cast<float>(std::log(p / (1 - p))), 0.0f};
  volcdet::save_model(net, path);
}

/// A uniformly random wrapped raster.
inline volcdet::PhaseRaster noise_raster(std::uint32_t w, std::uint32_t h, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-10, 10);
  std::vector<float> v(std::size_t{w} * h);
  for (auto& x : v) x = volcdet::wrap_to_float(u(rng));
  return {w, h, std::move(v)};
}

/// Noise in the columns x < 300 and x >= width - 300, constant phase between. With the
/// default patch spec and a 1200 px width, tested patches form two separate groups.
inline volcdet::PhaseRaster two_blob_raster(std::uint32_t w = 1200, std::uint32_t h = 224, std::uint64_t seed = 1) {
  auto r = noise_raster(w, h, seed);
  auto v = r.window(0, 0, w, h);
  for (std::uint32_t y = 0; y < h; ++y)
    for (std::uint32_t x = 300; x + 300 < w; ++x) v[std::size_t{y} * w + x] = 0.25f;
  return {w, h, std::move(v)};
}

/// A data directory holding a small synthetic manifest.
inline volcdet::DataDir make_data_dir(const std::filesystem::path& root, std::size_t count = 16) {
  volcdet::DatasetOptions opt;
  opt.count = count;
  opt.master_seed = 3;
  volcdet::build_dataset(opt, root);
  volcdet::DataDir d(root);
  d.init();
  return d;
}

}  // namespace testutil
