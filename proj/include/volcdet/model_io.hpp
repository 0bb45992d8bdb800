#pragma once

// MNV1 model container (little-endian):
//
//   "MNV1" | u32 version (=1) | u32 layer_count
//   per layer: u8 tag | u32 rank | u32 extents[rank] | f32 payload (weights, then biases)
//   u64 checksum = sum of all f32 payload bytes, mod 2^64
//
// Tags 1..6 are the CNN layers (see LayerKind); tag 7 is a linear SVM. Extents:
//   conv    [out, in, k, k]           payload out*in*k*k + out
//   relu    input activation shape    ([c, h, w] or [n])
//   maxpool [c, h, w, window]
//   flatten [c, h, w]
//   dense   [out, in]                 payload out*in + out
//   softmax [n]
//   svm     [dims]                    payload w[dims], b, mean[dims], scale[dims]

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "volcdet/cnn.hpp"
#include "volcdet/detail/io.hpp"
#include "volcdet/error.hpp"
#include "volcdet/texture.hpp"

namespace volcdet {

inline constexpr std::array<char, 4> kModelMagic{'M', 'N', 'V', '1'};
inline constexpr std::uint32_t kModelVersion = 1;
inline constexpr std::uint8_t kSvmTag = 7;

namespace detail {

inline std::vector<std::uint32_t> activation_extents(const Shape3& s) {
  if (s.h == 1 && s.w == 1) return {s.c};
  return {s.c, s.h, s.w};
}

class ModelWriter {
 public:
  ModelWriter(std::uint32_t layers) : bytes_(kModelMagic.begin(), kModelMagic.end()) {
    put_u32(bytes_, kModelVersion);
    put_u32(bytes_, layers);
  }

  void layer(std::uint8_t tag, const std::vector<std::uint32_t>& extents) {
    put_u8(bytes_, tag);
    put_u32(bytes_, static_cast<std::uint32_t>(extents.size()));
    for (auto e : extents) put_u32(bytes_, e);
  }

  void payload(std::span<const float> values) {
    const auto start = bytes_.size();
    for (float v : values) put_f32(bytes_, v);
    for (auto i = start; i < bytes_.size(); ++i) checksum_ += bytes_[i];
  }

  std::vector<std::uint8_t> finish() {
    put_u64(bytes_, checksum_);
    return std::move(bytes_);
  }

 private:
  std::vector<std::uint8_t> bytes_;
  std::uint64_t checksum_ = 0;
};

class ModelReader {
 public:
  explicit ModelReader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {
    if (bytes_.size() < 12) throw ParseError("header", "file shorter than 12 bytes");
    if (!std::equal(kModelMagic.begin(), kModelMagic.end(), bytes_.begin()))
      throw ParseError("magic", "expected \"MNV1\"");
    pos_ = 4;
    const auto version = u32("version");
    if (version != kModelVersion) throw ParseError("version", "unsupported format version " + std::to_string(version));
  }

  std::uint8_t u8(const char* what) {
    need(1, what);
    return bytes_[pos_++];
  }

  std::uint32_t u32(const char* what) {
    need(4, what);
    const auto v = get_u32(&bytes_[pos_]);
    pos_ += 4;
    return v;
  }

  std::vector<std::uint32_t> extents() {
    const auto rank = u32("shape table");
    if (rank > 8) throw ParseError("shape table", "rank " + std::to_string(rank) + " too large");
    std::vector<std::uint32_t> e(rank);
    for (auto& x : e) x = u32("shape table");
    return e;
  }

  std::vector<float> payload(std::uint64_t count) {
    // Leave room for the checksum; never allocate beyond what the file can hold.
    if (count > (bytes_.size() - pos_) / 4)
      throw ParseError("shape table", "declares " + std::to_string(count) + " parameters but only " +
                                          std::to_string(bytes_.size() - pos_) + " bytes remain");
    std::vector<float> v(count);
    for (std::uint64_t i = 0; i < count * 4; ++i) checksum_ += bytes_[pos_ + i];
    decode_f32(&bytes_[pos_], v);
    pos_ += count * 4;
    return v;
  }

  void finish() {
    need(8, "checksum");
    const auto stored = get_u64(&bytes_[pos_]);
    pos_ += 8;
    if (pos_ != bytes_.size())
      throw ParseError("payload length", std::to_string(bytes_.size() - pos_) + " trailing bytes after checksum");
    if (stored != checksum_) throw ParseError("checksum", "stored " + hex64(stored) + ", computed " + hex64(checksum_));
  }

 private:
  void need(std::size_t n, const char* what) {
    if (bytes_.size() - pos_ < n) throw ParseError(what, "unexpected end of file at byte " + std::to_string(pos_));
  }

  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
  std::uint64_t checksum_ = 0;
};

inline std::uint64_t product(const std::vector<std::uint32_t>& e) {
  std::uint64_t p = 1;
  for (auto x : e) p *= x;
  return p;
}

}  // namespace detail

inline std::vector<std::uint8_t> encode_model(const Network<float>& net) {
  detail::ModelWriter w(static_cast<std::uint32_t>(net.layers.size()));
  for (const auto& l : net.layers) {
    const auto tag = static_cast<std::uint8_t>(l.spec.kind);
    switch (l.spec.kind) {
      case LayerKind::conv: w.layer(tag, {l.out.c, l.in.c, l.spec.kernel, l.spec.kernel}); break;
      case LayerKind::dense: w.layer(tag, {l.out.c, static_cast<std::uint32_t>(l.in.size())}); break;
      case LayerKind::maxpool: w.layer(tag, {l.in.c, l.in.h, l.in.w, l.spec.kernel}); break;
      case LayerKind::flatten: w.layer(tag, {l.in.c, l.in.h, l.in.w}); break;
      case LayerKind::relu:
      case LayerKind::softmax: w.layer(tag, detail::activation_extents(l.in)); break;
    }
    if (l.has_params()) {
      w.payload(l.weights);
      w.payload(l.bias);
    }
  }
  return w.finish();
}

inline Network<float> decode_model(std::span<const std::uint8_t> bytes) {
  detail::ModelReader r(bytes);
  const auto count = r.u32("layer count");
  if (count == 0 || count > 1024) throw ParseError("layer count", "implausible value " + std::to_string(count));

  struct Raw {
    LayerSpec spec;
    std::vector<std::uint32_t> extents;
    std::vector<float> weights, bias;
  };
  std::vector<Raw> raw;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto tag = r.u8("layer tag");
    Raw layer;
    layer.extents = r.extents();
    const auto& e = layer.extents;
    auto expect_rank = [&](std::size_t n) {
      if (e.size() != n)
        throw ParseError("shape table", "layer " + std::to_string(i) + " has rank " + std::to_string(e.size()));
    };
    switch (tag) {
      case 1:
        expect_rank(4);
        if (e[2] != e[3]) throw ParseError("shape table", "non-square conv kernel");
        layer.spec = LayerSpec::conv(e[2], e[0]);
        layer.weights = r.payload(detail::product(e));
        layer.bias = r.payload(e[0]);
        break;
      case 2: layer.spec = LayerSpec::relu(); break;
      case 3:
        expect_rank(4);
        layer.spec = LayerSpec::maxpool(e[3]);
        break;
      case 4:
        expect_rank(3);
        layer.spec = LayerSpec::flatten();
        break;
      case 5:
        expect_rank(2);
        layer.spec = LayerSpec::dense(e[0]);
        layer.weights = r.payload(detail::product(e));
        layer.bias = r.payload(e[0]);
        break;
      case 6: layer.spec = LayerSpec::softmax(); break;
      case kSvmTag: throw ParseError("layer tag", "file holds an SVM model, not a CNN");
      default: throw ParseError("layer tag", "unknown tag " + std::to_string(tag));
    }
    raw.push_back(std::move(layer));
  }
  r.finish();

  // Input shape: the first recorded activation shape, walked back through leading convs.
  ModelConfig cfg;
  cfg.layers.clear();
  for (const auto& l : raw) cfg.layers.push_back(l.spec);
  std::size_t first = 0;
  while (first < raw.size() && raw[first].spec.kind == LayerKind::conv) ++first;
  if (first == raw.size() || raw[first].extents.size() < 3)
    throw ParseError("shape table", "cannot determine the input shape");
  std::uint32_t channels = raw[first].extents[0], side = raw[first].extents[1];
  if (raw[first].extents[1] != raw[first].extents[2]) throw ParseError("shape table", "non-square activation");
  for (std::size_t i = first; i-- > 0;) {
    side += raw[i].spec.kernel - 1;
    channels = raw[i].extents[1];
  }
  cfg.input_side = side;
  cfg.channels_in = channels;
  cfg.seed = 0;

  Network<float> net;
  try {
    net = build_network<float>(cfg);
  } catch (const InvalidArgument& e) {
    throw ParseError("shape table", e.what());
  }
  for (std::size_t i = 0; i < raw.size(); ++i) {
    auto& l = net.layers[i];
    const auto& e = raw[i].extents;
    std::vector<std::uint32_t> expected;
    switch (l.spec.kind) {
      case LayerKind::conv: expected = {l.out.c, l.in.c, l.spec.kernel, l.spec.kernel}; break;
      case LayerKind::dense: expected = {l.out.c, static_cast<std::uint32_t>(l.in.size())}; break;
      case LayerKind::maxpool: expected = {l.in.c, l.in.h, l.in.w, l.spec.kernel}; break;
      case LayerKind::flatten: expected = {l.in.c, l.in.h, l.in.w}; break;
      default: expected = detail::activation_extents(l.in); break;
    }
    if (e != expected)
      throw ParseError("shape table", "layer " + std::to_string(i) + " extents inconsistent with the network");
    l.weights.assign(raw[i].weights.begin(), raw[i].weights.end());
    l.bias.assign(raw[i].bias.begin(), raw[i].bias.end());
  }
  return net;
}

inline void save_model(const Network<float>& net, const std::filesystem::path& path) {
  detail::write_file_atomic(path, encode_model(net));
}

inline Network<float> load_model(const std::filesystem::path& path) {
  return decode_model(detail::read_file_bytes(path));
}

/// 64-bit content digest of a model file, used as its version string when unregistered.
inline std::uint64_t model_digest(const std::filesystem::path& path) {
  const auto bytes = detail::read_file_bytes(path);
  detail::Fnv1a64 h;
  h.update(bytes.data(), bytes.size());
  return h.value();
}

inline std::vector<std::uint8_t> encode_svm(const LinearSvm& svm) {
  detail::ModelWriter w(1);
  w.layer(kSvmTag, {static_cast<std::uint32_t>(svm.dims())});
  std::vector<float> payload;
  for (double v : svm.w) payload.push_back(static_cast<float>(v));
  payload.push_back(static_cast<float>(svm.b));
  for (double v : svm.mean) payload.push_back(static_cast<float>(v));
  for (double v : svm.scale) payload.push_back(static_cast<float>(v));
  w.payload(payload);
  return w.finish();
}

inline LinearSvm decode_svm(std::span<const std::uint8_t> bytes) {
  detail::ModelReader r(bytes);
  if (r.u32("layer count") != 1) throw ParseError("layer count", "SVM container holds exactly one layer");
  if (r.u8("layer tag") != kSvmTag) throw ParseError("layer tag", "expected SVM tag 7");
  const auto e = r.extents();
  if (e.size() != 1 || e[0] == 0) throw ParseError("shape table", "SVM expects rank-1 [dims]");
  const auto p = r.payload(3ull * e[0] + 1);
  r.finish();
  const std::size_t d = e[0];
  LinearSvm svm;
  svm.w.assign(p.begin(), p.begin() + d);
  svm.b = p[d];
  svm.mean.assign(p.begin() + d + 1, p.begin() + 2 * d + 1);
  svm.scale.assign(p.begin() + 2 * d + 1, p.end());
  return svm;
}

inline void save_svm(const LinearSvm& svm, const std::filesystem::path& path) {
  detail::write_file_atomic(path, encode_svm(svm));
}

inline LinearSvm load_svm(const std::filesystem::path& path) { return decode_svm(detail::read_file_bytes(path)); }

}  // namespace volcdet
