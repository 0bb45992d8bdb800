#pragma once

// Training-data records and the append-only JSON-lines manifest that holds them.

#include <algorithm>
#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include "json.hpp"
#include "volcdet/detail/io.hpp"
#include "volcdet/error.hpp"

namespace volcdet {

enum class SampleOrigin { synthetic, feedback };

inline constexpr int kLabelDeformation = 1;
inline constexpr int kLabelBackground = 0;

struct SampleRecord {
  std::string id;
  std::string path;  ///< relative to the manifest's directory unless absolute
  int label = kLabelBackground;
  SampleOrigin origin = SampleOrigin::synthetic;
  std::optional<std::array<double, 2>> center;
  nlohmann::json params;  ///< null when absent
  std::uint64_t seed = 0;
};

inline std::string to_string(SampleOrigin o) { return o == SampleOrigin::synthetic ? "synthetic" : "feedback"; }

inline void to_json(nlohmann::json& j, const SampleRecord& r) {
  j = nlohmann::json{{"id", r.id},
                     {"path", r.path},
                     {"label", r.label},
                     {"origin", to_string(r.origin)},
                     {"center", nullptr},
                     {"params", r.params},
                     {"seed", r.seed}};
  if (r.center) j["center"] = {(*r.center)[0], (*r.center)[1]};
}

inline void from_json(const nlohmann::json& j, SampleRecord& r) {
  try {
    r.id = j.at("id").get<std::string>();
    r.path = j.at("path").get<std::string>();
    r.label = j.at("label").get<int>();
    const auto origin = j.at("origin").get<std::string>();
    if (origin == "synthetic")
      r.origin = SampleOrigin::synthetic;
    else if (origin == "feedback")
      r.origin = SampleOrigin::feedback;
    else
      throw ParseError("origin", "unknown value \"" + origin + "\"");
    r.center.reset();
    if (j.contains("center") && !j.at("center").is_null())
      r.center = std::array<double, 2>{j.at("center").at(0).get<double>(), j.at("center").at(1).get<double>()};
    r.params = j.value("params", nlohmann::json());
    r.seed = j.value("seed", std::uint64_t{0});
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("record", e.what());
  }
  if (r.label != kLabelBackground && r.label != kLabelDeformation)
    throw ParseError("label", "must be 0 or 1, got " + std::to_string(r.label));
  if (r.label == kLabelDeformation && r.origin == SampleOrigin::synthetic && !r.center)
    throw ParseError("center", "synthetic deformation sample " + r.id + " has no center");
}

/// The training ground truth. Records are only ever appended.
class DatasetManifest {
 public:
  DatasetManifest() = default;
  DatasetManifest(std::filesystem::path path, std::vector<SampleRecord> records)
      : path_(std::move(path)), records_(std::move(records)) {}

  static DatasetManifest load(const std::filesystem::path& path) {
    std::istringstream in(detail::read_file_text(path));
    std::vector<SampleRecord> records;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (line.empty()) continue;
      try {
        records.push_back(nlohmann::json::parse(line).get<SampleRecord>());
      } catch (const nlohmann::json::exception& e) {
        throw ParseError("line " + std::to_string(lineno), e.what());
      }
    }
    return DatasetManifest(path, std::move(records));
  }

  static std::string serialize(const std::vector<SampleRecord>& records) {
    std::string out;
    for (const auto& r : records) out += nlohmann::json(r).dump() + "\n";
    return out;
  }

  void save() const { detail::write_file_atomic(path_, serialize(records_)); }

  /// Atomically appends `record` to the manifest file at `path` unless a record with the same id
  /// is already present. Returns true if the file changed.
  static bool append(const std::filesystem::path& path, const SampleRecord& record) {
    std::string text;
    if (std::filesystem::exists(path)) {
      text = detail::read_file_text(path);
      if (load(path).contains(record.id)) return false;
      if (!text.empty() && text.back() != '\n') text += '\n';
    }
    text += nlohmann::json(record).dump() + "\n";
    detail::write_file_atomic(path, text);
    return true;
  }

  const std::filesystem::path& path() const { return path_; }
  const std::vector<SampleRecord>& records() const { return records_; }
  std::size_t size() const { return records_.size(); }

  bool contains(const std::string& id) const {
    return std::any_of(records_.begin(), records_.end(), [&](const auto& r) { return r.id == id; });
  }

  std::size_t count_label(int label) const {
    return static_cast<std::size_t>(
        std::count_if(records_.begin(), records_.end(), [&](const auto& r) { return r.label == label; }));
  }

  std::filesystem::path resolve(const SampleRecord& r) const {
    const std::filesystem::path p(r.path);
    return p.is_absolute() ? p : path_.parent_path() / p;
  }

  /// FNV-1a over the serialized records.
  std::uint64_t digest() const {
    const auto text = serialize(records_);
    detail::Fnv1a64 h;
    h.update(text.data(), text.size());
    return h.value();
  }

 private:
  std::filesystem::path path_;
  std::vector<SampleRecord> records_;
};

}  // namespace volcdet
