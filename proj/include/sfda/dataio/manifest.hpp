#pragma once

// Dataset manifest: a key-value text file, one "key = value" per line,
// '#' starts a comment. Entries are numbered:
//
//   entry.0.volume   = vols/case00.raw
//   entry.0.mask     = vols/case00.raw      (optional)
//   entry.0.modality = target_like
//   entry.0.split    = train | test | none
//   entry.0.crop     = z0 z1 y0 y1 x0 x1    (optional, half-open)

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "sfda/core/error.hpp"
#include "sfda/core/rng.hpp"
#include "sfda/dataio/volume.hpp"

namespace sfda::dataio {

enum class Split { kNone, kTrain, kTest };

inline std::string to_string(Split s) {
  switch (s) {
    case Split::kTrain: return "train";
    case Split::kTest: return "test";
    default: return "none";
  }
}
inline Split split_from_string(const std::string& s) {
  if (s == "train") return Split::kTrain;
  if (s == "test") return Split::kTest;
  if (s == "none") return Split::kNone;
  throw ValidationError("unknown split: " + s);
}

/// Half-open crop box (z0, z1, y0, y1, x0, x1).
using CropBox = std::array<int, 6>;

struct ManifestEntry {
  std::string volume_path;
  std::optional<std::string> mask_path;
  Modality modality = Modality::kTargetLike;
  Split split = Split::kNone;
  std::optional<CropBox> crop;
  friend bool operator==(const ManifestEntry&, const ManifestEntry&) = default;
};

struct DatasetManifest {
  std::vector<ManifestEntry> entries;

  void validate() const {
    std::set<std::string> seen;
    for (const auto& e : entries)
      require(seen.insert(e.volume_path).second, "duplicate manifest path: " + e.volume_path);
  }

  std::vector<const ManifestEntry*> with_split(Split s) const {
    std::vector<const ManifestEntry*> out;
    for (const auto& e : entries)
      if (e.split == s) out.push_back(&e);
    return out;
  }

  friend bool operator==(const DatasetManifest&, const DatasetManifest&) = default;
};

inline std::string to_text(const DatasetManifest& m) {
  std::ostringstream os;
  os << "# sfda dataset manifest\n";
  for (std::size_t i = 0; i < m.entries.size(); ++i) {
    const auto& e = m.entries[i];
    const std::string k = "entry." + std::to_string(i) + ".";
    os << k << "volume = " << e.volume_path << '\n';
    if (e.mask_path) os << k << "mask = " << *e.mask_path << '\n';
    os << k << "modality = " << to_string(e.modality) << '\n';
    os << k << "split = " << to_string(e.split) << '\n';
    if (e.crop) {
      os << k << "crop =";
      for (int c : *e.crop) os << ' ' << c;
      os << '\n';
    }
  }
  return os.str();
}

inline DatasetManifest parse_manifest(const std::string& text) {
  std::map<int, ManifestEntry> byid;
  std::map<int, bool> has_volume;
  std::istringstream is(text);
  std::string line;
  int lineno = 0;
  auto trim = [](std::string s) {
    const auto b = s.find_first_not_of(" \t\r");
    const auto e = s.find_last_not_of(" \t\r");
    return b == std::string::npos ? std::string{} : s.substr(b, e - b + 1);
  };
  while (std::getline(is, line)) {
    ++lineno;
    if (const auto h = line.find('#'); h != std::string::npos) line = line.substr(0, h);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    require(eq != std::string::npos, "manifest line " + std::to_string(lineno) + ": expected key = value");
    const std::string key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
    // entry.<id>.<field>
    const auto d1 = key.find('.'), d2 = key.rfind('.');
    require(key.substr(0, d1) == "entry" && d1 != d2,
            "manifest line " + std::to_string(lineno) + ": unknown key '" + key + "'");
    int id = 0;
    try {
      id = std::stoi(key.substr(d1 + 1, d2 - d1 - 1));
    } catch (const std::exception&) {
      throw ValidationError("manifest line " + std::to_string(lineno) + ": bad entry index");
    }
    const std::string field = key.substr(d2 + 1);
    auto& e = byid[id];
    if (field == "volume") {
      e.volume_path = value;
      has_volume[id] = true;
    } else if (field == "mask") {
      e.mask_path = value;
    } else if (field == "modality") {
      e.modality = modality_from_string(value);
    } else if (field == "split") {
      e.split = split_from_string(value);
    } else if (field == "crop") {
      std::istringstream vs(value);
      CropBox box{};
      for (int& c : box) require(static_cast<bool>(vs >> c), "manifest line " + std::to_string(lineno) + ": crop needs 6 integers");
      e.crop = box;
    } else {
      throw ValidationError("manifest line " + std::to_string(lineno) + ": unknown field '" + field +
                            "' (valid: volume, mask, modality, split, crop)");
    }
  }
  DatasetManifest m;
  for (auto& [id, e] : byid) {
    require(has_volume[id], "manifest entry " + std::to_string(id) + " has no volume path");
    m.entries.push_back(std::move(e));
  }
  m.validate();
  return m;
}

inline DatasetManifest load_manifest(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open manifest " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_manifest(ss.str());
}

inline void save_manifest(const std::filesystem::path& path, const DatasetManifest& m) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write manifest " + path.string());
  os << to_text(m);
}

/// Random volume-level split, deterministic under `seed`. The train count is
/// round(fraction * n), kept within [1, n-1] when fraction < 1.
inline DatasetManifest split_dataset(const DatasetManifest& manifest, double train_fraction, std::uint64_t seed) {
  require(train_fraction > 0.0 && train_fraction <= 1.0, "train fraction must lie in (0, 1]");
  manifest.validate();
  const std::size_t n = manifest.entries.size();
  if (train_fraction < 1.0) require(n >= 2, "need at least two volumes to split");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(derive_seed(seed, 0x5917));
  shuffle(order.begin(), order.end(), rng);
  std::size_t n_train = n;
  if (train_fraction < 1.0) {
    n_train = static_cast<std::size_t>(std::llround(train_fraction * static_cast<double>(n)));
    n_train = std::clamp<std::size_t>(n_train, 1, n - 1);
  }
  DatasetManifest out = manifest;
  for (std::size_t i = 0; i < n; ++i) out.entries[order[i]].split = i < n_train ? Split::kTrain : Split::kTest;
  return out;
}

/// Applies a manifest crop box to a volume (and mask).
inline LabeledVolume apply_crop(const LabeledVolume& in, const CropBox& box) {
  const auto& v = in.volume;
  require(0 <= box[0] && box[0] < box[1] && box[1] <= v.slices && 0 <= box[2] && box[2] < box[3] && box[3] <= v.h &&
              0 <= box[4] && box[4] < box[5] && box[5] <= v.w,
          "crop box outside the volume");
  LabeledVolume out;
  out.volume = Volume(box[1] - box[0], box[3] - box[2], box[5] - box[4]);
  out.volume.spacing = v.spacing;
  out.volume.modality = v.modality;
  out.volume.normalized = v.normalized;
  if (in.mask) out.mask = LabelMask(out.volume.slices, out.volume.h, out.volume.w);
  for (int s = 0; s < out.volume.slices; ++s)
    for (int y = 0; y < out.volume.h; ++y)
      for (int x = 0; x < out.volume.w; ++x) {
        out.volume.at(s, y, x) = v.at(s + box[0], y + box[2], x + box[4]);
        if (in.mask) out.mask->at(s, y, x) = in.mask->at(s + box[0], y + box[2], x + box[4]);
      }
  return out;
}

}  // namespace sfda::dataio
