#pragma once

// Dataset preparation for a synthetic source/target experiment: seeded
// train/test splits per domain, background-stripped labeled source slices,
// unlabeled target training slices and full-volume target test cases.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numeric>
#include <vector>

#include "sfda/core/error.hpp"
#include "sfda/core/rng.hpp"
#include "sfda/dataio/batch.hpp"
#include "sfda/dataio/io.hpp"
#include "sfda/dataio/manifest.hpp"
#include "sfda/dataio/synthetic.hpp"
#include "sfda/dataio/volume.hpp"

namespace sfda {

struct ExperimentData {
  dataio::SliceDataset source_train;            // labeled, background slices removed
  std::vector<dataio::LabeledVolume> source_val;  // full volumes
  dataio::SliceDataset target_train;            // unlabeled, every slice
  std::vector<dataio::LabeledVolume> target_train_volumes;
  std::vector<dataio::LabeledVolume> target_test;  // full volumes, background retained
};

/// Indices [0, n) split into (train, test) with round(fraction * n) training
/// items, at least one on each side.
inline std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_indices(std::size_t n, double fraction,
                                                                                    std::uint64_t seed) {
  require(n >= 2, "splitting needs at least two volumes");
  require(fraction > 0.0 && fraction < 1.0, "train fraction must lie in (0, 1)");
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  Rng rng(seed);
  shuffle(idx.begin(), idx.end(), rng);
  const auto k = static_cast<std::size_t>(
      std::clamp<long long>(std::llround(fraction * static_cast<double>(n)), 1, static_cast<long long>(n) - 1));
  std::vector<std::size_t> train(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k));
  std::vector<std::size_t> test(idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end());
  std::sort(train.begin(), train.end());
  std::sort(test.begin(), test.end());
  return {train, test};
}

/// Labeled volume with all-background slices removed.
inline dataio::LabeledVolume strip_background(const dataio::LabeledVolume& lv) {
  dataio::PreprocessSpec spec;
  spec.target_size = lv.volume.h;
  require(lv.volume.h == lv.volume.w, "square slices expected");
  return dataio::preprocess(lv.volume, lv.mask, spec);
}

inline ExperimentData prepare_experiment(const dataio::SyntheticPair& pair, double train_fraction,
                                         std::uint64_t seed) {
  ExperimentData d;
  const auto [src_train, src_val] = split_indices(pair.source.size(), train_fraction, derive_seed(seed, 0x51));
  const auto [tgt_train, tgt_test] = split_indices(pair.target.size(), train_fraction, derive_seed(seed, 0x7a));
  std::vector<dataio::LabeledVolume> src;
  for (auto i : src_train) src.push_back(strip_background(pair.source[i]));
  d.source_train = dataio::make_slice_dataset(src, true);
  for (auto i : src_val) d.source_val.push_back(pair.source[i]);
  for (auto i : tgt_train) d.target_train_volumes.push_back(pair.target[i]);
  d.target_train = dataio::make_slice_dataset(d.target_train_volumes, false);
  for (auto i : tgt_test) d.target_test.push_back(pair.target[i]);
  return d;
}

inline ExperimentData prepare_synthetic(const dataio::SyntheticSpec& spec, std::uint64_t seed,
                                        double train_fraction = 0.8) {
  return prepare_experiment(dataio::make_synthetic_pair(spec, seed), train_fraction, seed);
}

/// Loads one manifest entry (paths relative to `base`), applies its crop box
/// and the modality's preprocessing.
inline dataio::LabeledVolume load_entry(const dataio::ManifestEntry& e, const std::filesystem::path& base,
                                        const dataio::PreprocessSpec& spec) {
  auto resolve = [&](const std::string& p) {
    const std::filesystem::path q(p);
    return q.is_absolute() ? q : base / q;
  };
  auto lv = dataio::load_volume(resolve(e.volume_path));
  if (e.mask_path) {
    const auto m = dataio::load_volume(resolve(*e.mask_path));
    dataio::LabelMask mask(m.volume.slices, m.volume.h, m.volume.w);
    if (m.mask) {
      mask = *m.mask;
    } else {
      for (std::size_t i = 0; i < mask.labels.size(); ++i) {
        const float v = m.volume.voxels[i];
        require(v >= 0.f && v < 256.f && v == std::floor(v), "mask file holds non-label values: " + *e.mask_path);
        mask.labels[i] = static_cast<std::uint8_t>(v);
      }
    }
    require(mask.same_shape(lv.volume), "mask shape does not match volume " + e.volume_path);
    lv.mask = std::move(mask);
  }
  lv.volume.modality = e.modality;
  if (e.crop) lv = dataio::apply_crop(lv, *e.crop);
  return dataio::preprocess(lv.volume, lv.mask, spec);
}

/// Real-data experiment: every source-like entry is labeled training data,
/// target-like entries are split by their manifest split (or a seeded split
/// when none is assigned). Target training slices are used without labels;
/// target test volumes keep their background slices.
inline ExperimentData prepare_from_manifest(const dataio::DatasetManifest& manifest, const std::filesystem::path& base,
                                            const dataio::PreprocessSpec& source_spec,
                                            const dataio::PreprocessSpec& target_spec, double train_fraction,
                                            std::uint64_t seed) {
  dataio::DatasetManifest source, target;
  for (const auto& e : manifest.entries)
    (e.modality == dataio::Modality::kSourceLike ? source : target).entries.push_back(e);
  require(!source.entries.empty(), "manifest lists no source_like volumes");
  require(!target.entries.empty(), "manifest lists no target_like volumes");
  const bool unsplit = std::any_of(target.entries.begin(), target.entries.end(),
                                   [](const auto& e) { return e.split == dataio::Split::kNone; });
  if (unsplit) target = dataio::split_dataset(target, train_fraction, seed);

  ExperimentData d;
  std::vector<dataio::LabeledVolume> src;
  for (const auto& e : source.entries) {
    require(e.mask_path.has_value(), "source volume without labels: " + e.volume_path);
    src.push_back(load_entry(e, base, source_spec));
  }
  d.source_train = dataio::make_slice_dataset(src, true);
  auto keep_all = target_spec;
  keep_all.strip_background = false;
  for (const auto* e : target.with_split(dataio::Split::kTrain)) {
    auto lv = load_entry(*e, base, keep_all);
    lv.mask.reset();
    d.target_train_volumes.push_back(std::move(lv));
  }
  require(!d.target_train_volumes.empty(), "no target training volumes");
  d.target_train = dataio::make_slice_dataset(d.target_train_volumes, false);
  for (const auto* e : target.with_split(dataio::Split::kTest)) {
    require(e->mask_path.has_value(), "target test volume without labels: " + e->volume_path);
    d.target_test.push_back(load_entry(*e, base, keep_all));
  }
  return d;
}

}  // namespace sfda
