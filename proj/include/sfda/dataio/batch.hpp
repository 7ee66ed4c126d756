#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <optional>
#include <vector>

#include "sfda/core/error.hpp"
#include "sfda/core/rng.hpp"
#include "sfda/core/tensor.hpp"
#include "sfda/dataio/volume.hpp"

namespace sfda::dataio {

/// Flat collection of 2D slices drawn from preprocessed volumes.
struct SliceDataset {
  int h = 0, w = 0;
  std::vector<std::vector<float>> images;
  std::vector<std::vector<std::uint8_t>> masks;  // empty when unlabeled

  std::size_t size() const { return images.size(); }
  bool labeled() const { return !masks.empty(); }
};

/// Gathers every slice of `volumes`. Masks are carried only when
/// `keep_masks` is set and every volume has one.
inline SliceDataset make_slice_dataset(const std::vector<LabeledVolume>& volumes, bool keep_masks) {
  SliceDataset ds;
  bool all_masked = keep_masks;
  for (const auto& lv : volumes) all_masked = all_masked && lv.mask.has_value();
  for (const auto& lv : volumes) {
    const auto& v = lv.volume;
    if (ds.images.empty() && ds.h == 0) {
      ds.h = v.h;
      ds.w = v.w;
    }
    require(v.h == ds.h && v.w == ds.w, "all slices in a dataset must share one size");
    for (int s = 0; s < v.slices; ++s) {
      ds.images.emplace_back(v.slice(s), v.slice(s) + v.plane());
      if (all_masked) {
        const auto* l = lv.mask->labels.data() + static_cast<std::size_t>(s) * lv.mask->plane();
        ds.masks.emplace_back(l, l + lv.mask->plane());
      }
    }
  }
  return ds;
}

inline SliceBatch gather_batch(const SliceDataset& ds, const std::vector<std::size_t>& indices) {
  SliceBatch b;
  const int n = static_cast<int>(indices.size());
  b.images = Tensor<float>(n, 1, ds.h, ds.w);
  if (ds.labeled()) b.masks = LabelBatch(n, ds.h, ds.w);
  const std::size_t p = static_cast<std::size_t>(ds.h) * ds.w;
  for (int i = 0; i < n; ++i) {
    const auto& img = ds.images[indices[static_cast<std::size_t>(i)]];
    std::copy(img.begin(), img.end(), b.images.data() + static_cast<std::size_t>(i) * p);
    if (ds.labeled()) {
      const auto& m = ds.masks[indices[static_cast<std::size_t>(i)]];
      std::copy(m.begin(), m.end(), b.masks->labels.data() + static_cast<std::size_t>(i) * p);
    }
  }
  return b;
}

/// Per-epoch seeded shuffling into fixed-size batches. By default the trailing
/// partial batch is dropped so batch statistics always cover `batch_size`
/// slices; with `drop_last` off it is kept when it holds at least two slices.
class BatchIterator {
 public:
  BatchIterator(const SliceDataset& ds, int batch_size, std::uint64_t seed, bool drop_last = true)
      : ds_(&ds), batch_(batch_size), seed_(seed), drop_last_(drop_last) {
    require(batch_size > 0, "batch size must be positive");
    require(drop_last ? ds.size() >= static_cast<std::size_t>(batch_size) : ds.size() >= 2,
            "dataset has " + std::to_string(ds.size()) + " slices, fewer than batch size " + std::to_string(batch_size));
  }

  int batches_per_epoch() const {
    const std::size_t b = static_cast<std::size_t>(batch_);
    const std::size_t rest = ds_->size() % b;
    return static_cast<int>(ds_->size() / b + (!drop_last_ && rest >= 2 ? 1 : 0));
  }

  /// Slice indices of every batch in `epoch`.
  std::vector<std::vector<std::size_t>> order(int epoch) const {
    std::vector<std::size_t> idx(ds_->size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    Rng rng(derive_seed(seed_, static_cast<std::uint64_t>(epoch)));
    shuffle(idx.begin(), idx.end(), rng);
    std::vector<std::vector<std::size_t>> out;
    for (int b = 0; b < batches_per_epoch(); ++b) {
      const std::size_t lo = static_cast<std::size_t>(b) * static_cast<std::size_t>(batch_);
      const std::size_t hi = std::min(idx.size(), lo + static_cast<std::size_t>(batch_));
      out.emplace_back(idx.begin() + static_cast<std::ptrdiff_t>(lo), idx.begin() + static_cast<std::ptrdiff_t>(hi));
    }
    return out;
  }

  std::vector<SliceBatch> epoch(int e) const {
    std::vector<SliceBatch> out;
    for (const auto& ids : order(e)) out.push_back(gather_batch(*ds_, ids));
    return out;
  }

 private:
  const SliceDataset* ds_;
  int batch_;
  std::uint64_t seed_;
  bool drop_last_;
};

inline BatchIterator batch_iter(const SliceDataset& ds, int batch_size, std::uint64_t seed) {
  return BatchIterator(ds, batch_size, seed);
}

}  // namespace sfda::dataio
