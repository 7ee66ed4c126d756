#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "sfda/core/error.hpp"
#include "sfda/core/tensor.hpp"

namespace sfda::dataio {

enum class Modality { kSourceLike, kTargetLike };

inline std::string to_string(Modality m) { return m == Modality::kSourceLike ? "source_like" : "target_like"; }
inline Modality modality_from_string(const std::string& s) {
  if (s == "source_like") return Modality::kSourceLike;
  if (s == "target_like") return Modality::kTargetLike;
  throw ValidationError("unknown modality tag: " + s);
}

/// slices x H x W intensities, row-major.
struct Volume {
  int slices = 0, h = 0, w = 0;
  std::vector<float> voxels;
  std::array<float, 3> spacing{1.f, 1.f, 1.f};  // (slice, row, column)
  Modality modality = Modality::kSourceLike;
  /// Set once intensities have been clipped and rescaled to [0, 1].
  bool normalized = false;

  Volume() = default;
  Volume(int s, int h_, int w_, float fill = 0.f)
      : slices(s), h(h_), w(w_), voxels(static_cast<std::size_t>(s) * h_ * w_, fill) {}

  std::size_t plane() const { return static_cast<std::size_t>(h) * w; }
  float& at(int s, int y, int x) { return voxels[(static_cast<std::size_t>(s) * h + y) * w + x]; }
  float at(int s, int y, int x) const { return voxels[(static_cast<std::size_t>(s) * h + y) * w + x]; }
  const float* slice(int s) const { return voxels.data() + static_cast<std::size_t>(s) * plane(); }
};

struct LabelMask {
  int slices = 0, h = 0, w = 0;
  std::vector<std::uint8_t> labels;

  LabelMask() = default;
  LabelMask(int s, int h_, int w_) : slices(s), h(h_), w(w_), labels(static_cast<std::size_t>(s) * h_ * w_, 0) {}

  std::size_t plane() const { return static_cast<std::size_t>(h) * w; }
  std::uint8_t& at(int s, int y, int x) { return labels[(static_cast<std::size_t>(s) * h + y) * w + x]; }
  std::uint8_t at(int s, int y, int x) const { return labels[(static_cast<std::size_t>(s) * h + y) * w + x]; }
  bool same_shape(const Volume& v) const { return slices == v.slices && h == v.h && w == v.w; }
  bool same_shape(const LabelMask& m) const { return slices == m.slices && h == m.h && w == m.w; }
  friend bool operator==(const LabelMask&, const LabelMask&) = default;
};

struct LabeledVolume {
  Volume volume;
  std::optional<LabelMask> mask;
};

/// A training batch: images (N, 1, H, W) and optional masks (N, H, W).
struct SliceBatch {
  Tensor<float> images;
  std::optional<LabelBatch> masks;
  int size() const { return images.dim(0); }
};

struct PreprocessSpec {
  double clip_lo = -100.0;
  double clip_hi = 400.0;
  int target_size = 256;
  bool strip_background = true;

  void validate() const {
    require(clip_lo < clip_hi, "preprocess needs clip_lo < clip_hi");
    require(target_size > 0, "preprocess target size must be positive");
  }

  /// CT-like source volumes.
  static PreprocessSpec source_like() { return {-100.0, 400.0, 256, true}; }
  /// MR-like target volumes.
  static PreprocessSpec target_like() { return {0.0, 1200.0, 256, true}; }
};

namespace detail {

// Half-pixel-center bilinear resampling; identity when sizes match.
inline void resize_bilinear(const float* src, int sh, int sw, float* dst, int dh, int dw) {
  const double ry = static_cast<double>(sh) / dh, rx = static_cast<double>(sw) / dw;
  for (int y = 0; y < dh; ++y) {
    double fy = (y + 0.5) * ry - 0.5;
    fy = std::clamp(fy, 0.0, static_cast<double>(sh - 1));
    const int y0 = static_cast<int>(std::floor(fy));
    const int y1 = std::min(y0 + 1, sh - 1);
    const double wy = fy - y0;
    for (int x = 0; x < dw; ++x) {
      double fx = (x + 0.5) * rx - 0.5;
      fx = std::clamp(fx, 0.0, static_cast<double>(sw - 1));
      const int x0 = static_cast<int>(std::floor(fx));
      const int x1 = std::min(x0 + 1, sw - 1);
      const double wx = fx - x0;
      const double v = (1 - wy) * ((1 - wx) * src[y0 * sw + x0] + wx * src[y0 * sw + x1]) +
                       wy * ((1 - wx) * src[y1 * sw + x0] + wx * src[y1 * sw + x1]);
      dst[y * dw + x] = static_cast<float>(v);
    }
  }
}

inline void resize_nearest(const std::uint8_t* src, int sh, int sw, std::uint8_t* dst, int dh, int dw) {
  for (int y = 0; y < dh; ++y) {
    const int sy = std::min(static_cast<int>((y + 0.5) * sh / dh), sh - 1);
    for (int x = 0; x < dw; ++x) {
      const int sx = std::min(static_cast<int>((x + 0.5) * sw / dw), sw - 1);
      dst[y * dw + x] = src[sy * sw + sx];
    }
  }
}

}  // namespace detail

/// Clip to [clip_lo, clip_hi], rescale to [0, 1], resize each slice to
/// target_size^2 (bilinear image, nearest mask) and optionally drop slices
/// whose mask is entirely background. Intensity mapping is skipped for a
/// volume that is already normalized, so the operation is idempotent.
inline LabeledVolume preprocess(const Volume& volume, const std::optional<LabelMask>& mask, const PreprocessSpec& spec) {
  spec.validate();
  require(volume.slices > 0 && volume.h > 0 && volume.w > 0, "cannot preprocess an empty volume");
  if (mask) require(mask->same_shape(volume), "mask/volume shape mismatch");

  std::vector<float> mapped = volume.voxels;
  if (!volume.normalized) {
    const double range = spec.clip_hi - spec.clip_lo;
    for (auto& v : mapped) v = static_cast<float>((std::clamp(static_cast<double>(v), spec.clip_lo, spec.clip_hi) - spec.clip_lo) / range);
  }

  std::vector<int> keep;
  for (int s = 0; s < volume.slices; ++s) {
    if (spec.strip_background && mask) {
      const auto* l = mask->labels.data() + static_cast<std::size_t>(s) * mask->plane();
      if (std::all_of(l, l + mask->plane(), [](std::uint8_t v) { return v == 0; })) continue;
    }
    keep.push_back(s);
  }
  require(!keep.empty(), "volume is empty after background stripping");

  const int n = spec.target_size;
  LabeledVolume out;
  out.volume = Volume(static_cast<int>(keep.size()), n, n);
  out.volume.modality = volume.modality;
  out.volume.normalized = true;
  out.volume.spacing = {volume.spacing[0], volume.spacing[1] * static_cast<float>(volume.h) / n,
                        volume.spacing[2] * static_cast<float>(volume.w) / n};
  if (mask) out.mask = LabelMask(static_cast<int>(keep.size()), n, n);
  for (std::size_t i = 0; i < keep.size(); ++i) {
    const auto s = static_cast<std::size_t>(keep[i]);
    detail::resize_bilinear(mapped.data() + s * volume.plane(), volume.h, volume.w,
                            out.volume.voxels.data() + i * out.volume.plane(), n, n);
    if (mask)
      detail::resize_nearest(mask->labels.data() + s * mask->plane(), mask->h, mask->w,
                             out.mask->labels.data() + i * out.mask->plane(), n, n);
  }
  for (auto& v : out.volume.voxels) v = std::clamp(v, 0.f, 1.f);
  return out;
}

}  // namespace sfda::dataio
