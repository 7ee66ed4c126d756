#pragma once

// Synthetic two-domain abdominal phantom. Both domains draw ellipsoidal
// "organs" (liver, right kidney, left kidney, spleen) inside a body ellipse
// from the same layout distribution; they differ only in intensity style.
// The target style is a monotone nonlinear (power-law) remap of the source
// class means with its own noise level.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "sfda/core/error.hpp"
#include "sfda/core/rng.hpp"
#include "sfda/dataio/volume.hpp"

namespace sfda::dataio {

/// Per-class (mean, noise sigma); index 0 is body tissue (background class).
struct IntensityStyle {
  std::vector<std::pair<double, double>> classes;
  double air = 0.0;
  friend bool operator==(const IntensityStyle&, const IntensityStyle&) = default;
};

/// Ellipsoid placement as fractions of the volume extent.
struct OrganLayout {
  double cz, cy, cx;
  double rz, ry, rx;
};

inline std::vector<OrganLayout> default_organ_layout() {
  return {
      {0.50, 0.42, 0.30, 0.42, 0.19, 0.17},  // liver
      {0.55, 0.71, 0.30, 0.30, 0.08, 0.06},  // right kidney
      {0.55, 0.71, 0.70, 0.30, 0.08, 0.06},  // left kidney
      {0.45, 0.38, 0.72, 0.32, 0.11, 0.09},  // spleen
  };
}

inline IntensityStyle power_remap(const IntensityStyle& src, double gamma, double noise) {
  IntensityStyle out;
  out.air = std::pow(src.air, gamma);
  for (const auto& [m, s] : src.classes) out.classes.emplace_back(std::pow(m, gamma), noise);
  return out;
}

struct SyntheticSpec {
  int image_size = 64;
  int slices_per_volume = 20;
  int organ_count = 4;
  int num_classes = 5;
  IntensityStyle source_style{{{0.35, 0.04}, {0.55, 0.04}, {0.70, 0.04}, {0.85, 0.04}, {0.45, 0.04}}, 0.0};
  IntensityStyle target_style = power_remap(source_style, 0.45, 0.03);
  std::vector<OrganLayout> layout = default_organ_layout();
  double position_jitter = 0.04;  // max center shift, fraction of extent
  double size_jitter = 0.12;      // max relative radius change
  int source_volumes = 10;
  int target_volumes = 10;
  double overlap_tolerance = 0.02;  // overlapping voxels / smaller organ
  int max_attempts = 50;

  void validate() const {
    require(image_size > 0 && slices_per_volume > 0, "synthetic volume dims must be positive");
    require(organ_count >= 1 && organ_count + 1 <= num_classes, "need organ_count + 1 <= num_classes");
    require(static_cast<int>(layout.size()) >= organ_count, "layout must describe every organ");
    for (const auto* st : {&source_style, &target_style}) {
      require(static_cast<int>(st->classes.size()) == organ_count + 1, "intensity map needs one entry per class");
      for (const auto& [m, s] : st->classes) {
        require(m >= 0.0 && m <= 1.0, "intensity means must lie in [0, 1]");
        require(s >= 0.0, "noise sigma must be non-negative");
      }
    }
    require(position_jitter >= 0 && size_jitter >= 0 && size_jitter < 1, "invalid jitter");
    require(source_volumes > 0 && target_volumes > 0, "need at least one volume per domain");
    require(max_attempts >= 1, "need at least one placement attempt");
  }
};

struct SyntheticPair {
  std::vector<LabeledVolume> source;
  std::vector<LabeledVolume> target;
};

namespace detail {

inline LabelMask draw_geometry(const SyntheticSpec& spec, Rng& rng) {
  const int s = spec.slices_per_volume, n = spec.image_size;
  for (int attempt = 0; attempt < spec.max_attempts; ++attempt) {
    std::vector<OrganLayout> organs;
    for (int k = 0; k < spec.organ_count; ++k) {
      OrganLayout o = spec.layout[static_cast<std::size_t>(k)];
      o.cy += rng.uniform(-spec.position_jitter, spec.position_jitter);
      o.cx += rng.uniform(-spec.position_jitter, spec.position_jitter);
      o.cz += rng.uniform(-spec.position_jitter, spec.position_jitter);
      const double scale = 1.0 + rng.uniform(-spec.size_jitter, spec.size_jitter);
      o.ry *= scale;
      o.rx *= scale;
      o.rz *= 1.0 + rng.uniform(-spec.size_jitter, spec.size_jitter);
      organs.push_back(o);
    }
    LabelMask mask(s, n, n);
    std::vector<std::size_t> sizes(organs.size(), 0);
    std::size_t overlap = 0;
    for (int z = 0; z < s; ++z)
      for (int y = 0; y < n; ++y)
        for (int x = 0; x < n; ++x) {
          const double fz = (z + 0.5) / s, fy = (y + 0.5) / n, fx = (x + 0.5) / n;
          int hits = 0;
          for (std::size_t k = 0; k < organs.size(); ++k) {
            const auto& o = organs[k];
            const double d = (fz - o.cz) * (fz - o.cz) / (o.rz * o.rz) + (fy - o.cy) * (fy - o.cy) / (o.ry * o.ry) +
                             (fx - o.cx) * (fx - o.cx) / (o.rx * o.rx);
            if (d <= 1.0) {
              ++hits;
              ++sizes[k];
              mask.at(z, y, x) = static_cast<std::uint8_t>(k + 1);
            }
          }
          if (hits > 1) overlap += static_cast<std::size_t>(hits - 1);
        }
    const auto smallest = *std::min_element(sizes.begin(), sizes.end());
    if (smallest > 0 && static_cast<double>(overlap) <= spec.overlap_tolerance * static_cast<double>(smallest))
      return mask;
  }
  throw ValidationError("synthetic organs overlap beyond tolerance after " + std::to_string(spec.max_attempts) +
                        " attempts");
}

inline Volume render(const SyntheticSpec& spec, const LabelMask& mask, const IntensityStyle& style, Modality modality,
                     Rng& rng) {
  const int n = spec.image_size;
  Volume v(mask.slices, mask.h, mask.w);
  v.modality = modality;
  v.normalized = true;
  for (int z = 0; z < mask.slices; ++z)
    for (int y = 0; y < n; ++y)
      for (int x = 0; x < n; ++x) {
        const double fy = (y + 0.5) / n - 0.5, fx = (x + 0.5) / n - 0.5;
        const bool in_body = fy * fy / (0.44 * 0.44) + fx * fx / (0.47 * 0.47) <= 1.0;
        const int c = mask.at(z, y, x);
        double val = style.air;
        if (in_body || c > 0) {
          const auto& [m, sd] = style.classes[static_cast<std::size_t>(c)];
          val = m + sd * rng.normal();
        }
        v.at(z, y, x) = static_cast<float>(std::clamp(val, 0.0, 1.0));
      }
  return v;
}

}  // namespace detail

/// Generates a labeled source dataset and a target dataset whose masks are
/// meant for evaluation only. Each domain draws its own geometries.
inline SyntheticPair make_synthetic_pair(const SyntheticSpec& spec, std::uint64_t seed) {
  spec.validate();
  SyntheticPair out;
  for (int domain = 0; domain < 2; ++domain) {
    const int count = domain == 0 ? spec.source_volumes : spec.target_volumes;
    const auto& style = domain == 0 ? spec.source_style : spec.target_style;
    const auto modality = domain == 0 ? Modality::kSourceLike : Modality::kTargetLike;
    for (int i = 0; i < count; ++i) {
      Rng geo(derive_seed(seed, static_cast<std::uint64_t>(domain * 100000 + i)));
      Rng noise(derive_seed(seed, static_cast<std::uint64_t>(domain * 100000 + i + 50000)));
      LabeledVolume lv;
      lv.mask = detail::draw_geometry(spec, geo);
      lv.volume = detail::render(spec, *lv.mask, style, modality, noise);
      (domain == 0 ? out.source : out.target).push_back(std::move(lv));
    }
  }
  return out;
}

}  // namespace sfda::dataio
