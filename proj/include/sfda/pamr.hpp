#pragma once

// Pixel-adaptive mask refinement: iterative convex re-averaging of a soft
// mask with image-intensity affinities, and the self-training loss built on
// the refined pseudo-label.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <set>
#include <string>
#include <vector>

#include "sfda/core/error.hpp"
#include "sfda/core/tensor.hpp"
#include "sfda/losses.hpp"

namespace sfda::pamr {

/// kSquared: k = -(x_ij - x_mn)^2 / sigma^2. kLiteral keeps the unsquared
/// difference for comparison runs only.
enum class KernelForm { kSquared, kLiteral };

struct PamrConfig {
  int iterations = 10;
  int kernel_size = 3;
  std::vector<int> dilation_rates{1, 2, 4, 8, 12, 24};
  double sigma_floor = 1e-4;
  KernelForm kernel_form = KernelForm::kSquared;

  void validate() const {
    require(iterations >= 1, "PAMR needs at least one iteration");
    require(kernel_size >= 3 && kernel_size % 2 == 1, "PAMR kernel size must be odd and >= 3");
    require(!dilation_rates.empty(), "PAMR needs at least one dilation rate");
    for (int d : dilation_rates) require(d >= 1, "PAMR dilation rates must be >= 1");
    require(sigma_floor > 0.0, "PAMR sigma floor must be positive");
  }
  friend bool operator==(const PamrConfig&, const PamrConfig&) = default;
};

struct Offset {
  int dy, dx;
};

/// Union over dilations of the kernel grid, center excluded. Offsets repeated
/// across dilations are kept as separate entries of the pooled softmax.
inline std::vector<Offset> neighborhood(const PamrConfig& cfg) {
  std::vector<Offset> out;
  const int r = cfg.kernel_size / 2;
  for (int d : cfg.dilation_rates)
    for (int ky = -r; ky <= r; ++ky)
      for (int kx = -r; kx <= r; ++kx)
        if (ky != 0 || kx != 0) out.push_back({ky * d, kx * d});
  return out;
}

/// Mirror index without edge repetition (numpy "reflect").
inline int reflect(int i, int n) {
  if (n == 1) return 0;
  const int period = 2 * (n - 1);
  i = std::abs(i) % period;
  return i >= n ? period - i : i;
}

/// Per-pixel weights over the pooled neighborhood, layout (N, K, H, W).
template <typename T>
struct AffinityField {
  int n = 0, h = 0, w = 0;
  std::vector<Offset> offsets;
  std::vector<T> weights;

  T at(int b, int k, int y, int x) const {
    return weights[((static_cast<std::size_t>(b) * offsets.size() + static_cast<std::size_t>(k)) * h + y) * w + x];
  }
};

template <typename T>
AffinityField<T> compute_affinity(const Tensor<T>& image, const PamrConfig& cfg) {
  cfg.validate();
  const int n = image.dim(0), ch = image.dim(1), h = image.dim(2), w = image.dim(3);
  AffinityField<T> field;
  field.n = n;
  field.h = h;
  field.w = w;
  field.offsets = neighborhood(cfg);
  const std::size_t kn = field.offsets.size();
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  field.weights.assign(static_cast<std::size_t>(n) * kn * plane, T{});
  const int r = cfg.kernel_size / 2;

  std::vector<double> kbar(kn);
  std::vector<double> inv_var(static_cast<std::size_t>(ch));
  for (int b = 0; b < n; ++b)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        // local standard deviation over the undilated window, per channel
        for (int c = 0; c < ch; ++c) {
          double s = 0.0, ss = 0.0;
          for (int ky = -r; ky <= r; ++ky)
            for (int kx = -r; kx <= r; ++kx) {
              const double v = static_cast<double>(image(b, c, reflect(y + ky, h), reflect(x + kx, w)));
              s += v;
              ss += v * v;
            }
          const double cnt = static_cast<double>(cfg.kernel_size * cfg.kernel_size);
          const double mean = s / cnt;
          const double sd = std::max(std::sqrt(std::max(ss / cnt - mean * mean, 0.0)), cfg.sigma_floor);
          inv_var[static_cast<std::size_t>(c)] = 1.0 / (sd * sd);
        }
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t k = 0; k < kn; ++k) {
          const int yy = reflect(y + field.offsets[k].dy, h), xx = reflect(x + field.offsets[k].dx, w);
          double acc = 0.0;
          for (int c = 0; c < ch; ++c) {
            const double diff = static_cast<double>(image(b, c, y, x)) - static_cast<double>(image(b, c, yy, xx));
            const double num = cfg.kernel_form == KernelForm::kSquared ? diff * diff : diff;
            acc += -num * inv_var[static_cast<std::size_t>(c)];
          }
          kbar[k] = acc / static_cast<double>(ch);
          mx = std::max(mx, kbar[k]);
        }
        double z = 0.0;
        for (std::size_t k = 0; k < kn; ++k) {
          kbar[k] = std::exp(kbar[k] - mx);
          z += kbar[k];
        }
        for (std::size_t k = 0; k < kn; ++k)
          field.weights[(static_cast<std::size_t>(b) * kn + k) * plane + static_cast<std::size_t>(y) * w + x] =
              static_cast<T>(kbar[k] / z);
      }
  return field;
}

/// Per-pixel argmax; ties go to the lowest class id.
template <typename T>
LabelBatch to_pseudo_label(const Tensor<T>& pred) {
  const int n = pred.dim(0), c = pred.dim(1), h = pred.dim(2), w = pred.dim(3);
  require(c <= 256, "too many classes for an 8-bit label map");
  LabelBatch out(n, h, w);
  const std::size_t p = pred.plane();
  for (int b = 0; b < n; ++b)
    for (std::size_t i = 0; i < p; ++i) {
      int best = 0;
      T bv = pred[pred.index(b, 0, 0, 0) + i];
      for (int k = 1; k < c; ++k) {
        const T v = pred[pred.index(b, k, 0, 0) + i];
        if (v > bv) bv = v, best = k;
      }
      out.labels[static_cast<std::size_t>(b) * p + i] = static_cast<std::uint8_t>(best);
    }
  return out;
}

template <typename T>
struct RefinedMask {
  Tensor<T> soft;     // o_re, (N, C, H, W)
  LabelBatch labels;  // argmax of soft
  Tensor<T> one_hot() const { return sfda::one_hot<T>(labels, soft.dim(1)); }
};

/// Applies the refinement with an affinity field computed once from `image`.
template <typename T>
Tensor<T> refine_soft(const Tensor<T>& mask, const AffinityField<T>& field, int iterations) {
  const int n = mask.dim(0), c = mask.dim(1), h = mask.dim(2), w = mask.dim(3);
  require(field.n == n && field.h == h && field.w == w, "mask and image shapes differ");
  const std::size_t kn = field.offsets.size();
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  // neighbor index table shared by every batch element and class
  std::vector<std::uint32_t> nbr(kn * plane);
  for (std::size_t k = 0; k < kn; ++k)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        nbr[k * plane + static_cast<std::size_t>(y) * w + x] = static_cast<std::uint32_t>(
            reflect(y + field.offsets[k].dy, h) * w + reflect(x + field.offsets[k].dx, w));

  Tensor<T> cur = mask, next(mask.shape());
  std::vector<double> acc(plane);
  for (int it = 0; it < iterations; ++it) {
    for (int b = 0; b < n; ++b) {
      const T* alpha = field.weights.data() + static_cast<std::size_t>(b) * kn * plane;
      for (int k = 0; k < c; ++k) {
        const T* src = cur.data() + cur.index(b, k, 0, 0);
        std::fill(acc.begin(), acc.end(), 0.0);
        for (std::size_t j = 0; j < kn; ++j) {
          const T* a = alpha + j * plane;
          const std::uint32_t* idx = nbr.data() + j * plane;
          for (std::size_t i = 0; i < plane; ++i)
            acc[i] += static_cast<double>(a[i]) * static_cast<double>(src[idx[i]]);
        }
        T* dst = next.data() + next.index(b, k, 0, 0);
        for (std::size_t i = 0; i < plane; ++i) dst[i] = static_cast<T>(acc[i]);
      }
    }
    std::swap(cur, next);
  }
  return cur;
}

/// Refined soft mask plus its hard pseudo-label. Pure target generation: the
/// result carries no gradient path back to `mask`.
template <typename T>
RefinedMask<T> refine(const Tensor<T>& mask, const Tensor<T>& image, const PamrConfig& cfg) {
  cfg.validate();
  require(mask.dim(0) == image.dim(0) && mask.dim(2) == image.dim(2) && mask.dim(3) == image.dim(3),
          "mask " + shape_str(mask.shape()) + " and image " + shape_str(image.shape()) + " are incompatible");
  const auto field = compute_affinity(image, cfg);
  RefinedMask<T> out;
  out.soft = refine_soft(mask, field, cfg.iterations);
  out.labels = to_pseudo_label(out.soft);
  return out;
}

/// Dice loss of `pred` against the refined pseudo-label of its own detached
/// copy; the gradient is with respect to the direct `pred` argument only.
template <typename T>
losses::ValueGrad<T> pamr_loss_grad(const Tensor<T>& pred, const Tensor<T>& image, const PamrConfig& cfg,
                                    const std::set<int>& class_set,
                                    losses::DiceReduction reduction = losses::DiceReduction::kPerClassMean) {
  const Tensor<T> detached = pred;
  const auto refined = refine(detached, image, cfg);
  return losses::dice_loss_grad(pred, refined.one_hot(), class_set, reduction);
}

template <typename T>
double pamr_loss(const Tensor<T>& pred, const Tensor<T>& image, const PamrConfig& cfg, const std::set<int>& class_set) {
  return pamr_loss_grad(pred, image, cfg, class_set).value;
}

}  // namespace sfda::pamr
