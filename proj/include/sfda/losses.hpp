#pragma once

// Dice, entropy and feature-map-statistics losses with analytic gradients,
// plus the stage-gated weighted objective.

#include <array>
#include <cmath>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "sfda/core/error.hpp"
#include "sfda/core/tensor.hpp"
#include "sfda/nn/layers.hpp"

namespace sfda::losses {

inline constexpr double kDiceEps = 1e-6;
inline constexpr double kLogClamp = 1e-12;

template <typename T>
struct ValueGrad {
  double value = 0.0;
  Tensor<T> grad;  // d(value)/d(prediction), same shape as the prediction
};

/// How class-wise overlaps are combined.
enum class DiceReduction {
  kPerClassMean,  // mean of per-class soft dice coefficients
  kFlatSum,       // one coefficient over the stacked class channels
};

/// Foreground classes 1..C-1.
inline std::set<int> foreground_classes(int num_classes) {
  std::set<int> s;
  for (int c = 1; c < num_classes; ++c) s.insert(c);
  return s;
}

/// 1 - soft dice, where per class DSC_c = (2 sum(y o) + eps) / (sum(y^2) + sum(o^2) + eps)
/// with sums over batch and pixels. Returns the loss and its gradient.
template <typename T>
ValueGrad<T> dice_loss_grad(const Tensor<T>& pred, const Tensor<T>& target, const std::set<int>& class_set,
                            DiceReduction reduction = DiceReduction::kPerClassMean) {
  require(!class_set.empty(), "dice loss needs a non-empty class set");
  require(pred.shape() == target.shape(),
          "dice shape mismatch: " + shape_str(pred.shape()) + " vs " + shape_str(target.shape()));
  const int n = pred.dim(0), c = pred.dim(1);
  for (int k : class_set) require(k >= 0 && k < c, "dice class id out of range: " + std::to_string(k));
  const std::size_t p = pred.plane();

  auto sums = [&](int k, double& inter, double& denom) {
    for (int b = 0; b < n; ++b) {
      const T* o = pred.data() + pred.index(b, k, 0, 0);
      const T* y = target.data() + target.index(b, k, 0, 0);
      for (std::size_t i = 0; i < p; ++i) {
        const double ov = static_cast<double>(o[i]), yv = static_cast<double>(y[i]);
        inter += yv * ov;
        denom += yv * yv + ov * ov;
      }
    }
  };

  ValueGrad<T> out;
  out.grad = Tensor<T>(pred.shape());
  if (reduction == DiceReduction::kPerClassMean) {
    const double w = 1.0 / static_cast<double>(class_set.size());
    double mean_dsc = 0.0;
    for (int k : class_set) {
      double inter = 0.0, denom = 0.0;
      sums(k, inter, denom);
      const double num = 2.0 * inter + kDiceEps, den = denom + kDiceEps;
      mean_dsc += w * num / den;
      // d(1 - w*DSC)/do = -w * (2y*den - num*2o) / den^2
      for (int b = 0; b < n; ++b) {
        const T* o = pred.data() + pred.index(b, k, 0, 0);
        const T* y = target.data() + target.index(b, k, 0, 0);
        T* g = out.grad.data() + out.grad.index(b, k, 0, 0);
        for (std::size_t i = 0; i < p; ++i)
          g[i] = static_cast<T>(-w * (2.0 * static_cast<double>(y[i]) * den - num * 2.0 * static_cast<double>(o[i])) /
                                (den * den));
      }
    }
    out.value = 1.0 - mean_dsc;
  } else {
    double inter = 0.0, denom = 0.0;
    for (int k : class_set) sums(k, inter, denom);
    const double num = 2.0 * inter + kDiceEps, den = denom + kDiceEps;
    out.value = 1.0 - num / den;
    for (int k : class_set)
      for (int b = 0; b < n; ++b) {
        const T* o = pred.data() + pred.index(b, k, 0, 0);
        const T* y = target.data() + target.index(b, k, 0, 0);
        T* g = out.grad.data() + out.grad.index(b, k, 0, 0);
        for (std::size_t i = 0; i < p; ++i)
          g[i] = static_cast<T>(-(2.0 * static_cast<double>(y[i]) * den - num * 2.0 * static_cast<double>(o[i])) /
                                (den * den));
      }
  }
  return out;
}

template <typename T>
double dice_loss(const Tensor<T>& pred, const Tensor<T>& target, const std::set<int>& class_set,
                 DiceReduction reduction = DiceReduction::kPerClassMean) {
  return dice_loss_grad(pred, target, class_set, reduction).value;
}

/// Mean per-pixel Shannon entropy (natural log) of the class distribution.
template <typename T>
ValueGrad<T> entropy_loss_grad(const Tensor<T>& pred) {
  const int n = pred.dim(0), c = pred.dim(1);
  const std::size_t p = pred.plane();
  const double norm = 1.0 / (static_cast<double>(n) * static_cast<double>(p));
  ValueGrad<T> out;
  out.grad = Tensor<T>(pred.shape());
  double total = 0.0;
  for (int b = 0; b < n; ++b)
    for (int k = 0; k < c; ++k) {
      const T* o = pred.data() + pred.index(b, k, 0, 0);
      T* g = out.grad.data() + out.grad.index(b, k, 0, 0);
      for (std::size_t i = 0; i < p; ++i) {
        const double v = static_cast<double>(o[i]);
        const double lv = std::log(std::max(v, kLogClamp));
        total -= v * lv;
        g[i] = static_cast<T>(-(lv + (v > kLogClamp ? 1.0 : 0.0)) * norm);
      }
    }
  out.value = total * norm;
  return out;
}

template <typename T>
double entropy_loss(const Tensor<T>& pred) {
  return entropy_loss_grad(pred).value;
}

struct FmsResult {
  double value = 0.0;
  std::vector<nn::StatGrad> grads;  // aligned with the batch statistics
};

/// Sum over layers of ||mu_batch - mu_ref||_2 + ||var_batch - var_ref||_2.
/// Gradients are with respect to the batch statistics only; a zero
/// difference contributes a zero (sub)gradient.
inline FmsResult fms_loss_grad(const std::vector<nn::LayerStats>& batch_stats,
                               const std::vector<nn::LayerStats>& running_stats) {
  require(batch_stats.size() == running_stats.size(),
          "feature statistics are not layer-aligned: " + std::to_string(batch_stats.size()) + " vs " +
              std::to_string(running_stats.size()));
  FmsResult out;
  for (std::size_t l = 0; l < batch_stats.size(); ++l) {
    const auto& b = batch_stats[l];
    const auto& r = running_stats[l];
    require(b.mean.size() == r.mean.size() && b.var.size() == r.var.size() && b.mean.size() == b.var.size(),
            "feature statistics channel mismatch at layer " + std::to_string(l));
    nn::StatGrad g{std::vector<double>(b.mean.size(), 0.0), std::vector<double>(b.var.size(), 0.0)};
    auto norm_term = [](const std::vector<double>& x, const std::vector<double>& ref, std::vector<double>& grad) {
      double ss = 0.0;
      for (std::size_t i = 0; i < x.size(); ++i) ss += (x[i] - ref[i]) * (x[i] - ref[i]);
      const double nrm = std::sqrt(ss);
      if (nrm > 0.0)
        for (std::size_t i = 0; i < x.size(); ++i) grad[i] = (x[i] - ref[i]) / nrm;
      return nrm;
    };
    out.value += norm_term(b.mean, r.mean, g.d_mean);
    out.value += norm_term(b.var, r.var, g.d_var);
    out.grads.push_back(std::move(g));
  }
  return out;
}

inline double fms_loss(const std::vector<nn::LayerStats>& batch_stats,
                       const std::vector<nn::LayerStats>& running_stats) {
  return fms_loss_grad(batch_stats, running_stats).value;
}

// ---------------------------------------------------------------------------
// Weighted objective

enum class Component : int { kFms = 0, kEnt, kSegSc, kSegU3, kPamr, kSegCirc };
inline constexpr std::array<const char*, 6> kComponentNames{"fms", "ent", "seg_sc", "seg_u3", "pamr", "seg_circ"};

struct LossWeights {
  std::array<double, 6> lambda{0.001, 10.0, 1.0, 1.0, 0.6, 0.3};

  double operator[](Component c) const { return lambda[static_cast<std::size_t>(c)]; }
  void validate() const {
    for (double l : lambda) require(std::isfinite(l) && l >= 0.0, "loss weights must be finite and non-negative");
  }
  friend bool operator==(const LossWeights&, const LossWeights&) = default;
};

struct StageSchedule {
  int transition_epoch = 150;  // T
  int total_epochs = 300;

  void validate() const {
    require(transition_epoch > 0 && transition_epoch <= total_epochs,
            "stage schedule needs 0 < T <= total_epochs");
  }
  bool second_stage(int epoch) const { return epoch >= transition_epoch; }
  friend bool operator==(const StageSchedule&, const StageSchedule&) = default;
};

/// Unweighted component values; nullopt marks a component as inactive.
using LossComponents = std::array<std::optional<double>, 6>;

struct LossReport {
  LossComponents components{};
  LossWeights weights{};
  double total = 0.0;

  bool active(Component c) const { return components[static_cast<std::size_t>(c)].has_value(); }
  int active_count() const {
    int n = 0;
    for (const auto& c : components) n += c.has_value() ? 1 : 0;
    return n;
  }
  double weighted(Component c) const {
    const auto& v = components[static_cast<std::size_t>(c)];
    return v ? weights[c] * *v : 0.0;
  }

  static std::string csv_header() {
    std::string h = "epoch,step";
    for (const char* n : kComponentNames) h += std::string(",") + n;
    return h + ",total";
  }
  /// One training-log line; inactive components are written as NA.
  std::string csv_line(int epoch, int step) const {
    std::ostringstream os;
    os.precision(9);
    os << epoch << ',' << step;
    for (const auto& c : components) {
      os << ',';
      if (c)
        os << *c;
      else
        os << "NA";
    }
    os << ',' << total;
    return os.str();
  }
};

/// Before T only the first four terms may be present; from T onward the
/// PAMR and circular terms join. Supplying a stage-2 term early is a
/// schedule violation.
inline LossReport total_loss(const LossComponents& components, const LossWeights& weights, int epoch,
                             const StageSchedule& sched) {
  require(epoch >= 0, "epoch must be non-negative");
  weights.validate();
  if (!sched.second_stage(epoch)) {
    if (components[static_cast<std::size_t>(Component::kPamr)] ||
        components[static_cast<std::size_t>(Component::kSegCirc)])
      throw ScheduleError("stage-2 loss components supplied at epoch " + std::to_string(epoch) +
                          " before transition epoch " + std::to_string(sched.transition_epoch));
  }
  LossReport r;
  r.components = components;
  r.weights = weights;
  for (std::size_t k = 0; k < components.size(); ++k)
    if (components[k]) r.total += weights.lambda[k] * *components[k];
  return r;
}

}  // namespace sfda::losses
