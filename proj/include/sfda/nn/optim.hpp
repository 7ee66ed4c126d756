#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "sfda/core/error.hpp"
#include "sfda/nn/layers.hpp"

namespace sfda::nn {

enum class OptimizerKind { kAdam, kRmsprop };

inline std::string to_string(OptimizerKind k) { return k == OptimizerKind::kAdam ? "adam" : "rmsprop"; }
inline OptimizerKind optimizer_from_string(const std::string& s) {
  if (s == "adam") return OptimizerKind::kAdam;
  if (s == "rmsprop") return OptimizerKind::kRmsprop;
  throw ValidationError("unknown optimizer: " + s + " (expected adam or rmsprop)");
}

struct OptimizerSettings {
  OptimizerKind kind = OptimizerKind::kRmsprop;
  double learning_rate = 1e-4;
  /// RMSprop smoothing constant (alpha); unused by Adam.
  double smoothing = 0.9;
  int batch_size = 8;
};

/// Slot state for every parameter, in the order the parameters were bound.
struct OptimizerState {
  long long step = 0;
  std::vector<std::vector<double>> first;   // Adam m
  std::vector<std::vector<double>> second;  // Adam v / RMSprop square average
};

/// Adam (beta1 0.9, beta2 0.999, eps 1e-8, bias corrected) or RMSprop
/// (v = a v + (1-a) g^2, p -= lr g / (sqrt(v) + eps)). Optimizer moments are
/// kept in double regardless of parameter precision.
template <typename T>
class Optimizer {
 public:
  Optimizer(OptimizerSettings settings, std::vector<Param<T>*> params)
      : settings_(settings), params_(std::move(params)) {
    require(settings_.learning_rate > 0, "learning rate must be positive");
    for (auto* p : params_) {
      state_.second.emplace_back(p->size(), 0.0);
      if (settings_.kind == OptimizerKind::kAdam) state_.first.emplace_back(p->size(), 0.0);
    }
  }

  void step() {
    ++state_.step;
    const double lr = settings_.learning_rate;
    constexpr double eps = 1e-8;
    for (std::size_t k = 0; k < params_.size(); ++k) {
      auto& p = *params_[k];
      auto& v = state_.second[k];
      if (settings_.kind == OptimizerKind::kRmsprop) {
        const double a = settings_.smoothing;
        for (std::size_t i = 0; i < p.size(); ++i) {
          const double g = static_cast<double>(p.grad[i]);
          v[i] = a * v[i] + (1.0 - a) * g * g;
          p.value[i] = static_cast<T>(static_cast<double>(p.value[i]) - lr * g / (std::sqrt(v[i]) + eps));
        }
      } else {
        constexpr double b1 = 0.9, b2 = 0.999;
        auto& m = state_.first[k];
        const double c1 = 1.0 - std::pow(b1, static_cast<double>(state_.step));
        const double c2 = 1.0 - std::pow(b2, static_cast<double>(state_.step));
        for (std::size_t i = 0; i < p.size(); ++i) {
          const double g = static_cast<double>(p.grad[i]);
          m[i] = b1 * m[i] + (1.0 - b1) * g;
          v[i] = b2 * v[i] + (1.0 - b2) * g * g;
          const double mh = m[i] / c1, vh = v[i] / c2;
          p.value[i] = static_cast<T>(static_cast<double>(p.value[i]) - lr * mh / (std::sqrt(vh) + eps));
        }
      }
    }
  }

  void zero_grad() {
    for (auto* p : params_) p->zero_grad();
  }

  const OptimizerSettings& settings() const { return settings_; }
  OptimizerState& state() { return state_; }
  const OptimizerState& state() const { return state_; }

 private:
  OptimizerSettings settings_;
  std::vector<Param<T>*> params_;
  OptimizerState state_;
};

}  // namespace sfda::nn
