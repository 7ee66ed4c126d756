#pragma once

// Layer primitives with explicit forward/backward passes. Feature maps use the
// CNHW layout: tensor dims are (channels, batch, height, width), so a channel
// is one contiguous row and a convolution is a single GEMM over the batch.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "sfda/core/error.hpp"
#include "sfda/core/rng.hpp"
#include "sfda/core/tensor.hpp"

namespace sfda::nn {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

/// A learnable tensor and its accumulated gradient.
template <typename T>
struct Param {
  std::vector<T> value;
  std::vector<T> grad;

  explicit Param(std::size_t n = 0, T fill = T{}) : value(n, fill), grad(n, T{}) {}
  void zero_grad() { std::fill(grad.begin(), grad.end(), T{}); }
  std::size_t size() const { return value.size(); }
};

/// Channel-wise statistics of one batch-norm layer's input.
struct LayerStats {
  std::string layer_id;
  std::vector<double> mean;
  std::vector<double> var;
};

/// Gradient of a scalar loss with respect to one layer's batch statistics.
struct StatGrad {
  std::vector<double> d_mean;
  std::vector<double> d_var;
};

// ---------------------------------------------------------------------------
// Convolution (stride 1, same padding, odd square kernel)

template <typename T>
class Conv2d {
 public:
  Conv2d(int in_channels, int out_channels, int kernel, bool with_bias)
      : in_(in_channels),
        out_(out_channels),
        k_(kernel),
        with_bias_(with_bias),
        weight(static_cast<std::size_t>(out_channels) * in_channels * kernel * kernel),
        bias(with_bias ? static_cast<std::size_t>(out_channels) : 0) {
    require(kernel % 2 == 1, "convolution kernel must be odd");
  }

  /// Kaiming normal, fan-in mode; bias starts at zero.
  void init(Rng& rng) {
    const double std = std::sqrt(2.0 / static_cast<double>(in_ * k_ * k_));
    for (auto& w : weight.value) w = static_cast<T>(rng.normal() * std);
    std::fill(bias.value.begin(), bias.value.end(), T{});
  }

  int in_channels() const { return in_; }
  int out_channels() const { return out_; }

  void forward(const Tensor<T>& in, Tensor<T>& out) {
    require(in.dim(0) == in_, "convolution input has " + std::to_string(in.dim(0)) +
                                  " channels, expected " + std::to_string(in_));
    in_shape_ = in.shape();
    const int cols = in.dim(1) * in.dim(2) * in.dim(3);
    const int depth = in_ * k_ * k_;
    if (k_ == 1) {
      cols_ = in;
    } else {
      cols_.resize({depth, in.dim(1), in.dim(2), in.dim(3)});
      im2col(in);
    }
    out.resize({out_, in.dim(1), in.dim(2), in.dim(3)});
    ConstMatMap<T> w(weight.value.data(), out_, depth);
    ConstMatMap<T> c(cols_.data(), depth, cols);
    MatMap<T> o(out.data(), out_, cols);
    o.noalias() = w * c;
    if (with_bias_)
      for (int r = 0; r < out_; ++r) o.row(r).array() += bias.value[static_cast<std::size_t>(r)];
  }

  /// Accumulates parameter gradients when `param_grads`; writes the input
  /// gradient into `din` when non-null.
  void backward(const Tensor<T>& dout, Tensor<T>* din, bool param_grads) {
    const int cols = in_shape_[1] * in_shape_[2] * in_shape_[3];
    const int depth = in_ * k_ * k_;
    ConstMatMap<T> g(dout.data(), out_, cols);
    if (param_grads) {
      ConstMatMap<T> c(cols_.data(), depth, cols);
      MatMap<T> dw(weight.grad.data(), out_, depth);
      dw.noalias() += g * c.transpose();
      if (with_bias_)
        for (int r = 0; r < out_; ++r) {
          // fixed summation order: Eigen's vectorized sum depends on buffer alignment
          const T* row = dout.data() + static_cast<std::size_t>(r) * static_cast<std::size_t>(cols);
          bias.grad[static_cast<std::size_t>(r)] += std::accumulate(row, row + cols, T{});
        }
    }
    if (din != nullptr) {
      ConstMatMap<T> w(weight.value.data(), out_, depth);
      if (k_ == 1) {
        din->resize(in_shape_);
        MatMap<T> d(din->data(), depth, cols);
        d.noalias() = w.transpose() * g;
      } else {
        dcols_.resize({depth, in_shape_[1], in_shape_[2], in_shape_[3]});
        MatMap<T> d(dcols_.data(), depth, cols);
        d.noalias() = w.transpose() * g;
        col2im(*din);
      }
    }
  }

  template <typename F>
  void visit(const std::string& prefix, F&& fn) {
    fn(prefix + ".weight", weight);
    if (with_bias_) fn(prefix + ".bias", bias);
  }

  Param<T> weight;
  Param<T> bias;

 private:
  void im2col(const Tensor<T>& in) {
    const int n = in.dim(1), h = in.dim(2), w = in.dim(3), r = k_ / 2;
    T* dst = cols_.data();
    for (int c = 0; c < in_; ++c)
      for (int ky = 0; ky < k_; ++ky)
        for (int kx = 0; kx < k_; ++kx) {
          const int dy = ky - r, dx = kx - r;
          const int x0 = std::max(0, -dx), x1 = std::min(w, w - dx);
          for (int b = 0; b < n; ++b) {
            const T* src = in.data() + in.index(c, b, 0, 0);
            for (int y = 0; y < h; ++y, dst += w) {
              const int sy = y + dy;
              if (sy < 0 || sy >= h) {
                std::fill(dst, dst + w, T{});
                continue;
              }
              std::fill(dst, dst + x0, T{});
              std::copy(src + sy * w + x0 + dx, src + sy * w + x1 + dx, dst + x0);
              std::fill(dst + x1, dst + w, T{});
            }
          }
        }
  }

  void col2im(Tensor<T>& din) const {
    din.resize(in_shape_);
    din.fill(T{});
    const int n = in_shape_[1], h = in_shape_[2], w = in_shape_[3], r = k_ / 2;
    const T* src = dcols_.data();
    for (int c = 0; c < in_; ++c)
      for (int ky = 0; ky < k_; ++ky)
        for (int kx = 0; kx < k_; ++kx) {
          const int dy = ky - r, dx = kx - r;
          const int x0 = std::max(0, -dx), x1 = std::min(w, w - dx);
          for (int b = 0; b < n; ++b) {
            T* dst = din.data() + din.index(c, b, 0, 0);
            for (int y = 0; y < h; ++y, src += w) {
              const int sy = y + dy;
              if (sy < 0 || sy >= h) continue;
              T* row = dst + sy * w + dx;
              for (int x = x0; x < x1; ++x) row[x] += src[x];
            }
          }
        }
  }

  int in_, out_, k_;
  bool with_bias_;
  Tensor<T> cols_;
  Tensor<T> dcols_;
  typename Tensor<T>::Shape in_shape_{};
};

// ---------------------------------------------------------------------------
// Batch normalization

template <typename T>
class BatchNorm2d {
 public:
  static constexpr double kEps = 1e-5;
  static constexpr double kMomentum = 0.1;

  explicit BatchNorm2d(int channels)
      : c_(channels),
        gamma(static_cast<std::size_t>(channels), T(1)),
        beta(static_cast<std::size_t>(channels), T(0)),
        running_mean(static_cast<std::size_t>(channels), T(0)),
        running_var(static_cast<std::size_t>(channels), T(1)) {}

  int channels() const { return c_; }

  /// Batch statistics of the input are always recorded (they feed the
  /// feature-statistics loss). Normalization uses them only when
  /// `use_batch_stats`; running averages are updated only when
  /// `update_running`.
  void forward(const Tensor<T>& in, Tensor<T>& out, bool use_batch_stats, bool update_running) {
    require(in.dim(0) == c_, "batch-norm channel mismatch");
    input_ = in;
    used_batch_ = use_batch_stats;
    const std::size_t m = in.size() / static_cast<std::size_t>(c_);
    batch_mean_.assign(static_cast<std::size_t>(c_), 0.0);
    batch_var_.assign(static_cast<std::size_t>(c_), 0.0);
    inv_std_.assign(static_cast<std::size_t>(c_), 0.0);
    out.resize(in.shape());
    for (int c = 0; c < c_; ++c) {
      const auto ci = static_cast<std::size_t>(c);
      const T* x = in.data() + ci * m;
      double s = 0.0;
      for (std::size_t i = 0; i < m; ++i) s += static_cast<double>(x[i]);
      const double mean = s / static_cast<double>(m);
      double ss = 0.0;
      for (std::size_t i = 0; i < m; ++i) {
        const double d = static_cast<double>(x[i]) - mean;
        ss += d * d;
      }
      const double var = ss / static_cast<double>(m);
      batch_mean_[ci] = mean;
      batch_var_[ci] = var;

      const double mu = use_batch_stats ? mean : static_cast<double>(running_mean[ci]);
      const double v = use_batch_stats ? var : static_cast<double>(running_var[ci]);
      const double inv = 1.0 / std::sqrt(v + kEps);
      inv_std_[ci] = inv;
      const T scale = static_cast<T>(inv * static_cast<double>(gamma.value[ci]));
      const T shift = static_cast<T>(static_cast<double>(beta.value[ci]) -
                                     mu * inv * static_cast<double>(gamma.value[ci]));
      T* y = out.data() + ci * m;
      for (std::size_t i = 0; i < m; ++i) y[i] = x[i] * scale + shift;

      if (update_running) {
        const double unbiased = m > 1 ? var * static_cast<double>(m) / static_cast<double>(m - 1) : var;
        running_mean[ci] = static_cast<T>((1.0 - kMomentum) * static_cast<double>(running_mean[ci]) +
                                          kMomentum * mean);
        running_var[ci] = static_cast<T>((1.0 - kMomentum) * static_cast<double>(running_var[ci]) +
                                         kMomentum * unbiased);
      }
    }
  }

  /// `stat_grad`, when given, adds d(loss)/d(batch mean, batch var) of the
  /// input statistics to the input gradient.
  void backward(const Tensor<T>& dout, Tensor<T>* din, bool param_grads, const StatGrad* stat_grad) {
    const std::size_t m = input_.size() / static_cast<std::size_t>(c_);
    if (din != nullptr) din->resize(input_.shape());
    for (int c = 0; c < c_; ++c) {
      const auto ci = static_cast<std::size_t>(c);
      const T* x = input_.data() + ci * m;
      const T* dy = dout.data() + ci * m;
      const double mean = batch_mean_[ci];
      const double mu = used_batch_ ? mean : static_cast<double>(running_mean[ci]);
      const double inv = inv_std_[ci];
      double sum_dy = 0.0, sum_dy_xhat = 0.0;
      for (std::size_t i = 0; i < m; ++i) {
        const double xhat = (static_cast<double>(x[i]) - mu) * inv;
        sum_dy += static_cast<double>(dy[i]);
        sum_dy_xhat += static_cast<double>(dy[i]) * xhat;
      }
      if (param_grads) {
        gamma.grad[ci] += static_cast<T>(sum_dy_xhat);
        beta.grad[ci] += static_cast<T>(sum_dy);
      }
      if (din == nullptr) continue;
      T* dx = din->data() + ci * m;
      const double g = static_cast<double>(gamma.value[ci]);
      const double dm = stat_grad != nullptr ? stat_grad->d_mean[ci] : 0.0;
      const double dv = stat_grad != nullptr ? stat_grad->d_var[ci] : 0.0;
      const double inv_m = 1.0 / static_cast<double>(m);
      if (used_batch_) {
        const double mean_dxhat = g * sum_dy * inv_m;
        const double mean_dxhat_xhat = g * sum_dy_xhat * inv_m;
        for (std::size_t i = 0; i < m; ++i) {
          const double xc = static_cast<double>(x[i]) - mean;
          const double xhat = xc * inv;
          double v = inv * (g * static_cast<double>(dy[i]) - mean_dxhat - xhat * mean_dxhat_xhat);
          v += dm * inv_m + dv * 2.0 * xc * inv_m;
          dx[i] = static_cast<T>(v);
        }
      } else {
        const double a = g * inv;
        for (std::size_t i = 0; i < m; ++i) {
          const double xc = static_cast<double>(x[i]) - mean;
          dx[i] = static_cast<T>(a * static_cast<double>(dy[i]) + dm * inv_m + dv * 2.0 * xc * inv_m);
        }
      }
    }
  }

  LayerStats batch_stats(const std::string& id) const { return {id, batch_mean_, batch_var_}; }
  LayerStats running_stats(const std::string& id) const {
    LayerStats s{id, {}, {}};
    for (int c = 0; c < c_; ++c) {
      s.mean.push_back(static_cast<double>(running_mean[static_cast<std::size_t>(c)]));
      s.var.push_back(static_cast<double>(running_var[static_cast<std::size_t>(c)]));
    }
    return s;
  }

  template <typename F>
  void visit(const std::string& prefix, F&& fn) {
    fn(prefix + ".gamma", gamma);
    fn(prefix + ".beta", beta);
  }
  template <typename F>
  void visit_buffers(const std::string& prefix, F&& fn) {
    fn(prefix + ".running_mean", running_mean);
    fn(prefix + ".running_var", running_var);
  }

  Param<T> gamma;
  Param<T> beta;
  std::vector<T> running_mean;
  std::vector<T> running_var;

 private:
  int c_;
  bool used_batch_ = false;
  Tensor<T> input_;
  std::vector<double> batch_mean_, batch_var_, inv_std_;
};

// ---------------------------------------------------------------------------
// Activations and resampling

enum class Activation { kRelu, kSigmoid };

template <typename T>
void activate(Activation act, Tensor<T>& t) {
  if (act == Activation::kRelu) {
    for (auto& v : t.values()) v = v > T{} ? v : T{};
  } else {
    for (auto& v : t.values()) v = T(1) / (T(1) + std::exp(-v));
  }
}

/// In-place: turns d(out) into d(pre-activation) given the activation output.
template <typename T>
void activate_backward(Activation act, const Tensor<T>& out, Tensor<T>& grad) {
  const std::size_t n = out.size();
  if (act == Activation::kRelu) {
    for (std::size_t i = 0; i < n; ++i)
      if (!(out[i] > T{})) grad[i] = T{};
  } else {
    for (std::size_t i = 0; i < n; ++i) grad[i] *= out[i] * (T(1) - out[i]);
  }
}

/// 2x2 max pooling, stride 2. Records the winning offset for backward.
template <typename T>
void maxpool2(const Tensor<T>& in, Tensor<T>& out, std::vector<std::uint8_t>& arg) {
  const int h = in.dim(2) / 2, w = in.dim(3) / 2;
  out.resize({in.dim(0), in.dim(1), h, w});
  arg.resize(out.size());
  const std::size_t planes = static_cast<std::size_t>(in.dim(0)) * in.dim(1);
  for (std::size_t p = 0; p < planes; ++p) {
    const T* src = in.data() + p * in.plane();
    T* dst = out.data() + p * out.plane();
    std::uint8_t* a = arg.data() + p * out.plane();
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        const int w2 = in.dim(3);
        const T* s = src + (2 * y) * w2 + 2 * x;
        T best = s[0];
        std::uint8_t bi = 0;
        if (s[1] > best) best = s[1], bi = 1;
        if (s[w2] > best) best = s[w2], bi = 2;
        if (s[w2 + 1] > best) best = s[w2 + 1], bi = 3;
        dst[y * w + x] = best;
        a[y * w + x] = bi;
      }
  }
}

template <typename T>
void maxpool2_backward(const Tensor<T>& dout, const std::vector<std::uint8_t>& arg,
                       const typename Tensor<T>::Shape& in_shape, Tensor<T>& din) {
  din.resize(in_shape);
  din.fill(T{});
  const int h = dout.dim(2), w = dout.dim(3), w2 = in_shape[3];
  const std::size_t planes = static_cast<std::size_t>(dout.dim(0)) * dout.dim(1);
  for (std::size_t p = 0; p < planes; ++p) {
    const T* g = dout.data() + p * dout.plane();
    const std::uint8_t* a = arg.data() + p * dout.plane();
    T* d = din.data() + p * din.plane();
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        const int i = y * w + x;
        d[(2 * y + (a[i] >> 1)) * w2 + 2 * x + (a[i] & 1)] += g[i];
      }
  }
}

template <typename T>
void upsample2(const Tensor<T>& in, Tensor<T>& out) {
  const int h = in.dim(2), w = in.dim(3);
  out.resize({in.dim(0), in.dim(1), 2 * h, 2 * w});
  const std::size_t planes = static_cast<std::size_t>(in.dim(0)) * in.dim(1);
  for (std::size_t p = 0; p < planes; ++p) {
    const T* s = in.data() + p * in.plane();
    T* d = out.data() + p * out.plane();
    for (int y = 0; y < 2 * h; ++y)
      for (int x = 0; x < 2 * w; ++x) d[y * 2 * w + x] = s[(y / 2) * w + x / 2];
  }
}

template <typename T>
void upsample2_backward(const Tensor<T>& dout, Tensor<T>& din) {
  const int h = dout.dim(2) / 2, w = dout.dim(3) / 2;
  din.resize({dout.dim(0), dout.dim(1), h, w});
  din.fill(T{});
  const std::size_t planes = static_cast<std::size_t>(dout.dim(0)) * dout.dim(1);
  for (std::size_t p = 0; p < planes; ++p) {
    const T* g = dout.data() + p * dout.plane();
    T* d = din.data() + p * din.plane();
    for (int y = 0; y < 2 * h; ++y)
      for (int x = 0; x < 2 * w; ++x) d[(y / 2) * w + x / 2] += g[y * 2 * w + x];
  }
}

/// Channel concatenation in CNHW is a row append.
template <typename T>
void concat_channels(const Tensor<T>& a, const Tensor<T>& b, Tensor<T>& out) {
  require(a.dim(1) == b.dim(1) && a.dim(2) == b.dim(2) && a.dim(3) == b.dim(3),
          "concat shape mismatch");
  out.resize({a.dim(0) + b.dim(0), a.dim(1), a.dim(2), a.dim(3)});
  std::copy(a.values().begin(), a.values().end(), out.data());
  std::copy(b.values().begin(), b.values().end(), out.data() + a.size());
}

template <typename T>
void split_channels(const Tensor<T>& g, int first, Tensor<T>& ga, Tensor<T>& gb) {
  ga.resize({first, g.dim(1), g.dim(2), g.dim(3)});
  gb.resize({g.dim(0) - first, g.dim(1), g.dim(2), g.dim(3)});
  std::copy_n(g.data(), ga.size(), ga.data());
  std::copy_n(g.data() + ga.size(), gb.size(), gb.data());
}

/// Softmax across the leading (channel) axis of a CNHW tensor.
template <typename T>
void softmax_channels(const Tensor<T>& logits, Tensor<T>& probs) {
  probs.resize(logits.shape());
  const int c = logits.dim(0);
  const std::size_t m = logits.size() / static_cast<std::size_t>(c);
  for (std::size_t i = 0; i < m; ++i) {
    T mx = logits[i];
    for (int k = 1; k < c; ++k) mx = std::max(mx, logits[static_cast<std::size_t>(k) * m + i]);
    T s{};
    for (int k = 0; k < c; ++k) {
      const T e = std::exp(logits[static_cast<std::size_t>(k) * m + i] - mx);
      probs[static_cast<std::size_t>(k) * m + i] = e;
      s += e;
    }
    for (int k = 0; k < c; ++k) probs[static_cast<std::size_t>(k) * m + i] /= s;
  }
}

template <typename T>
void softmax_channels_backward(const Tensor<T>& probs, const Tensor<T>& dprobs, Tensor<T>& dlogits) {
  dlogits.resize(probs.shape());
  const int c = probs.dim(0);
  const std::size_t m = probs.size() / static_cast<std::size_t>(c);
  for (std::size_t i = 0; i < m; ++i) {
    T dot{};
    for (int k = 0; k < c; ++k) {
      const std::size_t j = static_cast<std::size_t>(k) * m + i;
      dot += probs[j] * dprobs[j];
    }
    for (int k = 0; k < c; ++k) {
      const std::size_t j = static_cast<std::size_t>(k) * m + i;
      dlogits[j] = probs[j] * (dprobs[j] - dot);
    }
  }
}

// ---------------------------------------------------------------------------
// conv -> batch-norm -> activation

template <typename T>
class ConvUnit {
 public:
  ConvUnit(int in_channels, int out_channels, int kernel, Activation act)
      : conv(in_channels, out_channels, kernel, false), bn(out_channels), act_(act) {}

  void init(Rng& rng) { conv.init(rng); }

  /// `batch_mode` selects batch statistics (and running-average updates)
  /// in the batch-norm layer; otherwise stored statistics are used.
  const Tensor<T>& forward(const Tensor<T>& in, bool batch_mode) {
    conv.forward(in, conv_out_);
    bn.forward(conv_out_, out_, batch_mode, batch_mode);
    activate(act_, out_);
    return out_;
  }

  void backward(const Tensor<T>& dout, Tensor<T>* din, bool param_grads, const StatGrad* stat_grad) {
    grad_ = dout;
    activate_backward(act_, out_, grad_);
    bn.backward(grad_, &dbn_, param_grads, stat_grad);
    conv.backward(dbn_, din, param_grads);
  }

  const Tensor<T>& output() const { return out_; }

  template <typename F>
  void visit(const std::string& prefix, F&& fn) {
    conv.visit(prefix + ".conv", fn);
    bn.visit(prefix + ".bn", fn);
  }
  template <typename F>
  void visit_buffers(const std::string& prefix, F&& fn) {
    bn.visit_buffers(prefix + ".bn", fn);
  }

  Conv2d<T> conv;
  BatchNorm2d<T> bn;

 private:
  Activation act_;
  Tensor<T> conv_out_, out_, grad_, dbn_;
};

}  // namespace sfda::nn
