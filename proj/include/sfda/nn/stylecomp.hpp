#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "sfda/core/error.hpp"
#include "sfda/core/rng.hpp"
#include "sfda/core/tensor.hpp"
#include "sfda/nn/layers.hpp"

namespace sfda::nn {

struct SCSpec {
  std::vector<int> layer_filters{64, 32, 16, 8, 4, 2, 1};
  int kernel_size = 3;
  int input_channels = 1;

  void validate() const {
    require(layer_filters.size() == 7,
            "style-compensation net needs exactly 7 layers, got " + std::to_string(layer_filters.size()));
    require(layer_filters.back() == 1, "last style-compensation layer must have 1 filter");
    for (int f : layer_filters) require(f > 0, "layer widths must be positive");
    require(kernel_size % 2 == 1 && kernel_size >= 1, "kernel size must be odd");
  }

  friend bool operator==(const SCSpec&, const SCSpec&) = default;
};

/// Seven stacked conv -> batch-norm -> activation layers (ReLU x6, sigmoid
/// last), stride 1 with same padding, no pooling. The output is the
/// per-pixel compensation coefficient in (0, 1).
template <typename T>
class StyleCompNet {
 public:
  StyleCompNet(const SCSpec& spec, std::uint64_t seed) : spec_(spec) {
    spec_.validate();
    int in = spec_.input_channels;
    for (std::size_t i = 0; i < spec_.layer_filters.size(); ++i) {
      const bool last = i + 1 == spec_.layer_filters.size();
      units_.emplace_back(in, spec_.layer_filters[i], spec_.kernel_size,
                          last ? Activation::kSigmoid : Activation::kRelu);
      in = spec_.layer_filters[i];
    }
    Rng rng(seed);
    for (auto& u : units_) u.init(rng);
  }

  StyleCompNet(const StyleCompNet&) = delete;
  StyleCompNet& operator=(const StyleCompNet&) = delete;

  const SCSpec& spec() const { return spec_; }

  /// x: (N, 1, H, W) -> (N, 1, H, W). With one output channel NCHW and the
  /// internal CNHW layout coincide.
  const Tensor<T>& forward(const Tensor<T>& x, bool train) {
    require(x.dim(1) == spec_.input_channels, "input channel mismatch");
    x_ = swap_leading(x);
    const Tensor<T>* cur = &x_;
    for (auto& u : units_) cur = &u.forward(*cur, train);
    out_ = swap_leading(*cur);
    return out_;
  }

  void backward(const Tensor<T>& dout, Tensor<T>* dinput = nullptr) {
    Tensor<T> g = swap_leading(dout), tmp;
    for (std::size_t i = units_.size(); i-- > 0;) {
      Tensor<T>* dst = i == 0 ? (dinput != nullptr ? &tmp : nullptr) : &tmp;
      units_[i].backward(g, dst, true, nullptr);
      if (dst != nullptr) std::swap(g, tmp);
    }
    if (dinput != nullptr) *dinput = swap_leading(g);
  }

  template <typename F>
  void visit_params(F&& fn) {
    for (std::size_t i = 0; i < units_.size(); ++i)
      units_[i].visit("layer" + std::to_string(i + 1), [&](const std::string& n, Param<T>& p) { fn(n, p, true); });
  }
  template <typename F>
  void visit_buffers(F&& fn) {
    for (std::size_t i = 0; i < units_.size(); ++i) units_[i].visit_buffers("layer" + std::to_string(i + 1), fn);
  }

  std::vector<Param<T>*> trainable_params() {
    std::vector<Param<T>*> out;
    visit_params([&](const std::string&, Param<T>& p, bool) { out.push_back(&p); });
    return out;
  }
  void zero_grad() {
    visit_params([](const std::string&, Param<T>& p, bool) { p.zero_grad(); });
  }
  std::size_t parameter_count() {
    std::size_t n = 0;
    visit_params([&](const std::string&, Param<T>& p, bool) { n += p.size(); });
    return n;
  }

 private:
  SCSpec spec_;
  std::vector<ConvUnit<T>> units_;
  Tensor<T> x_, out_;
};

/// Element-wise compensation x * p (broadcast over channels).
template <typename T>
Tensor<T> compensate(const Tensor<T>& image, const Tensor<T>& coeff) {
  require(image.dim(0) == coeff.dim(0) && image.dim(2) == coeff.dim(2) && image.dim(3) == coeff.dim(3) &&
              coeff.dim(1) == 1,
          "compensation shape mismatch: image " + shape_str(image.shape()) + " vs coefficient " +
              shape_str(coeff.shape()));
  Tensor<T> out(image.shape());
  const std::size_t p = image.plane();
  for (int n = 0; n < image.dim(0); ++n)
    for (int c = 0; c < image.dim(1); ++c) {
      const T* x = image.data() + image.index(n, c, 0, 0);
      const T* s = coeff.data() + coeff.index(n, 0, 0, 0);
      T* o = out.data() + out.index(n, c, 0, 0);
      for (std::size_t i = 0; i < p; ++i) o[i] = x[i] * s[i];
    }
  return out;
}

/// Given d(loss)/d(output), returns d(loss)/d(image) and d(loss)/d(coeff).
template <typename T>
void compensate_backward(const Tensor<T>& image, const Tensor<T>& coeff, const Tensor<T>& dout,
                         Tensor<T>* dimage, Tensor<T>* dcoeff) {
  const std::size_t p = image.plane();
  if (dimage != nullptr) dimage->resize(image.shape());
  if (dcoeff != nullptr) {
    dcoeff->resize(coeff.shape());
    dcoeff->fill(T{});
  }
  for (int n = 0; n < image.dim(0); ++n)
    for (int c = 0; c < image.dim(1); ++c) {
      const T* x = image.data() + image.index(n, c, 0, 0);
      const T* s = coeff.data() + coeff.index(n, 0, 0, 0);
      const T* g = dout.data() + dout.index(n, c, 0, 0);
      for (std::size_t i = 0; i < p; ++i) {
        if (dimage != nullptr) (*dimage)[dimage->index(n, c, 0, 0) + i] = g[i] * s[i];
        if (dcoeff != nullptr) (*dcoeff)[dcoeff->index(n, 0, 0, 0) + i] += g[i] * x[i];
      }
    }
}

}  // namespace sfda::nn
