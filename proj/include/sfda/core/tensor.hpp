#pragma once

#include <algorithm>
#include <array>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "sfda/core/error.hpp"

namespace sfda {

/// Dense 4D array with row-major storage. Public APIs use NCHW; the network
/// internals reuse the same type with a CNHW interpretation so that every
/// channel is one contiguous row of N*H*W values.
template <typename T>
class Tensor {
 public:
  using value_type = T;
  using Shape = std::array<int, 4>;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T{})
      : shape_(shape), data_(count(shape), fill) {}
  Tensor(int d0, int d1, int d2, int d3, T fill = T{})
      : Tensor(Shape{d0, d1, d2, d3}, fill) {}

  const Shape& shape() const noexcept { return shape_; }
  int dim(int i) const noexcept { return shape_[static_cast<std::size_t>(i)]; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  T* data() noexcept { return data_.data(); }
  const T* data() const noexcept { return data_.data(); }
  std::span<T> span() noexcept { return data_; }
  std::span<const T> span() const noexcept { return data_; }
  std::vector<T>& values() noexcept { return data_; }
  const std::vector<T>& values() const noexcept { return data_; }

  /// Size of the trailing (d2, d3) plane.
  std::size_t plane() const noexcept {
    return static_cast<std::size_t>(shape_[2]) * static_cast<std::size_t>(shape_[3]);
  }

  std::size_t index(int a, int b, int c, int d) const noexcept {
    return ((static_cast<std::size_t>(a) * static_cast<std::size_t>(shape_[1]) +
             static_cast<std::size_t>(b)) *
                static_cast<std::size_t>(shape_[2]) +
            static_cast<std::size_t>(c)) *
               static_cast<std::size_t>(shape_[3]) +
           static_cast<std::size_t>(d);
  }
  T& operator()(int a, int b, int c, int d) noexcept { return data_[index(a, b, c, d)]; }
  const T& operator()(int a, int b, int c, int d) const noexcept {
    return data_[index(a, b, c, d)];
  }
  T& operator[](std::size_t i) noexcept { return data_[i]; }
  const T& operator[](std::size_t i) const noexcept { return data_[i]; }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  /// Reallocates only when the element count changes.
  void resize(Shape shape) {
    shape_ = shape;
    data_.resize(count(shape));
  }

  bool same_shape(const Tensor& other) const noexcept { return shape_ == other.shape_; }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out(shape_);
    std::transform(data_.begin(), data_.end(), out.data(),
                   [](T v) { return static_cast<U>(v); });
    return out;
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

  static std::size_t count(const Shape& s) {
    std::size_t n = 1;
    for (int d : s) {
      require(d >= 0, "tensor dimensions must be non-negative");
      n *= static_cast<std::size_t>(d);
    }
    return n;
  }

 private:
  Shape shape_{0, 0, 0, 0};
  std::vector<T> data_;
};

inline std::string shape_str(const std::array<int, 4>& s) {
  return "(" + std::to_string(s[0]) + "," + std::to_string(s[1]) + "," +
         std::to_string(s[2]) + "," + std::to_string(s[3]) + ")";
}

/// Swaps the two leading axes: NCHW <-> CNHW.
template <typename T>
Tensor<T> swap_leading(const Tensor<T>& in) {
  const int a = in.dim(0), b = in.dim(1);
  Tensor<T> out(b, a, in.dim(2), in.dim(3));
  const std::size_t p = in.plane();
  for (int i = 0; i < a; ++i)
    for (int j = 0; j < b; ++j)
      std::copy_n(in.data() + (static_cast<std::size_t>(i) * b + j) * p, p,
                  out.data() + (static_cast<std::size_t>(j) * a + i) * p);
  return out;
}

/// Per-pixel integer class map, batch x H x W.
struct LabelBatch {
  int n = 0, h = 0, w = 0;
  std::vector<std::uint8_t> labels;

  LabelBatch() = default;
  LabelBatch(int n_, int h_, int w_)
      : n(n_), h(h_), w(w_), labels(static_cast<std::size_t>(n_) * h_ * w_, 0) {}
  std::uint8_t& at(int b, int y, int x) {
    return labels[(static_cast<std::size_t>(b) * h + y) * w + x];
  }
  std::uint8_t at(int b, int y, int x) const {
    return labels[(static_cast<std::size_t>(b) * h + y) * w + x];
  }
  friend bool operator==(const LabelBatch&, const LabelBatch&) = default;
};

/// One-hot expansion of a label map into an NCHW tensor.
template <typename T>
Tensor<T> one_hot(const LabelBatch& labels, int num_classes) {
  Tensor<T> out(labels.n, num_classes, labels.h, labels.w);
  const std::size_t p = static_cast<std::size_t>(labels.h) * labels.w;
  for (int b = 0; b < labels.n; ++b)
    for (std::size_t i = 0; i < p; ++i) {
      const int c = labels.labels[static_cast<std::size_t>(b) * p + i];
      require(c < num_classes, "label exceeds class count");
      out[(static_cast<std::size_t>(b) * num_classes + c) * p + i] = T(1);
    }
  return out;
}

}  // namespace sfda
