#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "sfda/core/error.hpp"
#include "sfda/core/rng.hpp"
#include "sfda/core/tensor.hpp"
#include "sfda/nn/layers.hpp"

namespace sfda::nn {

/// Widths of the nine convolution blocks (encoder 1-5, decoder 6-9).
struct NetworkSpec {
  std::array<int, 9> block_filters{64, 128, 256, 512, 1024, 512, 256, 128, 64};
  int num_classes = 5;
  int input_channels = 1;

  void validate() const {
    for (int f : block_filters) require(f > 0, "block widths must be positive");
    for (std::size_t i = 0; i < 4; ++i)
      require(block_filters[i] == block_filters[8 - i],
              "block widths must be symmetric (block " + std::to_string(i + 1) +
                  " vs block " + std::to_string(9 - i) + ")");
    require(num_classes >= 2, "need at least two classes");
    require(input_channels >= 1, "need at least one input channel");
  }

  friend bool operator==(const NetworkSpec&, const NetworkSpec&) = default;
};

/// Source/adaptation networks (U1, U2).
inline NetworkSpec full_unet_spec() { return {{64, 128, 256, 512, 1024, 512, 256, 128, 64}, 5, 1}; }
/// The compact desired model (U3).
inline NetworkSpec compact_unet_spec() { return {{16, 32, 64, 128, 256, 128, 64, 32, 16}, 5, 1}; }

/// Blocks that receive gradient updates. Everything else is frozen: no
/// parameter updates and batch-norm layers run on stored statistics.
struct FreezePlan {
  std::set<std::string> trainable_block_ids;

  static FreezePlan all_frozen() { return {}; }
  static FreezePlan frontend_only() { return {{"conv1"}}; }
};

/// U-Net with 9 double-conv blocks, 4 max-pools, 4 upsampling blocks
/// (nearest x2 -> conv3x3 -> BN -> ReLU), 4 skip concatenations and a final
/// 1x1 convolution followed by softmax.
///
/// Block ids: conv1..conv9, up1..up4, final. Batch-norm layers are numbered in
/// forward order (22 in total).
template <typename T>
class UNet {
 public:
  UNet(const NetworkSpec& spec, std::uint64_t seed) : spec_(spec) {
    spec_.validate();
    const auto& f = spec_.block_filters;
    int in = spec_.input_channels;
    for (int b = 0; b < 5; ++b) {
      blocks_.push_back(make_block("conv" + std::to_string(b + 1), in, f[static_cast<std::size_t>(b)]));
      in = f[static_cast<std::size_t>(b)];
    }
    for (int u = 0; u < 4; ++u) {
      const int out = f[static_cast<std::size_t>(5 + u)];
      ups_.push_back(make_up("up" + std::to_string(u + 1), in, out));
      const int skip = f[static_cast<std::size_t>(3 - u)];
      blocks_.push_back(make_block("conv" + std::to_string(6 + u), out + skip, out));
      in = out;
    }
    final_ = std::make_unique<Conv2d<T>>(in, spec_.num_classes, 1, true);
    std::size_t offset = 0;
    for_each_block([&](Block& b) {
      b.bn_offset = offset;
      offset += b.units.size();
    });

    Rng rng(seed);
    for (int b = 0; b < 5; ++b) init_block(*blocks_[static_cast<std::size_t>(b)], rng);
    for (int u = 0; u < 4; ++u) {
      init_block(*ups_[static_cast<std::size_t>(u)], rng);
      init_block(*blocks_[static_cast<std::size_t>(5 + u)], rng);
    }
    final_->init(rng);
    FreezePlan all;
    for (const auto& id : block_ids()) all.trainable_block_ids.insert(id);
    apply_freeze(all);
  }

  UNet(const UNet&) = delete;
  UNet& operator=(const UNet&) = delete;

  const NetworkSpec& spec() const { return spec_; }

  std::vector<std::string> block_ids() const {
    std::vector<std::string> ids;
    for (int b = 1; b <= 9; ++b) ids.push_back("conv" + std::to_string(b));
    for (int u = 1; u <= 4; ++u) ids.push_back("up" + std::to_string(u));
    ids.push_back("final");
    return ids;
  }

  void apply_freeze(const FreezePlan& plan) {
    const auto ids = block_ids();
    for (const auto& id : plan.trainable_block_ids)
      require(std::find(ids.begin(), ids.end(), id) != ids.end(), "unknown block id: " + id);
    for (auto& b : blocks_) b->trainable = plan.trainable_block_ids.count(b->id) > 0;
    for (auto& u : ups_) u->trainable = plan.trainable_block_ids.count(u->id) > 0;
    final_trainable_ = plan.trainable_block_ids.count("final") > 0;
  }

  bool is_trainable(const std::string& id) const {
    if (id == "final") return final_trainable_;
    for (const auto& b : blocks_)
      if (b->id == id) return b->trainable;
    for (const auto& u : ups_)
      if (u->id == id) return u->trainable;
    throw ValidationError("unknown block id: " + id);
  }

  /// x: (N, input_channels, H, W). Returns softmax probabilities (N, C, H, W).
  /// In train mode trainable blocks normalize with batch statistics and update
  /// their running averages; frozen blocks always use stored statistics.
  const Tensor<T>& forward(const Tensor<T>& x, bool train) {
    require(x.dim(1) == spec_.input_channels, "input channel mismatch");
    require(x.dim(2) % 16 == 0 && x.dim(3) % 16 == 0,
            "spatial dims must be divisible by 16, got " + std::to_string(x.dim(2)) + "x" +
                std::to_string(x.dim(3)));
    require(x.dim(0) > 0, "empty batch");
    train_ = train;
    in_shape_ = x.shape();
    x_cnhw_ = swap_leading(x);

    const Tensor<T>* cur = &x_cnhw_;
    for (int b = 0; b < 5; ++b) {
      auto& blk = *blocks_[static_cast<std::size_t>(b)];
      cur = &run_block(blk, *cur);
      if (b < 4) {
        maxpool2(*cur, pooled_[static_cast<std::size_t>(b)], pool_arg_[static_cast<std::size_t>(b)]);
        cur = &pooled_[static_cast<std::size_t>(b)];
      }
    }
    for (int u = 0; u < 4; ++u) {
      auto& up = *ups_[static_cast<std::size_t>(u)];
      upsample2(*cur, upsampled_[static_cast<std::size_t>(u)]);
      const auto& up_out = run_block(up, upsampled_[static_cast<std::size_t>(u)]);
      const auto& skip = blocks_[static_cast<std::size_t>(3 - u)]->units.back().output();
      concat_channels(up_out, skip, concat_[static_cast<std::size_t>(u)]);
      cur = &run_block(*blocks_[static_cast<std::size_t>(5 + u)], concat_[static_cast<std::size_t>(u)]);
    }
    final_->forward(*cur, logits_);
    softmax_channels(logits_, probs_cnhw_);
    probs_ = swap_leading(probs_cnhw_);
    return probs_;
  }

  const Tensor<T>& output() const { return probs_; }

  /// Backpropagates d(loss)/d(probs) (NCHW) plus optional gradients with respect
  /// to each batch-norm layer's input statistics (aligned with batch_stats()).
  /// Parameter gradients accumulate for trainable blocks only. The input
  /// gradient (NCHW) is written to `dinput` when non-null.
  void backward(const Tensor<T>& dprobs, std::span<const StatGrad> stat_grads = {},
                Tensor<T>* dinput = nullptr) {
    require(dprobs.shape() == probs_.shape(), "gradient shape mismatch");
    require(stat_grads.empty() || stat_grads.size() == bn_count(),
            "stat gradients must align with batch-norm layers");
    stat_grads_ = stat_grads;
    const bool need_below = dinput != nullptr || encoder_trainable();

    Tensor<T> dprobs_cnhw = swap_leading(dprobs);
    softmax_channels_backward(probs_cnhw_, dprobs_cnhw, g_);
    final_->backward(g_, &g2_, final_trainable_);
    std::swap(g_, g2_);

    std::array<Tensor<T>, 4> skip_grads;
    for (int u = 3; u >= 0; --u) {
      auto& blk = *blocks_[static_cast<std::size_t>(5 + u)];
      back_block(blk, g_, &g2_);
      const int up_ch = ups_[static_cast<std::size_t>(u)]->units.back().bn.channels();
      split_channels(g2_, up_ch, g_, skip_grads[static_cast<std::size_t>(u)]);
      auto& up = *ups_[static_cast<std::size_t>(u)];
      back_block(up, g_, &g2_);
      upsample2_backward(g2_, g_);
    }
    if (!need_below) return;
    for (int b = 4; b >= 0; --b) {
      auto& blk = *blocks_[static_cast<std::size_t>(b)];
      if (b < 4) {
        // gradient arriving from the pool plus the skip connection
        maxpool2_backward(g_, pool_arg_[static_cast<std::size_t>(b)],
                          blk.units.back().output().shape(), g2_);
        const auto& sk = skip_grads[static_cast<std::size_t>(3 - b)];
        for (std::size_t i = 0; i < g2_.size(); ++i) g2_[i] += sk[i];
        std::swap(g_, g2_);
      }
      const bool last = b == 0;
      if (last && dinput == nullptr) {
        back_block(blk, g_, nullptr);
      } else {
        back_block(blk, g_, &g2_);
        std::swap(g_, g2_);
      }
    }
    if (dinput != nullptr) *dinput = swap_leading(g_);
  }

  std::size_t bn_count() const { return 9 * 2 + 4; }

  /// Input statistics of every batch-norm layer from the last forward pass.
  std::vector<LayerStats> batch_stats() const {
    std::vector<LayerStats> out;
    for_each_bn([&](const std::string& id, const BatchNorm2d<T>& bn) { out.push_back(bn.batch_stats(id)); });
    return out;
  }
  std::vector<LayerStats> running_stats() const {
    std::vector<LayerStats> out;
    for_each_bn([&](const std::string& id, const BatchNorm2d<T>& bn) { out.push_back(bn.running_stats(id)); });
    return out;
  }

  /// Visits (name, Param&, trainable) for every learnable tensor.
  template <typename F>
  void visit_params(F&& fn) {
    for_each_block([&](Block& b) {
      for (std::size_t i = 0; i < b.units.size(); ++i)
        b.units[i].visit(b.id + "." + std::to_string(i), [&](const std::string& n, Param<T>& p) {
          fn(n, p, b.trainable);
        });
    });
    final_->visit("final", [&](const std::string& n, Param<T>& p) { fn(n, p, final_trainable_); });
  }

  /// Visits (name, std::vector<T>&) for every running-statistics buffer.
  template <typename F>
  void visit_buffers(F&& fn) {
    for_each_block([&](Block& b) {
      for (std::size_t i = 0; i < b.units.size(); ++i) b.units[i].visit_buffers(b.id + "." + std::to_string(i), fn);
    });
  }

  std::vector<Param<T>*> trainable_params() {
    std::vector<Param<T>*> out;
    visit_params([&](const std::string&, Param<T>& p, bool trainable) {
      if (trainable) out.push_back(&p);
    });
    return out;
  }

  std::size_t parameter_count() {
    std::size_t n = 0;
    visit_params([&](const std::string&, Param<T>& p, bool) { n += p.size(); });
    return n;
  }

  void zero_grad() {
    visit_params([](const std::string&, Param<T>& p, bool) { p.zero_grad(); });
  }

  /// Copies parameters and running statistics from a network of equal spec.
  template <typename U>
  void copy_from(UNet<U>& other) {
    require(other.spec() == spec_, "network spec mismatch");
    std::vector<std::vector<U>*> src;
    other.visit_params([&](const std::string&, Param<U>& p, bool) { src.push_back(&p.value); });
    other.visit_buffers([&](const std::string&, std::vector<U>& v) { src.push_back(&v); });
    std::size_t i = 0;
    auto assign = [&](std::vector<T>& dst) {
      const auto& s = *src[i++];
      std::transform(s.begin(), s.end(), dst.begin(), [](U v) { return static_cast<T>(v); });
    };
    visit_params([&](const std::string&, Param<T>& p, bool) { assign(p.value); });
    visit_buffers([&](const std::string&, std::vector<T>& v) { assign(v); });
  }

 private:
  struct Block {
    std::string id;
    bool trainable = true;
    std::size_t bn_offset = 0;  // index of the first batch-norm layer in forward order
    std::vector<ConvUnit<T>> units;
  };

  static std::unique_ptr<Block> make_block(const std::string& id, int in, int out) {
    auto b = std::make_unique<Block>();
    b->id = id;
    b->units.emplace_back(in, out, 3, Activation::kRelu);
    b->units.emplace_back(out, out, 3, Activation::kRelu);
    return b;
  }
  static std::unique_ptr<Block> make_up(const std::string& id, int in, int out) {
    auto b = std::make_unique<Block>();
    b->id = id;
    b->units.emplace_back(in, out, 3, Activation::kRelu);
    return b;
  }
  static void init_block(Block& b, Rng& rng) {
    for (auto& u : b.units) u.init(rng);
  }

  const Tensor<T>& run_block(Block& b, const Tensor<T>& in) {
    const bool batch_mode = train_ && b.trainable;
    const Tensor<T>* cur = &in;
    for (auto& u : b.units) cur = &u.forward(*cur, batch_mode);
    return *cur;
  }

  void back_block(Block& b, const Tensor<T>& dout, Tensor<T>* din) {
    Tensor<T> g = dout;
    Tensor<T> tmp;
    for (std::size_t i = b.units.size(); i-- > 0;) {
      const StatGrad* sg = stat_grad_for(b, i);
      Tensor<T>* dst = (i == 0) ? din : &tmp;
      b.units[i].backward(g, dst, b.trainable, sg);
      if (i > 0) std::swap(g, tmp);
    }
  }

  const StatGrad* stat_grad_for(const Block& b, std::size_t unit) const {
    if (stat_grads_.empty()) return nullptr;
    return &stat_grads_[b.bn_offset + unit];
  }

  bool encoder_trainable() const {
    for (int b = 0; b < 5; ++b)
      if (blocks_[static_cast<std::size_t>(b)]->trainable) return true;
    return false;
  }

  /// Forward order: conv1..conv5, then (up1, conv6) ... (up4, conv9).
  template <typename F>
  void for_each_block(F&& fn) {
    for (int b = 0; b < 5; ++b) fn(*blocks_[static_cast<std::size_t>(b)]);
    for (int u = 0; u < 4; ++u) {
      fn(*ups_[static_cast<std::size_t>(u)]);
      fn(*blocks_[static_cast<std::size_t>(5 + u)]);
    }
  }
  template <typename F>
  void for_each_block_const(F&& fn) const {
    for (int b = 0; b < 5; ++b) fn(static_cast<const Block&>(*blocks_[static_cast<std::size_t>(b)]));
    for (int u = 0; u < 4; ++u) {
      fn(static_cast<const Block&>(*ups_[static_cast<std::size_t>(u)]));
      fn(static_cast<const Block&>(*blocks_[static_cast<std::size_t>(5 + u)]));
    }
  }
  template <typename F>
  void for_each_bn(F&& fn) const {
    for_each_block_const([&](const Block& b) {
      for (std::size_t i = 0; i < b.units.size(); ++i) fn(b.id + "." + std::to_string(i) + ".bn", b.units[i].bn);
    });
  }

  NetworkSpec spec_;
  std::vector<std::unique_ptr<Block>> blocks_;  // conv1..conv9
  std::vector<std::unique_ptr<Block>> ups_;     // up1..up4
  std::unique_ptr<Conv2d<T>> final_;
  bool final_trainable_ = true;

  bool train_ = false;
  typename Tensor<T>::Shape in_shape_{};
  Tensor<T> x_cnhw_;
  std::array<Tensor<T>, 4> pooled_, upsampled_, concat_;
  std::array<std::vector<std::uint8_t>, 4> pool_arg_;
  Tensor<T> logits_, probs_cnhw_, probs_;
  Tensor<T> g_, g2_;
  std::span<const StatGrad> stat_grads_;
};

}  // namespace sfda::nn
