#pragma once

// Source pretraining and the two-stage source-free adaptation loop.
//
// Four networks take part: U1 and U2 start as copies of the source model
// (U1 with only its first block trainable, U2 fully frozen), SC produces a
// per-pixel compensation map for U2's input, and U3 is the compact model
// being adapted. Each network has its own optimizer and its own loss;
// pseudo-labels passed between them are hard, detached one-hot masks.

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "sfda/core/digest.hpp"
#include "sfda/core/error.hpp"
#include "sfda/core/rng.hpp"
#include "sfda/core/tensor.hpp"
#include "sfda/dataio/batch.hpp"
#include "sfda/dataio/volume.hpp"
#include "sfda/eval.hpp"
#include "sfda/losses.hpp"
#include "sfda/nn/checkpoint.hpp"
#include "sfda/nn/optim.hpp"
#include "sfda/nn/stylecomp.hpp"
#include "sfda/nn/unet.hpp"
#include "sfda/pamr.hpp"

namespace sfda::engine {

using dataio::LabeledVolume;
using dataio::LabelMask;
using dataio::SliceDataset;
using dataio::Volume;
using losses::Component;
using losses::LossReport;
using nn::OptimizerKind;
using nn::OptimizerSettings;

struct AblationFlags {
  bool no_fms = false;
  bool no_emin = false;
  bool no_sc = false;
  bool with_st = false;
  bool no_pamr = false;
  bool no_cl = false;

  bool any() const { return no_fms || no_emin || no_sc || with_st || no_pamr || no_cl; }
  std::string describe() const {
    std::string s;
    auto add = [&](bool f, const char* n) {
      if (f) s += (s.empty() ? "" : ",") + std::string(n);
    };
    add(no_fms, "no_fms");
    add(no_emin, "no_emin");
    add(no_sc, "no_sc");
    add(with_st, "with_st");
    add(no_pamr, "no_pamr");
    add(no_cl, "no_cl");
    return s.empty() ? "none" : s;
  }
  friend bool operator==(const AblationFlags&, const AblationFlags&) = default;
};

struct AblationSetting {
  std::string name;
  AblationFlags flags;
};

/// The six single-switch ablations, in report order.
inline std::vector<AblationSetting> ablation_settings() {
  std::vector<AblationSetting> out(6);
  out[0] = {"W/o FMS", {}};
  out[0].flags.no_fms = true;
  out[1] = {"W/o EMin", {}};
  out[1].flags.no_emin = true;
  out[2] = {"W/o SC", {}};
  out[2].flags.no_sc = true;
  out[3] = {"With ST", {}};
  out[3].flags.with_st = true;
  out[4] = {"W/o PAMR", {}};
  out[4].flags.no_pamr = true;
  out[5] = {"W/o CL", {}};
  out[5].flags.no_cl = true;
  return out;
}

struct SourceTrainConfig {
  OptimizerSettings optimizer{OptimizerKind::kAdam, 1e-4, 0.9, 8};
  int epochs = 100;
  nn::NetworkSpec network = nn::full_unet_spec();
  losses::DiceReduction dice_reduction = losses::DiceReduction::kPerClassMean;
  /// Count the background channel as a dice class.
  bool dice_background = false;
  std::uint64_t seed = 0;

  void validate() const {
    require(epochs > 0, "source training needs at least one epoch");
    require(optimizer.batch_size > 0, "batch size must be positive");
    require(optimizer.learning_rate > 0, "learning rate must be positive");
    network.validate();
  }
};

struct AdaptationConfig {
  OptimizerSettings u1_optimizer{OptimizerKind::kRmsprop, 0.00012, 0.9, 8};
  OptimizerSettings sc_optimizer{OptimizerKind::kRmsprop, 0.0004, 0.9, 8};
  OptimizerSettings u3_optimizer{OptimizerKind::kRmsprop, 0.0006, 0.9, 8};
  /// Batch size the source model was trained with; U1 must match it.
  int source_batch_size = 8;
  losses::StageSchedule schedule{150, 200};
  losses::LossWeights weights{};
  pamr::PamrConfig pamr{};
  AblationFlags ablation{};
  /// Also apply the entropy term to U3's output.
  bool entropy_on_u3 = false;
  losses::DiceReduction dice_reduction = losses::DiceReduction::kPerClassMean;
  /// Count the background channel as a dice class in every segmentation term.
  bool dice_background = false;
  /// Validate every k epochs (and always after the last one).
  int validation_every = 1;
  std::uint64_t seed = 0;
  nn::NetworkSpec network = nn::full_unet_spec();
  nn::NetworkSpec compact_network = nn::compact_unet_spec();
  nn::SCSpec sc_network{};

  int batch_size() const { return u1_optimizer.batch_size; }

  void validate() const {
    require(u1_optimizer.batch_size == source_batch_size,
            "U1 batch size (" + std::to_string(u1_optimizer.batch_size) +
                ") must equal the source model's batch size (" + std::to_string(source_batch_size) + ")");
    require(sc_optimizer.batch_size == u1_optimizer.batch_size && u3_optimizer.batch_size == u1_optimizer.batch_size,
            "U1, SC and U3 consume the same target batch and need one batch size");
    require(u1_optimizer.batch_size >= 2, "batch statistics need a batch size of at least 2");
    for (const auto* o : {&u1_optimizer, &sc_optimizer, &u3_optimizer})
      require(o->learning_rate > 0 && o->smoothing > 0 && o->smoothing < 1, "invalid optimizer settings");
    schedule.validate();
    weights.validate();
    pamr.validate();
    require(validation_every >= 1, "validation cadence must be at least 1");
    network.validate();
    compact_network.validate();
    sc_network.validate();
    require(network.num_classes == compact_network.num_classes, "U1/U2 and U3 must predict the same classes");
  }
};

/// U1, U2, SC and U3 for one adaptation run.
template <typename T>
struct NetworkBundle {
  std::unique_ptr<nn::UNet<T>> u1, u2, u3;
  std::unique_ptr<nn::StyleCompNet<T>> sc;
};

struct EpochRecord {
  int epoch = 0;
  double dsc_u1 = std::numeric_limits<double>::quiet_NaN();
  double dsc_u2sc = std::numeric_limits<double>::quiet_NaN();
  double dsc_u3 = std::numeric_limits<double>::quiet_NaN();
  double mean_loss = 0.0;
  bool validated() const { return !std::isnan(dsc_u3); }
  friend bool operator==(const EpochRecord& a, const EpochRecord& b) {
    auto same = [](double x, double y) { return (std::isnan(x) && std::isnan(y)) || x == y; };
    return a.epoch == b.epoch && same(a.dsc_u1, b.dsc_u1) && same(a.dsc_u2sc, b.dsc_u2sc) &&
           same(a.dsc_u3, b.dsc_u3) && a.mean_loss == b.mean_loss;
  }
};

struct TrainingState {
  int next_epoch = 0;
  std::vector<EpochRecord> history;
};

enum class StepEvent {
  kU3PseudoLabel,  // y3 taken (stage 2 only)
  kU1Backward,     // U1 gradients ready, before its update
  kU1Update,
  kScBackward,
  kScUpdate,
  kU3Backward,
  kU3Update,
};

template <typename T>
struct Hooks {
  std::function<void(StepEvent, NetworkBundle<T>&)> on_event;
  std::function<void(int epoch, int step, const LossReport&)> on_step;
  std::function<void(const EpochRecord&)> on_epoch;
};

// ---------------------------------------------------------------------------
// Inference helpers

/// Rejects volumes whose intensities are outside the preprocessed [0, 1] range.
inline void require_preprocessed(const Volume& v) {
  for (float x : v.voxels)
    require(std::isfinite(x) && x >= 0.f && x <= 1.f,
            "volume intensities must be preprocessed into [0, 1] before inference");
}

/// Runs `probs_fn` (a batch of slices -> probabilities) over every slice and
/// returns the per-pixel argmax as a 3D mask.
template <typename T, typename F>
LabelMask predict_volume(const Volume& v, int batch, F&& probs_fn) {
  require_preprocessed(v);
  LabelMask out(v.slices, v.h, v.w);
  const std::size_t plane = v.plane();
  for (int s0 = 0; s0 < v.slices; s0 += batch) {
    const int n = std::min(batch, v.slices - s0);
    Tensor<T> x(n, 1, v.h, v.w);
    for (std::size_t i = 0; i < static_cast<std::size_t>(n) * plane; ++i)
      x[i] = static_cast<T>(v.voxels[static_cast<std::size_t>(s0) * plane + i]);
    const auto labels = pamr::to_pseudo_label(probs_fn(x));
    std::copy(labels.labels.begin(), labels.labels.end(), out.labels.begin() + static_cast<std::ptrdiff_t>(s0 * plane));
  }
  return out;
}

/// Eval-mode forward of one network over a preprocessed volume.
template <typename T>
LabelMask infer_volume(nn::UNet<T>& net, const Volume& v, int batch = 8) {
  return predict_volume<T>(v, batch, [&](const Tensor<T>& x) -> const Tensor<T>& { return net.forward(x, false); });
}

/// Mean foreground DSC over a list of labeled volumes.
template <typename T, typename F>
double mean_dsc(const std::vector<LabeledVolume>& volumes, int num_classes, F&& probs_fn) {
  require(!volumes.empty(), "validation needs at least one volume");
  std::vector<LabelMask> preds, gts;
  for (const auto& lv : volumes) {
    require(lv.mask.has_value(), "validation volumes must be labeled");
    preds.push_back(predict_volume<T>(lv.volume, 8, probs_fn));
    gts.push_back(*lv.mask);
  }
  double sum = 0.0;
  for (std::size_t s = 0; s < preds.size(); ++s)
    for (int c = 1; c < num_classes; ++c) sum += eval::dsc_metric(preds[s], gts[s], c, num_classes);
  return sum / (static_cast<double>(preds.size()) * (num_classes - 1));
}

// ---------------------------------------------------------------------------
// Source pretraining

template <typename T>
struct SourceResult {
  std::unique_ptr<nn::UNet<T>> net;
  std::vector<double> validation_dsc;  // per epoch, when validation volumes are given
};

template <typename T>
SourceResult<T> train_source(const SliceDataset& ds, const SourceTrainConfig& cfg,
                             const std::vector<LabeledVolume>* validation = nullptr,
                             const std::function<void(int, double, double)>& on_epoch = {}) {
  cfg.validate();
  require(ds.labeled(), "every source slice must be labeled for supervised pretraining");
  SourceResult<T> out;
  out.net = std::make_unique<nn::UNet<T>>(cfg.network, derive_seed(cfg.seed, 0x5eed));
  auto& net = *out.net;
  nn::Optimizer<T> opt(cfg.optimizer, net.trainable_params());
  auto classes = losses::foreground_classes(cfg.network.num_classes);
  if (cfg.dice_background) classes.insert(0);
  dataio::BatchIterator it(ds, cfg.optimizer.batch_size, derive_seed(cfg.seed, 0xba7c));
  for (int e = 0; e < cfg.epochs; ++e) {
    double loss_sum = 0.0;
    const auto order = it.order(e);
    for (const auto& ids : order) {
      const auto batch = dataio::gather_batch(ds, ids);
      const Tensor<T> x = batch.images.cast<T>();
      const auto& probs = net.forward(x, true);
      const auto target = one_hot<T>(*batch.masks, cfg.network.num_classes);
      auto lg = losses::dice_loss_grad(probs, target, classes, cfg.dice_reduction);
      net.zero_grad();
      net.backward(lg.grad);
      opt.step();
      loss_sum += lg.value;
    }
    double dsc = std::numeric_limits<double>::quiet_NaN();
    if (validation != nullptr) {
      dsc = mean_dsc<T>(*validation, cfg.network.num_classes,
                        [&](const Tensor<T>& x) -> const Tensor<T>& { return net.forward(x, false); });
      out.validation_dsc.push_back(dsc);
    }
    if (on_epoch) on_epoch(e, loss_sum / static_cast<double>(order.size()), dsc);
  }
  return out;
}

template <typename T>
nn::Archive source_archive(nn::UNet<T>& net) {
  nn::Archive a;
  a.put("kind", std::string("source"));
  nn::store_network(a, "source", net);
  return a;
}

template <typename T>
std::unique_ptr<nn::UNet<T>> load_source(const nn::Archive& a) {
  require(a.has("source.spec"), "checkpoint does not contain a source network");
  auto net = std::make_unique<nn::UNet<T>>(nn::decode_spec(a.get<std::vector<std::int64_t>>("source.spec")), 0);
  nn::restore_network(a, "source", *net);
  return net;
}

// ---------------------------------------------------------------------------
// SC through the frozen U2

/// Forward x -> SC -> compensation -> U2 and, when `weight` is non-zero,
/// backpropagates weight * dice(o2, target) into SC's parameters through the
/// frozen U2. Returns the unweighted dice; U2's output is left in `o2`.
template <typename T>
double sc_through_frozen_u2(nn::StyleCompNet<T>& sc, nn::UNet<T>& u2, const Tensor<T>& x, const Tensor<T>& target,
                            const std::set<int>& classes, losses::DiceReduction reduction, bool with_st, double weight,
                            Tensor<T>* o2 = nullptr) {
  const Tensor<T> coeff = sc.forward(x, true);
  const Tensor<T> image = with_st ? coeff : nn::compensate(x, coeff);
  const auto& probs = u2.forward(image, false);
  if (o2 != nullptr) *o2 = probs;
  auto lg = losses::dice_loss_grad(probs, target, classes, reduction);
  if (weight != 0.0) {
    for (auto& g : lg.grad.values()) g = static_cast<T>(static_cast<double>(g) * weight);
    Tensor<T> dimage, dcoeff;
    u2.backward(lg.grad, {}, &dimage);
    if (with_st) {
      dcoeff = std::move(dimage);
    } else {
      nn::compensate_backward(x, coeff, dimage, static_cast<Tensor<T>*>(nullptr), &dcoeff);
    }
    sc.backward(dcoeff);
  }
  return lg.value;
}

// ---------------------------------------------------------------------------
// Adaptation

template <typename T>
class Adapter {
 public:
  Adapter(nn::UNet<T>& source, AdaptationConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    require(source.spec() == cfg_.network,
            "source checkpoint architecture does not match the configured U1/U2 architecture");
    nets_.u1 = std::make_unique<nn::UNet<T>>(cfg_.network, 0);
    nets_.u2 = std::make_unique<nn::UNet<T>>(cfg_.network, 0);
    nets_.u1->copy_from(source);
    nets_.u2->copy_from(source);
    nets_.u1->apply_freeze(nn::FreezePlan::frontend_only());
    nets_.u2->apply_freeze(nn::FreezePlan::all_frozen());
    nets_.sc = std::make_unique<nn::StyleCompNet<T>>(cfg_.sc_network, derive_seed(cfg_.seed, 0x5c));
    nets_.u3 = std::make_unique<nn::UNet<T>>(cfg_.compact_network, derive_seed(cfg_.seed, 0x03));
    reference_stats_ = nets_.u2->running_stats();
    opt_u1_ = std::make_unique<nn::Optimizer<T>>(cfg_.u1_optimizer, nets_.u1->trainable_params());
    opt_sc_ = std::make_unique<nn::Optimizer<T>>(cfg_.sc_optimizer, nets_.sc->trainable_params());
    opt_u3_ = std::make_unique<nn::Optimizer<T>>(cfg_.u3_optimizer, nets_.u3->trainable_params());
    classes_ = losses::foreground_classes(cfg_.network.num_classes);
    if (cfg_.dice_background) classes_.insert(0);
  }

  Adapter(const Adapter&) = delete;
  Adapter& operator=(const Adapter&) = delete;

  const AdaptationConfig& config() const { return cfg_; }
  NetworkBundle<T>& nets() { return nets_; }
  TrainingState& state() { return state_; }
  const TrainingState& state() const { return state_; }
  Hooks<T>& hooks() { return hooks_; }
  nn::Optimizer<T>& u1_optimizer() { return *opt_u1_; }
  nn::Optimizer<T>& sc_optimizer() { return *opt_sc_; }
  nn::Optimizer<T>& u3_optimizer() { return *opt_u3_; }

  /// One-way step: U1 on FMS + entropy, SC on dice against y1, U3 on dice
  /// against y2, in that order.
  LossReport stage1_step(const Tensor<T>& x, int epoch) {
    if (cfg_.schedule.second_stage(epoch))
      throw ScheduleError("stage-1 step requested at epoch " + std::to_string(epoch) + " >= T = " +
                          std::to_string(cfg_.schedule.transition_epoch));
    return run_step(x, epoch, std::nullopt);
  }

  /// Circular step: y3 is taken from U3 before any update, then the stage-1
  /// sub-steps run with circular supervision on U1 and PAMR on U3.
  LossReport stage2_step(const Tensor<T>& x, int epoch) {
    if (!cfg_.schedule.second_stage(epoch))
      throw ScheduleError("stage-2 step requested at epoch " + std::to_string(epoch) + " < T = " +
                          std::to_string(cfg_.schedule.transition_epoch));
    std::optional<Tensor<T>> y3;
    if (!cfg_.ablation.no_cl) {
      y3 = one_hot<T>(pamr::to_pseudo_label(nets_.u3->forward(x, false)), cfg_.network.num_classes);
      emit(StepEvent::kU3PseudoLabel);
    }
    return run_step(x, epoch, y3);
  }

  LossReport step(const Tensor<T>& x, int epoch) {
    return cfg_.schedule.second_stage(epoch) ? stage2_step(x, epoch) : stage1_step(x, epoch);
  }

  /// One supervised dice epoch of U3 on labeled target slices, sharing U3's
  /// adaptation optimizer. Every slice is visited once.
  void extension_epoch(const SliceDataset& labeled, int epoch) {
    require(labeled.size() > 0 && labeled.labeled(), "extension needs labeled target slices");
    dataio::BatchIterator it(labeled, cfg_.batch_size(), derive_seed(cfg_.seed, 0xe7), false);
    for (const auto& ids : it.order(epoch)) {
      const auto batch = dataio::gather_batch(labeled, ids);
      const Tensor<T> x = batch.images.cast<T>();
      const auto& o3 = nets_.u3->forward(x, true);
      auto lg = losses::dice_loss_grad(o3, one_hot<T>(*batch.masks, cfg_.compact_network.num_classes), classes_,
                                       cfg_.dice_reduction);
      opt_u3_->zero_grad();
      nets_.u3->backward(lg.grad);
      opt_u3_->step();
    }
  }

  /// Mean validation DSC of U1, U2 over compensated input, and U3.
  EpochRecord validate(const std::vector<LabeledVolume>& volumes, int epoch) {
    EpochRecord r;
    r.epoch = epoch;
    const int c = cfg_.network.num_classes;
    r.dsc_u1 = mean_dsc<T>(volumes, c, [&](const Tensor<T>& x) -> const Tensor<T>& { return nets_.u1->forward(x, false); });
    r.dsc_u2sc = mean_dsc<T>(volumes, c, [&](const Tensor<T>& x) -> const Tensor<T>& { return u2_pipeline(x); });
    r.dsc_u3 = mean_dsc<T>(volumes, c, [&](const Tensor<T>& x) -> const Tensor<T>& { return nets_.u3->forward(x, false); });
    return r;
  }

  /// Runs one adaptation epoch (plus the extension epoch when `labeled` is
  /// given) and validates according to the cadence.
  EpochRecord run_epoch(const SliceDataset& target, const std::vector<LabeledVolume>* validation,
                        const SliceDataset* labeled = nullptr) {
    const int e = state_.next_epoch;
    require(e < cfg_.schedule.total_epochs, "adaptation already finished");
    dataio::BatchIterator it(target, cfg_.batch_size(), cfg_.seed);
    double loss_sum = 0.0;
    int s = 0;
    const auto order = it.order(e);
    for (const auto& ids : order) {
      const Tensor<T> x = dataio::gather_batch(target, ids).images.template cast<T>();
      const auto report = step(x, e);
      loss_sum += report.total;
      if (hooks_.on_step) hooks_.on_step(e, s, report);
      ++s;
    }
    if (labeled != nullptr) extension_epoch(*labeled, e);
    EpochRecord r;
    const bool last = e + 1 == cfg_.schedule.total_epochs;
    if (validation != nullptr && ((e + 1) % cfg_.validation_every == 0 || last)) r = validate(*validation, e);
    r.epoch = e;
    r.mean_loss = loss_sum / static_cast<double>(order.size());
    state_.history.push_back(r);
    state_.next_epoch = e + 1;
    if (hooks_.on_epoch) hooks_.on_epoch(r);
    return r;
  }

  /// Runs the remaining epochs, or stops once `stop_after` epochs are done.
  void run(const SliceDataset& target, const std::vector<LabeledVolume>* validation,
           const SliceDataset* labeled = nullptr, std::optional<int> stop_after = std::nullopt) {
    const int end = stop_after ? std::min(*stop_after, cfg_.schedule.total_epochs) : cfg_.schedule.total_epochs;
    while (state_.next_epoch < end) run_epoch(target, validation, labeled);
  }

  /// Digest of U2 and U1's frozen blocks; constant across a correct run.
  std::string frozen_digest() {
    return nn::parameter_digest(*nets_.u2, false) + nn::parameter_digest(*nets_.u1, true);
  }

  nn::Archive to_archive() {
    nn::Archive a;
    a.put("kind", std::string("adaptation"));
    nn::store_network(a, "u1", *nets_.u1);
    nn::store_network(a, "u2", *nets_.u2);
    nn::store_network(a, "sc", *nets_.sc);
    nn::store_network(a, "u3", *nets_.u3);
    nn::store_optimizer(a, "opt.u1", opt_u1_->state());
    nn::store_optimizer(a, "opt.sc", opt_sc_->state());
    nn::store_optimizer(a, "opt.u3", opt_u3_->state());
    a.put("state.next_epoch", std::vector<std::int64_t>{state_.next_epoch});
    a.put("state.seed", std::vector<std::int64_t>{static_cast<std::int64_t>(cfg_.seed)});
    std::vector<double> hist;
    for (const auto& r : state_.history) hist.insert(hist.end(), {static_cast<double>(r.epoch), r.dsc_u1, r.dsc_u2sc, r.dsc_u3, r.mean_loss});
    a.put("state.history", hist);
    return a;
  }

  void restore(const nn::Archive& a) {
    require(a.has("kind") && a.text("kind") == "adaptation", "checkpoint is not an adaptation checkpoint");
    require(static_cast<std::uint64_t>(a.scalar("state.seed")) == cfg_.seed, "checkpoint seed differs from config");
    nn::restore_network(a, "u1", *nets_.u1);
    nn::restore_network(a, "u2", *nets_.u2);
    nn::restore_network(a, "sc", *nets_.sc);
    nn::restore_network(a, "u3", *nets_.u3);
    nn::restore_optimizer(a, "opt.u1", opt_u1_->state());
    nn::restore_optimizer(a, "opt.sc", opt_sc_->state());
    nn::restore_optimizer(a, "opt.u3", opt_u3_->state());
    state_.next_epoch = static_cast<int>(a.scalar("state.next_epoch"));
    const auto& hist = a.get<std::vector<double>>("state.history");
    require(hist.size() % 5 == 0, "malformed training history");
    state_.history.clear();
    for (std::size_t i = 0; i < hist.size(); i += 5)
      state_.history.push_back({static_cast<int>(hist[i]), hist[i + 1], hist[i + 2], hist[i + 3], hist[i + 4]});
    reference_stats_ = nets_.u2->running_stats();
  }

 private:
  void emit(StepEvent e) {
    if (hooks_.on_event) hooks_.on_event(e, nets_);
  }

  const Tensor<T>& u2_pipeline(const Tensor<T>& x) {
    if (cfg_.ablation.no_sc) return nets_.u2->forward(x, false);
    const Tensor<T> coeff = nets_.sc->forward(x, false);
    return nets_.u2->forward(cfg_.ablation.with_st ? coeff : nn::compensate(x, coeff), false);
  }

  LossReport run_step(const Tensor<T>& x, int epoch, const std::optional<Tensor<T>>& y3) {
    const auto& ab = cfg_.ablation;
    const auto& w = cfg_.weights;
    const int nc = cfg_.network.num_classes;
    const bool stage2 = cfg_.schedule.second_stage(epoch);
    losses::LossComponents comp{};

    // (a) U1
    const Tensor<T> o1 = nets_.u1->forward(x, true);
    Tensor<T> d1(o1.shape());
    std::vector<nn::StatGrad> stat_grads;
    if (!ab.no_fms) {
      auto f = losses::fms_loss_grad(nets_.u1->batch_stats(), reference_stats_);
      comp[static_cast<std::size_t>(Component::kFms)] = f.value;
      for (auto& g : f.grads) {
        for (auto& v : g.d_mean) v *= w[Component::kFms];
        for (auto& v : g.d_var) v *= w[Component::kFms];
      }
      stat_grads = std::move(f.grads);
    }
    double ent_value = 0.0;
    if (!ab.no_emin) {
      auto e = losses::entropy_loss_grad(o1);
      ent_value = e.value;
      add_scaled(d1, e.grad, w[Component::kEnt]);
    }
    if (stage2 && y3) {
      auto c = losses::dice_loss_grad(o1, *y3, classes_, cfg_.dice_reduction);
      comp[static_cast<std::size_t>(Component::kSegCirc)] = c.value;
      add_scaled(d1, c.grad, w[Component::kSegCirc]);
    }
    opt_u1_->zero_grad();
    if (!ab.no_fms || !ab.no_emin || (stage2 && y3)) nets_.u1->backward(d1, stat_grads);
    emit(StepEvent::kU1Backward);
    opt_u1_->step();
    emit(StepEvent::kU1Update);

    // (b) SC through the frozen U2
    const Tensor<T> y1 = one_hot<T>(pamr::to_pseudo_label(o1), nc);
    Tensor<T> o2;
    if (ab.no_sc) {
      o2 = nets_.u2->forward(x, false);
    } else {
      opt_sc_->zero_grad();
      comp[static_cast<std::size_t>(Component::kSegSc)] = sc_through_frozen_u2(
          *nets_.sc, *nets_.u2, x, y1, classes_, cfg_.dice_reduction, ab.with_st, w[Component::kSegSc], &o2);
      emit(StepEvent::kScBackward);
      opt_sc_->step();
      emit(StepEvent::kScUpdate);
    }

    // (c) U3
    const Tensor<T> y2 = one_hot<T>(pamr::to_pseudo_label(o2), nc);
    const Tensor<T> o3 = nets_.u3->forward(x, true);
    auto s3 = losses::dice_loss_grad(o3, y2, classes_, cfg_.dice_reduction);
    comp[static_cast<std::size_t>(Component::kSegU3)] = s3.value;
    Tensor<T> d3(o3.shape());
    add_scaled(d3, s3.grad, w[Component::kSegU3]);
    if (stage2 && !ab.no_pamr) {
      auto p = pamr::pamr_loss_grad(o3, x, cfg_.pamr, classes_, cfg_.dice_reduction);
      comp[static_cast<std::size_t>(Component::kPamr)] = p.value;
      add_scaled(d3, p.grad, w[Component::kPamr]);
    }
    if (!ab.no_emin && cfg_.entropy_on_u3) {
      auto e = losses::entropy_loss_grad(o3);
      ent_value += e.value;
      add_scaled(d3, e.grad, w[Component::kEnt]);
    }
    if (!ab.no_emin) comp[static_cast<std::size_t>(Component::kEnt)] = ent_value;
    opt_u3_->zero_grad();
    nets_.u3->backward(d3);
    emit(StepEvent::kU3Backward);
    opt_u3_->step();
    emit(StepEvent::kU3Update);

    return losses::total_loss(comp, w, epoch, cfg_.schedule);
  }

  static void add_scaled(Tensor<T>& dst, const Tensor<T>& src, double k) {
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += static_cast<T>(k * static_cast<double>(src[i]));
  }

  AdaptationConfig cfg_;
  NetworkBundle<T> nets_;
  std::unique_ptr<nn::Optimizer<T>> opt_u1_, opt_sc_, opt_u3_;
  std::vector<nn::LayerStats> reference_stats_;
  std::set<int> classes_;
  TrainingState state_;
  Hooks<T> hooks_;
};

}  // namespace sfda::engine
