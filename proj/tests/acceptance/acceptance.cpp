// Acceptance harness: one PASS/FAIL line per criterion.
//
//   acceptance                       run every criterion
//   acceptance --criterion 5         run one
//   acceptance --work DIR            cache directory for the synthetic runs
//   acceptance --config FILE         synthetic experiment configuration
//
// The synthetic adaptation runs behind criteria 5-7 are cached in the work
// directory under the configuration digest, so the default run is trained once.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <numeric>
#include <sstream>

#include "CLI11.hpp"
#include "sfda/config.hpp"
#include "sfda/engine.hpp"
#include "sfda/eval.hpp"
#include "sfda/experiment.hpp"

using namespace sfda;
using dataio::LabelMask;
namespace fs = std::filesystem;

namespace {

// Extension margin measured by the recorded oracle run (oracle_runs.md).
constexpr double kOracleExtensionMargin = -0.0062;

struct Outcome {
  bool pass = true;
  std::string detail;

  void check(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      if (!detail.empty()) detail += "; ";
      detail += what;
    }
  }
};

std::string fmt(double v, int prec = 4) {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(prec);
  os << v;
  return os.str();
}

bool close_rel(double a, double b, double tol, double floor) {
  return std::abs(a - b) <= tol * std::max({std::abs(a), std::abs(b), floor});
}

Tensor<double> random_probs(Tensor<double>::Shape s, Rng& r) {
  Tensor<double> t(s);
  for (int n = 0; n < s[0]; ++n)
    for (int y = 0; y < s[2]; ++y)
      for (int x = 0; x < s[3]; ++x) {
        double z = 0;
        for (int c = 0; c < s[1]; ++c) z += (t(n, c, y, x) = std::exp(r.uniform(-2, 2)));
        for (int c = 0; c < s[1]; ++c) t(n, c, y, x) /= z;
      }
  return t;
}

Tensor<double> random_one_hot(int n, int c, int h, int w, Rng& r) {
  LabelBatch b(n, h, w);
  for (auto& l : b.labels) l = static_cast<std::uint8_t>(r.below(static_cast<std::uint64_t>(c)));
  return one_hot<double>(b, c);
}

Tensor<double> random_tensor(Tensor<double>::Shape s, Rng& r, double lo = 0, double hi = 1) {
  Tensor<double> t(s);
  for (auto& v : t.values()) v = r.uniform(lo, hi);
  return t;
}

/// Central differences of f over every element of x; returns the worst
/// relative error against `grad`. Magnitudes below `floor` are compared
/// absolutely, since the difference quotient of an O(1) loss carries about
/// 1e-10 of rounding noise at h = 1e-6.
template <typename F>
double fd_worst(Tensor<double> x, const Tensor<double>& grad, F&& f, double floor = 1e-6) {
  const double h = 1e-6;
  double worst = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double keep = x[i];
    x[i] = keep + h;
    const double up = f(x);
    x[i] = keep - h;
    const double down = f(x);
    x[i] = keep;
    const double num = (up - down) / (2 * h);
    worst = std::max(worst, std::abs(num - grad[i]) / std::max({std::abs(num), std::abs(grad[i]), floor}));
  }
  return worst;
}

// ---------------------------------------------------------------------------
// 1. Loss unit suite

Outcome loss_suite() {
  Outcome o;
  Rng r(101);
  const auto y = random_one_hot(2, 5, 4, 4, r);
  o.check(losses::dice_loss(y, y, losses::foreground_classes(5)) < 1e-5, "dice identity");
  LabelBatch a(1, 2, 2), b(1, 2, 2);
  a.labels = {1, 1, 1, 1};
  b.labels = {2, 2, 2, 2};
  o.check(std::abs(losses::dice_loss(one_hot<double>(b, 3), one_hot<double>(a, 3), {1}) - 1.0) < 1e-5,
          "dice disjoint");
  Tensor<double> y4(1, 1, 1, 4), o4(1, 1, 1, 4, 0.5);
  y4[0] = y4[1] = 1.0;
  o.check(std::abs(losses::dice_loss(o4, y4, {0}) - 1.0 / 3.0) < 1e-6, "dice four-pixel case");

  o.check(losses::entropy_loss(y) < 1e-12, "entropy of one-hot");
  o.check(std::abs(losses::entropy_loss(Tensor<double>(2, 5, 4, 4, 0.2)) - std::log(5.0)) < 1e-6, "uniform entropy");
  o.check(std::abs(losses::entropy_loss(Tensor<double>(1, 2, 1, 1, 0.5)) - std::log(2.0)) < 1e-12,
          "two-class entropy");
  for (int t = 0; t < 200; ++t) {
    const double e = losses::entropy_loss(random_probs({2, 5, 4, 4}, r));
    if (e < 0 || e > std::log(5.0) + 1e-12) {
      o.check(false, "entropy outside [0, ln 5]");
      break;
    }
  }

  // matched statistics taken from a real network's batch
  nn::UNet<double> net({{2, 2, 2, 2, 2, 2, 2, 2, 2}, 5, 1}, 3);
  net.forward(random_tensor({2, 1, 16, 16}, r), true);
  const auto stats = net.batch_stats();
  o.check(losses::fms_loss(stats, stats) == 0.0, "fms on matched statistics");
  std::vector<nn::LayerStats> s1{{"l", {1.0}, {0.5}}}, s0{{"l", {0.0}, {0.5}}};
  o.check(losses::fms_loss(s1, s0) == 1.0, "fms unit mean shift");
  return o;
}

// ---------------------------------------------------------------------------
// 2. Gradient checks

Outcome gradient_checks() {
  Outcome o;
  Rng r(202);
  const double tol = 1e-4;
  for (auto red : {losses::DiceReduction::kPerClassMean, losses::DiceReduction::kFlatSum}) {
    const auto p = random_probs({2, 2, 8, 8}, r);
    const auto y = random_one_hot(2, 2, 8, 8, r);
    const auto g = losses::dice_loss_grad(p, y, {0, 1}, red);
    const double w = fd_worst(p, g.grad, [&](const Tensor<double>& x) { return losses::dice_loss(x, y, {0, 1}, red); });
    o.check(w <= tol, "dice gradient rel err " + fmt(w, 8));
  }
  {
    const auto p = random_probs({2, 2, 8, 8}, r);
    const auto g = losses::entropy_loss_grad(p);
    const double w = fd_worst(p, g.grad, [](const Tensor<double>& x) { return losses::entropy_loss(x); });
    o.check(w <= tol, "entropy gradient rel err " + fmt(w, 8));
  }
  {
    const auto x = random_tensor({2, 2, 8, 8}, r), c = random_tensor({2, 1, 8, 8}, r);
    const auto up = random_tensor({2, 2, 8, 8}, r, -1, 1);
    auto loss = [&](const Tensor<double>& xx, const Tensor<double>& cc) {
      const auto out = nn::compensate(xx, cc);
      double s = 0;
      for (std::size_t i = 0; i < out.size(); ++i) s += out[i] * up[i];
      return s;
    };
    Tensor<double> dx, dc;
    nn::compensate_backward(x, c, up, &dx, &dc);
    const double wc = fd_worst(c, dc, [&](const Tensor<double>& cc) { return loss(x, cc); });
    const double wx = fd_worst(x, dx, [&](const Tensor<double>& xx) { return loss(xx, c); });
    o.check(std::max(wc, wx) <= tol, "compensate gradient rel err " + fmt(std::max(wc, wx), 8));
  }
  {
    // the U-Net needs spatial sizes divisible by 16, the smallest admissible slice
    nn::UNet<double> u2({{2, 3, 2, 3, 2, 3, 2, 3, 2}, 3, 1}, 21);
    u2.apply_freeze(nn::FreezePlan::all_frozen());
    nn::StyleCompNet<double> sc({{4, 3, 3, 2, 2, 2, 1}, 3, 1}, 22);
    const auto x = random_tensor({2, 1, 16, 16}, r);
    const auto target = random_one_hot(2, 3, 16, 16, r);
    const auto frozen = nn::parameter_digest(u2, false);
    double worst = 0;
    for (bool with_st : {false, true}) {
      auto loss = [&] {
        return engine::sc_through_frozen_u2(sc, u2, x, target, {1, 2}, losses::DiceReduction::kPerClassMean, with_st,
                                            0.0);
      };
      sc.zero_grad();
      engine::sc_through_frozen_u2(sc, u2, x, target, {1, 2}, losses::DiceReduction::kPerClassMean, with_st, 1.0);
      const auto params = sc.trainable_params();
      for (int t = 0; t < 40; ++t) {
        auto* p = params[r.below(params.size())];
        const std::size_t i = r.below(p->size());
        // a larger step than the loss checks: through the network, rounding
        // noise at 1e-6 is of the same order as the smallest gradients
        const double keep = p->value[i], h = 1e-5;
        p->value[i] = keep + h;
        const double up = loss();
        p->value[i] = keep - h;
        const double down = loss();
        p->value[i] = keep;
        const double num = (up - down) / (2 * h);
        if (!close_rel(p->grad[i], num, tol, 1e-6))
          worst = std::max(worst, std::abs(num - p->grad[i]) / std::max(std::abs(num), 1e-6));
      }
    }
    o.check(worst == 0, "SC-through-U2 gradient rel err " + fmt(worst, 8));
    o.check(nn::parameter_digest(u2, false) == frozen, "frozen U2 changed during the gradient check");
  }
  return o;
}

// ---------------------------------------------------------------------------
// 3. PAMR oracle equivalence and properties

int mirror(int i, int n) {
  if (n == 1) return 0;
  while (i < 0 || i >= n) i = i < 0 ? -i : 2 * (n - 1) - i;
  return i;
}

Tensor<double> naive_refine(const Tensor<double>& mask, const Tensor<double>& img, const pamr::PamrConfig& cfg) {
  const int n = mask.dim(0), c = mask.dim(1), h = mask.dim(2), w = mask.dim(3), ch = img.dim(1);
  const int rad = cfg.kernel_size / 2;
  Tensor<double> cur = mask;
  for (int it = 0; it < cfg.iterations; ++it) {
    Tensor<double> next(mask.shape());
    for (int b = 0; b < n; ++b)
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
          std::vector<double> sig(static_cast<std::size_t>(ch));
          for (int q = 0; q < ch; ++q) {
            double s = 0, s2 = 0, cnt = 0;
            for (int dy = -rad; dy <= rad; ++dy)
              for (int dx = -rad; dx <= rad; ++dx) {
                const double v = img(b, q, mirror(y + dy, h), mirror(x + dx, w));
                s += v, s2 += v * v, cnt += 1;
              }
            const double m = s / cnt;
            sig[static_cast<std::size_t>(q)] = std::max(std::sqrt(std::max(s2 / cnt - m * m, 0.0)), cfg.sigma_floor);
          }
          std::vector<double> logits;
          std::vector<std::pair<int, int>> at;
          for (int d : cfg.dilation_rates)
            for (int dy = -rad; dy <= rad; ++dy)
              for (int dx = -rad; dx <= rad; ++dx) {
                if (dy == 0 && dx == 0) continue;
                const int yy = mirror(y + dy * d, h), xx = mirror(x + dx * d, w);
                double k = 0;
                for (int q = 0; q < ch; ++q) {
                  const double diff = img(b, q, y, x) - img(b, q, yy, xx);
                  const double s = sig[static_cast<std::size_t>(q)];
                  k -= diff * diff / (s * s);
                }
                logits.push_back(k / ch);
                at.push_back({yy, xx});
              }
          const double mx = *std::max_element(logits.begin(), logits.end());
          double z = 0;
          for (double& v : logits) z += (v = std::exp(v - mx));
          for (int k = 0; k < c; ++k) {
            double acc = 0;
            for (std::size_t j = 0; j < at.size(); ++j) acc += logits[j] / z * cur(b, k, at[j].first, at[j].second);
            next(b, k, y, x) = acc;
          }
        }
    cur = next;
  }
  return cur;
}

Outcome pamr_checks() {
  Outcome o;
  Rng r(303);
  double worst = 0;
  for (int t = 0; t < 1000; ++t) {
    const int n = 1 + static_cast<int>(r.below(2)), c = 1 + static_cast<int>(r.below(3));
    const int h = 1 + static_cast<int>(r.below(4)), w = 1 + static_cast<int>(r.below(4));
    pamr::PamrConfig cfg;
    cfg.iterations = 1 + static_cast<int>(r.below(2));
    cfg.dilation_rates = r.uniform() < 0.5 ? std::vector<int>{1} : std::vector<int>{1, 2, 4};
    const auto mask = random_probs({n, c, h, w}, r);
    auto img = random_tensor({n, 1 + static_cast<int>(r.below(2)), h, w}, r);
    if (t % 10 == 0) img.fill(0.5);
    const auto fast = pamr::refine(mask, img, cfg).soft;
    const auto slow = naive_refine(mask, img, cfg);
    for (std::size_t i = 0; i < fast.size(); ++i) worst = std::max(worst, std::abs(fast[i] - slow[i]));
  }
  o.check(worst <= 1e-6, "oracle mismatch " + fmt(worst, 10));

  int convexity = 0, sums = 0, perms = 0;
  for (int t = 0; t < 1000; ++t) {
    const int c = 2 + static_cast<int>(r.below(3)), h = 2 + static_cast<int>(r.below(5)),
              w = 2 + static_cast<int>(r.below(5));
    pamr::PamrConfig cfg;
    cfg.iterations = 1;
    cfg.dilation_rates = {1, 2};
    const auto mask = random_probs({1, c, h, w}, r);
    const auto img = random_tensor({1, 1, h, w}, r);
    const auto out = pamr::refine(mask, img, cfg).soft;
    const auto nb = pamr::neighborhood(cfg);
    bool convex = true, sum = true;
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        double si = 0, so = 0;
        for (int k = 0; k < c; ++k) {
          double lo = 1e9, hi = -1e9;
          for (const auto& off : nb) {
            const double v = mask(0, k, mirror(y + off.dy, h), mirror(x + off.dx, w));
            lo = std::min(lo, v), hi = std::max(hi, v);
          }
          convex = convex && out(0, k, y, x) >= lo - 1e-12 && out(0, k, y, x) <= hi + 1e-12;
          si += mask(0, k, y, x), so += out(0, k, y, x);
        }
        sum = sum && std::abs(si - so) <= 1e-6;
      }
    std::vector<int> perm(static_cast<std::size_t>(c));
    std::iota(perm.begin(), perm.end(), 0);
    shuffle(perm.begin(), perm.end(), r);
    Tensor<double> pm(mask.shape());
    for (int k = 0; k < c; ++k)
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) pm(0, perm[static_cast<std::size_t>(k)], y, x) = mask(0, k, y, x);
    const auto pout = pamr::refine(pm, img, cfg).soft;
    bool eq = true;
    for (int k = 0; k < c; ++k)
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
          eq = eq && std::abs(pout(0, perm[static_cast<std::size_t>(k)], y, x) - out(0, k, y, x)) <= 1e-12;
    convexity += !convex, sums += !sum, perms += !eq;
  }
  o.check(convexity == 0, std::to_string(convexity) + " convexity violations");
  o.check(sums == 0, std::to_string(sums) + " class-sum violations");
  o.check(perms == 0, std::to_string(perms) + " permutation violations");
  return o;
}

// ---------------------------------------------------------------------------
// Small synthetic setting for the audit and determinism criteria

struct SmallSetting {
  ExperimentData data;
  std::unique_ptr<nn::UNet<float>> source;
  engine::AdaptationConfig cfg;
};

SmallSetting& small_setting() {
  static SmallSetting s = [] {
    SmallSetting out;
    dataio::SyntheticSpec spec;
    spec.image_size = 32;
    spec.slices_per_volume = 8;
    spec.source_volumes = 4;
    spec.target_volumes = 4;
    out.data = prepare_synthetic(spec, 11, 0.75);
    const nn::NetworkSpec net{{4, 4, 8, 8, 8, 8, 8, 4, 4}, 5, 1};
    engine::SourceTrainConfig sc;
    sc.network = net;
    sc.epochs = 3;
    sc.optimizer.batch_size = 4;
    sc.optimizer.learning_rate = 1e-3;
    sc.seed = 11;
    out.source = engine::train_source<float>(out.data.source_train, sc).net;
    auto& c = out.cfg;
    c.network = net;
    c.compact_network = {{2, 4, 4, 8, 8, 8, 4, 4, 2}, 5, 1};
    c.sc_network.layer_filters = {4, 4, 2, 2, 2, 2, 1};
    c.u1_optimizer.batch_size = c.sc_optimizer.batch_size = c.u3_optimizer.batch_size = 4;
    c.source_batch_size = 4;
    c.schedule = {2, 4};
    c.pamr.iterations = 3;
    c.pamr.dilation_rates = {1, 2};
    c.seed = 19;
    return out;
  }();
  return s;
}

// ---------------------------------------------------------------------------
// 4. Freeze and schedule audit

Outcome freeze_and_schedule() {
  Outcome o;
  auto& s = small_setting();
  engine::Adapter<float> ad(*s.source, s.cfg);
  const auto digest = ad.frozen_digest();
  int digest_changes = 0, early_stage2 = 0, late_missing = 0, steps = 0;
  ad.hooks().on_step = [&](int e, int, const losses::LossReport& r) {
    ++steps;
    const bool pamr = r.active(losses::Component::kPamr), circ = r.active(losses::Component::kSegCirc);
    if (e < 2 && (pamr || circ)) ++early_stage2;
    if (e >= 2 && !(pamr && circ)) ++late_missing;
  };
  ad.hooks().on_event = [&](engine::StepEvent ev, engine::NetworkBundle<float>&) {
    if (ev == engine::StepEvent::kU3Update && ad.frozen_digest() != digest) ++digest_changes;
  };
  ad.run(s.data.target_train, &s.data.target_test);
  o.check(steps > 0, "no steps ran");
  o.check(digest_changes == 0, "frozen parameters changed in " + std::to_string(digest_changes) + " steps");
  o.check(early_stage2 == 0, "stage-2 terms active before T");
  o.check(late_missing == 0, "stage-2 terms missing after T");

  // zeroing U1's gradients mid-step must not change what SC and U3 receive
  const auto x = dataio::BatchIterator(s.data.target_train, 4, 1).epoch(0).front().images;
  for (int epoch : {0, 3}) {
    auto capture = [&](bool zero_u1) {
      engine::Adapter<float> a(*s.source, s.cfg);
      std::vector<std::vector<float>> grads;
      a.hooks().on_event = [&](engine::StepEvent ev, engine::NetworkBundle<float>& n) {
        if (ev == engine::StepEvent::kU1Backward && zero_u1) n.u1->zero_grad();
        if (ev == engine::StepEvent::kScBackward)
          for (auto* p : n.sc->trainable_params()) grads.push_back(p->grad);
        if (ev == engine::StepEvent::kU3Backward)
          for (auto* p : n.u3->trainable_params()) grads.push_back(p->grad);
      };
      a.step(x, epoch);
      return grads;
    };
    o.check(capture(false) == capture(true), "pseudo-label carries gradient at epoch " + std::to_string(epoch));
  }
  return o;
}

// ---------------------------------------------------------------------------
// Synthetic experiment runs (criteria 5-7)

struct RunSummary {
  double u1 = 0, u2sc = 0, u3 = 0;
  std::vector<std::array<double, 3>> curve;
};

class SyntheticLab {
 public:
  SyntheticLab(RunConfig cfg, fs::path work) : cfg_(std::move(cfg)), work_(std::move(work)) {
    fs::create_directories(work_);
  }

  const ExperimentData& data() {
    if (!data_) data_ = prepare_synthetic(cfg_.synthetic_spec, cfg_.seed, cfg_.train_fraction);
    return *data_;
  }

  nn::UNet<float>& source() {
    if (source_) return *source_;
    const auto path = work_ / ("source_" + cfg_.digest.substr(0, 12) + ".ckpt");
    if (fs::exists(path)) {
      source_ = engine::load_source<float>(nn::Archive::load(path));
    } else {
      std::cerr << "  pretraining source model (" << cfg_.source.epochs << " epochs)\n";
      source_ = engine::train_source<float>(data().source_train, cfg_.source).net;
      engine::source_archive(*source_).save(path);
    }
    return *source_;
  }

  double baseline() {
    return engine::mean_dsc<float>(data().target_test, cfg_.adaptation.network.num_classes,
                                   [&](const Tensor<float>& x) -> const Tensor<float>& {
                                     return source().forward(x, false);
                                   });
  }

  /// Final validation DSC of one adaptation run, cached by name and digest.
  RunSummary run(const std::string& name, const engine::AblationFlags& flags, bool with_extension,
                 bool full_curve = true) {
    auto ac = cfg_.adaptation;
    ac.ablation = flags;
    if (!full_curve) ac.validation_every = ac.schedule.total_epochs;
    const auto key = name + "_" + cfg_.digest.substr(0, 12) + ".json";
    const auto path = work_ / key;
    if (fs::exists(path)) {
      std::ifstream is(path);
      const auto j = Json::parse(is);
      RunSummary s;
      s.u1 = j["u1"], s.u2sc = j["u2sc"], s.u3 = j["u3"];
      for (const auto& c : j["curve"]) s.curve.push_back({c[0], c[1], c[2]});
      return s;
    }
    std::cerr << "  adaptation run " << name << " (" << ac.schedule.total_epochs << " epochs)\n";
    const auto t0 = std::chrono::steady_clock::now();
    engine::Adapter<float> ad(source(), ac);
    std::optional<dataio::SliceDataset> labeled;
    if (with_extension) labeled = dataio::make_slice_dataset({data().target_train_volumes.front()}, true);
    ad.hooks().on_epoch = [&](const engine::EpochRecord& r) {
      if (r.validated())
        std::cerr << "    epoch " << r.epoch << "  U1 " << fmt(r.dsc_u1) << "  U2oSC " << fmt(r.dsc_u2sc) << "  U3 "
                  << fmt(r.dsc_u3) << "\n";
    };
    ad.run(data().target_train, &data().target_test, labeled ? &*labeled : nullptr);
    RunSummary s;
    const auto& last = ad.state().history.back();
    s.u1 = last.dsc_u1, s.u2sc = last.dsc_u2sc, s.u3 = last.dsc_u3;
    Json curve = Json::array();
    for (const auto& h : ad.state().history)
      if (h.validated()) {
        s.curve.push_back({h.dsc_u1, h.dsc_u2sc, h.dsc_u3});
        curve.push_back({h.dsc_u1, h.dsc_u2sc, h.dsc_u3});
      }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::ofstream(path) << Json{{"u1", s.u1}, {"u2sc", s.u2sc}, {"u3", s.u3}, {"curve", curve}, {"seconds", secs}}.dump(2);
    return s;
  }

  RunSummary default_run() { return run("default", {}, false); }

 private:
  RunConfig cfg_;
  fs::path work_;
  std::optional<ExperimentData> data_;
  std::unique_ptr<nn::UNet<float>> source_;
};

Outcome adaptation_regression(SyntheticLab& lab) {
  Outcome o;
  const double base = lab.baseline();
  const auto d = lab.default_run();
  const double best_other = std::max(d.u1, d.u2sc);
  o.detail = "baseline " + fmt(base) + "  U1 " + fmt(d.u1) + "  U2oSC " + fmt(d.u2sc) + "  U3 " + fmt(d.u3);
  o.check(d.u3 - base >= 0.15, "gain over baseline below 0.15");
  o.check(d.u3 >= best_other - 0.02, "U3 trails max(U1, U2oSC) by more than 0.02");
  return o;
}

Outcome ablation_directions(SyntheticLab& lab) {
  Outcome o;
  const auto d = lab.default_run();
  std::string detail = "default " + fmt(d.u3);
  for (const auto& s : engine::ablation_settings()) {
    std::string key = s.flags.describe();
    const auto r = lab.run("ablation_" + key, s.flags, false, false);
    detail += "  " + s.name + " " + fmt(r.u3);
    if (s.flags.no_fms)
      o.check(r.u3 < 0.1, s.name + " does not collapse");
    else
      o.check(r.u3 <= d.u3, s.name + " beats the default run");
  }
  o.detail = detail + (o.detail.empty() ? "" : "; " + o.detail);
  return o;
}

Outcome extension_margin(SyntheticLab& lab) {
  Outcome o;
  const auto d = lab.default_run();
  const auto e = lab.run("extension", {}, true);
  const double margin = e.u3 - d.u3;
  o.detail = "default " + fmt(d.u3) + "  extension " + fmt(e.u3) + "  margin " + fmt(margin) + "  oracle margin " +
             fmt(kOracleExtensionMargin);
  o.check(margin > 0, "extension does not improve");
  o.check(margin >= kOracleExtensionMargin - 0.02, "margin below the oracle margin minus 0.02");
  return o;
}

// ---------------------------------------------------------------------------
// 8. Metrics oracle

double brute_assd(const LabelMask& a, const LabelMask& b, int cls) {
  auto surface = [&](const LabelMask& m) {
    std::vector<std::array<int, 3>> out;
    for (int z = 0; z < m.slices; ++z)
      for (int y = 0; y < m.h; ++y)
        for (int x = 0; x < m.w; ++x) {
          if (m.at(z, y, x) != cls) continue;
          const int nb[6][3] = {{z + 1, y, x}, {z - 1, y, x}, {z, y + 1, x}, {z, y - 1, x}, {z, y, x + 1}, {z, y, x - 1}};
          bool edge = false;
          for (const auto& p : nb)
            edge = edge || p[0] < 0 || p[1] < 0 || p[2] < 0 || p[0] >= m.slices || p[1] >= m.h || p[2] >= m.w ||
                   m.at(p[0], p[1], p[2]) != cls;
          if (edge) out.push_back({z, y, x});
        }
    return out;
  };
  const auto sa = surface(a), sb = surface(b);
  if (sa.empty() && sb.empty()) return 0;
  if (sa.empty() || sb.empty()) return 9999;
  auto directed = [](const auto& from, const auto& to) {
    double total = 0;
    for (const auto& p : from) {
      double best = 1e300;
      for (const auto& q : to)
        best = std::min(best, std::sqrt(double((p[0] - q[0]) * (p[0] - q[0]) + (p[1] - q[1]) * (p[1] - q[1]) +
                                               (p[2] - q[2]) * (p[2] - q[2]))));
      total += best;
    }
    return total / double(from.size());
  };
  return 0.5 * (directed(sa, sb) + directed(sb, sa));
}

Outcome metrics_oracle() {
  Outcome o;
  Rng r(808);
  double worst = 0;
  for (int t = 0; t < 1000; ++t) {
    const int s = 1 + static_cast<int>(r.below(5)), h = 1 + static_cast<int>(r.below(5)),
              w = 1 + static_cast<int>(r.below(5));
    const double p = r.uniform(0.02, 0.95);
    LabelMask a(s, h, w), b(s, h, w);
    for (auto* m : {&a, &b})
      for (auto& v : m->labels) v = r.uniform() < p ? static_cast<std::uint8_t>(1 + r.below(4)) : 0;
    for (int c = 1; c < 5; ++c) worst = std::max(worst, std::abs(eval::assd_metric(a, b, c) - brute_assd(a, b, c)));
  }
  o.check(worst <= 1e-9, "ASSD differs from brute force by " + fmt(worst, 12));
  LabelMask empty(3, 3, 3), one(3, 3, 3);
  one.at(1, 1, 1) = 2;
  o.check(eval::assd_metric(empty, one, 2) == 9999.0 && eval::assd_metric(one, empty, 2) == 9999.0,
          "empty-prediction sentinel");
  return o;
}

// ---------------------------------------------------------------------------
// 9. Determinism and resume

Outcome determinism_and_resume(const fs::path& work) {
  Outcome o;
  auto& s = small_setting();
  engine::Adapter<float> a(*s.source, s.cfg), b(*s.source, s.cfg);
  a.run(s.data.target_train, &s.data.target_test);
  b.run(s.data.target_train, &s.data.target_test);
  o.check(a.state().history == b.state().history, "repeated runs differ");

  engine::Adapter<float> first(*s.source, s.cfg);
  first.run(s.data.target_train, &s.data.target_test, nullptr, 3);
  const auto path = work / "resume_probe.ckpt";
  first.to_archive().save(path);
  engine::Adapter<float> resumed(*s.source, s.cfg);
  resumed.restore(nn::Archive::load(path));
  resumed.run(s.data.target_train, &s.data.target_test);
  o.check(resumed.state().history == a.state().history, "resumed validation curve differs");
  o.check(nn::parameter_digest(*resumed.nets().u3, false) == nn::parameter_digest(*a.nets().u3, false),
          "resumed U3 weights differ");
  fs::remove(path);
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria"};
  int only = 0;
  std::string work = "acceptance_work";
  std::string config = std::string(SFDA_SOURCE_DIR) + "/configs/synthetic.json";
  app.add_option("--criterion", only, "criterion to run (1-9); all when omitted")->check(CLI::Range(1, 9));
  app.add_option("--work", work, "cache directory for synthetic runs");
  app.add_option("--config", config, "synthetic experiment configuration");
  CLI11_PARSE(app, argc, argv);

  fs::create_directories(work);
  std::unique_ptr<SyntheticLab> lab;
  auto get_lab = [&]() -> SyntheticLab& {
    if (!lab) lab = std::make_unique<SyntheticLab>(parse_config(std::optional<fs::path>(config), {}), work);
    return *lab;
  };
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"loss unit suite", loss_suite},
      {"gradient checks", gradient_checks},
      {"PAMR oracle equivalence", pamr_checks},
      {"freeze and schedule audit", freeze_and_schedule},
      {"synthetic adaptation regression", [&] { return adaptation_regression(get_lab()); }},
      {"ablation directions", [&] { return ablation_directions(get_lab()); }},
      {"extension module", [&] { return extension_margin(get_lab()); }},
      {"metrics oracle", metrics_oracle},
      {"determinism and resume", [&] { return determinism_and_resume(work); }},
  };

  bool all = true;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (only != 0 && only != id) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome out;
    try {
      out = criteria[i].second();
    } catch (const std::exception& e) {
      out.check(false, std::string("exception: ") + e.what());
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    all = all && out.pass;
    std::cout << "criterion " << id << " " << (out.pass ? "PASS" : "FAIL") << "  " << criteria[i].first << " ("
              << fmt(secs, 1) << " s)" << (out.detail.empty() ? "" : "  " + out.detail) << std::endl;
  }
  return all ? 0 : 1;
}
