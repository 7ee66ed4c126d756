#pragma once

// Volume-level overlap and surface-distance metrics and the per-class report.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <limits>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "sfda/core/error.hpp"
#include "sfda/dataio/volume.hpp"

namespace sfda::eval {

using dataio::LabelMask;

inline constexpr double kEmptySurfaceSentinel = 9999.0;

inline void check_pair(const LabelMask& pred, const LabelMask& gt, int class_id, int num_classes) {
  require(pred.same_shape(gt), "prediction and ground truth shapes differ");
  require(class_id >= 0 && class_id < num_classes, "unknown class id " + std::to_string(class_id));
}

/// 2|P n G| / (|P| + |G|); 1.0 when both sets are empty.
inline double dsc_metric(const LabelMask& pred, const LabelMask& gt, int class_id, int num_classes = 5) {
  check_pair(pred, gt, class_id, num_classes);
  std::size_t p = 0, g = 0, both = 0;
  for (std::size_t i = 0; i < pred.labels.size(); ++i) {
    const bool a = pred.labels[i] == class_id, b = gt.labels[i] == class_id;
    p += a;
    g += b;
    both += a && b;
  }
  if (p + g == 0) return 1.0;
  return 2.0 * static_cast<double>(both) / static_cast<double>(p + g);
}

/// Voxels of `class_id` with at least one 6-neighbour outside the class;
/// neighbours beyond the volume border count as outside.
inline std::vector<std::array<int, 3>> surface_voxels(const LabelMask& m, int class_id) {
  std::vector<std::array<int, 3>> out;
  auto inside = [&](int z, int y, int x) {
    return z >= 0 && z < m.slices && y >= 0 && y < m.h && x >= 0 && x < m.w && m.at(z, y, x) == class_id;
  };
  for (int z = 0; z < m.slices; ++z)
    for (int y = 0; y < m.h; ++y)
      for (int x = 0; x < m.w; ++x) {
        if (m.at(z, y, x) != class_id) continue;
        if (!inside(z - 1, y, x) || !inside(z + 1, y, x) || !inside(z, y - 1, x) || !inside(z, y + 1, x) ||
            !inside(z, y, x - 1) || !inside(z, y, x + 1))
          out.push_back({z, y, x});
      }
  return out;
}

namespace detail {

/// 1D squared-distance transform (lower envelope of parabolas) along a line
/// with sample positions i * step. Infinite entries are sites-free.
inline void edt_1d(const double* f, double* d, int n, double step, std::vector<int>& v, std::vector<double>& z) {
  constexpr double inf = std::numeric_limits<double>::infinity();
  v.assign(static_cast<std::size_t>(n), 0);
  z.assign(static_cast<std::size_t>(n) + 1, 0.0);
  int k = -1;
  for (int q = 0; q < n; ++q) {
    if (f[q] == inf) continue;
    const double pq = q * step;
    while (k >= 0) {
      const double pv = v[static_cast<std::size_t>(k)] * step;
      const double s = ((f[q] + pq * pq) - (f[v[static_cast<std::size_t>(k)]] + pv * pv)) / (2.0 * (pq - pv));
      if (s <= z[static_cast<std::size_t>(k)]) {
        --k;
      } else {
        break;
      }
    }
    ++k;
    v[static_cast<std::size_t>(k)] = q;
    if (k == 0) {
      z[0] = -inf;
    } else {
      const double pv = v[static_cast<std::size_t>(k - 1)] * step;
      z[static_cast<std::size_t>(k)] =
          ((f[q] + pq * pq) - (f[v[static_cast<std::size_t>(k - 1)]] + pv * pv)) / (2.0 * (pq - pv));
    }
    z[static_cast<std::size_t>(k) + 1] = inf;
  }
  if (k < 0) {
    std::fill(d, d + n, inf);
    return;
  }
  int j = 0;
  for (int q = 0; q < n; ++q) {
    const double x = q * step;
    while (z[static_cast<std::size_t>(j) + 1] < x) ++j;
    const double dx = x - v[static_cast<std::size_t>(j)] * step;
    d[q] = dx * dx + f[v[static_cast<std::size_t>(j)]];
  }
}

}  // namespace detail

/// Exact squared Euclidean distance from every voxel to the nearest site,
/// with per-axis spacing (slice, row, column).
inline std::vector<double> squared_distance_map(int s, int h, int w, const std::vector<std::array<int, 3>>& sites,
                                                const std::array<double, 3>& spacing) {
  constexpr double inf = std::numeric_limits<double>::infinity();
  const std::size_t n = static_cast<std::size_t>(s) * h * w;
  std::vector<double> g(n, inf);
  for (const auto& p : sites) g[(static_cast<std::size_t>(p[0]) * h + p[1]) * w + p[2]] = 0.0;
  std::vector<int> v;
  std::vector<double> z;
  const int longest = std::max({s, h, w});
  std::vector<double> f(static_cast<std::size_t>(longest)), d(static_cast<std::size_t>(longest));
  // along x
  for (int a = 0; a < s; ++a)
    for (int b = 0; b < h; ++b) {
      double* row = g.data() + (static_cast<std::size_t>(a) * h + b) * w;
      std::copy(row, row + w, f.data());
      detail::edt_1d(f.data(), row, w, spacing[2], v, z);
    }
  // along y
  for (int a = 0; a < s; ++a)
    for (int c = 0; c < w; ++c) {
      for (int b = 0; b < h; ++b) f[static_cast<std::size_t>(b)] = g[(static_cast<std::size_t>(a) * h + b) * w + c];
      detail::edt_1d(f.data(), d.data(), h, spacing[1], v, z);
      for (int b = 0; b < h; ++b) g[(static_cast<std::size_t>(a) * h + b) * w + c] = d[static_cast<std::size_t>(b)];
    }
  // along z
  for (int b = 0; b < h; ++b)
    for (int c = 0; c < w; ++c) {
      for (int a = 0; a < s; ++a) f[static_cast<std::size_t>(a)] = g[(static_cast<std::size_t>(a) * h + b) * w + c];
      detail::edt_1d(f.data(), d.data(), s, spacing[0], v, z);
      for (int a = 0; a < s; ++a) g[(static_cast<std::size_t>(a) * h + b) * w + c] = d[static_cast<std::size_t>(a)];
    }
  return g;
}

/// Average symmetric surface distance: the mean of the two directed average
/// nearest-surface distances. 9999 when exactly one surface is empty, 0 when
/// both are.
inline double assd_metric(const LabelMask& pred, const LabelMask& gt, int class_id,
                          const std::array<double, 3>& spacing = {1.0, 1.0, 1.0}, int num_classes = 5) {
  check_pair(pred, gt, class_id, num_classes);
  const auto sp = surface_voxels(pred, class_id);
  const auto sg = surface_voxels(gt, class_id);
  if (sp.empty() && sg.empty()) return 0.0;
  if (sp.empty() || sg.empty()) return kEmptySurfaceSentinel;
  auto directed = [&](const std::vector<std::array<int, 3>>& from, const std::vector<std::array<int, 3>>& to) {
    const auto dm = squared_distance_map(pred.slices, pred.h, pred.w, to, spacing);
    double sum = 0.0;
    for (const auto& p : from) sum += std::sqrt(dm[(static_cast<std::size_t>(p[0]) * pred.h + p[1]) * pred.w + p[2]]);
    return sum / static_cast<double>(from.size());
  };
  return 0.5 * (directed(sp, sg) + directed(sg, sp));
}

// ---------------------------------------------------------------------------

inline std::vector<std::string> default_class_names() { return {"liver", "right kidney", "left kidney", "spleen"}; }

/// Per-subject and per-class DSC/ASSD over foreground classes 1..K, with class
/// names in column order.
struct MetricReport {
  std::vector<std::string> class_names;
  std::vector<std::vector<double>> subject_dsc;   // [subject][class]
  std::vector<std::vector<double>> subject_assd;  // [subject][class]
  std::vector<double> class_dsc, class_assd;      // means across subjects
  double mean_dsc = 0.0, mean_assd = 0.0;         // means across classes
  std::map<std::string, std::string> metadata;

  std::string to_csv() const {
    std::ostringstream os;
    os << std::setprecision(10) << "row";
    for (const auto& n : class_names) os << ",dsc_" << n;
    os << ",dsc_mean";
    for (const auto& n : class_names) os << ",assd_" << n;
    os << ",assd_mean\n";
    auto line = [&](const std::string& name, const std::vector<double>& d, const std::vector<double>& a) {
      os << name;
      double md = 0, ma = 0;
      for (double v : d) os << ',' << v, md += v;
      os << ',' << md / static_cast<double>(d.size());
      for (double v : a) os << ',' << v, ma += v;
      os << ',' << ma / static_cast<double>(a.size()) << '\n';
    };
    for (std::size_t s = 0; s < subject_dsc.size(); ++s)
      line("subject" + std::to_string(s), subject_dsc[s], subject_assd[s]);
    line("mean", class_dsc, class_assd);
    return os.str();
  }

  /// Table with DSC and ASSD column groups, one row per label.
  std::string to_table(const std::string& row_label = "U3") const {
    std::ostringstream os;
    os << std::fixed << std::setprecision(3);
    os << std::left << std::setw(14) << "Method" << "| DSC ";
    for (const auto& n : class_names) os << std::setw(13) << n;
    os << std::setw(8) << "mean" << "| ASSD ";
    for (const auto& n : class_names) os << std::setw(13) << n;
    os << "mean\n";
    os << std::setw(14) << row_label << "|     ";
    for (double v : class_dsc) os << std::setw(13) << v;
    os << std::setw(8) << mean_dsc << "|      ";
    for (double v : class_assd) os << std::setw(13) << v;
    os << mean_assd << '\n';
    return os.str();
  }
};

inline MetricReport build_report(const std::vector<LabelMask>& preds, const std::vector<LabelMask>& gts,
                                 const std::vector<std::string>& class_names = default_class_names(),
                                 const std::vector<std::array<double, 3>>& spacings = {}) {
  require(preds.size() == gts.size(), "prediction and ground-truth lists are misaligned");
  require(!preds.empty(), "report needs at least one subject");
  require(spacings.empty() || spacings.size() == preds.size(), "spacing list is misaligned");
  const int k = static_cast<int>(class_names.size());
  MetricReport r;
  r.class_names = class_names;
  r.class_dsc.assign(static_cast<std::size_t>(k), 0.0);
  r.class_assd.assign(static_cast<std::size_t>(k), 0.0);
  for (std::size_t s = 0; s < preds.size(); ++s) {
    std::vector<double> d, a;
    const auto sp = spacings.empty() ? std::array<double, 3>{1, 1, 1} : spacings[s];
    for (int c = 1; c <= k; ++c) {
      d.push_back(dsc_metric(preds[s], gts[s], c, k + 1));
      a.push_back(assd_metric(preds[s], gts[s], c, sp, k + 1));
    }
    for (int c = 0; c < k; ++c) {
      r.class_dsc[static_cast<std::size_t>(c)] += d[static_cast<std::size_t>(c)] / static_cast<double>(preds.size());
      r.class_assd[static_cast<std::size_t>(c)] += a[static_cast<std::size_t>(c)] / static_cast<double>(preds.size());
    }
    r.subject_dsc.push_back(std::move(d));
    r.subject_assd.push_back(std::move(a));
  }
  for (int c = 0; c < k; ++c) {
    r.mean_dsc += r.class_dsc[static_cast<std::size_t>(c)] / k;
    r.mean_assd += r.class_assd[static_cast<std::size_t>(c)] / k;
  }
  return r;
}

}  // namespace sfda::eval
