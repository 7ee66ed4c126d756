#pragma once

// Minimal raster line chart written as a binary PPM, for per-epoch
// validation curves without a plotting dependency.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "sfda/core/error.hpp"

namespace sfda::plot {

using Rgb = std::array<std::uint8_t, 3>;

struct Series {
  std::vector<double> x, y;  // NaN y values are skipped
  Rgb color;
};

class Canvas {
 public:
  Canvas(int w, int h) : w_(w), h_(h), px_(static_cast<std::size_t>(w) * h * 3, 255) {}

  void set(int x, int y, Rgb c) {
    if (x < 0 || y < 0 || x >= w_ || y >= h_) return;
    auto* p = &px_[(static_cast<std::size_t>(y) * w_ + x) * 3];
    p[0] = c[0], p[1] = c[1], p[2] = c[2];
  }

  void line(int x0, int y0, int x1, int y1, Rgb c, int thick = 1) {
    const int dx = std::abs(x1 - x0), dy = -std::abs(y1 - y0);
    const int sx = x0 < x1 ? 1 : -1, sy = y0 < y1 ? 1 : -1;
    int err = dx + dy;
    while (true) {
      for (int a = -thick / 2; a <= thick / 2; ++a)
        for (int b = -thick / 2; b <= thick / 2; ++b) set(x0 + a, y0 + b, c);
      if (x0 == x1 && y0 == y1) break;
      const int e2 = 2 * err;
      if (e2 >= dy) err += dy, x0 += sx;
      if (e2 <= dx) err += dx, y0 += sy;
    }
  }

  void save_ppm(const std::filesystem::path& path) const {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot write " + path.string());
    os << "P6\n" << w_ << ' ' << h_ << "\n255\n";
    os.write(reinterpret_cast<const char*>(px_.data()), static_cast<std::streamsize>(px_.size()));
  }

  int width() const { return w_; }
  int height() const { return h_; }

 private:
  int w_, h_;
  std::vector<std::uint8_t> px_;
};

/// Curves over a fixed y range with light gridlines every 0.1 of the range.
inline Canvas line_chart(const std::vector<Series>& series, double y_lo = 0.0, double y_hi = 1.0, int w = 640,
                         int h = 400) {
  Canvas c(w, h);
  const int left = 40, right = w - 15, top = 15, bottom = h - 30;
  double x_lo = 0, x_hi = 1;
  bool any = false;
  for (const auto& s : series)
    for (double x : s.x) {
      x_lo = any ? std::min(x_lo, x) : x;
      x_hi = any ? std::max(x_hi, x) : x;
      any = true;
    }
  if (x_hi <= x_lo) x_hi = x_lo + 1;
  auto px = [&](double x) { return left + static_cast<int>(std::lround((x - x_lo) / (x_hi - x_lo) * (right - left))); };
  auto py = [&](double y) {
    y = std::clamp(y, y_lo, y_hi);
    return bottom - static_cast<int>(std::lround((y - y_lo) / (y_hi - y_lo) * (bottom - top)));
  };
  for (int g = 0; g <= 10; ++g) {
    const int y = py(y_lo + (y_hi - y_lo) * g / 10.0);
    c.line(left, y, right, y, {225, 225, 225});
  }
  c.line(left, top, left, bottom, {0, 0, 0});
  c.line(left, bottom, right, bottom, {0, 0, 0});
  for (const auto& s : series) {
    int prev_x = -1, prev_y = -1;
    for (std::size_t i = 0; i < s.x.size() && i < s.y.size(); ++i) {
      if (std::isnan(s.y[i])) continue;
      const int x = px(s.x[i]), y = py(s.y[i]);
      if (prev_x >= 0) c.line(prev_x, prev_y, x, y, s.color, 2);
      c.line(x - 2, y, x + 2, y, s.color, 1);
      prev_x = x, prev_y = y;
    }
  }
  return c;
}

}  // namespace sfda::plot
