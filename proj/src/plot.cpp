#include <algorithm>
#include <cmath>
#include <cstdio>
#include <string>

#include "evsve/pipeline.hpp"

namespace evsve {

namespace {

using Color = std::array<std::uint8_t, 3>;
constexpr Color kWhite{255, 255, 255};
constexpr Color kBlack{0, 0, 0};
constexpr Color kGrid{225, 225, 225};
constexpr Color kBar{70, 110, 170};
constexpr Color kMode{200, 40, 40};
constexpr Color kPoint{30, 120, 60};

constexpr int kWidth = 640;
constexpr int kHeight = 400;
constexpr int kLeft = 56;
constexpr int kRight = 16;
constexpr int kTop = 16;
constexpr int kBottom = 40;

// 3x5 glyphs, one row per nibble (bit 2 = leftmost column).
int glyph_row(char c, int row) {
  static const char* const kDigits[] = {"75557", "26227", "71747", "71717", "55711",
                                        "74717", "74757", "71111", "75757", "75717"};
  if (c >= '0' && c <= '9') return kDigits[c - '0'][row] - '0';
  if (c == '.') return row == 4 ? 2 : 0;
  if (c == '-') return row == 2 ? 7 : 0;
  return 0;
}

void draw_text(RgbImage& img, int x, int y, const std::string& text, Color color, int scale = 2) {
  for (char c : text) {
    for (int row = 0; row < 5; ++row) {
      const int bits = glyph_row(c, row);
      for (int col = 0; col < 3; ++col) {
        if (!(bits & (4 >> col))) continue;
        for (int sy = 0; sy < scale; ++sy)
          for (int sx = 0; sx < scale; ++sx) img.set(x + col * scale + sx, y + row * scale + sy, color);
      }
    }
    x += 4 * scale;
  }
}

int text_width(const std::string& text, int scale = 2) { return static_cast<int>(text.size()) * 4 * scale; }

void fill_rect(RgbImage& img, int x0, int y0, int x1, int y1, Color color) {
  for (int y = std::min(y0, y1); y <= std::max(y0, y1); ++y)
    for (int x = std::min(x0, x1); x <= std::max(x0, x1); ++x) img.set(x, y, color);
}

std::string fmt(double v, int decimals) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.*f", decimals, v);
  std::string s = buf;
  if (s == "-0" || s == "-0.0" || s == "-0.00") s.erase(0, 1);
  return s;
}

// Round step giving about `target` ticks over the span.
double nice_step(double span, int target) {
  if (!(span > 0.0)) return 1.0;
  const double raw = span / target;
  const double mag = std::pow(10.0, std::floor(std::log10(raw)));
  for (double m : {1.0, 2.0, 5.0, 10.0}) {
    if (m * mag >= raw) return m * mag;
  }
  return 10.0 * mag;
}

int decimals_for(double step) { return step >= 1.0 ? 0 : static_cast<int>(std::ceil(-std::log10(step) - 1e-9)); }

struct Axes {
  double x0, x1, y0, y1;
  int px(double x) const {
    return kLeft + static_cast<int>(std::lround((x - x0) / (x1 - x0) * (kWidth - kLeft - kRight)));
  }
  int py(double y) const {
    return kHeight - kBottom - static_cast<int>(std::lround((y - y0) / (y1 - y0) * (kHeight - kTop - kBottom)));
  }
};

void draw_axes(RgbImage& img, const Axes& a, double xstep, double ystep) {
  const int xd = decimals_for(xstep), yd = decimals_for(ystep);
  for (double y = std::ceil(a.y0 / ystep) * ystep; y <= a.y1 + 1e-9 * ystep; y += ystep) {
    const int p = a.py(y);
    fill_rect(img, kLeft, p, kWidth - kRight, p, kGrid);
    const std::string s = fmt(y, yd);
    draw_text(img, kLeft - 6 - text_width(s), p - 5, s, kBlack);
  }
  for (double x = std::ceil(a.x0 / xstep) * xstep; x <= a.x1 + 1e-9 * xstep; x += xstep) {
    const int p = a.px(x);
    fill_rect(img, p, kHeight - kBottom, p, kHeight - kBottom + 4, kBlack);
    const std::string s = fmt(x, xd);
    draw_text(img, p - text_width(s) / 2, kHeight - kBottom + 8, s, kBlack);
  }
  fill_rect(img, kLeft, kTop, kLeft, kHeight - kBottom, kBlack);
  fill_rect(img, kLeft, kHeight - kBottom, kWidth - kRight, kHeight - kBottom, kBlack);
}

}  // namespace

RgbImage plot_size_histogram(const SizeHistogram& hist) {
  RgbImage img(kWidth, kHeight, kWhite);
  const int peak = hist.counts.empty() ? 0 : *std::max_element(hist.counts.begin(), hist.counts.end());
  const double x0 = hist.origin;
  const double x1 = hist.origin + std::max<std::size_t>(hist.counts.size(), 1) * hist.bin_width;
  const Axes a{x0, x1, 0.0, std::max(peak, 1) * 1.1};
  draw_axes(img, a, nice_step(x1 - x0, 8), std::max(1.0, nice_step(a.y1, 5)));
  for (std::size_t i = 0; i < hist.counts.size(); ++i) {
    if (hist.counts[i] == 0) continue;
    const double lo = hist.origin + static_cast<double>(i) * hist.bin_width;
    fill_rect(img, a.px(lo) + 1, a.py(hist.counts[i]), a.px(lo + hist.bin_width) - 1, a.py(0.0) - 1, kBar);
  }
  for (double m : hist.modes) {
    const int p = a.px(m);
    fill_rect(img, p, kTop, p + 1, kHeight - kBottom - 1, kMode);
  }
  return img;
}

RgbImage plot_dh_vs_time(std::span<const ParticleMeasurement> measurements) {
  RgbImage img(kWidth, kHeight, kWhite);
  double t0 = 0.0, t1 = 1.0, h0 = 0.0, h1 = 1.0;
  if (!measurements.empty()) {
    t0 = t1 = measurements.front().t_us / 1000.0;
    h0 = h1 = measurements.front().dh;
    for (const auto& m : measurements) {
      t0 = std::min(t0, m.t_us / 1000.0);
      t1 = std::max(t1, m.t_us / 1000.0);
      h0 = std::min(h0, m.dh);
      h1 = std::max(h1, m.dh);
    }
    const double tp = std::max(0.05 * (t1 - t0), 0.5);
    const double hp = std::max(0.05 * (h1 - h0), 1.0);
    t0 -= tp; t1 += tp; h0 -= hp; h1 += hp;
  }
  const Axes a{t0, t1, h0, h1};
  draw_axes(img, a, nice_step(t1 - t0, 8), nice_step(h1 - h0, 6));
  for (const auto& m : measurements) {
    const int x = a.px(m.t_us / 1000.0), y = a.py(m.dh);
    fill_rect(img, x - 2, y - 2, x + 2, y + 2, kPoint);
  }
  return img;
}

}  // namespace evsve
