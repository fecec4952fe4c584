#include "evsve/image.hpp"

#include <cmath>
#include <numeric>

namespace evsve {

double image_mean(const ImageD& img) {
  if (img.empty()) return 0.0;
  const auto px = img.pixels();
  return std::accumulate(px.begin(), px.end(), 0.0) / static_cast<double>(px.size());
}

double image_min(const ImageD& img) {
  const auto px = img.pixels();
  return px.empty() ? 0.0 : *std::min_element(px.begin(), px.end());
}

double image_max(const ImageD& img) {
  const auto px = img.pixels();
  return px.empty() ? 0.0 : *std::max_element(px.begin(), px.end());
}

namespace {

// One-dimensional box mean along a strided line of n samples.
void box_line(const double* src, std::ptrdiff_t stride, int n, int radius, double* dst,
              std::ptrdiff_t dst_stride, std::vector<double>& prefix) {
  const int padded = n + 2 * radius;
  prefix.assign(static_cast<std::size_t>(padded) + 1, 0.0);
  for (int i = 0; i < padded; ++i) {
    prefix[i + 1] = prefix[i] + src[reflect_index(i - radius, n) * stride];
  }
  const double inv = 1.0 / (2 * radius + 1);
  for (int i = 0; i < n; ++i) {
    dst[i * dst_stride] = (prefix[i + 2 * radius + 1] - prefix[i]) * inv;
  }
}

}  // namespace

ImageD box_mean(const ImageD& img, int radius) {
  if (radius <= 0 || img.empty()) return img;
  const int w = img.width();
  const int h = img.height();
  ImageD tmp(w, h);
  ImageD out(w, h);
  std::vector<double> prefix;
  for (int y = 0; y < h; ++y) {
    box_line(&img(0, y), 1, w, radius, &tmp(0, y), 1, prefix);
  }
  for (int x = 0; x < w; ++x) {
    box_line(&tmp(x, 0), w, h, radius, &out(x, 0), w, prefix);
  }
  return out;
}

ImageD gradient_magnitude(const ImageD& img) {
  ImageD out(img.width(), img.height());
  for (int y = 0; y < img.height(); ++y) {
    for (int x = 0; x < img.width(); ++x) {
      const double gx = 0.5 * (mirrored(img, x + 1, y) - mirrored(img, x - 1, y));
      const double gy = 0.5 * (mirrored(img, x, y + 1) - mirrored(img, x, y - 1));
      out(x, y) = std::sqrt(gx * gx + gy * gy);
    }
  }
  return out;
}

}  // namespace evsve
