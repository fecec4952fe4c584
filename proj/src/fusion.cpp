#include "evsve/fusion.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>

namespace evsve {

void WeightParams::validate() const {
  if (!(delta > 0.0)) throw ConfigError("delta must be positive");
  if (!(psi > 0.0)) throw ConfigError("psi must be positive");
  if (!(epsilon >= 0.0)) throw ConfigError("epsilon must be non-negative");
  if (feather < 0) throw ConfigError("feather radius must be non-negative");
  if (bins < 2) throw ConfigError("histogram needs at least two bins");
}

ImageD guided_filter(const ImageD& img, int radius, double regularization) {
  const ImageD mean = box_mean(img, radius);
  ImageD sq(img.width(), img.height());
  for (std::size_t i = 0; i < img.size(); ++i) sq[i] = img[i] * img[i];
  const ImageD mean_sq = box_mean(sq, radius);
  ImageD a(img.width(), img.height());
  ImageD b(img.width(), img.height());
  for (std::size_t i = 0; i < img.size(); ++i) {
    const double var = std::max(mean_sq[i] - mean[i] * mean[i], 0.0);
    a[i] = var / (var + regularization);
    b[i] = mean[i] - a[i] * mean[i];
  }
  const ImageD mean_a = box_mean(a, radius);
  const ImageD mean_b = box_mean(b, radius);
  ImageD out(img.width(), img.height());
  for (std::size_t i = 0; i < img.size(); ++i) out[i] = mean_a[i] * img[i] + mean_b[i];
  return out;
}

namespace {

double stack_scale(const ExposureStack& stack) {
  if (stack.full_scale() > 0.0) return stack.full_scale();
  double top = 0.0;
  for (const ImageD& img : stack.images()) top = std::max(top, image_max(img));
  return top > 0.0 ? top : 1.0;
}

}  // namespace

RetinexLayers retinex_decompose(const ExposureStack& stack, const RetinexOptions& options) {
  if (stack.count() < 1) throw InputError("empty exposure stack");
  if (!(options.epsilon > 0.0)) throw ConfigError("retinex epsilon must be positive");
  RetinexLayers layers;
  layers.epsilon = options.epsilon;
  layers.intensity_scale = stack_scale(stack);
  const double scale = layers.intensity_scale;
  const int radius = options.radius > 0
                         ? options.radius
                         : std::max(1, std::max(stack.width(), stack.height()) / 32);
  // Keeps L*R within 1e-4 of I wherever the filter undershoots.
  const double floor = std::max(1e-4 * scale, 1e4 * options.epsilon);
  for (const ImageD& img : stack.images()) {
    ImageD norm(img.width(), img.height());
    for (std::size_t i = 0; i < img.size(); ++i) {
      if (!(img[i] >= 0.0)) throw InputError("exposure intensities must be non-negative");
      norm[i] = img[i] / scale;
    }
    ImageD smooth = guided_filter(norm, radius, options.regularization);
    ImageD refl(img.width(), img.height());
    for (std::size_t i = 0; i < img.size(); ++i) {
      smooth[i] = std::max(smooth[i] * scale, floor);
      refl[i] = img[i] / (smooth[i] + options.epsilon);
    }
    layers.illumination.push_back(std::move(smooth));
    layers.reflection.push_back(std::move(refl));
  }
  return layers;
}

double illumination_bell(double value, double regional_mean, double psi, double delta) {
  const double d = value - regional_mean;
  return std::exp(-d * d / (2.0 * delta * delta)) / psi;
}

namespace {

// Per-region histogram statistics of one exposure's illumination.
struct RegionHistogram {
  double lo = 0.0;
  double width = 1.0;  // bin width
  std::vector<double> gradient;  // cumulative-histogram gradient per bin
  double mean = 0.0;

  int bin_of(double v, int bins) const {
    const int b = static_cast<int>(std::floor((v - lo) / width));
    return std::clamp(b, 0, bins - 1);
  }
};

// Normalised weights for all pixels using one region's statistics.
std::vector<ImageD> region_weights(const std::vector<ImageD>& norm, const std::vector<int>& members,
                                   const WeightParams& p) {
  const int k_count = static_cast<int>(norm.size());
  const int w = norm.front().width();
  const int h = norm.front().height();
  double lo = std::numeric_limits<double>::infinity();
  double hi = -lo;
  for (const ImageD& img : norm) {
    for (int i : members) {
      lo = std::min(lo, img[i]);
      hi = std::max(hi, img[i]);
    }
  }
  if (!(hi > lo)) hi = lo + 1e-9;

  std::vector<RegionHistogram> stats(k_count);
  for (int k = 0; k < k_count; ++k) {
    RegionHistogram& s = stats[k];
    s.lo = lo;
    s.width = (hi - lo) / p.bins;
    std::vector<double> hist(p.bins, 0.0);
    double sum = 0.0;
    for (int i : members) {
      hist[s.bin_of(norm[k][i], p.bins)] += 1.0;
      sum += norm[k][i];
    }
    const double n = static_cast<double>(members.size());
    s.mean = sum / n;
    std::vector<double> cdf(p.bins);
    double run = 0.0;
    for (int b = 0; b < p.bins; ++b) {
      run += hist[b] / n;
      cdf[b] = run;
    }
    s.gradient.resize(p.bins);
    for (int b = 0; b < p.bins; ++b) {
      const double below = b > 0 ? cdf[b - 1] : 0.0;
      const double above = b + 1 < p.bins ? cdf[b + 1] : 1.0;
      s.gradient[b] = 0.5 * (above - below);
    }
  }

  std::vector<ImageD> out(k_count, ImageD(w, h));
  std::vector<double> inv(k_count), bell(k_count);
  for (std::size_t i = 0; i < out.front().size(); ++i) {
    double inv_sum = 0.0;
    for (int k = 0; k < k_count; ++k) {
      const double g = stats[k].gradient[stats[k].bin_of(norm[k][i], p.bins)];
      inv[k] = g > 0.0 ? 1.0 / g : 0.0;
      inv_sum += inv[k];
      bell[k] = illumination_bell(norm[k][i], stats[k].mean, p.psi, p.delta);
    }
    double total = 0.0;
    for (int k = 0; k < k_count; ++k) {
      inv[k] = inv[k] / (inv_sum + p.epsilon) * bell[k];
      total += inv[k];
    }
    for (int k = 0; k < k_count; ++k) {
      out[k][i] = total > 1e-300 ? inv[k] / total : 1.0 / k_count;
    }
  }
  return out;
}

}  // namespace

std::vector<ImageD> illumination_weights(const std::vector<ImageD>& illumination,
                                         const LabelImage& labels, const WeightParams& params,
                                         double intensity_scale) {
  params.validate();
  if (illumination.empty()) throw InputError("no illumination layers");
  const int w = illumination.front().width();
  const int h = illumination.front().height();
  if (!labels.empty() && (labels.width() != w || labels.height() != h)) {
    throw DimensionError("region labels do not match exposure size");
  }
  const int k_count = static_cast<int>(illumination.size());
  if (k_count == 1) return {ImageD(w, h, 1.0)};
  if (!(intensity_scale > 0.0)) throw ConfigError("intensity scale must be positive");

  std::vector<ImageD> norm;
  for (const ImageD& l : illumination) {
    ImageD n(w, h);
    for (std::size_t i = 0; i < l.size(); ++i) n[i] = l[i] / intensity_scale;
    norm.push_back(std::move(n));
  }
  std::map<int, std::vector<int>> members;
  const std::size_t n = static_cast<std::size_t>(w) * static_cast<std::size_t>(h);
  for (std::size_t i = 0; i < n; ++i) {
    members[labels.empty() ? 1 : labels[i]].push_back(static_cast<int>(i));
  }

  std::vector<ImageD> out(k_count, ImageD(w, h, 0.0));
  for (const auto& [label, idx] : members) {
    const auto weights = region_weights(norm, idx, params);
    ImageD share(w, h, 0.0);
    for (int i : idx) share[i] = 1.0;
    if (members.size() > 1) share = box_mean(share, params.feather);
    for (int k = 0; k < k_count; ++k) {
      for (std::size_t i = 0; i < n; ++i) out[k][i] += share[i] * weights[k][i];
    }
  }
  // Re-normalise against rounding in the feathered blend.
  for (std::size_t i = 0; i < n; ++i) {
    double total = 0.0;
    for (int k = 0; k < k_count; ++k) total += out[k][i];
    for (int k = 0; k < k_count; ++k) out[k][i] /= total;
  }
  return out;
}

std::vector<ImageD> reflection_weights(const std::vector<ImageD>& reflection) {
  if (reflection.empty()) throw InputError("no reflection layers");
  const int k_count = static_cast<int>(reflection.size());
  const int w = reflection.front().width();
  const int h = reflection.front().height();
  if (k_count == 1) return {ImageD(w, h, 1.0)};
  constexpr double kFloor = 1e-12;
  std::vector<ImageD> out;
  for (const ImageD& r : reflection) {
    if (!r.same_shape(reflection.front())) throw DimensionError("reflection layers differ");
    const ImageD grad = gradient_magnitude(r);
    ImageD c(w, h);
    for (std::size_t i = 0; i < r.size(); ++i) {
      if (!std::isfinite(r[i])) throw NumericError("non-finite reflection layer");
      c[i] = grad[i] / (std::abs(r[i]) + 1.0) + kFloor;
    }
    out.push_back(std::move(c));
  }
  for (std::size_t i = 0; i < out.front().size(); ++i) {
    double total = 0.0;
    for (const ImageD& c : out) total += c[i];
    for (ImageD& c : out) c[i] /= total;
  }
  return out;
}

int max_pyramid_levels(int width, int height) {
  const int m = std::min(width, height);
  return m >= 1 ? static_cast<int>(std::floor(std::log2(static_cast<double>(m)))) : 0;
}

namespace {

constexpr double kBinomial[5] = {1.0 / 16, 4.0 / 16, 6.0 / 16, 4.0 / 16, 1.0 / 16};

}  // namespace

ImageD pyramid_reduce(const ImageD& img) {
  const int w = img.width();
  const int h = img.height();
  const int nw = (w + 1) / 2;
  const int nh = (h + 1) / 2;
  ImageD rows(nw, h);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < nw; ++x) {
      double s = 0.0;
      for (int d = -2; d <= 2; ++d) s += kBinomial[d + 2] * mirrored(img, 2 * x + d, y);
      rows(x, y) = s;
    }
  }
  ImageD out(nw, nh);
  for (int y = 0; y < nh; ++y) {
    for (int x = 0; x < nw; ++x) {
      double s = 0.0;
      for (int d = -2; d <= 2; ++d) s += kBinomial[d + 2] * mirrored(rows, x, 2 * y + d);
      out(x, y) = s;
    }
  }
  return out;
}

namespace {

// Interpolates a coarse line onto `out_n` fine samples (fine i sits at coarse i/2).
double expand_tap(const double* s, std::ptrdiff_t stride, int n, int i) {
  double v = 0.0;
  for (int d = -2; d <= 2; ++d) {
    const int fine = i - d;
    if (fine % 2 != 0) continue;
    v += 2.0 * kBinomial[d + 2] * s[reflect_index(fine / 2, n) * stride];
  }
  return v;
}

}  // namespace

ImageD pyramid_expand(const ImageD& img, int width, int height) {
  ImageD rows(width, img.height());
  for (int y = 0; y < img.height(); ++y) {
    for (int x = 0; x < width; ++x) rows(x, y) = expand_tap(&img(0, y), 1, img.width(), x);
  }
  ImageD out(width, height);
  for (int x = 0; x < width; ++x) {
    for (int y = 0; y < height; ++y) out(x, y) = expand_tap(&rows(x, 0), width, img.height(), y);
  }
  return out;
}

std::vector<ImageD> gaussian_pyramid(const ImageD& img, int levels) {
  if (levels < 1 || levels > std::max(1, max_pyramid_levels(img.width(), img.height()))) {
    throw ConfigError("pyramid levels must lie in [1, floor(log2(min(width, height)))]");
  }
  std::vector<ImageD> pyr{img};
  for (int l = 1; l < levels; ++l) pyr.push_back(pyramid_reduce(pyr.back()));
  return pyr;
}

std::vector<ImageD> laplacian_pyramid(const ImageD& img, int levels) {
  std::vector<ImageD> pyr = gaussian_pyramid(img, levels);
  for (int l = 0; l + 1 < levels; ++l) {
    const ImageD up = pyramid_expand(pyr[l + 1], pyr[l].width(), pyr[l].height());
    for (std::size_t i = 0; i < up.size(); ++i) pyr[l][i] -= up[i];
  }
  return pyr;
}

ImageD collapse_pyramid(const std::vector<ImageD>& laplacian) {
  if (laplacian.empty()) throw InputError("empty pyramid");
  ImageD acc = laplacian.back();
  for (int l = static_cast<int>(laplacian.size()) - 2; l >= 0; --l) {
    ImageD up = pyramid_expand(acc, laplacian[l].width(), laplacian[l].height());
    for (std::size_t i = 0; i < up.size(); ++i) up[i] += laplacian[l][i];
    acc = std::move(up);
  }
  return acc;
}

namespace {

ImageD fuse_family(const std::vector<ImageD>& layers, const std::vector<ImageD>& weights,
                   int levels) {
  std::vector<ImageD> fused;
  for (std::size_t k = 0; k < layers.size(); ++k) {
    const auto lap = laplacian_pyramid(layers[k], levels);
    const auto gw = gaussian_pyramid(weights[k], levels);
    if (fused.empty()) {
      for (const ImageD& level : lap) fused.emplace_back(level.width(), level.height(), 0.0);
    }
    for (int l = 0; l < levels; ++l) {
      for (std::size_t i = 0; i < fused[l].size(); ++i) fused[l][i] += lap[l][i] * gw[l][i];
    }
  }
  return collapse_pyramid(fused);
}

}  // namespace

HdrImage pyramid_fuse(const RetinexLayers& layers, const WeightMaps& weights, int levels) {
  const int k_count = layers.count();
  if (k_count < 1) throw InputError("no layers to fuse");
  if (static_cast<int>(layers.reflection.size()) != k_count ||
      static_cast<int>(weights.illumination.size()) != k_count ||
      static_cast<int>(weights.reflection.size()) != k_count) {
    throw InputError("layer and weight counts differ");
  }
  const int w = layers.illumination.front().width();
  const int h = layers.illumination.front().height();
  if (levels < 1 || levels > std::max(1, max_pyramid_levels(w, h))) {
    throw ConfigError("pyramid levels must lie in [1, floor(log2(min(width, height)))]");
  }
  const ImageD l = fuse_family(layers.illumination, weights.illumination, levels);
  const ImageD r = fuse_family(layers.reflection, weights.reflection, levels);
  HdrImage out;
  out.values = ImageD(w, h);
  for (std::size_t i = 0; i < out.values.size(); ++i) {
    const double v = l[i] * r[i];
    if (!std::isfinite(v)) throw NumericError("non-finite fused pixel");
    out.values[i] = std::max(v, 0.0);
  }
  return out;
}

HdrImage fuse_stack(const ExposureStack& stack, const LabelImage& labels,
                    const FusionOptions& options) {
  const RetinexLayers layers = retinex_decompose(stack, options.retinex);
  WeightMaps weights;
  weights.params = options.weights;
  weights.illumination =
      illumination_weights(layers.illumination, labels, options.weights, layers.intensity_scale);
  weights.reflection = reflection_weights(layers.reflection);
  return pyramid_fuse(layers, weights, options.levels);
}

}  // namespace evsve
