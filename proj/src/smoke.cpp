#include "evsve/smoke.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace evsve {

void SmokeWeights::validate() const {
  for (double w : {brightness, contrast, channel, variance}) {
    if (!(w >= 0.0) || !std::isfinite(w)) throw ConfigError("smoke weights must be non-negative");
  }
  if (std::abs(sum() - 1.0) > 1e-9) throw ConfigError("smoke weights must sum to 1");
}

namespace {

void require_stack(const ExposureStack& stack, int min_count) {
  if (stack.count() < 1) throw InputError("empty exposure stack");
  if (stack.count() < min_count) {
    throw InputError("operation needs at least " + std::to_string(min_count) + " exposures");
  }
}

}  // namespace

ImageD brightness_deviation(const ExposureStack& stack) {
  require_stack(stack, 1);
  const int k_count = stack.count();
  for (double mu : stack.means()) {
    if (!(mu > 0.0)) throw InputError("brightness deviation needs positive exposure means");
  }
  ImageD out(stack.width(), stack.height());
  for (std::size_t i = 0; i < out.size(); ++i) {
    double sum = 0.0;
    for (int k = 0; k < k_count; ++k) {
      const double mu = stack.mean(k);
      const double d = std::max(stack.image(k)[i], 0.5 * mu) - mu;
      sum += d * d;
    }
    out[i] = std::sqrt(sum) / k_count;
  }
  return out;
}

ImageD weber_contrast(const ExposureStack& stack) {
  require_stack(stack, 1);
  ImageD out(stack.width(), stack.height(), 0.0);
  for (const ImageD& img : stack.images()) {
    const ImageD grad = gradient_magnitude(img);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += grad[i] / (img[i] + 1.0);
  }
  for (double& v : out.pixels()) v /= stack.count();
  return out;
}

namespace {

template <typename Pick>
ImageD window_filter(const ImageD& img, int window, Pick pick) {
  const int r = window / 2;
  if (r == 0) return img;
  ImageD tmp(img.width(), img.height());
  for (int y = 0; y < img.height(); ++y) {
    for (int x = 0; x < img.width(); ++x) {
      double v = img(x, y);
      for (int d = -r; d <= r; ++d) v = pick(v, mirrored(img, x + d, y));
      tmp(x, y) = v;
    }
  }
  ImageD out(img.width(), img.height());
  for (int y = 0; y < img.height(); ++y) {
    for (int x = 0; x < img.width(); ++x) {
      double v = tmp(x, y);
      for (int d = -r; d <= r; ++d) v = pick(v, mirrored(tmp, x, y + d));
      out(x, y) = v;
    }
  }
  return out;
}

}  // namespace

DarkBright dark_bright_channels(const ExposureStack& stack, int window) {
  require_stack(stack, 2);
  if (window < 1 || window % 2 == 0) throw ConfigError("channel window must be odd and >= 1");
  ImageD dark = stack.image(0);
  ImageD bright = stack.image(0);
  for (int k = 1; k < stack.count(); ++k) {
    const ImageD& img = stack.image(k);
    for (std::size_t i = 0; i < img.size(); ++i) {
      dark[i] = std::min(dark[i], img[i]);
      bright[i] = std::max(bright[i], img[i]);
    }
  }
  auto lo = [](double a, double b) { return std::min(a, b); };
  auto hi = [](double a, double b) { return std::max(a, b); };
  return {window_filter(dark, window, lo), window_filter(bright, window, hi)};
}

ImageD contrast_feature(const ImageD& dark, const ImageD& bright) {
  if (!dark.same_shape(bright)) throw DimensionError("dark and bright channels differ in size");
  ImageD out(dark.width(), dark.height());
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (dark[i] > bright[i] || dark[i] < 0.0) {
      const int x = static_cast<int>(i % static_cast<std::size_t>(dark.width()));
      const int y = static_cast<int>(i / static_cast<std::size_t>(dark.width()));
      throw InvariantError("dark channel exceeds bright channel at pixel (" +
                           std::to_string(x) + ", " + std::to_string(y) + ")");
    }
    out[i] = 1.0 - dark[i] / std::max(bright[i], 1.0);
  }
  return out;
}

ResponseVariance response_variance(const ExposureStack& stack, double epsilon) {
  require_stack(stack, 2);
  if (!(epsilon > 0.0)) throw ConfigError("epsilon must be positive");
  const int k_count = stack.count();
  ResponseVariance out;
  out.variance = ImageD(stack.width(), stack.height());
  double log_sum = 0.0;
  for (std::size_t i = 0; i < out.variance.size(); ++i) {
    double mean = 0.0;
    for (int k = 0; k < k_count; ++k) mean += stack.image(k)[i];
    mean /= k_count;
    double var = 0.0;
    for (int k = 0; k < k_count; ++k) {
      const double d = stack.image(k)[i] - mean;
      var += d * d;
    }
    var /= k_count;
    out.variance[i] = var;
    log_sum += std::log(var + epsilon);
  }
  const double n = static_cast<double>(out.variance.size());
  out.mean_variance = n > 0 ? std::max(std::exp(log_sum / n) - epsilon, 0.0) : 0.0;
  out.v = ImageD(stack.width(), stack.height());
  for (std::size_t i = 0; i < out.v.size(); ++i) {
    out.v[i] = (out.variance[i] - out.mean_variance) / (out.mean_variance + epsilon);
  }
  return out;
}

FeatureMaps compute_features(const ExposureStack& stack, const SmokeOptions& options) {
  FeatureMaps f;
  f.epsilon = options.epsilon;
  f.bi = brightness_deviation(stack);
  f.wc = weber_contrast(stack);
  auto db = dark_bright_channels(stack, options.window);
  f.cf = contrast_feature(db.dark, db.bright);
  f.dark_channel = std::move(db.dark);
  f.bright_channel = std::move(db.bright);
  auto rv = response_variance(stack, options.epsilon);
  f.v = std::move(rv.v);
  f.mean_variance = rv.mean_variance;
  return f;
}

ImageD normalize_min_max(const ImageD& img) {
  ImageD out(img.width(), img.height(), 0.0);
  if (img.empty()) return out;
  const double lo = image_min(img);
  const double hi = image_max(img);
  const double span = hi - lo;
  if (!(span > 1e-12 * std::max({std::abs(lo), std::abs(hi), 1.0}))) return out;
  for (std::size_t i = 0; i < img.size(); ++i) {
    out[i] = std::clamp((img[i] - lo) / span, 0.0, 1.0);
  }
  return out;
}

ImageD combine_normalized(const ImageD& bi, const ImageD& wc, const ImageD& cf, const ImageD& v,
                          const SmokeWeights& weights) {
  weights.validate();
  if (!bi.same_shape(wc) || !bi.same_shape(cf) || !bi.same_shape(v)) {
    throw DimensionError("feature maps differ in size");
  }
  ImageD out(bi.width(), bi.height());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double f = weights.brightness * bi[i] + weights.contrast * wc[i] +
                     weights.channel * cf[i] + weights.variance * v[i];
    if (!std::isfinite(f)) throw NumericError("non-finite smoke feature");
    out[i] = std::clamp(f, 0.0, 1.0);
  }
  return out;
}

ImageD combine_likelihood(const FeatureMaps& features, const SmokeWeights& weights) {
  return combine_normalized(normalize_min_max(features.bi), normalize_min_max(features.wc),
                            normalize_min_max(features.cf), normalize_min_max(features.v),
                            weights);
}

std::vector<int> multi_otsu(const std::vector<double>& histogram, int classes) {
  const int bins = static_cast<int>(histogram.size());
  if (classes < 1 || bins < classes) throw InputError("histogram too small for class count");
  // Prefix sums of counts and first moments over bin centres.
  std::vector<double> w(bins + 1, 0.0);
  std::vector<double> s(bins + 1, 0.0);
  for (int b = 0; b < bins; ++b) {
    w[b + 1] = w[b] + histogram[b];
    s[b + 1] = s[b] + histogram[b] * (b + 0.5);
  }
  auto score = [&](int lo, int hi) {  // bins [lo, hi)
    const double ww = w[hi] - w[lo];
    if (ww <= 0.0) return 0.0;
    const double ss = s[hi] - s[lo];
    return ss * ss / ww;
  };
  const double neg = -std::numeric_limits<double>::infinity();
  // best[c][j]: best score splitting bins [0, j) into c+1 classes.
  std::vector<std::vector<double>> best(classes, std::vector<double>(bins + 1, neg));
  std::vector<std::vector<int>> arg(classes, std::vector<int>(bins + 1, 0));
  for (int j = 1; j <= bins; ++j) best[0][j] = score(0, j);
  for (int c = 1; c < classes; ++c) {
    for (int j = c + 1; j <= bins; ++j) {
      for (int i = c; i < j; ++i) {
        const double v = best[c - 1][i] + score(i, j);
        if (v > best[c][j]) {
          best[c][j] = v;
          arg[c][j] = i;
        }
      }
    }
  }
  std::vector<int> cuts(classes - 1);
  int j = bins;
  for (int c = classes - 1; c >= 1; --c) {
    j = arg[c][j];
    cuts[c - 1] = j;
  }
  return cuts;
}

namespace {

constexpr int kHistogramBins = 256;
constexpr int kMaxIterations = 100;
constexpr double kLogLikelihoodTolerance = 1e-6;
constexpr double kVarianceFloor = 1.0 / (12.0 * kHistogramBins * kHistogramBins);

struct Component {
  double weight;
  double mean;
  double variance;
};

double log_gauss(double x, const Component& c) {
  const double d = x - c.mean;
  return std::log(c.weight) - 0.5 * std::log(2.0 * M_PI * c.variance) - 0.5 * d * d / c.variance;
}

std::vector<Component> initial_components(const std::vector<double>& hist, int classes) {
  const auto cuts = multi_otsu(hist, classes);
  std::vector<int> edges{0};
  edges.insert(edges.end(), cuts.begin(), cuts.end());
  edges.push_back(static_cast<int>(hist.size()));
  const double total = std::accumulate(hist.begin(), hist.end(), 0.0);
  std::vector<Component> comps;
  for (std::size_t c = 0; c + 1 < edges.size(); ++c) {
    double n = 0.0, m = 0.0;
    for (int b = edges[c]; b < edges[c + 1]; ++b) {
      n += hist[b];
      m += hist[b] * (b + 0.5) / kHistogramBins;
    }
    if (n <= 0.0) continue;
    m /= n;
    double var = 0.0;
    for (int b = edges[c]; b < edges[c + 1]; ++b) {
      const double d = (b + 0.5) / kHistogramBins - m;
      var += hist[b] * d * d;
    }
    comps.push_back({n / total, m, std::max(var / n, kVarianceFloor)});
  }
  return comps;
}

// Merges components whose means coincide within a histogram bin.
std::vector<Component> merge_duplicates(std::vector<Component> comps) {
  std::sort(comps.begin(), comps.end(),
            [](const Component& a, const Component& b) { return a.mean < b.mean; });
  std::vector<Component> out;
  for (const Component& c : comps) {
    if (c.weight < 1e-12) continue;
    if (!out.empty() && std::abs(c.mean - out.back().mean) < 1.0 / kHistogramBins &&
        std::abs(std::sqrt(c.variance) - std::sqrt(out.back().variance)) < 1.0 / kHistogramBins) {
      Component& m = out.back();
      const double w = m.weight + c.weight;
      const double mean = (m.weight * m.mean + c.weight * c.mean) / w;
      m.variance = (m.weight * (m.variance + (m.mean - mean) * (m.mean - mean)) +
                    c.weight * (c.variance + (c.mean - mean) * (c.mean - mean))) / w;
      m.mean = mean;
      m.weight = w;
      continue;
    }
    out.push_back(c);
  }
  return out;
}

}  // namespace

Segmentation segment_regions(const ImageD& f, int regions) {
  if (regions < 2) throw ConfigError("region count must be at least 2");
  if (f.empty()) throw InputError("empty smoke-likelihood map");
  for (double v : f.pixels()) {
    if (!(v >= 0.0 && v <= 1.0)) throw InputError("smoke likelihood must lie in [0, 1]");
  }
  std::vector<double> hist(kHistogramBins, 0.0);
  for (double v : f.pixels()) {
    hist[std::min(static_cast<int>(v * kHistogramBins), kHistogramBins - 1)] += 1.0;
  }

  Segmentation seg;
  std::vector<Component> comps = initial_components(hist, regions);

  const std::size_t n = f.size();
  const auto px = f.pixels();

  // EM runs on a fine value histogram that keeps each bin's exact first and
  // second moments; bins narrower than the variance floor make this lossless
  // for the fitted parameters up to responsibilities shared within a bin.
  constexpr int kFineBins = 4096;
  std::vector<double> bin_n(kFineBins, 0.0), bin_s(kFineBins, 0.0), bin_q(kFineBins, 0.0);
  for (double v : px) {
    const int b = std::min(static_cast<int>(v * kFineBins), kFineBins - 1);
    bin_n[b] += 1.0;
    bin_s[b] += v;
    bin_q[b] += v * v;
  }
  std::vector<int> used;
  for (int b = 0; b < kFineBins; ++b) {
    if (bin_n[b] > 0.0) used.push_back(b);
  }
  const double total = static_cast<double>(n);
  std::vector<double> resp;
  double previous = -std::numeric_limits<double>::infinity();
  for (int iter = 0; iter < kMaxIterations && comps.size() > 1; ++iter) {
    const std::size_t c_count = comps.size();
    resp.assign(used.size() * c_count, 0.0);
    double log_likelihood = 0.0;
    std::vector<double> lg(c_count);
    for (std::size_t u = 0; u < used.size(); ++u) {
      const int b = used[u];
      const double x = bin_s[b] / bin_n[b];
      double top = -std::numeric_limits<double>::infinity();
      for (std::size_t c = 0; c < c_count; ++c) {
        lg[c] = log_gauss(x, comps[c]);
        top = std::max(top, lg[c]);
      }
      double sum = 0.0;
      for (std::size_t c = 0; c < c_count; ++c) sum += std::exp(lg[c] - top);
      log_likelihood += bin_n[b] * (top + std::log(sum));
      for (std::size_t c = 0; c < c_count; ++c) resp[u * c_count + c] = std::exp(lg[c] - top) / sum;
    }
    log_likelihood /= total;
    for (std::size_t c = 0; c < c_count; ++c) {
      double nk = 0.0, s1 = 0.0, s2 = 0.0;
      for (std::size_t u = 0; u < used.size(); ++u) {
        const double r = resp[u * c_count + c];
        nk += r * bin_n[used[u]];
        s1 += r * bin_s[used[u]];
        s2 += r * bin_q[used[u]];
      }
      if (nk <= 0.0) {
        comps[c].weight = 0.0;
        continue;
      }
      const double m = s1 / nk;
      const double var = std::max(s2 / nk - m * m, 0.0);
      comps[c] = {nk / total, m, std::max(var, kVarianceFloor)};
    }
    comps = merge_duplicates(std::move(comps));
    if (std::abs(log_likelihood - previous) < kLogLikelihoodTolerance) break;
    previous = log_likelihood;
  }
  comps = merge_duplicates(std::move(comps));
  if (static_cast<int>(comps.size()) < regions) {
    seg.warnings.push_back("smoke map supports only " + std::to_string(comps.size()) +
                           " distinct regions of the " + std::to_string(regions) + " requested");
  }

  // Maximum posterior between neighbours in mean. A broad component can win
  // both tails of a narrow one; cutting at the crossings keeps every region
  // an interval of F so that the thresholds stay ordered.
  std::sort(comps.begin(), comps.end(), [](const Component& x, const Component& y) { return x.mean < y.mean; });
  std::vector<double> cuts;
  for (std::size_t c = 0; c + 1 < comps.size(); ++c) {
    auto diff = [&](double x) { return log_gauss(x, comps[c]) - log_gauss(x, comps[c + 1]); };
    double lo = comps[c].mean, hi = comps[c + 1].mean;
    double cut;
    if (diff(lo) <= 0.0) {
      cut = lo;
    } else if (diff(hi) >= 0.0) {
      cut = hi;
    } else {
      for (int it = 0; it < 60; ++it) {
        const double mid = 0.5 * (lo + hi);
        (diff(mid) > 0.0 ? lo : hi) = mid;
      }
      cut = 0.5 * (lo + hi);
    }
    if (!cuts.empty()) cut = std::max(cut, cuts.back());
    cuts.push_back(cut);
  }
  std::vector<int> raw(n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    raw[i] = static_cast<int>(std::lower_bound(cuts.begin(), cuts.end(), px[i]) - cuts.begin());
  }

  // Drop components that own no pixels.
  const std::size_t c_count = comps.size();
  std::vector<std::size_t> count(c_count, 0);
  for (std::size_t i = 0; i < n; ++i) count[raw[i]]++;
  std::vector<int> label_of(c_count, 0);
  std::vector<int> kept;
  for (std::size_t c = 0; c < c_count; ++c) {
    if (count[c] == 0) continue;
    kept.push_back(static_cast<int>(c));
    label_of[c] = static_cast<int>(kept.size());
  }
  seg.regions = static_cast<int>(kept.size());
  seg.labels = LabelImage(f.width(), f.height());
  seg.stats.assign(kept.size(), RegionStats{});
  for (std::size_t i = 0; i < n; ++i) {
    const int label = label_of[raw[i]];
    seg.labels[i] = label;
    seg.stats[label - 1].pixels++;
    seg.stats[label - 1].mean += px[i];
  }
  for (RegionStats& st : seg.stats) st.mean /= static_cast<double>(st.pixels);
  for (std::size_t i = 0; i < n; ++i) {
    RegionStats& st = seg.stats[seg.labels[i] - 1];
    const double d = px[i] - st.mean;
    st.variance += d * d;
  }
  for (RegionStats& st : seg.stats) st.variance /= static_cast<double>(st.pixels);
  // Threshold between consecutive kept regions: the last cut separating them.
  for (std::size_t r = 0; r + 1 < kept.size(); ++r) {
    seg.thresholds.push_back(cuts[static_cast<std::size_t>(kept[r + 1]) - 1]);
  }
  return seg;
}

SmokeMap build_smoke_map(const ExposureStack& stack, const SmokeOptions& options) {
  options.weights.validate();
  SmokeMap map;
  map.weights = options.weights;
  const FeatureMaps features = compute_features(stack, options);
  map.f = combine_likelihood(features, options.weights);
  Segmentation seg = segment_regions(map.f, options.regions);
  map.labels = std::move(seg.labels);
  map.regions = seg.regions;
  map.region_stats = std::move(seg.stats);
  map.thresholds = std::move(seg.thresholds);
  map.warnings = std::move(seg.warnings);
  return map;
}

}  // namespace evsve
