#pragma once

#include <array>
#include <string>
#include <vector>

#include "evsve/image.hpp"
#include "evsve/sve.hpp"

namespace evsve {

// Weights of the four smoke features; must sum to one.
struct SmokeWeights {
  double brightness = 0.1;  // alpha, BI
  double contrast = 0.4;    // beta, WC
  double channel = 0.2;     // gamma, CF
  double variance = 0.3;    // sigma, V

  double sum() const noexcept { return brightness + contrast + channel + variance; }
  void validate() const;
};

struct FeatureMaps {
  ImageD bi;
  ImageD wc;
  ImageD cf;
  ImageD v;
  ImageD dark_channel;
  ImageD bright_channel;
  double mean_variance = 0.0;  // geometric-mean variance over the frame
  double epsilon = 1e-6;
};

struct RegionStats {
  double mean = 0.0;
  double variance = 0.0;
  std::size_t pixels = 0;
};

struct SmokeMap {
  ImageD f;                    // combined likelihood in [0, 1]
  SmokeWeights weights;
  LabelImage labels;           // 1..regions, ordered by ascending mean f
  int regions = 0;             // effective region count (<= requested M)
  std::vector<RegionStats> region_stats;
  std::vector<double> thresholds;  // F values separating consecutive labels
  std::vector<std::string> warnings;
};

struct SmokeOptions {
  SmokeWeights weights;
  int regions = 4;
  int window = 1;  // dark/bright channel window (odd)
  double epsilon = 1e-6;
};

ImageD brightness_deviation(const ExposureStack& stack);
ImageD weber_contrast(const ExposureStack& stack);

struct DarkBright {
  ImageD dark;
  ImageD bright;
};
DarkBright dark_bright_channels(const ExposureStack& stack, int window = 1);

ImageD contrast_feature(const ImageD& dark, const ImageD& bright);

struct ResponseVariance {
  ImageD v;
  ImageD variance;  // across-exposure population variance
  double mean_variance = 0.0;
};
ResponseVariance response_variance(const ExposureStack& stack, double epsilon = 1e-6);

FeatureMaps compute_features(const ExposureStack& stack, const SmokeOptions& options = {});

// Rescales to [0, 1]; a constant map becomes all zeros.
ImageD normalize_min_max(const ImageD& img);

// Weighted sum of already-normalized feature maps.
ImageD combine_normalized(const ImageD& bi, const ImageD& wc, const ImageD& cf, const ImageD& v,
                          const SmokeWeights& weights);

ImageD combine_likelihood(const FeatureMaps& features, const SmokeWeights& weights);

struct Segmentation {
  LabelImage labels;
  int regions = 0;
  std::vector<RegionStats> stats;
  std::vector<double> thresholds;
  std::vector<std::string> warnings;
};

// Multi-level histogram thresholds seed a 1-D Gaussian mixture that EM refines.
Segmentation segment_regions(const ImageD& f, int regions);

SmokeMap build_smoke_map(const ExposureStack& stack, const SmokeOptions& options = {});

// Multi-level Otsu on a histogram: returns `classes - 1` bin boundaries.
std::vector<int> multi_otsu(const std::vector<double>& histogram, int classes);

}  // namespace evsve
