#pragma once

#include <string>
#include <vector>

#include "evsve/image.hpp"
#include "evsve/sve.hpp"

namespace evsve {

// Illumination/reflection split of every exposure, I = L * R.
struct RetinexLayers {
  std::vector<ImageD> illumination;  // strictly positive
  std::vector<ImageD> reflection;    // I / (L + epsilon)
  double epsilon = 1e-6;
  double intensity_scale = 1.0;      // maps raw intensities to [0, 1]

  int count() const noexcept { return static_cast<int>(illumination.size()); }
};

struct RetinexOptions {
  int radius = 0;  // 0 selects max(width, height) / 32
  double regularization = 1e-3;
  double epsilon = 1e-6;
};

struct WeightParams {
  double psi = 1.0;     // W_L2 normaliser; 1 puts its peak at 1
  double delta = 0.2;   // W_L2 decay in normalised intensity
  double epsilon = 1e-6;
  int feather = 3;      // region boundary blend radius, pixels
  int bins = 256;

  void validate() const;
};

struct WeightMaps {
  std::vector<ImageD> illumination;
  std::vector<ImageD> reflection;
  WeightParams params;
};

struct HdrImage {
  ImageD values;
  std::string provenance;
};

struct FusionOptions {
  RetinexOptions retinex;
  WeightParams weights;
  int levels = 5;
};

// Self-guided edge-preserving smoothing.
ImageD guided_filter(const ImageD& img, int radius, double regularization);

RetinexLayers retinex_decompose(const ExposureStack& stack, const RetinexOptions& options = {});

// Gaussian bell around a regional mean, peak 1/psi.
double illumination_bell(double value, double regional_mean, double psi, double delta);

// Illumination weights from per-region cumulative-histogram gradients and
// regional means; normalised across exposures. Empty labels mean one region.
std::vector<ImageD> illumination_weights(const std::vector<ImageD>& illumination,
                                         const LabelImage& labels, const WeightParams& params,
                                         double intensity_scale);

std::vector<ImageD> reflection_weights(const std::vector<ImageD>& reflection);

int max_pyramid_levels(int width, int height);
std::vector<ImageD> gaussian_pyramid(const ImageD& img, int levels);
std::vector<ImageD> laplacian_pyramid(const ImageD& img, int levels);
ImageD collapse_pyramid(const std::vector<ImageD>& laplacian);
ImageD pyramid_reduce(const ImageD& img);
ImageD pyramid_expand(const ImageD& img, int width, int height);

HdrImage pyramid_fuse(const RetinexLayers& layers, const WeightMaps& weights, int levels);

HdrImage fuse_stack(const ExposureStack& stack, const LabelImage& labels,
                    const FusionOptions& options = {});

}  // namespace evsve
