#pragma once

#include <array>
#include <vector>

#include "evsve/image.hpp"

namespace evsve {

// Which exposure each 2x2 macro-pixel position carries. Position index is
// 2*row + col inside the macro-pixel; the value is the exposure index k.
struct MacroPixelLayout {
  std::array<int, 4> exposure_at_position{0, 1, 2, 3};

  int position_of(int exposure) const;
  void validate() const;
};

// Single-shot quad-exposure mosaic as read off the sensor.
struct RawSveMosaic {
  ImageD values;                        // raw counts
  std::array<double, 4> transmittances{};  // tau_k, indexed by exposure
  int bit_depth = 16;

  int width() const noexcept { return values.width(); }
  int height() const noexcept { return values.height(); }
  double full_scale() const noexcept;
  void validate() const;
};

// One quarter-resolution exposure and where its samples sit in the mosaic.
struct SubImage {
  ImageD image;
  double transmittance = 1.0;
  int offset_x = 0;
  int offset_y = 0;
};

class ExposureStack {
 public:
  ExposureStack() = default;
  ExposureStack(std::vector<ImageD> images, std::vector<double> transmittances,
                double full_scale = 0.0, std::vector<MaskImage> saturated = {});

  int count() const noexcept { return static_cast<int>(images_.size()); }
  int width() const noexcept { return images_.empty() ? 0 : images_.front().width(); }
  int height() const noexcept { return images_.empty() ? 0 : images_.front().height(); }

  const ImageD& image(int k) const { return images_.at(k); }
  const std::vector<ImageD>& images() const noexcept { return images_; }
  double transmittance(int k) const { return transmittances_.at(k); }
  const std::vector<double>& transmittances() const noexcept { return transmittances_; }
  double mean(int k) const { return means_.at(k); }
  const std::vector<double>& means() const noexcept { return means_; }
  // Largest representable value; 0 when unknown.
  double full_scale() const noexcept { return full_scale_; }
  // Per-exposure saturation flags; empty when not tracked.
  const std::vector<MaskImage>& saturated() const noexcept { return saturated_; }

 private:
  std::vector<ImageD> images_;
  std::vector<double> transmittances_;
  std::vector<double> means_;
  std::vector<MaskImage> saturated_;
  double full_scale_ = 0.0;
};

struct SveOptions {
  MacroPixelLayout layout;
  // Divide each reconstructed exposure by its transmittance.
  bool radiometric_rescale = false;
  double saturation_fraction = 0.98;
};

std::array<SubImage, 4> demultiplex(const RawSveMosaic& mosaic,
                                    const MacroPixelLayout& layout = {});

// Upsamples a quarter-resolution sub-image back onto the full mosaic grid.
// Samples are reproduced exactly at their native sites; in between, a
// separable bilinear estimate is corrected by the local second difference of
// the sub-image (a gradient-corrected 4-tap kernel, -1/16 9/16 9/16 -1/16).
// Borders use odd reflection so linear trends continue across the edge.
ImageD interpolate_subimage(const SubImage& sub, int target_width, int target_height);

ExposureStack reconstruct_stack(const RawSveMosaic& mosaic, const SveOptions& options = {});

MaskImage saturation_mask(const ImageD& img, double full_scale, double fraction = 0.98);

}  // namespace evsve
