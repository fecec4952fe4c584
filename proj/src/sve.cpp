#include "evsve/sve.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <string>

namespace evsve {

int MacroPixelLayout::position_of(int exposure) const {
  for (int p = 0; p < 4; ++p) {
    if (exposure_at_position[p] == exposure) return p;
  }
  throw ConfigError("exposure " + std::to_string(exposure) + " missing from macro-pixel layout");
}

void MacroPixelLayout::validate() const {
  std::set<int> seen(exposure_at_position.begin(), exposure_at_position.end());
  if (seen.size() != 4 || *seen.begin() != 0 || *seen.rbegin() != 3) {
    throw ConfigError("macro-pixel layout must be a permutation of 0..3");
  }
}

double RawSveMosaic::full_scale() const noexcept {
  return std::ldexp(1.0, bit_depth) - 1.0;
}

void RawSveMosaic::validate() const {
  if (width() <= 0 || height() <= 0 || width() % 2 != 0 || height() % 2 != 0) {
    throw DimensionError("SVE mosaic must have positive even width and height, got " +
                         std::to_string(width()) + "x" + std::to_string(height()));
  }
  if (bit_depth < 1 || bit_depth > 32) throw InputError("bit depth out of range");
  const double top = full_scale();
  for (double v : values.pixels()) {
    if (!(v >= 0.0 && v <= top)) {
      throw InputError("mosaic value " + std::to_string(v) + " outside [0, 2^bit_depth - 1]");
    }
  }
  std::set<double> distinct;
  for (double tau : transmittances) {
    if (!(tau > 0.0 && tau <= 1.0)) throw InputError("transmittance must lie in (0, 1]");
    distinct.insert(tau);
  }
  if (distinct.size() != 4) throw InputError("the four transmittances must be distinct");
}

ExposureStack::ExposureStack(std::vector<ImageD> images, std::vector<double> transmittances,
                             double full_scale, std::vector<MaskImage> saturated)
    : images_(std::move(images)),
      transmittances_(std::move(transmittances)),
      saturated_(std::move(saturated)),
      full_scale_(full_scale) {
  if (images_.size() != transmittances_.size()) {
    throw InputError("exposure count does not match transmittance count");
  }
  if (!saturated_.empty() && saturated_.size() != images_.size()) {
    throw InputError("saturation masks do not match exposure count");
  }
  for (std::size_t k = 0; k < images_.size(); ++k) {
    if (!images_[k].same_shape(images_.front())) {
      throw DimensionError("exposures in a stack must share dimensions");
    }
    if (!saturated_.empty() && !saturated_[k].same_shape(images_[k])) {
      throw DimensionError("saturation mask does not match exposure size");
    }
    means_.push_back(image_mean(images_[k]));
  }
}

std::array<SubImage, 4> demultiplex(const RawSveMosaic& mosaic, const MacroPixelLayout& layout) {
  mosaic.validate();
  layout.validate();
  const int half_w = mosaic.width() / 2;
  const int half_h = mosaic.height() / 2;
  std::array<SubImage, 4> subs;
  for (int k = 0; k < 4; ++k) {
    const int pos = layout.position_of(k);
    SubImage& sub = subs[k];
    sub.offset_y = pos / 2;
    sub.offset_x = pos % 2;
    sub.transmittance = mosaic.transmittances[k];
    sub.image = ImageD(half_w, half_h);
    for (int j = 0; j < half_h; ++j) {
      for (int i = 0; i < half_w; ++i) {
        sub.image(i, j) = mosaic.values(2 * i + sub.offset_x, 2 * j + sub.offset_y);
      }
    }
  }
  return subs;
}

namespace {

// Sample i of a line extended by odd reflection about its end samples.
double extended(const double* s, std::ptrdiff_t stride, int n, int i) {
  if (i >= 0 && i < n) return s[i * stride];
  if (n == 1) return s[0];
  if (i < 0) return 2.0 * s[0] - s[std::min(-i, n - 1) * stride];
  return 2.0 * s[(n - 1) * stride] - s[std::max(2 * (n - 1) - i, 0) * stride];
}

// Resamples n samples at full-res positions offset + 2j onto `out_n` pixels.
void upsample_line(const double* s, std::ptrdiff_t stride, int n, int offset, double* out,
                   std::ptrdiff_t out_stride, int out_n) {
  for (int x = 0; x < out_n; ++x) {
    const int rel = x - offset;
    double value;
    if (rel % 2 == 0) {
      value = extended(s, stride, n, rel / 2);
    } else {
      const int j = (rel - 1) / 2;  // exact: rel - 1 is even
      const double a = extended(s, stride, n, j - 1);
      const double b = extended(s, stride, n, j);
      const double c = extended(s, stride, n, j + 1);
      const double d = extended(s, stride, n, j + 2);
      // Bilinear midpoint minus 1/16 of the summed second differences at b and c.
      value = 0.5 * (b + c) - (a - b - c + d) / 16.0;
    }
    out[x * out_stride] = value;
  }
}

}  // namespace

ImageD interpolate_subimage(const SubImage& sub, int target_width, int target_height) {
  const int sw = sub.image.width();
  const int sh = sub.image.height();
  if (sw <= 0 || sh <= 0 || target_width != 2 * sw || target_height != 2 * sh) {
    throw DimensionError("target must be exactly twice the sub-image size");
  }
  if (sub.offset_x < 0 || sub.offset_x > 1 || sub.offset_y < 0 || sub.offset_y > 1) {
    throw DimensionError("sub-image offset must lie inside the macro-pixel");
  }
  ImageD rows(target_width, sh);
  for (int j = 0; j < sh; ++j) {
    upsample_line(&sub.image(0, j), 1, sw, sub.offset_x, &rows(0, j), 1, target_width);
  }
  ImageD out(target_width, target_height);
  for (int x = 0; x < target_width; ++x) {
    upsample_line(&rows(x, 0), target_width, sh, sub.offset_y, &out(x, 0), target_width,
                  target_height);
  }
  for (double& v : out.pixels()) v = std::max(v, 0.0);
  return out;
}

MaskImage saturation_mask(const ImageD& img, double full_scale, double fraction) {
  MaskImage mask(img.width(), img.height(), 0);
  const double level = fraction * full_scale;
  for (std::size_t i = 0; i < img.size(); ++i) mask[i] = img[i] >= level ? 1 : 0;
  return mask;
}

ExposureStack reconstruct_stack(const RawSveMosaic& mosaic, const SveOptions& options) {
  const auto subs = demultiplex(mosaic, options.layout);
  std::vector<ImageD> images;
  std::vector<double> taus;
  std::vector<MaskImage> masks;
  double full_scale = mosaic.full_scale();
  for (const SubImage& sub : subs) {
    ImageD full = interpolate_subimage(sub, mosaic.width(), mosaic.height());
    masks.push_back(saturation_mask(full, mosaic.full_scale(), options.saturation_fraction));
    if (options.radiometric_rescale) {
      for (double& v : full.pixels()) v /= sub.transmittance;
    }
    images.push_back(std::move(full));
    taus.push_back(sub.transmittance);
  }
  if (options.radiometric_rescale) {
    full_scale /= *std::min_element(taus.begin(), taus.end());
  }
  return ExposureStack(std::move(images), std::move(taus), full_scale, std::move(masks));
}

}  // namespace evsve
