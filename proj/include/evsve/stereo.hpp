#pragma once

#include <array>
#include <span>
#include <vector>

#include <Eigen/Core>

#include "evsve/geometry2d.hpp"

namespace evsve {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

// Pinhole camera with radial-tangential distortion (k1, k2, p1, p2, k3).
// Extrinsics map world to camera: X_c = R X_w + t, lengths in mm.
struct CameraModel {
  double focal = 1.0;  // px, square pixels
  Vec2 principal = Vec2::Zero();
  std::array<double, 5> distortion{};
  Mat3 rotation = Mat3::Identity();
  Vec3 translation = Vec3::Zero();
  double pixel_pitch = 0.00486;  // mm/px
  int width = 0;
  int height = 0;

  void validate() const;
  Vec3 to_camera(const Vec3& world) const { return rotation * world + translation; }
  Vec3 center() const { return -rotation.transpose() * translation; }
  // Largest undistorted normalized radius on which the distortion map is monotone.
  double valid_radius() const;
};

Mat3 rotation_from_euler_xyz(double rx, double ry, double rz);

Vec2 distort_normalized(const CameraModel& cam, const Vec2& xn);
Vec2 project(const CameraModel& cam, const Vec3& world);
// Normalized ray (x, y, 1) in the camera frame for a distorted pixel.
Vec3 undistort(const CameraModel& cam, const Vec2& pixel);
// Undistorted pixel position (same camera, distortion removed).
Vec2 undistort_pixel(const CameraModel& cam, const Vec2& pixel);

struct StereoRig {
  CameraModel left;   // world frame: identity extrinsics
  CameraModel right;

  void validate() const;
  double baseline() const { return right.center().norm(); }
};

// Calibrated rig of the reference setup (both event cameras).
StereoRig reference_rig();

struct Triangulation {
  Vec3 point = Vec3::Zero();        // world (left camera) frame, mm
  double reprojection_error = 0.0;  // RMS pixel residual over both views
  double initial_reprojection_error = 0.0;  // same, at the linear estimate
};

Triangulation triangulate(const StereoRig& rig, const Vec2& left_px, const Vec2& right_px);

// Mean of the two point-to-epipolar-line distances, in pixels.
double epipolar_distance(const StereoRig& rig, const Vec2& left_px, const Vec2& right_px);

struct StereoCandidate {
  Vec2 centroid = Vec2::Zero();
  double t_us = 0.0;
};

struct MatchParams {
  double max_epipolar_px = 3.0;
  double max_dt_us = 12.0;
};

struct StereoMatch {
  int left = -1;
  int right = -1;
  double epipolar_px = 0.0;
  double dt_us = 0.0;
};

struct MatchResult {
  std::vector<StereoMatch> matches;
  std::vector<int> unmatched_left;
  std::vector<int> unmatched_right;
};

// One-to-one greedy assignment by epipolar distance, ties broken on |dt|.
MatchResult epipolar_match(std::span<const StereoCandidate> left,
                           std::span<const StereoCandidate> right, const StereoRig& rig,
                           const MatchParams& params = {});

struct ColumnAxis {
  Vec3 p1 = Vec3::Zero();
  Vec3 p2 = Vec3::UnitY();

  void validate() const;
  Vec3 direction() const;
};

double separation_height(const ColumnAxis& axis, const Vec3& point);

// sqrt(f^2 + |p - p0|^2), pixels.
double object_distance(const CameraModel& cam, const Vec2& image_point);

enum class ScaleMode {
  kConsistent,  // D / d, mm per pixel
  kLiteral,     // D * mu / d, as written
};

double scale_factor(const CameraModel& cam, double range_mm, double distance_px,
                    ScaleMode mode = ScaleMode::kConsistent);

struct EquivalentSize {
  double area = 0.0;      // mm^2
  double radius = 0.0;    // r_e, mm
  double diameter = 0.0;  // d_e, mm
};

EquivalentSize equivalent_radius(double pixel_area, double scale);

struct ParticleMeasurement {
  double t_us = 0.0;
  Vec3 centroid = Vec3::Zero();
  double dh = 0.0;
  double range = 0.0;  // D, left camera, mm
  double scale = 0.0;  // S_f, left camera, mm/px
  double area = 0.0;   // S, mm^2 (headline)
  double re = 0.0;     // headline r_e: geometric mean of the two views
  double de = 0.0;
  double re_left = 0.0;
  double re_right = 0.0;
  double reprojection_error = 0.0;
};

struct ViewSize {
  double range = 0.0;
  double distance = 0.0;
  double scale = 0.0;
  EquivalentSize size;
};

ViewSize view_size(const CameraModel& cam, const Vec3& world, const Vec2& centroid_px,
                   double pixel_area, ScaleMode mode = ScaleMode::kConsistent);

ParticleMeasurement measure_particle(const StereoRig& rig, const ColumnAxis& axis,
                                     const Vec2& left_px, const Vec2& right_px,
                                     double left_area_px, double right_area_px, double t_us,
                                     ScaleMode mode = ScaleMode::kConsistent);

struct SizeHistogram {
  double origin = 0.0;
  double bin_width = 0.1;
  std::vector<int> counts;
  std::vector<double> modes;  // bin-centre radii of prominent peaks

  double bin_center(std::size_t i) const { return origin + (static_cast<double>(i) + 0.5) * bin_width; }
};

SizeHistogram size_histogram(std::span<const double> radii, double bin_width,
                             double min_prominence_fraction = 0.2);

}  // namespace evsve
