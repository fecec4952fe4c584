#include "evsve/stereo.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include <Eigen/Dense>

#include "evsve/errors.hpp"

namespace evsve {

void CameraModel::validate() const {
  if (!(focal > 0.0)) throw InvariantError("camera focal length must be positive");
  if (!(pixel_pitch > 0.0)) throw InvariantError("camera pixel pitch must be positive");
  const Mat3 should_be_identity = rotation.transpose() * rotation;
  if ((should_be_identity - Mat3::Identity()).cwiseAbs().maxCoeff() > 1e-9 ||
      std::abs(rotation.determinant() - 1.0) > 1e-9) {
    throw InvariantError("camera rotation is not a proper orthonormal matrix");
  }
}

double CameraModel::valid_radius() const {
  const auto& k = distortion;
  // d/dr of r * (1 + k1 r^2 + k2 r^4 + k3 r^6) along a ray.
  auto slope = [&](double r) {
    const double r2 = r * r;
    return 1.0 + 3.0 * k[0] * r2 + 5.0 * k[1] * r2 * r2 + 7.0 * k[4] * r2 * r2 * r2;
  };
  constexpr double kCap = 1.5;
  constexpr double kFloor = 0.05;
  constexpr double kStep = 0.01;
  for (double r = kStep; r <= kCap; r += kStep) {
    if (slope(r) > kFloor) continue;
    double lo = r - kStep, hi = r;
    for (int i = 0; i < 40; ++i) {
      const double mid = 0.5 * (lo + hi);
      (slope(mid) > kFloor ? lo : hi) = mid;
    }
    return 0.95 * lo;
  }
  return kCap;
}

Mat3 rotation_from_euler_xyz(double rx, double ry, double rz) {
  const Eigen::AngleAxisd ax(rx, Vec3::UnitX());
  const Eigen::AngleAxisd ay(ry, Vec3::UnitY());
  const Eigen::AngleAxisd az(rz, Vec3::UnitZ());
  return (ax * ay * az).toRotationMatrix();
}

Vec2 distort_normalized(const CameraModel& cam, const Vec2& xn) {
  const auto& [k1, k2, p1, p2, k3] = cam.distortion;
  const double x = xn.x();
  const double y = xn.y();
  const double r2 = x * x + y * y;
  const double radial = 1.0 + r2 * (k1 + r2 * (k2 + r2 * k3));
  return {x * radial + 2.0 * p1 * x * y + p2 * (r2 + 2.0 * x * x),
          y * radial + p1 * (r2 + 2.0 * y * y) + 2.0 * p2 * x * y};
}

namespace {

Eigen::Matrix2d distortion_jacobian(const CameraModel& cam, const Vec2& xn) {
  const auto& [k1, k2, p1, p2, k3] = cam.distortion;
  const double x = xn.x();
  const double y = xn.y();
  const double r2 = x * x + y * y;
  const double radial = 1.0 + r2 * (k1 + r2 * (k2 + r2 * k3));
  const double dradial = k1 + r2 * (2.0 * k2 + 3.0 * k3 * r2);  // d radial / d r2
  Eigen::Matrix2d j;
  j(0, 0) = radial + 2.0 * x * x * dradial + 2.0 * p1 * y + 6.0 * p2 * x;
  j(0, 1) = 2.0 * x * y * dradial + 2.0 * p1 * x + 2.0 * p2 * y;
  j(1, 0) = 2.0 * x * y * dradial + 2.0 * p1 * x + 2.0 * p2 * y;
  j(1, 1) = radial + 2.0 * y * y * dradial + 6.0 * p1 * y + 2.0 * p2 * x;
  return j;
}

}  // namespace

Vec2 project(const CameraModel& cam, const Vec3& world) {
  const Vec3 pc = cam.to_camera(world);
  if (!(pc.z() > 0.0)) throw ProjectionError("point is not in front of the camera");
  const Vec2 d = distort_normalized(cam, pc.head<2>() / pc.z());
  return cam.focal * d + cam.principal;
}

Vec3 undistort(const CameraModel& cam, const Vec2& pixel) {
  const Vec2 target = (pixel - cam.principal) / cam.focal;
  const double limit = cam.valid_radius();
  const double limit_distorted = distort_normalized(cam, Vec2(limit, 0.0)).norm();
  if (target.norm() > limit_distorted) {
    throw NumericError("pixel lies outside the valid distortion radius");
  }
  Vec2 x = target;
  constexpr double kTolerancePx = 1e-9;
  for (int iter = 0; iter < 20; ++iter) {
    const Vec2 residual = distort_normalized(cam, x) - target;
    if (residual.norm() * cam.focal < kTolerancePx) return {x.x(), x.y(), 1.0};
    x -= distortion_jacobian(cam, x).lu().solve(residual);
  }
  if ((distort_normalized(cam, x) - target).norm() * cam.focal < 1e-6) return {x.x(), x.y(), 1.0};
  throw NumericError("undistortion did not converge in 20 iterations");
}

Vec2 undistort_pixel(const CameraModel& cam, const Vec2& pixel) {
  const Vec3 ray = undistort(cam, pixel);
  return cam.focal * ray.head<2>() + cam.principal;
}

void StereoRig::validate() const {
  left.validate();
  right.validate();
  if (left.rotation != Mat3::Identity() || left.translation != Vec3::Zero()) {
    throw InvariantError("left camera defines the world frame and must have identity extrinsics");
  }
  if (!(right.translation.norm() > 0.0)) throw InvariantError("stereo baseline must be positive");
}

StereoRig reference_rig() {
  StereoRig rig;
  rig.left.focal = 1703.25;
  rig.left.principal = {582.69, 497.77};
  rig.left.distortion = {-0.11, 0.22, -0.01, 0.01, 0.00};
  rig.left.width = 1280;
  rig.left.height = 1024;
  rig.right.focal = 1959.47;
  rig.right.principal = {502.29, 387.05};
  rig.right.distortion = {0.13, -5.68, -0.02, 0.01, 0.00};
  rig.right.rotation = rotation_from_euler_xyz(-0.360, 1.410, 0.171);
  rig.right.translation = {-105.90, -28.25, 149.75};
  rig.right.width = 1280;
  rig.right.height = 1024;
  return rig;
}

namespace {

double rms_reprojection(const StereoRig& rig, const Vec3& p, const Vec2& l, const Vec2& r) {
  const double el = (project(rig.left, p) - l).squaredNorm();
  const double er = (project(rig.right, p) - r).squaredNorm();
  return std::sqrt(0.5 * (el + er));
}

Eigen::Vector4d residuals(const StereoRig& rig, const Vec3& p, const Vec2& l, const Vec2& r) {
  Eigen::Vector4d res;
  res.head<2>() = project(rig.left, p) - l;
  res.tail<2>() = project(rig.right, p) - r;
  return res;
}

}  // namespace

Triangulation triangulate(const StereoRig& rig, const Vec2& left_px, const Vec2& right_px) {
  const Vec3 xl = undistort(rig.left, left_px);
  const Vec3 xr = undistort(rig.right, right_px);
  const Vec3 dl = xl.normalized();
  const Vec3 dr = (rig.right.rotation.transpose() * xr).normalized();
  const double angle = std::acos(std::clamp(std::abs(dl.dot(dr)), 0.0, 1.0));
  if (angle < 0.5 * M_PI / 180.0) throw IllConditioned("viewing rays are nearly parallel");

  Eigen::Matrix<double, 3, 4> pl = Eigen::Matrix<double, 3, 4>::Zero();
  pl.leftCols<3>() = Mat3::Identity();
  Eigen::Matrix<double, 3, 4> pr;
  pr.leftCols<3>() = rig.right.rotation;
  pr.col(3) = rig.right.translation;
  Eigen::Matrix4d a;
  a.row(0) = xl.x() * pl.row(2) - pl.row(0);
  a.row(1) = xl.y() * pl.row(2) - pl.row(1);
  a.row(2) = xr.x() * pr.row(2) - pr.row(0);
  a.row(3) = xr.y() * pr.row(2) - pr.row(1);
  Eigen::JacobiSVD<Eigen::Matrix4d> svd(a, Eigen::ComputeFullV);
  const Eigen::Vector4d h = svd.matrixV().col(3);
  if (std::abs(h(3)) < 1e-15) throw IllConditioned("triangulated point at infinity");
  Vec3 p = h.head<3>() / h(3);

  Triangulation out;
  out.initial_reprojection_error = rms_reprojection(rig, p, left_px, right_px);
  double cost = out.initial_reprojection_error;
  for (int iter = 0; iter < 20; ++iter) {
    const Eigen::Vector4d res = residuals(rig, p, left_px, right_px);
    Eigen::Matrix<double, 4, 3> jac;
    for (int c = 0; c < 3; ++c) {
      const double step = 1e-6 * std::max(1.0, std::abs(p(c)));
      Vec3 hi = p, lo = p;
      hi(c) += step;
      lo(c) -= step;
      jac.col(c) = (residuals(rig, hi, left_px, right_px) - residuals(rig, lo, left_px, right_px)) /
                   (2.0 * step);
    }
    const Vec3 delta = (jac.transpose() * jac).ldlt().solve(-jac.transpose() * res);
    const Vec3 candidate = p + delta;
    double next;
    try {
      next = rms_reprojection(rig, candidate, left_px, right_px);
    } catch (const ProjectionError&) {
      break;
    }
    if (!(next < cost)) break;
    p = candidate;
    const bool converged = cost - next < 1e-14 * std::max(cost, 1e-300) || delta.norm() < 1e-13;
    cost = next;
    if (converged) break;
  }
  out.point = p;
  out.reprojection_error = cost;
  return out;
}

namespace {

Mat3 skew(const Vec3& v) {
  Mat3 s;
  s << 0, -v.z(), v.y(), v.z(), 0, -v.x(), -v.y(), v.x(), 0;
  return s;
}

double line_distance(const Vec3& line, const Vec3& point) {
  const double n = std::hypot(line.x(), line.y());
  return n > 0.0 ? std::abs(line.dot(point)) / n : std::numeric_limits<double>::infinity();
}

}  // namespace

double epipolar_distance(const StereoRig& rig, const Vec2& left_px, const Vec2& right_px) {
  const Vec3 xl = undistort(rig.left, left_px);
  const Vec3 xr = undistort(rig.right, right_px);
  const Mat3 essential = skew(rig.right.translation) * rig.right.rotation;
  const double in_right = line_distance(essential * xl, xr) * rig.right.focal;
  const double in_left = line_distance(essential.transpose() * xr, xl) * rig.left.focal;
  return 0.5 * (in_right + in_left);
}

MatchResult epipolar_match(std::span<const StereoCandidate> left,
                           std::span<const StereoCandidate> right, const StereoRig& rig,
                           const MatchParams& params) {
  std::vector<StereoMatch> candidates;
  for (int i = 0; i < static_cast<int>(left.size()); ++i) {
    for (int j = 0; j < static_cast<int>(right.size()); ++j) {
      const double dt = std::abs(left[i].t_us - right[j].t_us);
      if (dt > params.max_dt_us) continue;
      double dist;
      try {
        dist = epipolar_distance(rig, left[i].centroid, right[j].centroid);
      } catch (const NumericError&) {
        continue;
      }
      if (dist <= params.max_epipolar_px) candidates.push_back({i, j, dist, dt});
    }
  }
  std::stable_sort(candidates.begin(), candidates.end(), [](const StereoMatch& a, const StereoMatch& b) {
    if (a.epipolar_px != b.epipolar_px) return a.epipolar_px < b.epipolar_px;
    return a.dt_us < b.dt_us;
  });
  MatchResult out;
  std::vector<bool> used_l(left.size(), false), used_r(right.size(), false);
  for (const StereoMatch& m : candidates) {
    if (used_l[m.left] || used_r[m.right]) continue;
    used_l[m.left] = used_r[m.right] = true;
    out.matches.push_back(m);
  }
  std::sort(out.matches.begin(), out.matches.end(),
            [](const StereoMatch& a, const StereoMatch& b) { return a.left < b.left; });
  for (int i = 0; i < static_cast<int>(left.size()); ++i) {
    if (!used_l[i]) out.unmatched_left.push_back(i);
  }
  for (int j = 0; j < static_cast<int>(right.size()); ++j) {
    if (!used_r[j]) out.unmatched_right.push_back(j);
  }
  return out;
}

void ColumnAxis::validate() const {
  if (!((p2 - p1).norm() > 0.0)) throw InvariantError("column axis endpoints coincide");
}

Vec3 ColumnAxis::direction() const {
  validate();
  return (p2 - p1).normalized();
}

double separation_height(const ColumnAxis& axis, const Vec3& point) {
  return (point - axis.p1).dot(axis.direction());
}

double object_distance(const CameraModel& cam, const Vec2& image_point) {
  return std::sqrt(cam.focal * cam.focal + (image_point - cam.principal).squaredNorm());
}

double scale_factor(const CameraModel& cam, double range_mm, double distance_px, ScaleMode mode) {
  if (!(range_mm > 0.0) || !(distance_px > 0.0)) {
    throw InputError("scale factor needs positive range and distance");
  }
  if (mode == ScaleMode::kLiteral) return range_mm * cam.pixel_pitch / distance_px;
  return range_mm / distance_px;
}

EquivalentSize equivalent_radius(double pixel_area, double scale) {
  if (!(pixel_area > 0.0)) throw InputError("pixel area must be positive");
  EquivalentSize s;
  s.area = pixel_area * scale * scale;
  s.radius = std::sqrt(s.area / M_PI);
  s.diameter = 2.0 * s.radius;
  return s;
}

ViewSize view_size(const CameraModel& cam, const Vec3& world, const Vec2& centroid_px,
                   double pixel_area, ScaleMode mode) {
  ViewSize v;
  v.range = cam.to_camera(world).norm();
  v.distance = object_distance(cam, undistort_pixel(cam, centroid_px));
  v.scale = scale_factor(cam, v.range, v.distance, mode);
  v.size = equivalent_radius(pixel_area, v.scale);
  return v;
}

ParticleMeasurement measure_particle(const StereoRig& rig, const ColumnAxis& axis,
                                     const Vec2& left_px, const Vec2& right_px,
                                     double left_area_px, double right_area_px, double t_us,
                                     ScaleMode mode) {
  const Triangulation tri = triangulate(rig, left_px, right_px);
  ParticleMeasurement m;
  m.t_us = t_us;
  m.centroid = tri.point;
  m.reprojection_error = tri.reprojection_error;
  m.dh = separation_height(axis, tri.point);
  const ViewSize l = view_size(rig.left, tri.point, left_px, left_area_px, mode);
  const ViewSize r = view_size(rig.right, tri.point, right_px, right_area_px, mode);
  m.range = l.range;
  m.scale = l.scale;
  m.re_left = l.size.radius;
  m.re_right = r.size.radius;
  m.re = std::sqrt(m.re_left * m.re_right);
  m.de = 2.0 * m.re;
  m.area = M_PI * m.re * m.re;
  return m;
}

SizeHistogram size_histogram(std::span<const double> radii, double bin_width,
                             double min_prominence_fraction) {
  if (radii.empty()) throw InputError("size histogram needs at least one measurement");
  if (!(bin_width > 0.0)) throw ConfigError("bin width must be positive");
  SizeHistogram h;
  h.bin_width = bin_width;
  const auto [lo_it, hi_it] = std::minmax_element(radii.begin(), radii.end());
  // Bins are centred on multiples of the bin width.
  h.origin = (std::floor(*lo_it / bin_width + 0.5) - 0.5) * bin_width;
  const auto bins = static_cast<std::size_t>(std::floor((*hi_it - h.origin) / bin_width)) + 1;
  h.counts.assign(bins, 0);
  for (double r : radii) {
    const auto b = std::min(bins - 1, static_cast<std::size_t>(std::floor((r - h.origin) / bin_width)));
    h.counts[b]++;
  }
  const int top = *std::max_element(h.counts.begin(), h.counts.end());
  const double threshold = std::max(1.0, min_prominence_fraction * top);
  const int n = static_cast<int>(bins);
  for (int i = 0; i < n;) {
    // Plateau [i, j) of equal counts.
    int j = i + 1;
    while (j < n && h.counts[j] == h.counts[i]) ++j;
    const int height = h.counts[i];
    const bool left_lower = i == 0 || h.counts[i - 1] < height;
    const bool right_lower = j == n || h.counts[j] < height;
    if (height > 0 && left_lower && right_lower) {
      // Lowest point on each side before reaching a higher peak (or the end).
      int left_min = height;
      for (int k = i - 1; k >= 0 && h.counts[k] <= height; --k) left_min = std::min(left_min, h.counts[k]);
      if (i == 0) left_min = 0;
      int right_min = height;
      for (int k = j; k < n && h.counts[k] <= height; ++k) right_min = std::min(right_min, h.counts[k]);
      if (j == n) right_min = 0;
      // Sides that run off the histogram without meeting a higher peak count as zero.
      bool left_open = true;
      for (int k = i - 1; k >= 0; --k) {
        if (h.counts[k] > height) {
          left_open = false;
          break;
        }
      }
      bool right_open = true;
      for (int k = j; k < n; ++k) {
        if (h.counts[k] > height) {
          right_open = false;
          break;
        }
      }
      if (left_open) left_min = 0;
      if (right_open) right_min = 0;
      const double prominence = height - std::max(left_min, right_min);
      if (prominence >= threshold) h.modes.push_back(h.bin_center(i) + 0.5 * (j - i - 1) * bin_width);
    }
    i = j;
  }
  return h;
}

}  // namespace evsve
