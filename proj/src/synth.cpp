#include "evsve/synth.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include <Eigen/Dense>

#include "evsve/errors.hpp"
#include "evsve/parallel.hpp"

namespace evsve {

Vec3 ParticleTruth::position_at(double t_us) const {
  Vec3 p = position + velocity * (t_us / 1000.0);
  if (wobble_mm > 0.0) {
    const double phase = 2.0 * M_PI * wobble_hz * t_us * 1e-6;
    p += wobble_mm * Vec3(std::cos(phase) - 1.0, std::sin(phase), 0.0);
  }
  return p;
}

double ParticleTruth::event_radiance_at(double t_us, double duration_us) const {
  // Extrapolated before the trigger so the sensor is already in steady state.
  const double s = duration_us > 0.0 ? std::min(t_us / duration_us, 1.0) : 0.0;
  return event_radiance_start * std::pow(event_radiance_end / event_radiance_start, s);
}

Vec3 SmokePuff::center_at(double t_us) const { return center + velocity * (t_us / 1000.0); }

void SceneTruth::validate() const {
  rig.validate();
  column.validate();
  if (!(duration_us > 0.0)) throw InvariantError("scene duration must be positive");
  if (!(pre_trigger_us >= 0.0)) throw InvariantError("pre-trigger interval must be non-negative");
  for (const auto offset : clock_offset_us) {
    if (static_cast<double>(offset) < pre_trigger_us) {
      throw InvariantError("sensor clock offset must cover the pre-trigger interval");
    }
  }
  if (!(atmospheric_light >= 0.0)) throw InvariantError("atmospheric light must be non-negative");
  for (const ParticleTruth& p : particles) {
    if (!(p.radius > 0.0)) throw InvariantError("particle radius must be positive");
    if (!(p.event_radiance_start > 0.0) || !(p.event_radiance_end > 0.0) || !(p.sve_radiance >= 0.0)) {
      throw InvariantError("particle radiances must be positive");
    }
  }
  for (const SmokePuff& s : smoke) {
    if (!(s.radius > 0.0) || !(s.density >= 0.0)) throw InvariantError("smoke puff needs radius > 0, density >= 0");
    if (!(s.turbulence >= 0.0) || s.turbulence >= 1.0) {
      throw InvariantError("smoke turbulence must lie in [0, 1) so transmission stays in (0, 1]");
    }
  }
}

double SceneTruth::separation_height(const ParticleTruth& p, double t_us) const {
  return evsve::separation_height(column, p.position_at(t_us));
}

void SimConfig::validate() const {
  if (!(contrast_threshold > 0.0)) throw ConfigError("contrast threshold must be positive");
  if (!(noise_rate >= 0.0)) throw ConfigError("noise rate must be non-negative");
  if (!(jitter_px >= 0.0)) throw ConfigError("jitter must be non-negative");
  if (!(time_step_us > 0.0)) throw ConfigError("time step must be positive");
  if (!(sve_gain > 0.0)) throw ConfigError("SVE gain must be positive");
  if (!(edge_sigma_px > 0.0)) throw ConfigError("edge sigma must be positive");
  if (bit_depth < 1 || bit_depth > 16) throw ConfigError("bit depth must be in [1, 16]");
  for (double tau : transmittances) {
    if (!(tau > 0.0 && tau <= 1.0)) throw ConfigError("transmittances must lie in (0, 1]");
  }
}

SceneRenderer::SceneRenderer(const SceneTruth& scene, const SimConfig& config)
    : scene_(scene), config_(config) {
  std::mt19937_64 rng(scene.texture_seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  constexpr int kWaves = 6;
  for (const SmokePuff& puff : scene.smoke) {
    std::vector<Wave> waves;
    for (int j = 0; j < kWaves; ++j) {
      const double z = 2.0 * unit(rng) - 1.0;
      const double phi = 2.0 * M_PI * unit(rng);
      const double s = std::sqrt(1.0 - z * z);
      const double scale = puff.wavenumber * (0.6 + 0.8 * unit(rng));
      const Vec3 k = scale * Vec3(s * std::cos(phi), s * std::sin(phi), z);
      const double omega = 2.0 * M_PI * puff.rate_hz * (0.5 + unit(rng)) * 1e-6;
      waves.push_back({k, omega, 2.0 * M_PI * unit(rng)});
    }
    waves_.push_back(std::move(waves));
  }
}

double SceneRenderer::optical_depth(const Vec3& origin, const Vec3& direction, double t_us) const {
  return optical_depth(origin, direction, t_us, ~std::uint64_t{0});
}

double SceneRenderer::optical_depth(const Vec3& origin, const Vec3& direction, double t_us,
                                    std::uint64_t puffs) const {
  double depth = 0.0;
  for (std::size_t i = 0; i < scene_.smoke.size(); ++i) {
    if (i < 64 && !(puffs >> i & 1U)) continue;
    const SmokePuff& puff = scene_.smoke[i];
    const Vec3 c = puff.center_at(t_us);
    const double s = (c - origin).dot(direction);
    if (s <= 0.0) continue;
    const Vec3 q = origin + s * direction;
    const double u = (c - q).squaredNorm() / (puff.radius * puff.radius);
    if (u >= 1.0) continue;
    double texture = 0.0;
    for (const Wave& w : waves_[i]) texture += std::sin(w.k.dot(q - c) + w.omega * t_us + w.phase);
    texture /= std::sqrt(0.5 * static_cast<double>(waves_[i].size()));
    const double modulation = std::clamp(1.0 + puff.turbulence * texture, 0.0, 2.0);
    const double u2 = u * u;
    const double u4 = u2 * u2 * u2 * u2;
    const double profile = (1.0 - u4) * (1.0 - u4);
    depth += puff.density * profile * modulation;
  }
  return depth;
}

RayRadiance SceneRenderer::radiance(const Vec3& origin, const Vec3& direction, double pixel_angle,
                                    double t_us, bool sve) const {
  return radiance(origin, direction, pixel_angle, t_us, sve, {~std::uint64_t{0}, ~std::uint64_t{0}});
}

SceneRenderer::Influence SceneRenderer::influence(const Vec3& origin, const Vec3& direction,
                                                  double pixel_angle) const {
  Influence out;
  constexpr int kSamples = 32;
  const double edge = pixel_angle * config_.edge_sigma_px;
  const double start = -scene_.pre_trigger_us;
  const double step_us = (scene_.duration_us + scene_.pre_trigger_us) / kSamples;
  for (std::size_t i = 0; i < scene_.particles.size() && i < 64; ++i) {
    const ParticleTruth& p = scene_.particles[i];
    for (int k = 0; k <= kSamples; ++k) {
      const double t = start + step_us * k;
      const Vec3 w = p.position_at(t) - origin;
      const double dist = w.norm();
      if (!(dist > p.radius)) continue;
      const double theta = std::atan2(direction.cross(w).norm(), direction.dot(w));
      // Margin covers the motion between samples.
      const double step = (p.position_at(t + step_us) - p.position_at(t)).norm() / dist;
      if (theta - std::asin(p.radius / dist) <= 8.0 * edge + step + pixel_angle) {
        out.particles |= std::uint64_t{1} << i;
        break;
      }
    }
  }
  for (std::size_t i = 0; i < scene_.smoke.size() && i < 64; ++i) {
    const SmokePuff& puff = scene_.smoke[i];
    for (int k = 0; k <= kSamples; ++k) {
      const double t = start + step_us * k;
      const Vec3 c = puff.center_at(t);
      const double s = (c - origin).dot(direction);
      if (s <= 0.0) continue;
      const double d = (c - origin - s * direction).norm();
      const double step = puff.velocity.norm() * step_us / 1000.0;
      if (d <= puff.radius + step) {
        out.puffs |= std::uint64_t{1} << i;
        break;
      }
    }
  }
  return out;
}

RayRadiance SceneRenderer::radiance(const Vec3& origin, const Vec3& direction, double pixel_angle,
                                    double t_us, bool sve, const Influence& only) const {
  const double edge = std::max(pixel_angle * config_.edge_sigma_px, 1e-12);
  double j = 1.0 + scene_.background_gradient * direction.y();

  // Column: cylinder below P1 along -n.
  const Vec3 n = scene_.column.direction();
  const Vec3 p1 = scene_.column.p1;
  const Vec3 w0 = origin - p1;
  const double b = direction.dot(n);
  const double denom = 1.0 - b * b;
  if (denom > 1e-12) {
    const double d = direction.dot(w0);
    const double e = n.dot(w0);
    const double s = (b * e - d) / denom;
    const double u = (e - b * d) / denom;
    if (s > 0.0 && u <= 0.0 && u >= -scene_.column_length) {
      const double dist = (w0 + s * direction - u * n).norm();
      const double ang = (dist - scene_.column_radius) / s;
      const double cover = 0.5 * std::erfc(ang / (edge * M_SQRT2));
      j = (1.0 - cover) * j + cover * scene_.column_radiance;
    }
  }

  for (std::size_t i = 0; i < scene_.particles.size(); ++i) {
    if (i < 64 && !(only.particles >> i & 1U)) continue;
    const ParticleTruth& p = scene_.particles[i];
    const Vec3 w = p.position_at(t_us) - origin;
    const double dist = w.norm();
    if (!(dist > p.radius)) continue;
    const double alpha = std::asin(p.radius / dist);
    const double theta = std::atan2(direction.cross(w).norm(), direction.dot(w));
    const double off = theta - alpha;
    if (off > 8.0 * edge) continue;
    const double cover = 0.5 * std::erfc(off / (edge * M_SQRT2));
    const double value = sve ? p.sve_radiance : p.event_radiance_at(t_us, scene_.duration_us);
    j = (1.0 - cover) * j + cover * value;
  }

  RayRadiance out;
  out.scene = j;
  out.transmission = std::exp(-optical_depth(origin, direction, t_us, only.puffs));
  out.observed = j * out.transmission + scene_.atmospheric_light * (1.0 - out.transmission);
  return out;
}

namespace {

Vec3 world_ray(const CameraModel& cam, const Vec3& normalized) {
  return (cam.rotation.transpose() * normalized).normalized();
}

}  // namespace

ImageD render_radiance(const SceneTruth& scene, const SimConfig& config, double t_us) {
  scene.validate();
  config.validate();
  const CameraModel& cam = scene.sve_camera;
  if (cam.width <= 0 || cam.height <= 0) throw InvariantError("SVE camera needs sensor dimensions");
  const SceneRenderer renderer(scene, config);
  ImageD out(cam.width, cam.height);
  const Vec3 origin = cam.center();
  const auto rows = static_cast<std::size_t>(cam.height);
  parallel_chunks(rows, rows, [&](std::size_t, std::size_t begin, std::size_t end) {
    for (auto y = static_cast<int>(begin); y < static_cast<int>(end); ++y) {
      for (int x = 0; x < cam.width; ++x) {
        const Vec3 ray = world_ray(cam, undistort(cam, Vec2(x, y)));
        const double cos_t = ray.dot(world_ray(cam, Vec3(0, 0, 1)));
        const double pixel_angle = cos_t * cos_t / cam.focal;
        out(x, y) = renderer.radiance(origin, ray, pixel_angle, t_us, true).observed;
      }
    }
  });
  return out;
}

RawSveMosaic render_exposures(const SceneTruth& scene, const SimConfig& config,
                              const MacroPixelLayout& layout) {
  layout.validate();
  const ImageD radiance = render_radiance(scene, config, 0.0);
  if (radiance.width() % 2 != 0 || radiance.height() % 2 != 0) {
    throw DimensionError("SVE sensor dimensions must be even");
  }
  RawSveMosaic mosaic;
  mosaic.bit_depth = config.bit_depth;
  mosaic.transmittances = config.transmittances;
  mosaic.values = ImageD(radiance.width(), radiance.height());
  const double full = mosaic.full_scale();
  for (int y = 0; y < radiance.height(); ++y) {
    for (int x = 0; x < radiance.width(); ++x) {
      const int k = layout.exposure_at_position[2 * (y % 2) + (x % 2)];
      const double counts = config.sve_gain * config.transmittances[k] * radiance(x, y);
      mosaic.values(x, y) = std::clamp(std::round(counts), 0.0, full);
    }
  }
  mosaic.validate();
  return mosaic;
}

void integrate_and_fire(std::span<const double> times, std::span<const double> log_intensity,
                        double threshold, int u, int v, std::vector<Event>& out) {
  if (times.size() != log_intensity.size()) throw InputError("times and samples differ in length");
  if (times.empty()) return;
  // Tolerance keeps exact multiples of the threshold from being lost to rounding.
  const double reach = threshold * (1.0 - 1e-9);
  double ref = log_intensity[0];
  for (std::size_t j = 1; j < times.size(); ++j) {
    const double prev = log_intensity[j - 1];
    const double cur = log_intensity[j];
    const double span = cur - prev;
    auto crossing = [&](double level) {
      const double frac = span != 0.0 ? std::clamp((level - prev) / span, 0.0, 1.0) : 1.0;
      return static_cast<std::int64_t>(std::llround(times[j - 1] + frac * (times[j] - times[j - 1])));
    };
    while (cur - ref >= reach) {
      ref += threshold;
      out.push_back({crossing(std::min(ref, cur)), u, v, 1});
    }
    while (ref - cur >= reach) {
      ref -= threshold;
      out.push_back({crossing(std::max(ref, cur)), u, v, -1});
    }
  }
}

ProjectedParticle project_particle(const SceneTruth& scene, View view, const ParticleTruth& p,
                                   double t_us) {
  const CameraModel& cam = scene.camera(view);
  const Vec3 pos = p.position_at(t_us);
  ProjectedParticle out;
  out.center = project(cam, pos);
  const double range = cam.to_camera(pos).norm();
  out.radius_px = cam.focal * std::tan(std::asin(std::min(1.0, p.radius / range)));
  return out;
}

namespace {

// Pixels whose intensity can change during the interval.
std::vector<int> active_pixels(const SceneTruth& scene, View view) {
  const CameraModel& cam = scene.camera(view);
  std::vector<std::uint8_t> mask(static_cast<std::size_t>(cam.width) * cam.height, 0);
  auto mark = [&](const Vec2& c, double half) {
    const int x0 = std::max(0, static_cast<int>(std::floor(c.x() - half)));
    const int x1 = std::min(cam.width - 1, static_cast<int>(std::ceil(c.x() + half)));
    const int y0 = std::max(0, static_cast<int>(std::floor(c.y() - half)));
    const int y1 = std::min(cam.height - 1, static_cast<int>(std::ceil(c.y() + half)));
    for (int y = y0; y <= y1; ++y) {
      for (int x = x0; x <= x1; ++x) mask[static_cast<std::size_t>(y) * cam.width + x] = 1;
    }
  };
  constexpr int kSamples = 16;
  for (int s = 0; s <= kSamples; ++s) {
    const double t = -scene.pre_trigger_us + (scene.duration_us + scene.pre_trigger_us) * s / kSamples;
    for (const ParticleTruth& p : scene.particles) {
      try {
        const ProjectedParticle pp = project_particle(scene, view, p, t);
        mark(pp.center, pp.radius_px + 6.0);
      } catch (const NumericError&) {
      }
    }
    for (const SmokePuff& puff : scene.smoke) {
      const Vec3 c = puff.center_at(t);
      try {
        const Vec2 px = project(cam, c);
        const double range = cam.to_camera(c).norm();
        mark(px, cam.focal * puff.radius / range + 4.0);
      } catch (const NumericError&) {
      }
    }
  }
  std::vector<int> out;
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (mask[i]) out.push_back(static_cast<int>(i));
  }
  return out;
}

// Counter-based substream: one uniform draw in [0, 1) per (key, index).
double unit_hash(std::uint64_t key, std::uint64_t index) {
  std::seed_seq seq{static_cast<std::uint32_t>(key), static_cast<std::uint32_t>(key >> 32),
                    static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32)};
  std::array<std::uint32_t, 2> out{};
  seq.generate(out.begin(), out.end());
  return static_cast<double>((static_cast<std::uint64_t>(out[0]) << 21) ^ out[1]) /
         static_cast<double>(std::uint64_t{1} << 53);
}

std::uint64_t view_salt(View view) { return view == View::kLeft ? 0x9e3779b97f4a7c15ULL : 0xc2b2ae3d27d4eb4fULL; }

}  // namespace

std::vector<Event> simulate_raw_events(const SceneTruth& scene, View view, const SimConfig& config) {
  scene.validate();
  config.validate();
  const CameraModel& cam = scene.camera(view);
  if (cam.width <= 0 || cam.height <= 0) throw InvariantError("event camera needs sensor dimensions");
  const SceneRenderer renderer(scene, config);
  const Vec3 origin = cam.center();
  const std::vector<int> pixels = active_pixels(scene, view);

  // Start at the beginning of the pre-trigger interval; signal events before
  // the trigger are dropped with the noise when the stream is aligned.
  const double span = scene.duration_us + scene.pre_trigger_us;
  const auto steps = static_cast<std::size_t>(std::ceil(span / config.time_step_us));
  std::vector<double> times(steps + 1);
  for (std::size_t j = 0; j <= steps; ++j) {
    times[j] = -scene.pre_trigger_us + span * static_cast<double>(j) / static_cast<double>(steps);
  }

  constexpr std::size_t kChunks = 256;
  std::vector<std::vector<Event>> per_chunk(kChunks);
  const std::uint64_t stream_key = config.seed ^ view_salt(view);
  parallel_chunks(pixels.size(), kChunks, [&](std::size_t chunk, std::size_t begin, std::size_t end) {
    std::vector<double> trace(times.size());
    for (std::size_t i = begin; i < end; ++i) {
      const int u = pixels[i] % cam.width;
      const int v = pixels[i] / cam.width;
      Vec3 ray, next;
      try {
        ray = world_ray(cam, undistort(cam, Vec2(u, v)));
        next = world_ray(cam, undistort(cam, Vec2(u + 1, v)));
      } catch (const NumericError&) {
        continue;
      }
      const double pixel_angle = std::acos(std::clamp(ray.dot(next), -1.0, 1.0));
      const SceneRenderer::Influence only = renderer.influence(origin, ray, pixel_angle);
      if (!only.any()) continue;
      for (std::size_t j = 0; j < times.size(); ++j) {
        trace[j] = std::log(renderer.radiance(origin, ray, pixel_angle, times[j], false, only).observed);
      }
      // The reference level left by earlier activity is unknown; draw it
      // from the pixel's own substream.
      const double phase = unit_hash(stream_key, static_cast<std::uint64_t>(pixels[i]));
      trace[0] -= (phase - 0.5) * config.contrast_threshold;
      integrate_and_fire(times, trace, config.contrast_threshold, u, v, per_chunk[chunk]);
    }
  });

  std::vector<Event> events;
  for (auto& chunk : per_chunk) events.insert(events.end(), chunk.begin(), chunk.end());

  std::mt19937_64 rng(config.seed ^ view_salt(view));
  if (config.jitter_px > 0.0) {
    std::normal_distribution<double> jitter(0.0, config.jitter_px);
    for (Event& e : events) {
      e.u = std::clamp(static_cast<int>(std::lround(e.u + jitter(rng))), 0, cam.width - 1);
      e.v = std::clamp(static_cast<int>(std::lround(e.v + jitter(rng))), 0, cam.height - 1);
    }
  }
  const double span_us = scene.pre_trigger_us + scene.duration_us;
  const double expected = config.noise_rate * cam.width * cam.height * span_us * 1e-6;
  if (expected > 0.0) {
    std::poisson_distribution<long> count(expected);
    std::uniform_int_distribution<int> ux(0, cam.width - 1);
    std::uniform_int_distribution<int> vy(0, cam.height - 1);
    std::uniform_real_distribution<double> tt(-scene.pre_trigger_us, scene.duration_us);
    std::bernoulli_distribution polarity(0.5);
    const long n = count(rng);
    for (long i = 0; i < n; ++i) {
      const int u = ux(rng);
      const int v = vy(rng);
      const auto t = static_cast<std::int64_t>(std::floor(tt(rng)));
      events.push_back({t, u, v, polarity(rng) ? 1 : -1});
    }
  }
  const std::int64_t offset = scene.clock_offset_us[view == View::kLeft ? 0 : 1];
  for (Event& e : events) e.t_us += offset;
  events.push_back({offset, 0, 0, 0});
  std::sort(events.begin(), events.end(), [](const Event& a, const Event& b) {
    if (a.t_us != b.t_us) return a.t_us < b.t_us;
    if (a.p == 0 || b.p == 0) return a.p == 0 && b.p != 0;
    if (a.v != b.v) return a.v < b.v;
    if (a.u != b.u) return a.u < b.u;
    return a.p < b.p;
  });
  return events;
}

EventStream simulate_events(const SceneTruth& scene, View view, const SimConfig& config) {
  const CameraModel& cam = scene.camera(view);
  return make_stream(simulate_raw_events(scene, view, config), view, cam.width, cam.height);
}

double average_gradient(const ImageD& img, const Roi& roi) {
  if (roi.width <= 0 || roi.height <= 0) throw InputError("average gradient needs a non-empty ROI");
  if (roi.x < 0 || roi.y < 0 || roi.x + roi.width > img.width() || roi.y + roi.height > img.height()) {
    throw InputError("ROI lies outside the image");
  }
  double sum = 0.0;
  for (int y = roi.y; y < roi.y + roi.height; ++y) {
    for (int x = roi.x; x < roi.x + roi.width; ++x) {
      // Forward differences; the last row/column reuses the backward one.
      const double gx = x + 1 < img.width() ? img(x + 1, y) - img(x, y)
                                            : (x > 0 ? img(x, y) - img(x - 1, y) : 0.0);
      const double gy = y + 1 < img.height() ? img(x, y + 1) - img(x, y)
                                             : (y > 0 ? img(x, y) - img(x, y - 1) : 0.0);
      sum += std::sqrt(0.5 * (gx * gx + gy * gy));
    }
  }
  return sum / (static_cast<double>(roi.width) * roi.height);
}

Homography registration_homography(const SceneTruth& scene, View view, const Vec3& point,
                                   const Vec3& normal) {
  const CameraModel& cam = scene.camera(view);
  const CameraModel& sve = scene.sve_camera;
  const Vec3 n = normal.normalized();
  const Vec3 origin = cam.center();
  std::vector<Vec2> src, dst;
  constexpr int kGrid = 12;
  for (int iy = 0; iy <= kGrid; ++iy) {
    for (int ix = 0; ix <= kGrid; ++ix) {
      const Vec2 px(cam.width * (0.05 + 0.9 * ix / kGrid), cam.height * (0.05 + 0.9 * iy / kGrid));
      Vec3 ray;
      try {
        ray = world_ray(cam, undistort(cam, px));
      } catch (const NumericError&) {
        continue;
      }
      const double denom = ray.dot(n);
      if (std::abs(denom) < 1e-9) continue;
      const double s = (point - origin).dot(n) / denom;
      if (s <= 0.0) continue;
      try {
        dst.push_back(project(sve, origin + s * ray));
        src.push_back(px);
      } catch (const NumericError&) {
      }
    }
  }
  if (src.size() < 4) throw NumericError("registration plane is not visible from both cameras");
  // Normalised DLT.
  auto normaliser = [](const std::vector<Vec2>& pts) {
    Vec2 mean = Vec2::Zero();
    for (const Vec2& p : pts) mean += p;
    mean /= static_cast<double>(pts.size());
    double spread = 0.0;
    for (const Vec2& p : pts) spread += (p - mean).norm();
    spread = std::max(spread / static_cast<double>(pts.size()), 1e-12);
    const double s = std::sqrt(2.0) / spread;
    Eigen::Matrix3d t;
    t << s, 0, -s * mean.x(), 0, s, -s * mean.y(), 0, 0, 1;
    return t;
  };
  const Eigen::Matrix3d ts = normaliser(src);
  const Eigen::Matrix3d td = normaliser(dst);
  Eigen::MatrixXd a(2 * src.size(), 9);
  for (std::size_t i = 0; i < src.size(); ++i) {
    const Eigen::Vector3d p = ts * Eigen::Vector3d(src[i].x(), src[i].y(), 1.0);
    const Eigen::Vector3d q = td * Eigen::Vector3d(dst[i].x(), dst[i].y(), 1.0);
    const auto r = static_cast<Eigen::Index>(2 * i);
    a.row(r) << -p.x(), -p.y(), -1, 0, 0, 0, q.x() * p.x(), q.x() * p.y(), q.x();
    a.row(r + 1) << 0, 0, 0, -p.x(), -p.y(), -1, q.y() * p.x(), q.y() * p.y(), q.y();
  }
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(a, Eigen::ComputeFullV);
  const Eigen::VectorXd h = svd.matrixV().col(8);
  Eigen::Matrix3d hn;
  hn << h(0), h(1), h(2), h(3), h(4), h(5), h(6), h(7), h(8);
  Homography out = td.inverse() * hn * ts;
  return out / out(2, 2);
}

Homography scene_registration(const SceneTruth& scene, View view) {
  Vec3 point = Vec3::Zero();
  for (const ParticleTruth& p : scene.particles) point += p.position;
  if (!scene.particles.empty()) point /= static_cast<double>(scene.particles.size());
  const Vec3 axis_l = scene.rig.left.rotation.transpose() * Vec3::UnitZ();
  const Vec3 axis_r = scene.rig.right.rotation.transpose() * Vec3::UnitZ();
  return registration_homography(scene, view, point, (axis_l + axis_r).normalized());
}

int attribute_cluster(const SceneTruth& scene, View view, std::span<const Event> cluster) {
  if (cluster.empty()) return -1;
  Vec2 c = Vec2::Zero();
  double t = 0.0;
  for (const Event& e : cluster) {
    c += Vec2(e.u, e.v);
    t += static_cast<double>(e.t_us);
  }
  c /= static_cast<double>(cluster.size());
  t /= static_cast<double>(cluster.size());
  int best = -1;
  double best_d = 0.0;
  for (std::size_t i = 0; i < scene.particles.size(); ++i) {
    ProjectedParticle pp;
    try {
      pp = project_particle(scene, view, scene.particles[i], t);
    } catch (const NumericError&) {
      continue;
    }
    const double d = (pp.center - c).norm();
    if (d <= pp.radius_px + 4.0 && (best < 0 || d < best_d)) {
      best = static_cast<int>(i);
      best_d = d;
    }
  }
  return best;
}

namespace {

void percentiles(std::vector<double> v, double& p50, double& p95, double& max) {
  p50 = p95 = max = 0.0;
  if (v.empty()) return;
  for (double& x : v) x = std::abs(x);
  std::sort(v.begin(), v.end());
  auto rank = [&](double q) {
    const auto i = static_cast<std::size_t>(std::ceil(q * static_cast<double>(v.size()))) - 1;
    return v[std::min(i, v.size() - 1)];
  };
  p50 = rank(0.5);
  p95 = rank(0.95);
  max = v.back();
}

}  // namespace

EvaluationReport evaluate_run(const SceneTruth& scene, std::span<const ParticleMeasurement> measurements,
                              double match_radius_mm) {
  EvaluationReport report;
  report.measurements = static_cast<int>(measurements.size());
  for (const ParticleTruth& p : scene.particles) report.particles.push_back({p.id, 0, {}, {}});
  std::vector<double> dh_all, re_all;
  for (const ParticleMeasurement& m : measurements) {
    int best = -1;
    double best_d = match_radius_mm;
    for (std::size_t i = 0; i < scene.particles.size(); ++i) {
      const double d = (m.centroid - scene.particles[i].position_at(m.t_us)).norm();
      if (d <= best_d) {
        best = static_cast<int>(i);
        best_d = d;
      }
    }
    if (best < 0) {
      report.false_positives++;
      continue;
    }
    const ParticleTruth& p = scene.particles[best];
    ParticleError& err = report.particles[best];
    err.detections++;
    err.dh_error.push_back(m.dh - scene.separation_height(p, m.t_us));
    err.re_rel_error.push_back((m.re - p.radius) / p.radius);
    dh_all.push_back(err.dh_error.back());
    re_all.push_back(err.re_rel_error.back());
  }
  const auto detected = std::count_if(report.particles.begin(), report.particles.end(),
                                      [](const ParticleError& e) { return e.detections > 0; });
  report.detection_rate =
      scene.particles.empty() ? 1.0 : static_cast<double>(detected) / scene.particles.size();
  percentiles(dh_all, report.dh_abs_p50, report.dh_abs_p95, report.dh_abs_max);
  percentiles(re_all, report.re_rel_p50, report.re_rel_p95, report.re_rel_max);
  return report;
}

SimConfig default_sim_config() { return {}; }

SceneTruth default_scene() {
  SceneTruth scene;
  scene.rig = reference_rig();
  scene.sve_camera.focal = scene.rig.left.focal;
  scene.sve_camera.principal = scene.rig.left.principal;
  scene.sve_camera.width = scene.rig.left.width;
  scene.sve_camera.height = scene.rig.left.height;

  // Working plane through the region both cameras see well.
  const Vec3 anchor(-2.5, 8.0, 110.0);
  const Vec3 axis_l = scene.rig.left.rotation.transpose() * Vec3::UnitZ();
  const Vec3 axis_r = scene.rig.right.rotation.transpose() * Vec3::UnitZ();
  const Vec3 normal = (axis_l + axis_r).normalized();
  auto on_plane = [&](double x, double y) {
    const double z = anchor.z() - (normal.x() * (x - anchor.x()) + normal.y() * (y - anchor.y())) / normal.z();
    return Vec3(x, y, z);
  };

  const Vec3 up(0.0, -1.0, 0.0);
  scene.column.p1 = on_plane(-2.5, 20.0);
  scene.column.p2 = scene.column.p1 + 20.0 * up;
  const double y1 = scene.column.p1.y();

  ParticleTruth lifted;
  lifted.id = 1;
  lifted.radius = 1.0;
  lifted.state = ParticleState::kCombusting;
  lifted.position = on_plane(-2.0, y1 - 15.94);
  lifted.velocity = Vec3(0.003, 0.0, 0.0);
  lifted.sve_radiance = 12.0;
  lifted.event_radiance_start = 1.3;
  lifted.event_radiance_end = 3.5;

  ParticleTruth ember;
  ember.id = 2;
  ember.radius = 0.5;
  ember.state = ParticleState::kExtinguished;
  ember.position = on_plane(-8.0, y1 - 8.0);
  ember.velocity = Vec3(0.01, 0.0, 0.0);
  ember.sve_radiance = 0.3;
  ember.event_radiance_start = 0.3;
  ember.event_radiance_end = 0.3;
  ember.wobble_mm = 0.02;
  ember.wobble_hz = 2000.0;

  ParticleTruth cooling;
  cooling.id = 3;
  cooling.radius = 1.5;
  cooling.state = ParticleState::kPartial;
  cooling.position = on_plane(1.5, y1 - 24.0);
  cooling.velocity = Vec3(0.1, -0.01, 0.0);
  cooling.sve_radiance = 6.0;
  cooling.event_radiance_start = 4.0;
  cooling.event_radiance_end = 1.8;

  scene.particles = {lifted, ember, cooling};

  auto puff = [&](double x, double dh, double radius, double density) {
    SmokePuff s;
    s.center = on_plane(x, y1 - dh);
    s.velocity = 0.05 * up;
    s.radius = radius;
    s.density = density;
    s.turbulence = 0.35;
    s.wavenumber = 20.0;
    s.rate_hz = 150.0;
    return s;
  };
  scene.smoke = {puff(-7.5, 2.5, 3.0, 5.0), puff(0.0, 3.0, 3.0, 5.0), puff(7.5, 2.5, 3.0, 5.0),
                 puff(6.5, 12.0, 3.0, 5.0)};
  return scene;
}

}  // namespace evsve
