#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "evsve/events.hpp"
#include "evsve/stereo.hpp"
#include "evsve/sve.hpp"

namespace evsve {

// Radiances are relative to the background level (background = 1).
struct ParticleTruth {
  int id = 0;
  Vec3 position = Vec3::Zero();  // mm at t = 0
  Vec3 velocity = Vec3::Zero();  // mm/ms
  double radius = 1.0;           // mm
  ParticleState state = ParticleState::kCombusting;
  double sve_radiance = 1.0;     // seen by the SVE camera at t = 0
  double event_radiance_start = 1.0;  // seen by the event cameras, log-linear in time
  double event_radiance_end = 1.0;
  double wobble_mm = 0.0;        // circular wobble in the x-y plane
  double wobble_hz = 0.0;

  Vec3 position_at(double t_us) const;
  double event_radiance_at(double t_us, double duration_us) const;
};

struct SmokePuff {
  Vec3 center = Vec3::Zero();    // mm
  Vec3 velocity = Vec3::Zero();  // mm/ms
  double radius = 4.0;           // support of the flat-topped (1 - (d/R)^8)^2 profile, mm
  double density = 1.0;          // peak optical depth
  double turbulence = 0.3;       // relative modulation of the optical depth
  double wavenumber = 15.0;      // rad/mm of the turbulent texture
  double rate_hz = 50.0;         // temporal frequency of the texture

  Vec3 center_at(double t_us) const;
};

struct SceneTruth {
  StereoRig rig;
  CameraModel sve_camera;  // world frame, no distortion
  ColumnAxis column;       // P1 on the burning surface, P2 along the axis
  double column_radius = 4.0;   // mm
  double column_length = 30.0;  // mm below P1
  double column_radiance = 40.0;  // burning surface, static
  double background_gradient = 0.3;  // relative change per unit of the ray's world y
  double atmospheric_light = 60.0;   // A, scattered radiance of the smoke
  std::vector<ParticleTruth> particles;
  std::vector<SmokePuff> smoke;
  std::uint64_t texture_seed = 7;
  double duration_us = 8000.0;
  double pre_trigger_us = 500.0;
  std::array<std::int64_t, 2> clock_offset_us{1000, 2500};  // left, right sensor clocks at trigger

  void validate() const;
  const CameraModel& camera(View view) const { return view == View::kLeft ? rig.left : rig.right; }
  double separation_height(const ParticleTruth& p, double t_us) const;
};

struct SimConfig {
  double contrast_threshold = 0.1;   // C, log-intensity per event
  double noise_rate = 0.5;           // events / px / s
  double jitter_px = 0.0;            // Gaussian jitter of event coordinates
  std::array<double, 4> transmittances{1.0, 0.25, 0.0625, 0.015625};
  double sve_gain = 1000.0;          // counts per unit radiance at tau = 1
  int bit_depth = 16;
  double time_step_us = 40.0;
  double edge_sigma_px = 0.3;        // Gaussian edge of particle silhouettes
  std::uint64_t seed = 1;

  void validate() const;
};

// Radiance seen along a world-frame ray, before and after the scattering model.
struct RayRadiance {
  double scene = 0.0;         // J
  double transmission = 1.0;  // t
  double observed = 0.0;      // J t + A (1 - t)
};

class SceneRenderer {
 public:
  SceneRenderer(const SceneTruth& scene, const SimConfig& config);

  // `direction` is a unit world-frame ray from `origin`; `pixel_angle` is the
  // angular pixel size (rad) that sets the particle edge width.
  RayRadiance radiance(const Vec3& origin, const Vec3& direction, double pixel_angle, double t_us,
                       bool sve) const;
  double optical_depth(const Vec3& origin, const Vec3& direction, double t_us) const;

  // Bit i set when particle / puff i can touch this ray during [0, duration].
  struct Influence {
    std::uint64_t particles = 0;
    std::uint64_t puffs = 0;
    bool any() const { return particles != 0 || puffs != 0; }
  };
  Influence influence(const Vec3& origin, const Vec3& direction, double pixel_angle) const;
  RayRadiance radiance(const Vec3& origin, const Vec3& direction, double pixel_angle, double t_us,
                       bool sve, const Influence& only) const;
  double optical_depth(const Vec3& origin, const Vec3& direction, double t_us,
                       std::uint64_t puffs) const;

 private:
  struct Wave {
    Vec3 k;
    double omega;  // rad/us
    double phase;
  };
  const SceneTruth& scene_;
  const SimConfig& config_;
  std::vector<std::vector<Wave>> waves_;  // per puff
};

// Scattering forward model through the SVE camera at t = 0, quantised per macro-pixel.
RawSveMosaic render_exposures(const SceneTruth& scene, const SimConfig& config,
                              const MacroPixelLayout& layout = {});

// Radiance image (no transmittance, no quantisation) seen by the SVE camera.
ImageD render_radiance(const SceneTruth& scene, const SimConfig& config, double t_us = 0.0);

// Raw sensor records on the camera clock: pre-trigger noise, a p = 0 trigger,
// then the simulated interval. Deterministic for a given seed.
std::vector<Event> simulate_raw_events(const SceneTruth& scene, View view, const SimConfig& config);
EventStream simulate_events(const SceneTruth& scene, View view, const SimConfig& config);

// Integrate-and-fire on one log-intensity trace sampled at `times`.
void integrate_and_fire(std::span<const double> times, std::span<const double> log_intensity,
                        double threshold, int u, int v, std::vector<Event>& out);

struct Roi {
  int x = 0;
  int y = 0;
  int width = 0;
  int height = 0;
};

double average_gradient(const ImageD& img, const Roi& roi);

// Plane-induced homography mapping `view` pixels onto SVE pixels for the
// plane through `point` with normal `normal` (world frame).
Homography registration_homography(const SceneTruth& scene, View view, const Vec3& point,
                                   const Vec3& normal);
// Registration plane of the default fixture: through the particle cloud,
// normal along the bisector of the two optical axes.
Homography scene_registration(const SceneTruth& scene, View view);

// Ground-truth particle index for a cluster, or -1 for smoke and noise.
int attribute_cluster(const SceneTruth& scene, View view, std::span<const Event> cluster);

// Projected centre and radius (pixels) of a particle at time t.
struct ProjectedParticle {
  Vec2 center = Vec2::Zero();
  double radius_px = 0.0;
};
ProjectedParticle project_particle(const SceneTruth& scene, View view, const ParticleTruth& p,
                                   double t_us);

struct ParticleError {
  int id = 0;
  int detections = 0;
  std::vector<double> dh_error;      // mm
  std::vector<double> re_rel_error;  // relative
};

struct EvaluationReport {
  std::vector<ParticleError> particles;
  int measurements = 0;
  int false_positives = 0;
  double detection_rate = 0.0;
  double dh_abs_p50 = 0.0;
  double dh_abs_p95 = 0.0;
  double dh_abs_max = 0.0;
  double re_rel_p50 = 0.0;
  double re_rel_p95 = 0.0;
  double re_rel_max = 0.0;
};

// Nearest-truth assignment within `match_radius_mm` of the particle centre.
EvaluationReport evaluate_run(const SceneTruth& scene, std::span<const ParticleMeasurement> measurements,
                              double match_radius_mm = 2.0);

SceneTruth default_scene();
SimConfig default_sim_config();

}  // namespace evsve
