#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Core>

#include "evsve/fusion.hpp"
#include "evsve/geometry2d.hpp"
#include "evsve/smoke.hpp"

namespace evsve {

enum class View { kLeft, kRight };
std::string_view view_name(View view);

// Polarity 0 marks the hardware trigger in raw files only.
struct Event {
  std::int64_t t_us = 0;
  int u = 0;
  int v = 0;
  int p = 1;

  bool operator==(const Event&) const = default;
};

inline constexpr double kMaxSyncOffsetUs = 12.0;

struct EventStream {
  View view = View::kLeft;
  std::vector<Event> events;  // non-decreasing t
  int width = 0;              // 0 when unknown
  int height = 0;
  double sync_offset_us = 0.0;
  std::vector<std::string> warnings;

  void validate() const;
};

// Raw record codecs; no trigger handling or sorting.
std::vector<Event> parse_event_csv(std::string_view text);
std::vector<Event> parse_event_binary(std::span<const std::uint8_t> bytes);
std::string format_event_csv(std::span<const Event> events);
std::vector<std::uint8_t> format_event_binary(std::span<const Event> events);

// Rebases on the trigger (if any), drops pre-trigger events, sorts, validates.
EventStream make_stream(std::vector<Event> raw, View view, int width, int height,
                        double sync_offset_us = 0.0);

// Reads CSV or binary (detected by the "EVT1" magic).
EventStream load_stream(const std::filesystem::path& path, View view, int width = 0,
                        int height = 0, double sync_offset_us = 0.0);
void save_stream_csv(const std::filesystem::path& path, const EventStream& stream);
void save_stream_binary(const std::filesystem::path& path, const EventStream& stream);

std::span<const Event> events_in_window(const EventStream& stream, std::int64_t t0,
                                        std::int64_t t1);

struct ClusterParams {
  double spatial_radius = 4.0;        // px
  double temporal_radius_us = 500.0;  // us
  int min_core = 8;                   // neighbours (self included) for a core event

  void validate() const;
  // Expected neighbour count of a uniform background at `rate` events/px/s.
  double expected_neighbours(double rate_per_px_s) const;
};

using EventCluster = std::vector<Event>;

// Density-based spatiotemporal clustering; noise events are dropped.
std::vector<EventCluster> cluster_events(std::span<const Event> events, const ClusterParams& params);

enum class ParticleState { kCombusting, kExtinguished, kPartial, kUnclassifiable };
std::string_view state_name(ParticleState state);

using Homography = Eigen::Matrix3d;
Vec2 apply_homography(const Homography& h, const Vec2& p);

// HDR frame context registered onto one event view.
struct HdrPrior {
  const HdrImage* hdr = nullptr;
  const SmokeMap* smoke = nullptr;
  Homography registration = Homography::Identity();  // event pixel -> HDR pixel
  double hdr_median = 0.0;
};

HdrPrior make_hdr_prior(const HdrImage& hdr, const SmokeMap& smoke, const Homography& registration);

// HDR and smoke statistics under a cluster's registered footprint.
struct Footprint {
  bool in_bounds = false;
  double radius = 0.0;     // HDR pixels
  double core_mean = 0.0;  // mean HDR inside the footprint
  double core_peak = 0.0;
  double ring_mean = 0.0;  // mean HDR of the surrounding annulus
  double mean_f = 0.0;     // mean smoke likelihood inside the footprint
  double frame_median = 0.0;
};

Footprint sample_footprint(std::span<const Event> cluster, const HdrPrior& prior);

struct ClassifyParams {
  double positive_fraction = 0.8;  // theta_pos
  double bright_ratio = 1.5;       // core/ring for a bright footprint
  double dark_contrast = 0.15;     // (ring-core)/ring for a dark, high-contrast footprint
  double interior_fraction = 0.2;  // max share of events in the inner half radius for "edge"
};

double positive_fraction(std::span<const Event> cluster);
// Share of events closer to the centroid than half the footprint radius.
double interior_fraction(std::span<const Event> cluster);

ParticleState classify_state(std::span<const Event> cluster, const HdrPrior& prior,
                             const ClassifyParams& params = {});

struct GateParams {
  double visibility = 1.0;     // theta_vis on mean F
  double signature_contrast = 0.15;
};

bool particle_signature(const Footprint& fp, const GateParams& params);
bool hdr_gate(std::span<const Event> cluster, const HdrPrior& prior, const GateParams& params);

std::vector<Event> select_geometry_events(std::span<const Event> cluster, ParticleState state);

struct Compensation {
  std::vector<Vec2> points;  // compensated coordinates
  std::optional<Vec2> velocity;  // px/us; empty when a half-window is under-populated
};

std::vector<Vec2> apply_warp(std::span<const Event> events, const Vec2& velocity, double t0);
std::vector<Vec2> apply_warp(std::span<const Vec2> points, std::span<const double> times,
                             const Vec2& velocity, double t0);

Compensation motion_compensate(std::span<const Event> events, double t0, double dt);

struct Contour {
  Polygon polygon;
  Vec2 centroid = Vec2::Zero();
  double pixel_area = 0.0;
  bool convex_fallback = false;
};

struct ContourParams {
  double alpha = 4.0;  // px
};

Contour contour_extract(std::span<const Vec2> points, const ContourParams& params = {});

struct ParticleObservation {
  View view = View::kLeft;
  double t0 = 0.0;
  double t1 = 0.0;
  double t_ref = 0.0;  // instant the centroid refers to
  ParticleState state = ParticleState::kUnclassifiable;
  std::vector<Vec2> points;
  Vec2 velocity = Vec2::Zero();
  bool velocity_known = false;
  Contour contour;
  bool eccentric = false;
  std::size_t cluster_events = 0;
};

struct ExtractParams {
  ClusterParams cluster;
  ClassifyParams classify;
  GateParams gate;
  ContourParams contour;
  double window_us = 1000.0;
  double eccentricity_limit = 3.0;  // principal-axis ratio flagged as merged particles
};

struct ExtractCounts {
  std::size_t events_in = 0;
  std::size_t events_clustered = 0;
  std::size_t events_gated = 0;
  std::size_t clusters = 0;
  std::size_t clusters_gated = 0;
  std::size_t observations = 0;
  std::size_t degenerate = 0;
  std::size_t unclassifiable = 0;
};

struct ExtractResult {
  std::vector<ParticleObservation> observations;
  ExtractCounts counts;
};

ExtractResult extract_observations(const EventStream& stream, const HdrPrior& prior,
                                   const ExtractParams& params = {});

}  // namespace evsve
