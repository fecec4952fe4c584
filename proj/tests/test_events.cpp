#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "evsve/events.hpp"
#include "evsve/io.hpp"
#include "test_support.hpp"

namespace evsve {
namespace {

std::vector<Event> random_events(std::size_t n, std::mt19937_64& rng, int w = 640, int h = 480) {
  std::uniform_int_distribution<int> du(0, w - 1), dv(0, h - 1), dt(0, 50);
  std::bernoulli_distribution pos(0.6);
  std::vector<Event> ev;
  std::int64_t t = 0;
  for (std::size_t i = 0; i < n; ++i) {
    t += dt(rng);
    ev.push_back({t, du(rng), dv(rng), pos(rng) ? 1 : -1});
  }
  return ev;
}

// Events spread over a disc (or annulus) during [t0, t0 + duration).
std::vector<Event> blob(std::mt19937_64& rng, double cx, double cy, double r_in, double r_out,
                        int n, double positive, std::int64_t t0 = 0, std::int64_t duration = 1000) {
  std::uniform_real_distribution<double> ang(0, 2 * M_PI), rad(r_in, r_out), u01(0, 1);
  std::uniform_int_distribution<std::int64_t> dt(0, duration - 1);
  std::vector<Event> ev;
  for (int i = 0; i < n; ++i) {
    const double a = ang(rng), r = rad(rng);
    ev.push_back({t0 + dt(rng), static_cast<int>(std::lround(cx + r * std::cos(a))),
                  static_cast<int>(std::lround(cy + r * std::sin(a))), u01(rng) < positive ? 1 : -1});
  }
  std::sort(ev.begin(), ev.end(), [](const Event& a, const Event& b) { return a.t_us < b.t_us; });
  return ev;
}

double spatial_variance(std::span<const Vec2> pts) {
  Vec2 m = Vec2::Zero();
  for (const Vec2& p : pts) m += p;
  m /= static_cast<double>(pts.size());
  double s = 0;
  for (const Vec2& p : pts) s += (p - m).squaredNorm();
  return s / static_cast<double>(pts.size());
}

// Priors built directly: HDR values and an F map.
struct Scene2d {
  HdrImage hdr;
  SmokeMap smoke;
  HdrPrior prior;

  Scene2d(int w, int h, double background, double f) {
    hdr.values = ImageD(w, h, background);
    smoke.f = ImageD(w, h, f);
    smoke.labels = LabelImage(w, h, 1);
    refresh();
  }
  void disc(double cx, double cy, double r, double value) {
    for (int y = 0; y < hdr.values.height(); ++y)
      for (int x = 0; x < hdr.values.width(); ++x)
        if (std::hypot(x - cx, y - cy) <= r) hdr.values(x, y) = value;
    refresh();
  }
  void refresh(const Homography& reg = Homography::Identity()) { prior = make_hdr_prior(hdr, smoke, reg); }
};

// ---- codecs and streams ----

TEST(EventCodec, CsvRecord) {
  const auto ev = parse_event_csv("5,10,20,1");
  ASSERT_EQ(ev.size(), 1u);
  EXPECT_EQ(ev[0], (Event{5, 10, 20, 1}));
  EXPECT_EQ(parse_event_csv("t_us,u,v,p\n7,1,2,-1\n").at(0), (Event{7, 1, 2, -1}));
}

TEST(EventCodec, EmptyInputs) {
  EXPECT_TRUE(parse_event_csv("").empty());
  EXPECT_TRUE(parse_event_csv("t_us,u,v,p\n").empty());
  const auto bin = format_event_binary({});
  EXPECT_EQ(bin.size(), 8u);
  EXPECT_TRUE(parse_event_binary(bin).empty());
  const auto dir = testing::scratch_dir("empty_events");
  write_text(dir / "e.csv", "");
  const EventStream s = load_stream(dir / "e.csv", View::kLeft);
  EXPECT_TRUE(s.events.empty());
  fs::remove_all(dir);
}

TEST(EventCodec, BinaryLayout) {
  const std::vector<Event> ev{{0x01020304, 0x0506, 0x0708, -1}};
  const auto bytes = format_event_binary(ev);
  const std::vector<std::uint8_t> want{'E', 'V', 'T', '1', 1, 0, 0, 0, 4, 3, 2, 1, 6, 5, 8, 7, 0xFF};
  EXPECT_EQ(bytes, want);
}

TEST(EventCodec, TenThousandEventRoundTrip) {
  std::mt19937_64 rng(41);
  const auto ev = random_events(10000, rng);
  EXPECT_EQ(parse_event_binary(format_event_binary(ev)), ev);
  EXPECT_EQ(parse_event_csv(format_event_csv(ev)), ev);

  const auto dir = testing::scratch_dir("codec");
  EventStream s;
  s.events = ev;
  save_stream_csv(dir / "a.csv", s);
  save_stream_binary(dir / "a.evt", s);
  const EventStream a = load_stream(dir / "a.csv", View::kRight, 640, 480);
  const EventStream b = load_stream(dir / "a.evt", View::kRight, 640, 480);
  EXPECT_EQ(a.events, ev);
  EXPECT_EQ(b.events, ev);
  EXPECT_TRUE(a.warnings.empty());
  fs::remove_all(dir);
}

TEST(EventCodec, ParseErrorsCarryByteOffsets) {
  const std::string text = "t_us,u,v,p\n1,2,3,1\n4,x,6,1\n";
  try {
    parse_event_csv(text);
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_EQ(e.byte_offset(), 21u);  // the 'x'
  }
  EXPECT_THROW(parse_event_csv("1,2,3\n"), ParseError);
  EXPECT_THROW(parse_event_csv("1,2,3,4,5\n"), ParseError);
  EXPECT_THROW(parse_event_csv("1,2,3,2\n"), ParseError);
  auto bytes = format_event_binary(std::vector<Event>{{1, 2, 3, 1}});
  bytes.pop_back();
  EXPECT_THROW(parse_event_binary(bytes), ParseError);
  bytes[0] = 'X';
  EXPECT_THROW(parse_event_binary(bytes), ParseError);
}

TEST(EventStream, TriggerRebasesAndDropsPreTrigger) {
  const std::vector<Event> raw{{100, 1, 1, 1}, {500, 0, 0, 0}, {520, 2, 2, -1}, {900, 3, 3, 1}};
  const EventStream s = make_stream(raw, View::kLeft, 10, 10);
  ASSERT_EQ(s.events.size(), 2u);
  EXPECT_EQ(s.events[0], (Event{20, 2, 2, -1}));
  EXPECT_EQ(s.events[1], (Event{400, 3, 3, 1}));
  ASSERT_EQ(s.warnings.size(), 1u);
}

TEST(EventStream, UnsortedInputIsSortedWithWarning) {
  const EventStream s = make_stream({{30, 1, 1, 1}, {10, 2, 2, 1}, {20, 3, 3, -1}}, View::kLeft, 0, 0);
  EXPECT_TRUE(std::is_sorted(s.events.begin(), s.events.end(),
                             [](const Event& a, const Event& b) { return a.t_us < b.t_us; }));
  ASSERT_EQ(s.warnings.size(), 1u);
  EXPECT_NE(s.warnings[0].find("re-sorted"), std::string::npos);
}

TEST(EventStream, BoundsAndSyncOffset) {
  EXPECT_THROW(make_stream({{1, 10, 1, 1}}, View::kLeft, 10, 10), InputError);
  EXPECT_NO_THROW(make_stream({{1, 9, 9, 1}}, View::kLeft, 10, 10, 12.0));
  EXPECT_THROW(make_stream({{1, 9, 9, 1}}, View::kLeft, 10, 10, 12.5), InputError);
}

TEST(EventStream, WindowSlicing) {
  const EventStream s = make_stream({{0, 0, 0, 1}, {999, 0, 0, 1}, {1000, 0, 0, 1}, {1500, 0, 0, 1}},
                                    View::kLeft, 0, 0);
  EXPECT_EQ(events_in_window(s, 0, 1000).size(), 2u);
  EXPECT_EQ(events_in_window(s, 1000, 2000).size(), 2u);
  EXPECT_EQ(events_in_window(s, 2000, 3000).size(), 0u);
}

// ---- clustering ----

TEST(Clustering, SingleBlob) {
  std::mt19937_64 rng(42);
  const auto ev = blob(rng, 50, 50, 0, 1.5, 100, 1.0);
  const auto clusters = cluster_events(ev, {});
  ASSERT_EQ(clusters.size(), 1u);
  EXPECT_EQ(clusters[0].size(), 100u);
}

TEST(Clustering, TwoSeparatedBlobs) {
  std::mt19937_64 rng(43);
  auto ev = blob(rng, 50, 50, 0, 2, 80, 1.0);
  const auto b = blob(rng, 100, 50, 0, 2, 80, 1.0);
  ev.insert(ev.end(), b.begin(), b.end());
  std::sort(ev.begin(), ev.end(), [](const Event& x, const Event& y) { return x.t_us < y.t_us; });
  ClusterParams p;
  p.spatial_radius = 5.0;
  EXPECT_EQ(cluster_events(ev, p).size(), 2u);
}

TEST(Clustering, SparseNoiseGivesNothing) {
  std::mt19937_64 rng(44);
  const int w = 128, h = 128, n = 200;
  std::uniform_int_distribution<int> du(0, w - 1);
  std::uniform_int_distribution<std::int64_t> dt(0, 999);
  std::vector<Event> ev;
  for (int i = 0; i < n; ++i) ev.push_back({dt(rng), du(rng), du(rng), 1});
  std::sort(ev.begin(), ev.end(), [](const Event& a, const Event& b) { return a.t_us < b.t_us; });
  const ClusterParams p;
  const double rate = n / (static_cast<double>(w) * h * 1e-3);  // events / px / s
  // Expected neighbourhood (self included) sits far below the core threshold.
  ASSERT_LT(p.expected_neighbours(rate) + 1.0, 0.25 * p.min_core);
  EXPECT_TRUE(cluster_events(ev, p).empty());
}

TEST(Clustering, Deterministic) {
  std::mt19937_64 rng(45);
  auto ev = random_events(3000, rng, 64, 64);
  EXPECT_EQ(cluster_events(ev, {}), cluster_events(ev, {}));
}

TEST(Clustering, BadParamsRejected) {
  ClusterParams p;
  p.min_core = 0;
  EXPECT_THROW(cluster_events({}, p), ConfigError);
}

// ---- classification and gating ----

TEST(Classify, BrightPositiveBlobIsCombusting) {
  Scene2d s(64, 64, 10.0, 0.0);
  s.disc(32, 32, 4, 200.0);
  std::mt19937_64 rng(46);
  const auto ev = blob(rng, 32, 32, 0, 3, 100, 0.95);
  EXPECT_EQ(classify_state(ev, s.prior), ParticleState::kCombusting);
}

TEST(Classify, MixedAnnulusOverDarkDiscIsExtinguished) {
  Scene2d s(64, 64, 50.0, 0.0);
  s.disc(32, 32, 5, 2.0);
  std::mt19937_64 rng(47);
  const auto ev = blob(rng, 32, 32, 4.5, 5.5, 120, 0.5);
  EXPECT_EQ(classify_state(ev, s.prior), ParticleState::kExtinguished);
}

TEST(Classify, FilledMixedClusterIsPartial) {
  Scene2d s(64, 64, 50.0, 0.0);
  s.disc(32, 32, 5, 2.0);
  std::mt19937_64 rng(48);
  const auto ev = blob(rng, 32, 32, 0, 5, 120, 0.5);
  EXPECT_EQ(classify_state(ev, s.prior), ParticleState::kPartial);
}

TEST(Classify, OutOfFrameRegistrationIsUnclassifiable) {
  Scene2d s(64, 64, 10.0, 0.0);
  Homography shift = Homography::Identity();
  shift(0, 2) = 1000.0;
  s.refresh(shift);
  std::mt19937_64 rng(49);
  EXPECT_EQ(classify_state(blob(rng, 32, 32, 0, 3, 50, 1.0), s.prior), ParticleState::kUnclassifiable);
  EXPECT_FALSE(hdr_gate(blob(rng, 32, 32, 0, 3, 50, 1.0), s.prior, {}));
}

TEST(Geometry, CombustingKeepsPositiveOnly) {
  std::vector<Event> ev;
  for (int i = 0; i < 60; ++i) ev.push_back({i, i % 7, i % 5, 1});
  for (int i = 0; i < 40; ++i) ev.push_back({i, i % 7, i % 5, -1});
  const auto kept = select_geometry_events(ev, ParticleState::kCombusting);
  EXPECT_EQ(kept.size(), 60u);
  for (const Event& e : kept) EXPECT_EQ(e.p, 1);
  EXPECT_EQ(select_geometry_events(ev, ParticleState::kExtinguished).size(), 100u);
  EXPECT_EQ(select_geometry_events(ev, ParticleState::kPartial).size(), 100u);
  const std::vector<Event> negative(5, Event{0, 1, 1, -1});
  EXPECT_THROW(select_geometry_events(negative, ParticleState::kCombusting), DegenerateObservation);
}

TEST(Gate, RejectsDenseSmokeAcceptsClearBlob) {
  Scene2d s(128, 64, 10.0, 0.0);
  for (int y = 0; y < 64; ++y)
    for (int x = 0; x < 64; ++x) s.smoke.f(x, y) = 0.9;
  s.disc(32, 32, 4, 200.0);
  s.disc(96, 32, 4, 200.0);
  std::mt19937_64 rng(50);
  GateParams g;
  g.visibility = 0.5;
  EXPECT_FALSE(hdr_gate(blob(rng, 32, 32, 0, 3, 60, 1.0), s.prior, g));
  EXPECT_TRUE(hdr_gate(blob(rng, 96, 32, 0, 3, 60, 1.0), s.prior, g));
}

TEST(Gate, FeaturelessFootprintRejected) {
  Scene2d s(64, 64, 10.0, 0.0);
  std::mt19937_64 rng(51);
  EXPECT_FALSE(hdr_gate(blob(rng, 32, 32, 0, 3, 60, 1.0), s.prior, {}));
}

TEST(Gate, AcceptanceMonotoneInVisibility) {
  std::mt19937_64 rng(52);
  Scene2d s(128, 128, 10.0, 0.0);
  const ImageD f = testing::random_image(16, 16, rng, 0.0, 1.0);
  for (int y = 0; y < 128; ++y)
    for (int x = 0; x < 128; ++x) s.smoke.f(x, y) = f(x / 8, y / 8);
  std::uniform_real_distribution<double> pos(12, 116);
  std::vector<std::vector<Event>> clusters;
  for (int i = 0; i < 60; ++i) {
    const double cx = pos(rng), cy = pos(rng);
    if (i % 2) s.disc(cx, cy, 3, 100.0);
    clusters.push_back(blob(rng, cx, cy, 0, 3, 40, 1.0));
  }
  std::vector<bool> prev(clusters.size(), false);
  for (double theta : {0.0, 0.2, 0.4, 0.6, 0.8, 1.0}) {
    GateParams g;
    g.visibility = theta;
    for (std::size_t i = 0; i < clusters.size(); ++i) {
      const bool now = hdr_gate(clusters[i], s.prior, g);
      EXPECT_TRUE(now || !prev[i]) << "cluster " << i << " dropped at theta " << theta;
      prev[i] = now;
    }
  }
}

// ---- motion compensation ----

TEST(MotionCompensation, StationaryClusterUnchanged) {
  std::vector<Event> ev;
  for (int half = 0; half < 2; ++half)
    for (int i = 0; i < 20; ++i) ev.push_back({half * 500 + i * 20, 10 + i % 5, 20 + i / 5, 1});
  const Compensation c = motion_compensate(ev, 0.0, 1000.0);
  ASSERT_TRUE(c.velocity.has_value());
  EXPECT_EQ(*c.velocity, Vec2::Zero());
  for (std::size_t i = 0; i < ev.size(); ++i) EXPECT_EQ(c.points[i], Vec2(ev[i].u, ev[i].v));
}

TEST(MotionCompensation, ExactLinearMotionCollapses) {
  const Vec2 v(0.02, -0.01), p0(100, 200);
  std::vector<Event> ev;
  for (std::int64_t t = 0; t < 1000; t += 100)
    for (int k = 0; k < 3; ++k) {
      const Vec2 p = p0 + v * static_cast<double>(t);
      ev.push_back({t, static_cast<int>(std::lround(p.x())), static_cast<int>(std::lround(p.y())), 1});
    }
  const Compensation c = motion_compensate(ev, 0.0, 1000.0);
  ASSERT_TRUE(c.velocity.has_value());
  EXPECT_NEAR((*c.velocity - v).norm(), 0.0, 1e-15);
  EXPECT_LT(spatial_variance(c.points), 1e-18);
  for (const Vec2& p : c.points) EXPECT_NEAR((p - p0).norm(), 0.0, 1e-9);
}

TEST(MotionCompensation, JitterVarianceDropsBelowTenPercent) {
  std::mt19937_64 rng(53);
  std::normal_distribution<double> jitter(0.0, 0.5);
  std::uniform_int_distribution<std::int64_t> dt(0, 999);
  const Vec2 v(0.03, 0.015), p0(200, 150);
  double raw_sum = 0, comp_sum = 0;
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<Event> ev;
    for (int i = 0; i < 200; ++i) {
      const std::int64_t t = dt(rng);
      const Vec2 p = p0 + v * static_cast<double>(t) + Vec2(jitter(rng), jitter(rng));
      ev.push_back({t, static_cast<int>(std::lround(p.x())), static_cast<int>(std::lround(p.y())), 1});
    }
    std::sort(ev.begin(), ev.end(), [](const Event& a, const Event& b) { return a.t_us < b.t_us; });
    std::vector<Vec2> raw;
    for (const Event& e : ev) raw.emplace_back(e.u, e.v);
    raw_sum += spatial_variance(raw);
    comp_sum += spatial_variance(motion_compensate(ev, 0.0, 1000.0).points);
  }
  EXPECT_LT(comp_sum, 0.1 * raw_sum);
}

TEST(MotionCompensation, SparseHalfSkipsCompensation) {
  const std::vector<Event> ev{{10, 1, 1, 1}, {20, 2, 2, 1}, {30, 3, 3, 1}, {900, 9, 9, 1}};
  const Compensation c = motion_compensate(ev, 0.0, 1000.0);
  EXPECT_FALSE(c.velocity.has_value());
  EXPECT_EQ(c.points.size(), 4u);
}

TEST(MotionCompensation, WarpInverts) {
  std::mt19937_64 rng(54);
  const auto ev = random_events(500, rng);
  std::vector<Vec2> pts;
  std::vector<double> times;
  for (const Event& e : ev) {
    pts.emplace_back(e.u, e.v);
    times.push_back(static_cast<double>(e.t_us));
  }
  const Vec2 v(0.125, -0.0625);
  const auto fwd = apply_warp(pts, times, v, 250.0);
  const auto back = apply_warp(fwd, times, -v, 250.0);
  for (std::size_t i = 0; i < pts.size(); ++i) EXPECT_EQ(back[i], pts[i]);
  EXPECT_EQ(apply_warp(std::span<const Event>(ev), v, 250.0), fwd);
}

// ---- contours ----

TEST(Contour, UnitSquare) {
  const std::vector<Vec2> pts{{0, 0}, {1, 0}, {1, 1}, {0, 1}};
  const Contour c = contour_extract(pts);
  EXPECT_DOUBLE_EQ(c.pixel_area, 1.0);
  EXPECT_DOUBLE_EQ(c.centroid.x(), 0.5);
  EXPECT_DOUBLE_EQ(c.centroid.y(), 0.5);
  EXPECT_EQ(c.polygon.size(), 4u);
}

TEST(Contour, RasterizedDisc) {
  std::vector<Vec2> pts;
  for (int y = -10; y <= 10; ++y)
    for (int x = -10; x <= 10; ++x)
      if (x * x + y * y <= 100) pts.emplace_back(x + 50, y + 40);
  const Contour c = contour_extract(pts);
  EXPECT_NEAR(c.pixel_area, 100 * M_PI, 0.05 * 100 * M_PI);
  EXPECT_NEAR(c.centroid.x(), 50.0, 1e-12);
  EXPECT_NEAR(c.centroid.y(), 40.0, 1e-12);
  EXPECT_TRUE(is_simple_polygon(c.polygon));
}

TEST(Contour, ConcaveShapeFollowsNotch) {
  std::vector<Vec2> pts;
  for (int y = 0; y <= 20; ++y)
    for (int x = 0; x <= 20; ++x)
      if (!(x > 6 && x < 14 && y > 8)) pts.emplace_back(x, y);
  const Contour c = contour_extract(pts);
  EXPECT_FALSE(c.convex_fallback);
  EXPECT_LT(c.pixel_area, polygon_area(convex_hull(pts)) - 40.0);
}

TEST(Contour, DegenerateInputs) {
  EXPECT_THROW(contour_extract(std::vector<Vec2>{{0, 0}, {1, 1}, {2, 2}}), DegenerateObservation);
  EXPECT_THROW(contour_extract(std::vector<Vec2>{{0, 0}, {0, 0}, {1, 1}}), DegenerateObservation);
}

// ---- extraction on a constructed stream ----

TEST(Extract, SingleParticleObservation) {
  Scene2d s(96, 96, 10.0, 0.0);
  s.disc(40, 50, 4, 300.0);
  std::mt19937_64 rng(55);
  auto ev = blob(rng, 40, 50, 0, 3.5, 300, 1.0, 0, 1000);
  std::uniform_int_distribution<int> du(0, 95);
  std::uniform_int_distribution<std::int64_t> dt(0, 999);
  for (int i = 0; i < 30; ++i) ev.push_back({dt(rng), du(rng), du(rng), -1});
  std::sort(ev.begin(), ev.end(), [](const Event& a, const Event& b) { return a.t_us < b.t_us; });
  const EventStream stream = make_stream(ev, View::kLeft, 96, 96);
  const ExtractResult r = extract_observations(stream, s.prior);
  ASSERT_EQ(r.observations.size(), 1u);
  const ParticleObservation& o = r.observations[0];
  EXPECT_EQ(o.state, ParticleState::kCombusting);
  EXPECT_NEAR(o.contour.centroid.x(), 40.0, 0.5);
  EXPECT_NEAR(o.contour.centroid.y(), 50.0, 0.5);
  EXPECT_TRUE(is_simple_polygon(o.contour.polygon));
  EXPECT_EQ(r.counts.events_in, ev.size());
  EXPECT_LE(r.counts.events_gated, r.counts.events_clustered);
  EXPECT_LE(r.counts.events_clustered, r.counts.events_in);
}

}  // namespace
}  // namespace evsve
