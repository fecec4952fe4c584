#include "evsve/events.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <iterator>
#include <numeric>
#include <sstream>
#include <unordered_map>

#include <Eigen/Eigenvalues>

namespace evsve {

std::string_view view_name(View view) { return view == View::kLeft ? "left" : "right"; }

std::string_view state_name(ParticleState state) {
  switch (state) {
    case ParticleState::kCombusting: return "combusting";
    case ParticleState::kExtinguished: return "extinguished";
    case ParticleState::kPartial: return "partial";
    case ParticleState::kUnclassifiable: return "unclassifiable";
  }
  return "unknown";
}

void EventStream::validate() const {
  if (sync_offset_us > kMaxSyncOffsetUs || sync_offset_us < 0.0) {
    throw InputError("stream sync offset exceeds 12 us");
  }
  for (std::size_t i = 0; i < events.size(); ++i) {
    const Event& e = events[i];
    if (e.t_us < 0) throw InvariantError("negative event timestamp at event " + std::to_string(i));
    if (i > 0 && e.t_us < events[i - 1].t_us) {
      throw InvariantError("event timestamps decrease at event " + std::to_string(i));
    }
    if (e.p != 1 && e.p != -1) throw InvariantError("bad polarity at event " + std::to_string(i));
    if (e.u < 0 || e.v < 0 || (width > 0 && e.u >= width) || (height > 0 && e.v >= height)) {
      throw InvariantError("event " + std::to_string(i) + " outside sensor bounds");
    }
  }
}

namespace {

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

std::int64_t parse_int(std::string_view field, std::size_t offset) {
  field = trim(field);
  std::int64_t value = 0;
  const auto [ptr, ec] = std::from_chars(field.data(), field.data() + field.size(), value);
  if (ec != std::errc() || ptr != field.data() + field.size() || field.empty()) {
    throw ParseError("expected an integer, got '" + std::string(field) + "'", offset);
  }
  return value;
}

Event checked_event(std::int64_t t, std::int64_t u, std::int64_t v, std::int64_t p,
                    std::size_t offset) {
  if (t < 0 || t > 0xFFFFFFFFll) throw ParseError("timestamp out of range", offset);
  if (u < 0 || u > 0xFFFF || v < 0 || v > 0xFFFF) throw ParseError("coordinate out of range", offset);
  if (p != 1 && p != -1 && p != 0) throw ParseError("polarity must be 1, -1 or 0", offset);
  return Event{t, static_cast<int>(u), static_cast<int>(v), static_cast<int>(p)};
}

constexpr std::size_t kRecordBytes = 9;

}  // namespace

std::vector<Event> parse_event_csv(std::string_view text) {
  std::vector<Event> events;
  std::size_t pos = 0;
  bool first = true;
  while (pos < text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    const std::string_view line = trim(text.substr(pos, end - pos));
    const std::size_t line_start = pos;
    pos = end + 1;
    if (line.empty()) continue;
    if (first && !line.empty() && (line.front() == 't' || line.front() == 'T')) {
      first = false;
      continue;  // header
    }
    first = false;
    std::int64_t fields[4];
    std::size_t start = 0;
    for (int f = 0; f < 4; ++f) {
      const std::size_t comma = line.find(',', start);
      const bool last = f == 3;
      if (!last && comma == std::string_view::npos) {
        throw ParseError("expected 4 comma-separated fields", line_start);
      }
      if (last && comma != std::string_view::npos) {
        throw ParseError("too many fields", line_start + comma);
      }
      const std::size_t stop = last ? line.size() : comma;
      fields[f] = parse_int(line.substr(start, stop - start), line_start + start);
      start = stop + 1;
    }
    events.push_back(checked_event(fields[0], fields[1], fields[2], fields[3], line_start));
  }
  return events;
}

std::vector<Event> parse_event_binary(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 8) throw ParseError("truncated header", bytes.size());
  if (!(bytes[0] == 'E' && bytes[1] == 'V' && bytes[2] == 'T' && bytes[3] == '1')) {
    throw ParseError("missing EVT1 magic", 0);
  }
  auto u32 = [&](std::size_t at) {
    return static_cast<std::uint32_t>(bytes[at]) | (static_cast<std::uint32_t>(bytes[at + 1]) << 8) |
           (static_cast<std::uint32_t>(bytes[at + 2]) << 16) |
           (static_cast<std::uint32_t>(bytes[at + 3]) << 24);
  };
  auto u16 = [&](std::size_t at) {
    return static_cast<std::uint32_t>(bytes[at]) | (static_cast<std::uint32_t>(bytes[at + 1]) << 8);
  };
  const std::uint32_t count = u32(4);
  const std::size_t expected = 8 + static_cast<std::size_t>(count) * kRecordBytes;
  if (bytes.size() != expected) {
    throw ParseError("record count " + std::to_string(count) + " does not match file size",
                     std::min(bytes.size(), expected));
  }
  std::vector<Event> events;
  events.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t at = 8 + i * kRecordBytes;
    const auto p = static_cast<std::int8_t>(bytes[at + 8]);
    events.push_back(checked_event(u32(at), u16(at + 4), u16(at + 6), p, at));
  }
  return events;
}

std::string format_event_csv(std::span<const Event> events) {
  std::string out = "t_us,u,v,p\n";
  for (const Event& e : events) {
    out += std::to_string(e.t_us);
    out += ',';
    out += std::to_string(e.u);
    out += ',';
    out += std::to_string(e.v);
    out += ',';
    out += std::to_string(e.p);
    out += '\n';
  }
  return out;
}

std::vector<std::uint8_t> format_event_binary(std::span<const Event> events) {
  std::vector<std::uint8_t> out{'E', 'V', 'T', '1'};
  auto put32 = [&](std::uint32_t v) {
    for (int b = 0; b < 4; ++b) out.push_back(static_cast<std::uint8_t>(v >> (8 * b)));
  };
  auto put16 = [&](std::uint32_t v) {
    out.push_back(static_cast<std::uint8_t>(v));
    out.push_back(static_cast<std::uint8_t>(v >> 8));
  };
  put32(static_cast<std::uint32_t>(events.size()));
  for (const Event& e : events) {
    if (e.t_us < 0 || e.t_us > 0xFFFFFFFFll || e.u < 0 || e.u > 0xFFFF || e.v < 0 || e.v > 0xFFFF) {
      throw InputError("event does not fit the binary record layout");
    }
    put32(static_cast<std::uint32_t>(e.t_us));
    put16(static_cast<std::uint32_t>(e.u));
    put16(static_cast<std::uint32_t>(e.v));
    out.push_back(static_cast<std::uint8_t>(static_cast<std::int8_t>(e.p)));
  }
  return out;
}

EventStream make_stream(std::vector<Event> raw, View view, int width, int height,
                        double sync_offset_us) {
  EventStream stream;
  stream.view = view;
  stream.width = width;
  stream.height = height;
  stream.sync_offset_us = sync_offset_us;
  const auto trigger =
      std::find_if(raw.begin(), raw.end(), [](const Event& e) { return e.p == 0; });
  std::int64_t origin = 0;
  if (trigger != raw.end()) origin = trigger->t_us;
  std::size_t dropped = 0;
  for (const Event& e : raw) {
    if (e.p == 0) continue;
    if (e.t_us < origin) {
      ++dropped;
      continue;
    }
    Event shifted = e;
    shifted.t_us -= origin;
    stream.events.push_back(shifted);
  }
  if (dropped > 0) {
    stream.warnings.push_back(std::to_string(dropped) + " events before the trigger dropped");
  }
  const bool sorted = std::is_sorted(
      stream.events.begin(), stream.events.end(),
      [](const Event& a, const Event& b) { return a.t_us < b.t_us; });
  if (!sorted) {
    std::stable_sort(stream.events.begin(), stream.events.end(),
                     [](const Event& a, const Event& b) { return a.t_us < b.t_us; });
    stream.warnings.push_back("timestamps were not monotone; stream re-sorted");
  }
  for (std::size_t i = 0; i < stream.events.size(); ++i) {
    const Event& e = stream.events[i];
    if ((width > 0 && e.u >= width) || (height > 0 && e.v >= height)) {
      throw InputError("event " + std::to_string(i) + " at (" + std::to_string(e.u) + ", " +
                       std::to_string(e.v) + ") lies outside the sensor");
    }
  }
  stream.validate();
  return stream;
}

namespace {

std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_bytes(const std::filesystem::path& path, const void* data, std::size_t size) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write " + path.string());
  out.write(static_cast<const char*>(data), static_cast<std::streamsize>(size));
}

}  // namespace

EventStream load_stream(const std::filesystem::path& path, View view, int width, int height,
                        double sync_offset_us) {
  const auto bytes = read_bytes(path);
  std::vector<Event> raw;
  if (bytes.size() >= 4 && bytes[0] == 'E' && bytes[1] == 'V' && bytes[2] == 'T' && bytes[3] == '1') {
    raw = parse_event_binary(bytes);
  } else {
    raw = parse_event_csv(std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()));
  }
  return make_stream(std::move(raw), view, width, height, sync_offset_us);
}

void save_stream_csv(const std::filesystem::path& path, const EventStream& stream) {
  const std::string text = format_event_csv(stream.events);
  write_bytes(path, text.data(), text.size());
}

void save_stream_binary(const std::filesystem::path& path, const EventStream& stream) {
  const auto bytes = format_event_binary(stream.events);
  write_bytes(path, bytes.data(), bytes.size());
}

std::span<const Event> events_in_window(const EventStream& stream, std::int64_t t0,
                                        std::int64_t t1) {
  auto by_time = [](const Event& e, std::int64_t t) { return e.t_us < t; };
  const auto lo = std::lower_bound(stream.events.begin(), stream.events.end(), t0, by_time);
  const auto hi = std::lower_bound(lo, stream.events.end(), t1, by_time);
  return std::span<const Event>(stream.events)
      .subspan(static_cast<std::size_t>(lo - stream.events.begin()),
               static_cast<std::size_t>(hi - lo));
}

void ClusterParams::validate() const {
  if (!(spatial_radius > 0.0) || !(temporal_radius_us > 0.0) || min_core < 1) {
    throw ConfigError("cluster radii must be positive and min_core >= 1");
  }
}

double ClusterParams::expected_neighbours(double rate_per_px_s) const {
  return rate_per_px_s * 1e-6 * M_PI * spatial_radius * spatial_radius * 2.0 * temporal_radius_us;
}

std::vector<EventCluster> cluster_events(std::span<const Event> events, const ClusterParams& params) {
  params.validate();
  const int n = static_cast<int>(events.size());
  auto cell = [&](double value, double size) { return static_cast<std::int64_t>(std::floor(value / size)); };
  auto key = [](std::int64_t cx, std::int64_t cy, std::int64_t ct) {
    return (cx & 0xFFFFF) | ((cy & 0xFFFFF) << 20) | ((ct & 0xFFFFFF) << 40);
  };
  std::unordered_map<std::int64_t, std::vector<int>> grid;
  for (int i = 0; i < n; ++i) {
    const Event& e = events[i];
    grid[key(cell(e.u, params.spatial_radius), cell(e.v, params.spatial_radius),
             cell(static_cast<double>(e.t_us), params.temporal_radius_us))]
        .push_back(i);
  }
  const double r2 = params.spatial_radius * params.spatial_radius;
  auto neighbours = [&](int i, std::vector<int>& out) {
    out.clear();
    const Event& e = events[i];
    const auto cx = cell(e.u, params.spatial_radius);
    const auto cy = cell(e.v, params.spatial_radius);
    const auto ct = cell(static_cast<double>(e.t_us), params.temporal_radius_us);
    for (std::int64_t dt = -1; dt <= 1; ++dt) {
      for (std::int64_t dy = -1; dy <= 1; ++dy) {
        for (std::int64_t dx = -1; dx <= 1; ++dx) {
          const auto it = grid.find(key(cx + dx, cy + dy, ct + dt));
          if (it == grid.end()) continue;
          for (int j : it->second) {
            const Event& o = events[j];
            const double du = o.u - e.u;
            const double dv = o.v - e.v;
            if (du * du + dv * dv <= r2 &&
                std::abs(static_cast<double>(o.t_us - e.t_us)) <= params.temporal_radius_us) {
              out.push_back(j);
            }
          }
        }
      }
    }
  };

  std::vector<int> count(n);
  std::vector<int> scratch;
  for (int i = 0; i < n; ++i) {
    neighbours(i, scratch);
    count[i] = static_cast<int>(scratch.size());
  }
  std::vector<int> label(n, -1);
  std::vector<EventCluster> clusters;
  std::vector<int> queue;
  for (int i = 0; i < n; ++i) {
    if (label[i] >= 0 || count[i] < params.min_core) continue;
    const int id = static_cast<int>(clusters.size());
    std::vector<int> members;
    queue.assign(1, i);
    label[i] = id;
    while (!queue.empty()) {
      const int j = queue.back();
      queue.pop_back();
      members.push_back(j);
      if (count[j] < params.min_core) continue;  // border event: no expansion
      neighbours(j, scratch);
      for (int k : scratch) {
        if (label[k] >= 0) continue;
        label[k] = id;
        queue.push_back(k);
      }
    }
    std::sort(members.begin(), members.end());
    EventCluster cluster;
    cluster.reserve(members.size());
    for (int j : members) cluster.push_back(events[j]);
    clusters.push_back(std::move(cluster));
  }
  return clusters;
}

Vec2 apply_homography(const Homography& h, const Vec2& p) {
  const Eigen::Vector3d q = h * Eigen::Vector3d(p.x(), p.y(), 1.0);
  return q.head<2>() / q.z();
}

HdrPrior make_hdr_prior(const HdrImage& hdr, const SmokeMap& smoke, const Homography& registration) {
  if (!hdr.values.same_shape(smoke.f)) throw DimensionError("HDR image and smoke map differ");
  HdrPrior prior;
  prior.hdr = &hdr;
  prior.smoke = &smoke;
  prior.registration = registration;
  std::vector<double> px(hdr.values.pixels().begin(), hdr.values.pixels().end());
  if (!px.empty()) {
    auto mid = px.begin() + static_cast<std::ptrdiff_t>(px.size() / 2);
    std::nth_element(px.begin(), mid, px.end());
    prior.hdr_median = *mid;
  }
  return prior;
}

namespace {

struct Spread {
  Vec2 centroid = Vec2::Zero();
  double radius = 0.0;  // 90th percentile distance
  std::vector<double> distances;
};

Spread spread_of(std::span<const Vec2> pts) {
  Spread s;
  if (pts.empty()) return s;
  for (const Vec2& p : pts) s.centroid += p;
  s.centroid /= static_cast<double>(pts.size());
  for (const Vec2& p : pts) s.distances.push_back((p - s.centroid).norm());
  std::vector<double> sorted = s.distances;
  const std::size_t at = std::min(sorted.size() - 1, (sorted.size() * 9) / 10);
  std::nth_element(sorted.begin(), sorted.begin() + static_cast<std::ptrdiff_t>(at), sorted.end());
  s.radius = sorted[at];
  return s;
}

std::vector<Vec2> coordinates(std::span<const Event> events) {
  std::vector<Vec2> pts;
  pts.reserve(events.size());
  for (const Event& e : events) pts.emplace_back(e.u, e.v);
  return pts;
}

}  // namespace

Footprint sample_footprint(std::span<const Event> cluster, const HdrPrior& prior) {
  Footprint fp;
  if (cluster.empty() || prior.hdr == nullptr || prior.smoke == nullptr) return fp;
  const ImageD& hdr = prior.hdr->values;
  const ImageD& f = prior.smoke->f;
  std::vector<Vec2> mapped;
  mapped.reserve(cluster.size());
  for (const Event& e : cluster) {
    mapped.push_back(apply_homography(prior.registration, Vec2(e.u, e.v)));
  }
  const Spread s = spread_of(mapped);
  fp.radius = std::max(s.radius, 1.0);
  fp.frame_median = prior.hdr_median;
  if (!std::isfinite(s.centroid.x()) || !hdr.contains(static_cast<int>(std::round(s.centroid.x())),
                                                      static_cast<int>(std::round(s.centroid.y())))) {
    return fp;
  }
  fp.in_bounds = true;
  const double core_r = std::max(1.0, 0.7 * fp.radius);
  const double ring_in = 1.5 * fp.radius + 1.0;
  const double ring_out = 2.5 * fp.radius + 2.0;
  const int x0 = static_cast<int>(std::floor(s.centroid.x() - ring_out));
  const int x1 = static_cast<int>(std::ceil(s.centroid.x() + ring_out));
  const int y0 = static_cast<int>(std::floor(s.centroid.y() - ring_out));
  const int y1 = static_cast<int>(std::ceil(s.centroid.y() + ring_out));
  double core_sum = 0.0, ring_sum = 0.0, f_sum = 0.0;
  std::size_t core_n = 0, ring_n = 0, f_n = 0;
  for (int y = std::max(y0, 0); y <= std::min(y1, hdr.height() - 1); ++y) {
    for (int x = std::max(x0, 0); x <= std::min(x1, hdr.width() - 1); ++x) {
      const double d = (Vec2(x, y) - s.centroid).norm();
      if (d <= fp.radius) {
        f_sum += f(x, y);
        ++f_n;
      }
      if (d <= core_r) {
        core_sum += hdr(x, y);
        fp.core_peak = std::max(fp.core_peak, hdr(x, y));
        ++core_n;
      } else if (d >= ring_in && d <= ring_out) {
        ring_sum += hdr(x, y);
        ++ring_n;
      }
    }
  }
  fp.core_mean = core_n ? core_sum / static_cast<double>(core_n) : 0.0;
  fp.ring_mean = ring_n ? ring_sum / static_cast<double>(ring_n) : fp.core_mean;
  fp.mean_f = f_n ? f_sum / static_cast<double>(f_n) : 1.0;
  return fp;
}

double positive_fraction(std::span<const Event> cluster) {
  if (cluster.empty()) return 0.0;
  const auto pos = std::count_if(cluster.begin(), cluster.end(), [](const Event& e) { return e.p > 0; });
  return static_cast<double>(pos) / static_cast<double>(cluster.size());
}

double interior_fraction(std::span<const Event> cluster) {
  if (cluster.empty()) return 0.0;
  const auto pts = coordinates(cluster);
  const Spread s = spread_of(pts);
  if (!(s.radius > 0.0)) return 1.0;
  const auto inner = std::count_if(s.distances.begin(), s.distances.end(),
                                   [&](double d) { return d < 0.5 * s.radius; });
  return static_cast<double>(inner) / static_cast<double>(pts.size());
}

ParticleState classify_state(std::span<const Event> cluster, const HdrPrior& prior,
                             const ClassifyParams& params) {
  const Footprint fp = sample_footprint(cluster, prior);
  if (!fp.in_bounds) return ParticleState::kUnclassifiable;
  const double pos = positive_fraction(cluster);
  const bool bright = fp.core_mean >= params.bright_ratio * fp.ring_mean &&
                      fp.core_mean >= fp.frame_median;
  if (pos >= params.positive_fraction && bright) return ParticleState::kCombusting;
  const bool mixed = pos > 1.0 - params.positive_fraction && pos < params.positive_fraction;
  const bool edge = interior_fraction(cluster) <= params.interior_fraction;
  const bool dark = fp.ring_mean > 0.0 &&
                    (fp.ring_mean - fp.core_mean) / fp.ring_mean >= params.dark_contrast;
  if (mixed && edge && dark) return ParticleState::kExtinguished;
  return ParticleState::kPartial;
}

bool particle_signature(const Footprint& fp, const GateParams& params) {
  const double top = std::max(fp.core_mean, fp.ring_mean);
  if (!(top > 0.0)) return false;
  const bool contrast = std::abs(fp.core_mean - fp.ring_mean) / top >= params.signature_contrast;
  const bool local_max = fp.core_peak >= (1.0 + params.signature_contrast) * fp.ring_mean &&
                         fp.core_mean > fp.ring_mean;
  return contrast || local_max;
}

bool hdr_gate(std::span<const Event> cluster, const HdrPrior& prior, const GateParams& params) {
  const Footprint fp = sample_footprint(cluster, prior);
  return fp.in_bounds && fp.mean_f <= params.visibility && particle_signature(fp, params);
}

std::vector<Event> select_geometry_events(std::span<const Event> cluster, ParticleState state) {
  std::vector<Event> out;
  if (state == ParticleState::kCombusting) {
    std::copy_if(cluster.begin(), cluster.end(), std::back_inserter(out),
                 [](const Event& e) { return e.p > 0; });
  } else {
    out.assign(cluster.begin(), cluster.end());
  }
  if (out.empty()) throw DegenerateObservation("no events left for geometry");
  return out;
}

std::vector<Vec2> apply_warp(std::span<const Vec2> points, std::span<const double> times,
                             const Vec2& velocity, double t0) {
  if (points.size() != times.size()) throw InputError("points and times differ in length");
  std::vector<Vec2> out;
  out.reserve(points.size());
  for (std::size_t i = 0; i < points.size(); ++i) {
    out.push_back(points[i] - velocity * (times[i] - t0));
  }
  return out;
}

std::vector<Vec2> apply_warp(std::span<const Event> events, const Vec2& velocity, double t0) {
  std::vector<double> times;
  times.reserve(events.size());
  for (const Event& e : events) times.push_back(static_cast<double>(e.t_us));
  return apply_warp(coordinates(events), times, velocity, t0);
}

Compensation motion_compensate(std::span<const Event> events, double t0, double dt) {
  Compensation out;
  const double split = t0 + 0.5 * dt;
  Vec2 c1 = Vec2::Zero(), c2 = Vec2::Zero();
  double t1 = 0.0, t2 = 0.0;
  std::size_t n1 = 0, n2 = 0;
  for (const Event& e : events) {
    const double t = static_cast<double>(e.t_us);
    if (t < split) {
      c1 += Vec2(e.u, e.v);
      t1 += t;
      ++n1;
    } else {
      c2 += Vec2(e.u, e.v);
      t2 += t;
      ++n2;
    }
  }
  if (n1 < 2 || n2 < 2 || !(t2 / n2 > t1 / n1)) {
    out.points = coordinates(events);
    return out;
  }
  // Displacement between the half-window centroids over their time separation.
  const Vec2 dp = c2 / static_cast<double>(n2) - c1 / static_cast<double>(n1);
  const Vec2 v = dp / (t2 / static_cast<double>(n2) - t1 / static_cast<double>(n1));
  out.velocity = v;
  out.points = apply_warp(events, v, t0);
  return out;
}

Contour contour_extract(std::span<const Vec2> points, const ContourParams& params) {
  std::vector<Vec2> unique(points.begin(), points.end());
  std::sort(unique.begin(), unique.end(), [](const Vec2& a, const Vec2& b) {
    return a.x() < b.x() || (a.x() == b.x() && a.y() < b.y());
  });
  unique.erase(std::unique(unique.begin(), unique.end()), unique.end());
  if (unique.size() < 3) throw DegenerateObservation("fewer than 3 distinct event positions");
  const Polygon hull = convex_hull(unique);
  if (hull.size() < 3 || polygon_area(hull) < 1e-9) {
    throw DegenerateObservation("event positions are collinear");
  }
  Contour c;
  c.polygon = alpha_shape_outline(unique, params.alpha);
  if (c.polygon.size() < 3) {
    c.polygon = hull;
    c.convex_fallback = true;
  }
  for (const Vec2& p : points) c.centroid += p;
  c.centroid /= static_cast<double>(points.size());
  c.pixel_area = polygon_area(c.polygon);
  return c;
}

namespace {

double eccentricity(std::span<const Vec2> pts) {
  if (pts.size() < 3) return 1.0;
  Vec2 mean = Vec2::Zero();
  for (const Vec2& p : pts) mean += p;
  mean /= static_cast<double>(pts.size());
  Eigen::Matrix2d cov = Eigen::Matrix2d::Zero();
  for (const Vec2& p : pts) cov += (p - mean) * (p - mean).transpose();
  Eigen::SelfAdjointEigenSolver<Eigen::Matrix2d> es(cov);
  const double lo = std::max(es.eigenvalues()(0), 1e-12);
  return std::sqrt(es.eigenvalues()(1) / lo);
}

}  // namespace

ExtractResult extract_observations(const EventStream& stream, const HdrPrior& prior,
                                   const ExtractParams& params) {
  if (!(params.window_us > 0.0)) throw ConfigError("window must be positive");
  ExtractResult result;
  if (stream.events.empty()) return result;
  const auto window = static_cast<std::int64_t>(std::llround(params.window_us));
  const std::int64_t last = stream.events.back().t_us;
  for (std::int64_t t0 = 0; t0 <= last; t0 += window) {
    const auto events = events_in_window(stream, t0, t0 + window);
    result.counts.events_in += events.size();
    if (events.empty()) continue;
    for (const EventCluster& cluster : cluster_events(events, params.cluster)) {
      result.counts.clusters++;
      result.counts.events_clustered += cluster.size();
      const ParticleState state = classify_state(cluster, prior, params.classify);
      if (state == ParticleState::kUnclassifiable) {
        result.counts.unclassifiable++;
        continue;
      }
      if (!hdr_gate(cluster, prior, params.gate)) continue;
      result.counts.clusters_gated++;
      result.counts.events_gated += cluster.size();

      ParticleObservation obs;
      obs.view = stream.view;
      obs.t0 = static_cast<double>(t0);
      obs.t1 = static_cast<double>(t0 + window);
      obs.state = state;
      obs.cluster_events = cluster.size();
      try {
        const std::vector<Event> selected = select_geometry_events(cluster, state);
        if (state == ParticleState::kPartial) {
          Compensation comp = motion_compensate(selected, obs.t0, params.window_us);
          obs.points = std::move(comp.points);
          obs.velocity_known = comp.velocity.has_value();
          if (comp.velocity) obs.velocity = *comp.velocity;
        } else {
          obs.points = coordinates(selected);
        }
        if (obs.velocity_known) {
          obs.t_ref = obs.t0;
        } else {
          double sum = 0.0;
          for (const Event& e : selected) sum += static_cast<double>(e.t_us);
          obs.t_ref = sum / static_cast<double>(selected.size());
        }
        obs.contour = contour_extract(obs.points, params.contour);
      } catch (const DegenerateObservation&) {
        result.counts.degenerate++;
        continue;
      }
      obs.eccentric = eccentricity(obs.points) > params.eccentricity_limit;
      result.observations.push_back(std::move(obs));
    }
  }
  result.counts.observations = result.observations.size();
  return result;
}

}  // namespace evsve
