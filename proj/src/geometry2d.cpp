#include "evsve/geometry2d.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <numeric>
#include <utility>

namespace evsve {

double cross2(const Vec2& a, const Vec2& b) noexcept { return a.x() * b.y() - a.y() * b.x(); }

double signed_area(std::span<const Vec2> polygon) {
  const std::size_t n = polygon.size();
  if (n < 3) return 0.0;
  double twice = 0.0;
  for (std::size_t i = 0; i < n; ++i) twice += cross2(polygon[i], polygon[(i + 1) % n]);
  return 0.5 * twice;
}

double polygon_area(std::span<const Vec2> polygon) { return std::abs(signed_area(polygon)); }

bool point_in_polygon(const Vec2& p, std::span<const Vec2> polygon) {
  bool inside = false;
  const std::size_t n = polygon.size();
  for (std::size_t i = 0, j = n - 1; i < n; j = i++) {
    const Vec2& a = polygon[i];
    const Vec2& b = polygon[j];
    if ((a.y() > p.y()) != (b.y() > p.y())) {
      const double x = a.x() + (p.y() - a.y()) * (b.x() - a.x()) / (b.y() - a.y());
      if (p.x() < x) inside = !inside;
    }
  }
  return inside;
}

namespace {

int orientation(const Vec2& a, const Vec2& b, const Vec2& c) {
  const double v = cross2(b - a, c - a);
  return (v > 0) - (v < 0);
}

bool on_segment(const Vec2& a, const Vec2& b, const Vec2& p) {
  return std::min(a.x(), b.x()) <= p.x() && p.x() <= std::max(a.x(), b.x()) &&
         std::min(a.y(), b.y()) <= p.y() && p.y() <= std::max(a.y(), b.y());
}

bool segments_intersect(const Vec2& p1, const Vec2& p2, const Vec2& q1, const Vec2& q2) {
  const int o1 = orientation(p1, p2, q1);
  const int o2 = orientation(p1, p2, q2);
  const int o3 = orientation(q1, q2, p1);
  const int o4 = orientation(q1, q2, p2);
  if (o1 != o2 && o3 != o4) return true;
  if (o1 == 0 && on_segment(p1, p2, q1)) return true;
  if (o2 == 0 && on_segment(p1, p2, q2)) return true;
  if (o3 == 0 && on_segment(q1, q2, p1)) return true;
  if (o4 == 0 && on_segment(q1, q2, p2)) return true;
  return false;
}

}  // namespace

bool is_simple_polygon(std::span<const Vec2> polygon) {
  const std::size_t n = polygon.size();
  if (n < 3) return false;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      const bool adjacent = j == i + 1 || (i == 0 && j == n - 1);
      if (adjacent) {
        if (polygon[i] == polygon[j]) return false;
        continue;
      }
      if (segments_intersect(polygon[i], polygon[(i + 1) % n], polygon[j], polygon[(j + 1) % n])) {
        return false;
      }
    }
  }
  return true;
}

Polygon convex_hull(std::vector<Vec2> points) {
  std::sort(points.begin(), points.end(), [](const Vec2& a, const Vec2& b) {
    return a.x() < b.x() || (a.x() == b.x() && a.y() < b.y());
  });
  points.erase(std::unique(points.begin(), points.end()), points.end());
  if (points.size() < 3) return points;
  Polygon hull(2 * points.size());
  std::size_t k = 0;
  for (const Vec2& p : points) {
    while (k >= 2 && cross2(hull[k - 1] - hull[k - 2], p - hull[k - 2]) <= 0) --k;
    hull[k++] = p;
  }
  for (std::size_t i = points.size() - 1, lower = k + 1; i-- > 0;) {
    const Vec2& p = points[i];
    while (k >= lower && cross2(hull[k - 1] - hull[k - 2], p - hull[k - 2]) <= 0) --k;
    hull[k++] = p;
  }
  hull.resize(k - 1);
  return hull;
}

double circumradius(const Vec2& a, const Vec2& b, const Vec2& c) {
  const double ab = (b - a).norm();
  const double bc = (c - b).norm();
  const double ca = (a - c).norm();
  const double area2 = std::abs(cross2(b - a, c - a));
  if (area2 <= 0.0) return std::numeric_limits<double>::infinity();
  return ab * bc * ca / (2.0 * area2);
}

namespace {

struct Circle {
  Vec2 center;
  double radius_sq;
};

Circle circumcircle(const Vec2& a, const Vec2& b, const Vec2& c) {
  const Vec2 ba = b - a;
  const Vec2 ca = c - a;
  const double d = 2.0 * cross2(ba, ca);
  const double b2 = ba.squaredNorm();
  const double c2 = ca.squaredNorm();
  const Vec2 rel((ca.y() * b2 - ba.y() * c2) / d, (ba.x() * c2 - ca.x() * b2) / d);
  return {a + rel, rel.squaredNorm()};
}

// Deterministic sub-nanopixel offsets that break lattice co-circularity.
Vec2 jitter(std::size_t i, double scale) {
  std::uint64_t h = (i + 1) * 0x9E3779B97F4A7C15ull;
  h ^= h >> 31;
  h *= 0xBF58476D1CE4E5B9ull;
  h ^= h >> 29;
  const double jx = static_cast<double>(h & 0xFFFF) / 65535.0 - 0.5;
  const double jy = static_cast<double>((h >> 16) & 0xFFFF) / 65535.0 - 0.5;
  return Vec2(jx, jy) * scale;
}

}  // namespace

std::vector<Triangle> delaunay(std::span<const Vec2> input) {
  const int n = static_cast<int>(input.size());
  if (n < 3) return {};
  Vec2 lo = input[0];
  Vec2 hi = input[0];
  for (const Vec2& p : input) {
    lo = lo.cwiseMin(p);
    hi = hi.cwiseMax(p);
  }
  const double size = std::max((hi - lo).maxCoeff(), 1.0);
  const Vec2 mid = 0.5 * (lo + hi);

  std::vector<Vec2> pts;
  pts.reserve(n + 3);
  for (int i = 0; i < n; ++i) pts.push_back(input[i] + jitter(i, 1e-9 * size));
  pts.push_back(mid + Vec2(-100.0 * size, -100.0 * size));
  pts.push_back(mid + Vec2(100.0 * size, -100.0 * size));
  pts.push_back(mid + Vec2(0.0, 100.0 * size));

  struct Tri {
    int a, b, c;
    Circle circle;
  };
  std::vector<Tri> tris;
  tris.push_back({n, n + 1, n + 2, circumcircle(pts[n], pts[n + 1], pts[n + 2])});

  std::vector<std::pair<int, int>> edges;
  std::vector<Tri> kept;
  for (int i = 0; i < n; ++i) {
    const Vec2& p = pts[i];
    edges.clear();
    kept.clear();
    for (const Tri& t : tris) {
      if ((p - t.circle.center).squaredNorm() < t.circle.radius_sq) {
        edges.emplace_back(t.a, t.b);
        edges.emplace_back(t.b, t.c);
        edges.emplace_back(t.c, t.a);
      } else {
        kept.push_back(t);
      }
    }
    // Cavity boundary: directed edges whose reverse is absent.
    std::map<std::pair<int, int>, int> count;
    for (const auto& [a, b] : edges) count[{std::min(a, b), std::max(a, b)}]++;
    for (const auto& [a, b] : edges) {
      if (count[{std::min(a, b), std::max(a, b)}] != 1) continue;
      kept.push_back({a, b, i, circumcircle(pts[a], pts[b], pts[i])});
    }
    tris.swap(kept);
  }

  std::vector<Triangle> out;
  for (const Tri& t : tris) {
    if (t.a >= n || t.b >= n || t.c >= n) continue;
    Triangle tri{t.a, t.b, t.c};
    if (cross2(input[t.b] - input[t.a], input[t.c] - input[t.a]) < 0) std::swap(tri.b, tri.c);
    out.push_back(tri);
  }
  return out;
}

namespace {

int find_root(std::vector<int>& parent, int i) {
  while (parent[i] != i) {
    parent[i] = parent[parent[i]];
    i = parent[i];
  }
  return i;
}

}  // namespace

Polygon alpha_shape_outline(std::span<const Vec2> points, double alpha) {
  const auto all = delaunay(points);
  std::vector<Triangle> tris;
  for (const Triangle& t : all) {
    if (circumradius(points[t.a], points[t.b], points[t.c]) <= alpha) tris.push_back(t);
  }
  if (tris.empty()) return {};

  // Connectivity of the complex through shared edges.
  std::map<std::pair<int, int>, std::vector<int>> edge_tris;
  for (int i = 0; i < static_cast<int>(tris.size()); ++i) {
    const Triangle& t = tris[i];
    for (auto [a, b] : {std::pair{t.a, t.b}, std::pair{t.b, t.c}, std::pair{t.c, t.a}}) {
      edge_tris[{std::min(a, b), std::max(a, b)}].push_back(i);
    }
  }
  std::vector<int> parent(tris.size());
  std::iota(parent.begin(), parent.end(), 0);
  for (const auto& [edge, owners] : edge_tris) {
    for (std::size_t j = 1; j < owners.size(); ++j) {
      parent[find_root(parent, owners[j])] = find_root(parent, owners[0]);
    }
  }
  const int root = find_root(parent, 0);
  for (int i = 1; i < static_cast<int>(tris.size()); ++i) {
    if (find_root(parent, i) != root) return {};
  }

  std::map<int, std::vector<int>> next;
  for (const Triangle& t : tris) {
    for (auto [a, b] : {std::pair{t.a, t.b}, std::pair{t.b, t.c}, std::pair{t.c, t.a}}) {
      if (edge_tris[{std::min(a, b), std::max(a, b)}].size() == 1) next[a].push_back(b);
    }
  }
  for (const auto& [v, outs] : next) {
    if (outs.size() != 1) return {};  // pinched outline
  }

  Polygon best;
  double best_area = 0.0;
  std::map<int, bool> visited;
  for (const auto& [start, outs] : next) {
    if (visited[start]) continue;
    Polygon loop;
    int v = start;
    while (!visited[v]) {
      visited[v] = true;
      loop.push_back(points[v]);
      v = next[v].front();
    }
    const double a = signed_area(loop);
    if (a > best_area) {
      best_area = a;
      best = std::move(loop);
    }
  }
  return best;
}

}  // namespace evsve
