#pragma once

#include <span>
#include <vector>

#include <Eigen/Core>

namespace evsve {

using Vec2 = Eigen::Vector2d;
using Polygon = std::vector<Vec2>;

double cross2(const Vec2& a, const Vec2& b) noexcept;

// Signed shoelace area; positive for counter-clockwise vertex order.
double signed_area(std::span<const Vec2> polygon);
double polygon_area(std::span<const Vec2> polygon);
bool point_in_polygon(const Vec2& p, std::span<const Vec2> polygon);
bool is_simple_polygon(std::span<const Vec2> polygon);

// Counter-clockwise convex hull without collinear vertices.
Polygon convex_hull(std::vector<Vec2> points);

struct Triangle {
  int a, b, c;  // counter-clockwise
};

// Delaunay triangulation (Bowyer-Watson) over distinct points.
std::vector<Triangle> delaunay(std::span<const Vec2> points);

double circumradius(const Vec2& a, const Vec2& b, const Vec2& c);

// Outer boundary of the alpha complex (triangles with circumradius <= alpha).
// Empty when the complex is empty, disconnected, or its outline is not simple.
Polygon alpha_shape_outline(std::span<const Vec2> points, double alpha);

}  // namespace evsve
