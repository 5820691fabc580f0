#pragma once

// 2D primitives for the highway world: oriented rectangles, the separating
// axis overlap test, and ray/rectangle boundary intersection via slabs in the
// rectangle's local frame.

#include <cmath>
#include <limits>
#include <optional>

namespace rarecast::geom {

struct Vec2 {
    double x = 0.0;
    double y = 0.0;
};

inline double dot(Vec2 a, Vec2 b) { return a.x * b.x + a.y * b.y; }

struct OrientedRect {
    double cx = 0.0;
    double cy = 0.0;
    double half_len = 1.0;  // along the heading axis
    double half_wid = 0.5;
    double cos_h = 1.0;
    double sin_h = 0.0;

    static OrientedRect from_pose(double cx, double cy, double heading, double length,
                                  double width) {
        return {cx, cy, 0.5 * length, 0.5 * width, std::cos(heading), std::sin(heading)};
    }
    Vec2 axis_long() const { return {cos_h, sin_h}; }
    Vec2 axis_lat() const { return {-sin_h, cos_h}; }
};

/// Overlap including touching boundaries. Four candidate axes; projections of
/// the center offset against summed extents.
inline bool rects_intersect(const OrientedRect& a, const OrientedRect& b) {
    const Vec2 d{b.cx - a.cx, b.cy - a.cy};
    const Vec2 axes[4] = {a.axis_long(), a.axis_lat(), b.axis_long(), b.axis_lat()};
    for (const Vec2& ax : axes) {
        const double dist = std::abs(dot(d, ax));
        const double ra = a.half_len * std::abs(dot(a.axis_long(), ax)) +
                          a.half_wid * std::abs(dot(a.axis_lat(), ax));
        const double rb = b.half_len * std::abs(dot(b.axis_long(), ax)) +
                          b.half_wid * std::abs(dot(b.axis_lat(), ax));
        if (dist > ra + rb) return false;
    }
    return true;
}

/// Distance along the unit ray (origin, dir) to the rectangle boundary, or
/// nothing for a miss. An origin inside the rectangle hits the boundary on
/// the way out.
inline std::optional<double> ray_rect_boundary(Vec2 origin, Vec2 dir, const OrientedRect& r) {
    // into the rectangle frame
    const Vec2 rel{origin.x - r.cx, origin.y - r.cy};
    const double px = dot(rel, r.axis_long());
    const double py = dot(rel, r.axis_lat());
    const double dx = dot(dir, r.axis_long());
    const double dy = dot(dir, r.axis_lat());

    double tmin = -std::numeric_limits<double>::infinity();
    double tmax = std::numeric_limits<double>::infinity();
    const double p[2] = {px, py};
    const double d[2] = {dx, dy};
    const double half[2] = {r.half_len, r.half_wid};
    for (int i = 0; i < 2; ++i) {
        if (std::abs(d[i]) < 1e-300) {
            if (std::abs(p[i]) > half[i]) return std::nullopt;
            continue;
        }
        double t1 = (-half[i] - p[i]) / d[i];
        double t2 = (half[i] - p[i]) / d[i];
        if (t1 > t2) std::swap(t1, t2);
        tmin = std::max(tmin, t1);
        tmax = std::min(tmax, t2);
        if (tmin > tmax) return std::nullopt;
    }
    if (tmax < 0.0) return std::nullopt;
    return tmin > 0.0 ? tmin : tmax;
}

}  // namespace rarecast::geom
