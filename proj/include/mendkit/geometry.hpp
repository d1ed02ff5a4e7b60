#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <vector>

#include "mendkit/common.hpp"
#include "mendkit/rng.hpp"

namespace mendkit {

struct Vec3 {
    double x = 0.0, y = 0.0, z = 0.0;

    Vec3() = default;
    Vec3(double x_, double y_, double z_) : x(x_), y(y_), z(z_) {}

    Vec3 operator+(const Vec3& o) const { return {x + o.x, y + o.y, z + o.z}; }
    Vec3 operator-(const Vec3& o) const { return {x - o.x, y - o.y, z - o.z}; }
    Vec3 operator*(double s) const { return {x * s, y * s, z * s}; }
    Vec3 operator/(double s) const { return {x / s, y / s, z / s}; }
    Vec3& operator+=(const Vec3& o) {
        x += o.x;
        y += o.y;
        z += o.z;
        return *this;
    }
    double operator[](int i) const { return i == 0 ? x : (i == 1 ? y : z); }

    double dot(const Vec3& o) const { return x * o.x + y * o.y + z * o.z; }
    Vec3 cross(const Vec3& o) const {
        return {y * o.z - z * o.y, z * o.x - x * o.z, x * o.y - y * o.x};
    }
    double norm2() const { return dot(*this); }
    double norm() const { return std::sqrt(norm2()); }
    Vec3 normalized() const {
        double n = norm();
        return n > 0 ? *this / n : Vec3{0, 0, 1};
    }
    bool finite() const {
        return std::isfinite(x) && std::isfinite(y) && std::isfinite(z);
    }
};

inline Vec3 operator*(double s, const Vec3& v) { return v * s; }

using PointCloud = std::vector<Vec3>;

struct Aabb {
    Vec3 lo{1e300, 1e300, 1e300};
    Vec3 hi{-1e300, -1e300, -1e300};

    void extend(const Vec3& p) {
        lo = {std::min(lo.x, p.x), std::min(lo.y, p.y), std::min(lo.z, p.z)};
        hi = {std::max(hi.x, p.x), std::max(hi.y, p.y), std::max(hi.z, p.z)};
    }
    void extend(const Aabb& b) {
        extend(b.lo);
        extend(b.hi);
    }
    Vec3 extent() const { return hi - lo; }
    Vec3 center() const { return (lo + hi) * 0.5; }
    bool contains(const Vec3& p, double pad = 0.0) const {
        return p.x >= lo.x - pad && p.x <= hi.x + pad && p.y >= lo.y - pad &&
               p.y <= hi.y + pad && p.z >= lo.z - pad && p.z <= hi.z + pad;
    }
};

// Indexed triangle surface in unit-cube coordinates.
struct TriangleMesh {
    std::vector<Vec3> vertices;
    std::vector<std::array<std::uint32_t, 3>> triangles;

    bool empty() const { return triangles.empty(); }
    // Throws GeometryError on out-of-range indices or non-finite coordinates.
    void validate() const;
};

Aabb bounding_box(const TriangleMesh& mesh);
Aabb bounding_box(const PointCloud& points);

double triangle_area(const Vec3& a, const Vec3& b, const Vec3& c);
double surface_area(const TriangleMesh& mesh);

// Every undirected edge shared by exactly two triangles.
bool is_watertight(const TriangleMesh& mesh);

// Uniform scale + translation so the bounding box fits [margin, 1-margin]^3
// with the longest axis spanning it exactly; shorter axes are centered.
TriangleMesh normalize_unit_cube(const TriangleMesh& mesh, double margin);

// n area-uniform surface samples (triangle chosen proportional to area,
// barycentric-uniform within).
PointCloud surface_sample(const TriangleMesh& mesh, std::size_t n, CounterRng& rng);

struct VolumeFractionEstimate {
    double fraction = 0.0;
    double standard_error = 0.0;
    std::size_t outer_hits = 0;
};

using InsideFn = std::function<bool(const Vec3&)>;

// Monte Carlo estimate of volume(inner)/volume(outer) over the unit cube;
// intended for inner contained in outer.
VolumeFractionEstimate volume_fraction(const InsideFn& inner, const InsideFn& outer,
                                       std::size_t n, CounterRng& rng);

// Symmetric Chamfer distance: mean squared nearest-neighbor distance in both
// directions. Exact kd-tree search inside.
double chamfer_distance(const PointCloud& x, const PointCloud& y);

// Exact nearest-neighbor structure over 3D points (median-split tree with
// full backtracking, no approximation).
class KdTree3 {
public:
    explicit KdTree3(PointCloud points);
    double nearest_sq(const Vec3& q) const;
    std::size_t size() const { return points_.size(); }

private:
    struct Node {
        Aabb box;
        std::int32_t left = -1;
        std::int32_t right = -1;
        std::uint32_t begin = 0;
        std::uint32_t end = 0; // leaf when end > begin
    };

    std::int32_t build(std::uint32_t begin, std::uint32_t end);
    void search(std::int32_t node, const Vec3& q, double& best) const;

    PointCloud points_;
    std::vector<Node> nodes_;
    std::int32_t root_ = -1;
};

// Regular grid of occupancy values in [0,1]; spacing*(n-1) spans the domain.
struct VoxelGrid {
    std::size_t n = 0;
    Vec3 origin{0, 0, 0};
    double spacing = 0.0;

    std::vector<float> values;

    static VoxelGrid over_unit_cube(std::size_t n);

    float& at(std::size_t i, std::size_t j, std::size_t k) {
        return values[(k * n + j) * n + i];
    }
    float at(std::size_t i, std::size_t j, std::size_t k) const {
        return values[(k * n + j) * n + i];
    }
    Vec3 position(std::size_t i, std::size_t j, std::size_t k) const {
        return origin + Vec3(i * spacing, j * spacing, k * spacing);
    }
    // Fill from a scalar field; field > 0 inside convention is up to caller.
    void fill(const std::function<double(const Vec3&)>& field);
};

// Iso-surface extraction with a 256-entry case table (generated from a
// Freudenthal tetrahedral decomposition, which keeps complementary and
// adjacent cases consistent so the result is watertight whenever the surface
// stays off the grid boundary). Vertices are welded across cells.
TriangleMesh marching_cubes(const VoxelGrid& grid, double iso = 0.5);

} // namespace mendkit
