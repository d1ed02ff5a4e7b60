#include "mendkit/geometry.hpp"

#include <algorithm>
#include <numeric>
#include <unordered_map>

namespace mendkit {

void TriangleMesh::validate() const {
    for (const Vec3& v : vertices)
        if (!v.finite())
            throw GeometryError("mesh has non-finite vertex coordinates");
    for (const auto& t : triangles)
        for (std::uint32_t idx : t)
            if (idx >= vertices.size())
                throw GeometryError("mesh triangle index out of range");
}

Aabb bounding_box(const TriangleMesh& mesh) {
    Aabb box;
    for (const Vec3& v : mesh.vertices)
        box.extend(v);
    return box;
}

Aabb bounding_box(const PointCloud& points) {
    Aabb box;
    for (const Vec3& p : points)
        box.extend(p);
    return box;
}

double triangle_area(const Vec3& a, const Vec3& b, const Vec3& c) {
    return 0.5 * (b - a).cross(c - a).norm();
}

double surface_area(const TriangleMesh& mesh) {
    double total = 0.0;
    for (const auto& t : mesh.triangles)
        total += triangle_area(mesh.vertices[t[0]], mesh.vertices[t[1]], mesh.vertices[t[2]]);
    return total;
}

bool is_watertight(const TriangleMesh& mesh) {
    if (mesh.triangles.empty())
        return false;
    std::unordered_map<std::uint64_t, int> edge_count;
    edge_count.reserve(mesh.triangles.size() * 3);
    for (const auto& t : mesh.triangles) {
        for (int e = 0; e < 3; ++e) {
            std::uint64_t a = t[e], b = t[(e + 1) % 3];
            if (a == b)
                return false; // degenerate edge
            std::uint64_t key = (std::min(a, b) << 32) | std::max(a, b);
            ++edge_count[key];
        }
    }
    for (const auto& [key, count] : edge_count)
        if (count != 2)
            return false;
    return true;
}

TriangleMesh normalize_unit_cube(const TriangleMesh& mesh, double margin) {
    if (!(margin >= 0.0 && margin < 0.5))
        throw ParameterError("normalize_unit_cube: margin must lie in [0, 0.5)");
    if (mesh.vertices.empty())
        throw GeometryError("normalize_unit_cube: empty mesh");
    Aabb box = bounding_box(mesh);
    Vec3 ext = box.extent();
    double longest = std::max({ext.x, ext.y, ext.z});
    if (!(longest > 0.0))
        throw GeometryError("normalize_unit_cube: degenerate bounding box");
    double span = 1.0 - 2.0 * margin;
    double scale = span / longest;
    // center the shorter axes inside the span
    Vec3 offset{margin + 0.5 * (span - ext.x * scale), margin + 0.5 * (span - ext.y * scale),
                margin + 0.5 * (span - ext.z * scale)};
    TriangleMesh out = mesh;
    for (Vec3& v : out.vertices)
        v = Vec3{(v.x - box.lo.x) * scale + offset.x, (v.y - box.lo.y) * scale + offset.y,
                 (v.z - box.lo.z) * scale + offset.z};
    return out;
}

PointCloud surface_sample(const TriangleMesh& mesh, std::size_t n, CounterRng& rng) {
    if (n < 1)
        throw ParameterError("surface_sample: n must be positive");
    std::vector<double> cumulative(mesh.triangles.size());
    double total = 0.0;
    for (std::size_t i = 0; i < mesh.triangles.size(); ++i) {
        const auto& t = mesh.triangles[i];
        total += triangle_area(mesh.vertices[t[0]], mesh.vertices[t[1]], mesh.vertices[t[2]]);
        cumulative[i] = total;
    }
    if (!(total > 0.0))
        throw GeometryError("surface_sample: mesh has zero surface area");
    PointCloud points;
    points.reserve(n);
    for (std::size_t s = 0; s < n; ++s) {
        double u = rng.uniform() * total;
        std::size_t i =
            std::upper_bound(cumulative.begin(), cumulative.end(), u) - cumulative.begin();
        if (i >= cumulative.size())
            i = cumulative.size() - 1;
        const auto& t = mesh.triangles[i];
        double su = std::sqrt(rng.uniform());
        double r2 = rng.uniform();
        const Vec3& a = mesh.vertices[t[0]];
        const Vec3& b = mesh.vertices[t[1]];
        const Vec3& c = mesh.vertices[t[2]];
        points.push_back(a * (1.0 - su) + b * (su * (1.0 - r2)) + c * (su * r2));
    }
    return points;
}

VolumeFractionEstimate volume_fraction(const InsideFn& inner, const InsideFn& outer,
                                       std::size_t n, CounterRng& rng) {
    if (n < 10000)
        throw ParameterError("volume_fraction: needs at least 1e4 samples");
    std::size_t outer_hits = 0, inner_hits = 0;
    for (std::size_t i = 0; i < n; ++i) {
        Vec3 p{rng.uniform(), rng.uniform(), rng.uniform()};
        if (outer(p)) {
            ++outer_hits;
            if (inner(p))
                ++inner_hits;
        }
    }
    if (outer_hits == 0)
        throw GeometryError("volume_fraction: outer region has zero measured volume");
    VolumeFractionEstimate est;
    est.outer_hits = outer_hits;
    est.fraction = static_cast<double>(inner_hits) / static_cast<double>(outer_hits);
    est.standard_error =
        std::sqrt(std::max(0.0, est.fraction * (1.0 - est.fraction)) / outer_hits);
    return est;
}

// ---------------------------------------------------------------------------
// KdTree3
// ---------------------------------------------------------------------------

KdTree3::KdTree3(PointCloud points) : points_(std::move(points)) {
    if (points_.empty())
        throw ParameterError("KdTree3: empty point cloud");
    nodes_.reserve(points_.size() / 4 + 8);
    root_ = build(0, static_cast<std::uint32_t>(points_.size()));
}

std::int32_t KdTree3::build(std::uint32_t begin, std::uint32_t end) {
    Node node;
    for (std::uint32_t i = begin; i < end; ++i)
        node.box.extend(points_[i]);
    constexpr std::uint32_t kLeafSize = 16;
    if (end - begin <= kLeafSize) {
        node.begin = begin;
        node.end = end;
        nodes_.push_back(node);
        return static_cast<std::int32_t>(nodes_.size() - 1);
    }
    Vec3 ext = node.box.extent();
    int axis = 0;
    if (ext.y > ext.x)
        axis = 1;
    if (ext.z > ext[axis])
        axis = 2;
    std::uint32_t mid = (begin + end) / 2;
    std::nth_element(points_.begin() + begin, points_.begin() + mid, points_.begin() + end,
                     [axis](const Vec3& a, const Vec3& b) { return a[axis] < b[axis]; });
    std::int32_t self = static_cast<std::int32_t>(nodes_.size());
    nodes_.push_back(node);
    std::int32_t left = build(begin, mid);
    std::int32_t right = build(mid, end);
    nodes_[self].left = left;
    nodes_[self].right = right;
    return self;
}

namespace {

inline double point_box_dist_sq(const Vec3& p, const Aabb& box) {
    double d = 0.0;
    for (int a = 0; a < 3; ++a) {
        double v = p[a];
        double lo = box.lo[a], hi = box.hi[a];
        if (v < lo)
            d += (lo - v) * (lo - v);
        else if (v > hi)
            d += (v - hi) * (v - hi);
    }
    return d;
}

} // namespace

void KdTree3::search(std::int32_t id, const Vec3& q, double& best) const {
    const Node& node = nodes_[id];
    if (point_box_dist_sq(q, node.box) >= best)
        return;
    if (node.end > node.begin) {
        for (std::uint32_t i = node.begin; i < node.end; ++i) {
            double d = (points_[i] - q).norm2();
            if (d < best)
                best = d;
        }
        return;
    }
    // visit closer child first
    double dl = point_box_dist_sq(q, nodes_[node.left].box);
    double dr = point_box_dist_sq(q, nodes_[node.right].box);
    if (dl <= dr) {
        search(node.left, q, best);
        search(node.right, q, best);
    } else {
        search(node.right, q, best);
        search(node.left, q, best);
    }
}

double KdTree3::nearest_sq(const Vec3& q) const {
    double best = std::numeric_limits<double>::infinity();
    search(root_, q, best);
    return best;
}

double chamfer_distance(const PointCloud& x, const PointCloud& y) {
    if (x.empty() || y.empty())
        throw ParameterError("chamfer_distance: point clouds must be non-empty");
    KdTree3 tx(x), ty(y);
    double sum_x = 0.0;
    for (const Vec3& p : x)
        sum_x += ty.nearest_sq(p);
    double sum_y = 0.0;
    for (const Vec3& p : y)
        sum_y += tx.nearest_sq(p);
    return sum_x / static_cast<double>(x.size()) + sum_y / static_cast<double>(y.size());
}

// ---------------------------------------------------------------------------
// VoxelGrid
// ---------------------------------------------------------------------------

VoxelGrid VoxelGrid::over_unit_cube(std::size_t n) {
    if (n < 2)
        throw ParameterError("VoxelGrid: resolution must be at least 2");
    VoxelGrid g;
    g.n = n;
    g.origin = Vec3{0, 0, 0};
    g.spacing = 1.0 / static_cast<double>(n - 1);
    g.values.assign(n * n * n, 0.0f);
    return g;
}

void VoxelGrid::fill(const std::function<double(const Vec3&)>& field) {
    for (std::size_t k = 0; k < n; ++k)
        for (std::size_t j = 0; j < n; ++j)
            for (std::size_t i = 0; i < n; ++i)
                at(i, j, k) = static_cast<float>(field(position(i, j, k)));
}

} // namespace mendkit
