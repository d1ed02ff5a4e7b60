#include "mendkit/occupancy.hpp"

#include <algorithm>
#include <cmath>

namespace mendkit {

namespace {

constexpr double kDetEps = 1e-12;
constexpr double kBaryEps = 1e-9;
constexpr double kTEps = 1e-12;
constexpr int kMaxRecasts = 32;

Vec3 random_direction(CounterRng& rng) {
    Vec3 d{rng.normal(), rng.normal(), rng.normal()};
    while (d.norm2() < 1e-12)
        d = Vec3{rng.normal(), rng.normal(), rng.normal()};
    return d.normalized();
}

} // namespace

MeshOccupancy::MeshOccupancy(const TriangleMesh& mesh) {
    mesh.validate();
    if (!is_watertight(mesh))
        throw GeometryError("MeshOccupancy: mesh is not watertight");
    std::size_t nt = mesh.triangles.size();
    va_.resize(nt);
    edge1_.resize(nt);
    edge2_.resize(nt);
    tri_box_.resize(nt);
    order_.resize(nt);
    for (std::size_t i = 0; i < nt; ++i) {
        const auto& t = mesh.triangles[i];
        const Vec3& a = mesh.vertices[t[0]];
        const Vec3& b = mesh.vertices[t[1]];
        const Vec3& c = mesh.vertices[t[2]];
        va_[i] = a;
        edge1_[i] = b - a;
        edge2_[i] = c - a;
        tri_box_[i].extend(a);
        tri_box_[i].extend(b);
        tri_box_[i].extend(c);
        order_[i] = static_cast<std::uint32_t>(i);
        bounds_.extend(tri_box_[i]);
    }
    root_ = build(0, static_cast<std::uint32_t>(nt));
}

std::int32_t MeshOccupancy::build(std::uint32_t begin, std::uint32_t end) {
    BvhNode node;
    for (std::uint32_t i = begin; i < end; ++i)
        node.box.extend(tri_box_[order_[i]]);
    constexpr std::uint32_t kLeafSize = 8;
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
    std::nth_element(order_.begin() + begin, order_.begin() + mid, order_.begin() + end,
                     [&](std::uint32_t a, std::uint32_t b) {
                         return tri_box_[a].center()[axis] < tri_box_[b].center()[axis];
                     });
    std::int32_t self = static_cast<std::int32_t>(nodes_.size());
    nodes_.push_back(node);
    std::int32_t left = build(begin, mid);
    std::int32_t right = build(mid, end);
    nodes_[self].left = left;
    nodes_[self].right = right;
    return self;
}

namespace {

inline bool ray_hits_box(const Vec3& origin, const Vec3& inv_dir, const Aabb& box) {
    double t0 = 0.0, t1 = std::numeric_limits<double>::infinity();
    for (int a = 0; a < 3; ++a) {
        double near = (box.lo[a] - origin[a]) * inv_dir[a];
        double far = (box.hi[a] - origin[a]) * inv_dir[a];
        if (near > far)
            std::swap(near, far);
        if (near > t0)
            t0 = near;
        if (far < t1)
            t1 = far;
        if (t0 > t1)
            return false;
    }
    return true;
}

} // namespace

void MeshOccupancy::count_hits(std::int32_t id, const Vec3& origin, const Vec3& dir,
                               const Vec3& inv_dir, std::size_t& hits, bool& ok) const {
    if (!ok)
        return;
    const BvhNode& node = nodes_[id];
    if (!ray_hits_box(origin, inv_dir, node.box))
        return;
    if (node.end > node.begin) {
        for (std::uint32_t i = node.begin; i < node.end && ok; ++i) {
            std::uint32_t tri = order_[i];
            const Vec3& e1 = edge1_[tri];
            const Vec3& e2 = edge2_[tri];
            Vec3 pvec = dir.cross(e2);
            double det = e1.dot(pvec);
            Vec3 tvec = origin - va_[tri];
            if (std::abs(det) < kDetEps) {
                // ray (nearly) parallel to the plane: only a problem if the
                // triangle could still be crossed; flag when origin is near
                // the plane slab of this triangle's box
                if (ray_hits_box(origin, inv_dir, tri_box_[tri]) &&
                    std::abs(tvec.dot(e1.cross(e2).normalized())) < 1e-9)
                    ok = false;
                continue;
            }
            double inv = 1.0 / det;
            double u = tvec.dot(pvec) * inv;
            if (u < -kBaryEps || u > 1.0 + kBaryEps)
                continue;
            Vec3 qvec = tvec.cross(e1);
            double v = dir.dot(qvec) * inv;
            if (v < -kBaryEps || u + v > 1.0 + kBaryEps)
                continue;
            double t = e2.dot(qvec) * inv;
            if (t < -kTEps)
                continue;
            // potential hit; graze on an edge/vertex or on the surface
            // itself cannot be resolved by parity
            if (u < kBaryEps || v < kBaryEps || u + v > 1.0 - kBaryEps || t < kTEps) {
                ok = false;
                return;
            }
            ++hits;
        }
        return;
    }
    count_hits(node.left, origin, dir, inv_dir, hits, ok);
    count_hits(node.right, origin, dir, inv_dir, hits, ok);
}

bool MeshOccupancy::parity(const Vec3& origin, const Vec3& dir, bool& ok) const {
    ok = true;
    Vec3 inv_dir{1.0 / dir.x, 1.0 / dir.y, 1.0 / dir.z};
    std::size_t hits = 0;
    count_hits(root_, origin, dir, inv_dir, hits, ok);
    return (hits & 1) != 0;
}

bool MeshOccupancy::inside(const Vec3& p, CounterRng& rng) const {
    if (!bounds_.contains(p))
        return false;
    for (int attempt = 0; attempt < kMaxRecasts; ++attempt) {
        bool ok = false;
        bool in = parity(p, random_direction(rng), ok);
        if (ok)
            return in;
    }
    throw GeometryError("MeshOccupancy: could not find a non-degenerate ray direction");
}

std::vector<std::uint8_t> MeshOccupancy::query(const PointCloud& points,
                                               CounterRng& rng) const {
    Vec3 batch_dir = random_direction(rng);
    std::vector<std::uint8_t> labels(points.size(), 0);
    for (std::size_t i = 0; i < points.size(); ++i) {
        const Vec3& p = points[i];
        if (!bounds_.contains(p))
            continue;
        bool ok = false;
        bool in = parity(p, batch_dir, ok);
        int attempt = 0;
        while (!ok && attempt++ < kMaxRecasts)
            in = parity(p, random_direction(rng), ok);
        if (!ok)
            throw GeometryError("MeshOccupancy: could not find a non-degenerate ray direction");
        labels[i] = in ? 1 : 0;
    }
    return labels;
}

} // namespace mendkit
