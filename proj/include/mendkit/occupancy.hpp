#pragma once

#include <cstdint>
#include <vector>

#include "mendkit/geometry.hpp"
#include "mendkit/rng.hpp"

namespace mendkit {

// Point-in-mesh test by ray parity. The mesh must be watertight. A query
// batch casts all rays along one random direction; any near-degenerate hit
// (edge/vertex graze, parallel ray, origin on the surface) triggers a
// re-cast of that point along a fresh direction.
class MeshOccupancy {
public:
    explicit MeshOccupancy(const TriangleMesh& mesh);

    bool inside(const Vec3& p, CounterRng& rng) const;
    std::vector<std::uint8_t> query(const PointCloud& points, CounterRng& rng) const;

    const Aabb& bounds() const { return bounds_; }

private:
    struct BvhNode {
        Aabb box;
        std::int32_t left = -1;
        std::int32_t right = -1;
        std::uint32_t begin = 0;
        std::uint32_t end = 0;
    };

    std::int32_t build(std::uint32_t begin, std::uint32_t end);
    // Parity of crossings along dir; false return in `ok` means degenerate.
    bool parity(const Vec3& origin, const Vec3& dir, bool& ok) const;
    void count_hits(std::int32_t node, const Vec3& origin, const Vec3& dir,
                    const Vec3& inv_dir, std::size_t& hits, bool& ok) const;

    std::vector<Vec3> va_, edge1_, edge2_; // per triangle
    std::vector<Aabb> tri_box_;
    std::vector<std::uint32_t> order_;
    std::vector<BvhNode> nodes_;
    std::int32_t root_ = -1;
    Aabb bounds_;
};

} // namespace mendkit
