#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <utility>

#include "mendkit/geometry.hpp"
#include "mendkit/occupancy.hpp"
#include "mendkit/rng.hpp"

namespace mendkit {

// Analytic break-set primitive. The break set B is the kept (fractured)
// side, defined over all of space: F = C intersect B, R = C minus B.
struct CutDescriptor {
    enum class Kind { Plane, SphereBite };

    Kind kind = Kind::Plane;
    Vec3 normal{0, 0, 1}; // plane only, unit length
    double offset = 0.0;  // plane: kept where dot(normal, x) <= offset
    Vec3 center{0, 0, 0}; // sphere bite: removed strictly inside the sphere
    double radius = 0.0;

    bool keeps(const Vec3& p) const {
        if (kind == Kind::Plane)
            return normal.dot(p) <= offset;
        return (p - center).norm2() >= radius * radius;
    }

    // negative on the kept side; used to mesh F and R
    double keep_field(const Vec3& p) const {
        if (kind == Kind::Plane)
            return normal.dot(p) - offset;
        return radius - (p - center).norm();
    }
};

struct FractureResult {
    CutDescriptor cut;
    double measured_fraction = 0.0; // removed volume / complete volume
};

using VolumeBand = std::array<double, 2>;

// Bisect one cut family (fixed orientation) so the removed-volume fraction
// measured on the cached complete-shape points lands inside `band`.
// Throws FractureError when 64 bisection steps cannot land in the band.
FractureResult fracture_with_orientation(const PointCloud& points,
                                         const std::vector<std::uint8_t>& labels_c,
                                         CutDescriptor seed_cut, const VolumeBand& band);

// Random orientations (plane or sphere bite) with up to `max_retries`
// attempts; throws FractureError when all fail.
FractureResult fracture(const PointCloud& points, const std::vector<std::uint8_t>& labels_c,
                        const VolumeBand& band, CounterRng& rng, int max_retries = 20);

// High-precision removed-volume fraction of a cut against a mesh occupancy.
double measured_removed_fraction(const MeshOccupancy& occ, const CutDescriptor& cut,
                                 std::size_t n, CounterRng& rng);

} // namespace mendkit
