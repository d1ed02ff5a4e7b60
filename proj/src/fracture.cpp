#include "mendkit/fracture.hpp"

#include <algorithm>
#include <cmath>

namespace mendkit {

namespace {

double removed_fraction_cached(const PointCloud& points,
                               const std::vector<std::uint8_t>& labels_c,
                               const CutDescriptor& cut) {
    std::size_t in_c = 0, removed = 0;
    for (std::size_t i = 0; i < points.size(); ++i) {
        if (!labels_c[i])
            continue;
        ++in_c;
        if (!cut.keeps(points[i]))
            ++removed;
    }
    if (in_c == 0)
        throw GeometryError("fracture: complete shape has no occupied sample points");
    return static_cast<double>(removed) / static_cast<double>(in_c);
}

Vec3 random_unit(CounterRng& rng) {
    Vec3 d{rng.normal(), rng.normal(), rng.normal()};
    while (d.norm2() < 1e-12)
        d = Vec3{rng.normal(), rng.normal(), rng.normal()};
    return d.normalized();
}

} // namespace

FractureResult fracture_with_orientation(const PointCloud& points,
                                         const std::vector<std::uint8_t>& labels_c,
                                         CutDescriptor seed_cut, const VolumeBand& band) {
    const auto [lo, hi] = std::pair{band[0], band[1]};
    if (!(lo > 0.0 && hi < 1.0 && lo < hi))
        throw ParameterError("fracture: band must satisfy 0 < lo < hi < 1");

    // parameter range: plane offset spans the projections of occupied points,
    // sphere radius spans [0, diameter of the cloud]
    double pmin = 0.0, pmax = 0.0;
    if (seed_cut.kind == CutDescriptor::Kind::Plane) {
        pmin = 1e300;
        pmax = -1e300;
        for (std::size_t i = 0; i < points.size(); ++i) {
            if (!labels_c[i])
                continue;
            double t = seed_cut.normal.dot(points[i]);
            pmin = std::min(pmin, t);
            pmax = std::max(pmax, t);
        }
        pmin -= 1e-3;
        pmax += 1e-3;
    } else {
        pmin = 0.0;
        pmax = 2.0; // unit-cube shapes: a radius of 2 swallows everything
    }

    auto with_param = [&](double v) {
        CutDescriptor c = seed_cut;
        if (c.kind == CutDescriptor::Kind::Plane)
            c.offset = v;
        else
            c.radius = v;
        return c;
    };
    // removed fraction is monotone in the parameter: decreasing in the plane
    // offset, increasing in the bite radius
    bool increasing = seed_cut.kind == CutDescriptor::Kind::SphereBite;

    double a = pmin, b = pmax;
    for (int step = 0; step < 64; ++step) {
        double mid = 0.5 * (a + b);
        CutDescriptor c = with_param(mid);
        double f = removed_fraction_cached(points, labels_c, c);
        if (f >= lo && f <= hi)
            return {c, f};
        bool too_much = f > hi;
        if (too_much == increasing)
            b = mid;
        else
            a = mid;
    }
    throw FractureError("fracture: no cut parameter reaches the volume band within 64 steps");
}

FractureResult fracture(const PointCloud& points, const std::vector<std::uint8_t>& labels_c,
                        const VolumeBand& band, CounterRng& rng, int max_retries) {
    for (int attempt = 0; attempt < max_retries; ++attempt) {
        CutDescriptor seed;
        if (rng.uniform() < 0.7) {
            seed.kind = CutDescriptor::Kind::Plane;
            seed.normal = random_unit(rng);
        } else {
            seed.kind = CutDescriptor::Kind::SphereBite;
            // bite from near the surface: place the center at the farthest
            // occupied point along a random direction
            Vec3 dir = random_unit(rng);
            Vec3 centroid{0, 0, 0};
            std::size_t n_in = 0;
            for (std::size_t i = 0; i < points.size(); ++i)
                if (labels_c[i]) {
                    centroid += points[i];
                    ++n_in;
                }
            if (n_in == 0)
                throw GeometryError("fracture: complete shape has no occupied sample points");
            centroid = centroid / static_cast<double>(n_in);
            double tmax = 0.0;
            for (std::size_t i = 0; i < points.size(); ++i)
                if (labels_c[i])
                    tmax = std::max(tmax, (points[i] - centroid).dot(dir));
            seed.center = centroid + dir * tmax;
        }
        try {
            return fracture_with_orientation(points, labels_c, seed, band);
        } catch (const FractureError&) {
            continue; // new orientation
        }
    }
    throw FractureError("fracture: exhausted " + std::to_string(max_retries) +
                        " orientation retries without hitting the band");
}

double measured_removed_fraction(const MeshOccupancy& occ, const CutDescriptor& cut,
                                 std::size_t n, CounterRng& rng) {
    PointCloud pts;
    pts.reserve(n);
    for (std::size_t i = 0; i < n; ++i)
        pts.push_back({rng.uniform(), rng.uniform(), rng.uniform()});
    auto labels = occ.query(pts, rng);
    std::size_t in_c = 0, removed = 0;
    for (std::size_t i = 0; i < n; ++i) {
        if (!labels[i])
            continue;
        ++in_c;
        if (!cut.keeps(pts[i]))
            ++removed;
    }
    if (in_c == 0)
        throw GeometryError("measured_removed_fraction: no points fall inside the shape");
    return static_cast<double>(removed) / static_cast<double>(in_c);
}

} // namespace mendkit
