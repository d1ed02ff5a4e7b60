#pragma once

#include <functional>
#include <string>
#include <vector>

#include "mendkit/geometry.hpp"
#include "mendkit/rng.hpp"

namespace mendkit {

// Signed scalar field, negative inside the solid.
using SignedField = std::function<double(const Vec3&)>;

struct SimilarityTransform {
    double scale = 1.0;
    Vec3 translation{0, 0, 0};

    Vec3 apply(const Vec3& p) const { return p * scale + translation; }
    Vec3 invert(const Vec3& q) const { return (q - translation) / scale; }
};

// normalize_unit_cube variant that reports the applied transform.
TriangleMesh normalize_unit_cube(const TriangleMesh& mesh, double margin,
                                 SimilarityTransform& out_transform);

struct ClassSpec {
    std::string name;              // boxes | mugs | bottles | obj:<path>
    double jitter = 0.25;          // relative parameter jitter
    std::size_t gen_resolution = 96;
    double margin = 0.05;
};

struct GeneratedShape {
    TriangleMesh mesh;   // watertight, normalized into the unit cube
    SignedField field;   // analytic signed field in normalized coordinates
};

// One procedural instance of the class; parameters are drawn from `rng`.
GeneratedShape gen_shape(const ClassSpec& spec, CounterRng& rng);

std::vector<GeneratedShape> gen_class(const ClassSpec& spec, std::size_t count,
                                      CounterRng& rng);

// Mesh a signed field over the unit cube with a narrow-band occupancy grid.
TriangleMesh mesh_signed_field(const SignedField& field, std::size_t resolution);

} // namespace mendkit
