#include "mendkit/shapes.hpp"

#include <cmath>

#include "mendkit/obj_io.hpp"
#include "mendkit/occupancy.hpp"

namespace mendkit {

TriangleMesh normalize_unit_cube(const TriangleMesh& mesh, double margin,
                                 SimilarityTransform& out_transform) {
    Aabb box = bounding_box(mesh);
    Vec3 ext = box.extent();
    double longest = std::max({ext.x, ext.y, ext.z});
    if (!(longest > 0.0))
        throw GeometryError("normalize_unit_cube: degenerate bounding box");
    double span = 1.0 - 2.0 * margin;
    double scale = span / longest;
    Vec3 offset{margin + 0.5 * (span - ext.x * scale), margin + 0.5 * (span - ext.y * scale),
                margin + 0.5 * (span - ext.z * scale)};
    out_transform.scale = scale;
    out_transform.translation = offset - box.lo * scale;
    TriangleMesh out = mesh;
    for (Vec3& v : out.vertices)
        v = out_transform.apply(v);
    return out;
}

namespace {

double sd_round_box(const Vec3& p, const Vec3& c, const Vec3& half, double round) {
    Vec3 q{std::abs(p.x - c.x) - half.x, std::abs(p.y - c.y) - half.y,
           std::abs(p.z - c.z) - half.z};
    Vec3 qp{std::max(q.x, 0.0), std::max(q.y, 0.0), std::max(q.z, 0.0)};
    return qp.norm() + std::min(std::max({q.x, q.y, q.z}), 0.0) - round;
}

// capped cylinder around the y axis through (cx, *, cz)
double sd_cylinder_y(const Vec3& p, double cx, double cz, double cy, double radius,
                     double height) {
    double dr = std::hypot(p.x - cx, p.z - cz) - radius;
    double dy = std::abs(p.y - cy) - 0.5 * height;
    double outside = std::hypot(std::max(dr, 0.0), std::max(dy, 0.0));
    return outside + std::min(std::max(dr, dy), 0.0);
}

// torus whose loop lies in the x-y plane (tube sweeps around z offsets)
double sd_torus_xy(const Vec3& p, const Vec3& c, double ring_radius, double tube_radius) {
    double q = std::hypot(p.x - c.x, p.y - c.y) - ring_radius;
    return std::hypot(q, p.z - c.z) - tube_radius;
}

double smoothstep(double a, double b, double x) {
    double t = std::clamp((x - a) / (b - a), 0.0, 1.0);
    return t * t * (3.0 - 2.0 * t);
}

SignedField make_box_field(CounterRng& rng, double jitter) {
    auto jit = [&](double base) { return base * rng.uniform(1.0 - jitter, 1.0 + jitter); };
    Vec3 half{jit(0.28), jit(0.2), jit(0.16)};
    double round = jit(0.03);
    Vec3 c{0.5, 0.5, 0.5};
    return [=](const Vec3& p) { return sd_round_box(p, c, half, round); };
}

SignedField make_mug_field(CounterRng& rng, double jitter) {
    auto jit = [&](double base) { return base * rng.uniform(1.0 - jitter, 1.0 + jitter); };
    double outer_r = jit(0.17);
    double height = jit(0.36);
    double wall = std::min(jit(0.035), 0.45 * outer_r);
    double bottom = std::min(jit(0.05), 0.4 * height);
    double handle_ring = jit(0.09);
    double handle_tube = jit(0.026);
    double cy = 0.5;
    return [=](const Vec3& p) {
        double body = sd_cylinder_y(p, 0.5, 0.5, cy, outer_r, height);
        // cavity opens through the top rim
        double cavity_cy = cy + bottom * 0.5 + 0.15;
        double cavity = sd_cylinder_y(p, 0.5, 0.5, cavity_cy, outer_r - wall, height + 0.3);
        double cup = std::max(body, -cavity);
        double handle =
            sd_torus_xy(p, Vec3{0.5 + outer_r, cy, 0.5}, handle_ring, handle_tube);
        return std::min(cup, handle);
    };
}

SignedField make_bottle_field(CounterRng& rng, double jitter) {
    auto jit = [&](double base) { return base * rng.uniform(1.0 - jitter, 1.0 + jitter); };
    double body_r = jit(0.15);
    double neck_r = std::min(jit(0.05), 0.6 * body_r);
    double y_base = 0.12;
    double y_shoulder = jit(0.52);
    double y_neck = y_shoulder + jit(0.16);
    double y_top = y_neck + jit(0.14);
    double lip = jit(0.012);
    return [=](const Vec3& p) {
        double r;
        if (p.y < y_shoulder)
            r = body_r;
        else if (p.y < y_neck)
            r = body_r + (neck_r - body_r) * smoothstep(y_shoulder, y_neck, p.y);
        else
            r = neck_r;
        // small rolled lip near the opening
        r += lip * std::exp(-std::pow((p.y - (y_top - 0.02)) / 0.012, 2.0));
        double radial = std::hypot(p.x - 0.5, p.z - 0.5) - r;
        return std::max({radial, p.y - y_top, y_base - p.y});
    };
}

} // namespace

TriangleMesh mesh_signed_field(const SignedField& field, std::size_t resolution) {
    VoxelGrid grid = VoxelGrid::over_unit_cube(resolution);
    const double band = 2.0 * grid.spacing;
    grid.fill([&](const Vec3& p) {
        return std::clamp(0.5 - field(p) / (2.0 * band), 0.0, 1.0);
    });
    return marching_cubes(grid, 0.5);
}

GeneratedShape gen_shape(const ClassSpec& spec, CounterRng& rng) {
    if (spec.name.rfind("obj:", 0) == 0) {
        TriangleMesh raw = read_obj(spec.name.substr(4));
        SimilarityTransform xf;
        TriangleMesh mesh = normalize_unit_cube(raw, spec.margin, xf);
        if (!is_watertight(mesh))
            throw GeometryError("gen_shape: OBJ mesh is not watertight: " + spec.name);
        // binary field from mesh parity; adequate for cut meshing
        auto occ = std::make_shared<MeshOccupancy>(mesh);
        auto rng_holder = std::make_shared<CounterRng>(rng.substream("obj-field"));
        SignedField field = [occ, rng_holder](const Vec3& p) {
            return occ->inside(p, *rng_holder) ? -1.0 : 1.0;
        };
        return {std::move(mesh), std::move(field)};
    }

    SignedField raw_field;
    if (spec.name == "boxes")
        raw_field = make_box_field(rng, spec.jitter);
    else if (spec.name == "mugs")
        raw_field = make_mug_field(rng, spec.jitter);
    else if (spec.name == "bottles")
        raw_field = make_bottle_field(rng, spec.jitter);
    else
        throw ParameterError("gen_shape: unknown class '" + spec.name + "'");

    TriangleMesh raw_mesh = mesh_signed_field(raw_field, spec.gen_resolution);
    if (raw_mesh.empty())
        throw GeometryError("gen_shape: class field produced an empty mesh");
    SimilarityTransform xf;
    TriangleMesh mesh = normalize_unit_cube(raw_mesh, spec.margin, xf);
    SignedField field = [raw_field, xf](const Vec3& q) {
        return raw_field(xf.invert(q)) * xf.scale;
    };
    return {std::move(mesh), std::move(field)};
}

std::vector<GeneratedShape> gen_class(const ClassSpec& spec, std::size_t count,
                                      CounterRng& rng) {
    if (count < 1)
        throw ParameterError("gen_class: count must be positive");
    std::vector<GeneratedShape> shapes;
    shapes.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
        CounterRng sub = rng.substream(i);
        shapes.push_back(gen_shape(spec, sub));
    }
    return shapes;
}

} // namespace mendkit
