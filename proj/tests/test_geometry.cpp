#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "mendkit/geometry.hpp"
#include "mendkit/obj_io.hpp"
#include "mendkit/occupancy.hpp"
#include "test_helpers.hpp"

using namespace mendkit;
using namespace mendkit::testing;

TEST_CASE("watertight check: closed box yes, open box no") {
    TriangleMesh box = make_box({0.2, 0.2, 0.2}, {0.8, 0.8, 0.8});
    CHECK(is_watertight(box));
    TriangleMesh open = box;
    open.triangles.pop_back();
    CHECK_FALSE(is_watertight(open));
    CHECK_FALSE(is_watertight(TriangleMesh{}));
}

TEST_CASE("occupancy_query: sphere membership at probe points") {
    TriangleMesh sphere = make_uv_sphere({0.5, 0.5, 0.5}, 0.3, 48, 96);
    REQUIRE(is_watertight(sphere));
    MeshOccupancy occ(sphere);
    CounterRng rng(17);
    CHECK(occ.inside({0.5, 0.5, 0.5}, rng));
    CHECK_FALSE(occ.inside({0.95, 0.5, 0.5}, rng));
    CHECK_FALSE(occ.inside({2.0, 2.0, 2.0}, rng)); // outside bounding box
}

TEST_CASE("occupancy_query: rejects non-watertight input") {
    TriangleMesh tri;
    tri.vertices = {{0, 0, 0}, {1, 0, 0}, {0, 1, 0}};
    tri.triangles = {{0, 1, 2}};
    CHECK_THROWS_AS(MeshOccupancy occ(tri), GeometryError);
}

TEST_CASE("occupancy_query: 1e4 random points agree with the analytic sphere") {
    const Vec3 c{0.5, 0.5, 0.5};
    const double r = 0.3;
    TriangleMesh sphere = make_uv_sphere(c, r, 48, 96);
    MeshOccupancy occ(sphere);
    CounterRng rng(23);
    PointCloud pts;
    for (int i = 0; i < 10000; ++i)
        pts.push_back({rng.uniform(), rng.uniform(), rng.uniform()});
    auto labels = occ.query(pts, rng);
    // skip the shell where mesh facets deviate from the true sphere
    const double sagitta = r * (1.0 - std::cos(3.14159265358979 / 48)) * 2.0 + 1e-6;
    std::size_t checked = 0, agreed = 0;
    for (std::size_t i = 0; i < pts.size(); ++i) {
        double d = (pts[i] - c).norm();
        if (std::abs(d - r) < sagitta)
            continue;
        ++checked;
        if ((d < r) == (labels[i] != 0))
            ++agreed;
    }
    CHECK(checked > 9000);
    CHECK(agreed == checked);
}

TEST_CASE("surface_sample: single triangle stays inside it") {
    TriangleMesh tri;
    tri.vertices = {{0, 0, 0}, {1, 0, 0}, {0, 1, 0}};
    tri.triangles = {{0, 1, 2}};
    CounterRng rng(5);
    PointCloud pts = surface_sample(tri, 500, rng);
    for (const Vec3& p : pts) {
        CHECK(p.z == 0.0);
        CHECK(p.x >= -1e-12);
        CHECK(p.y >= -1e-12);
        CHECK(p.x + p.y <= 1.0 + 1e-12);
    }
}

TEST_CASE("surface_sample: 9:1 area ratio respected within 3 sigma") {
    TriangleMesh two;
    two.vertices = {{0, 0, 0}, {3, 0, 0}, {0, 3, 0}, {10, 0, 0}, {11, 0, 0}, {10, 1, 0}};
    two.triangles = {{0, 1, 2}, {3, 4, 5}}; // areas 4.5 and 0.5
    CounterRng rng(7);
    const std::size_t n = 100000;
    PointCloud pts = surface_sample(two, n, rng);
    std::size_t big = 0;
    for (const Vec3& p : pts)
        if (p.x < 5.0)
            ++big;
    double expected = 0.9 * n;
    double sigma = std::sqrt(n * 0.9 * 0.1);
    CHECK(std::abs(static_cast<double>(big) - expected) < 3.0 * sigma);
}

TEST_CASE("surface_sample: sphere samples lie near the sphere; zero area rejected") {
    TriangleMesh sphere = make_uv_sphere({0.5, 0.5, 0.5}, 0.3, 24, 48);
    double max_edge = 0.0;
    for (const auto& t : sphere.triangles)
        for (int e = 0; e < 3; ++e)
            max_edge = std::max(max_edge,
                                (sphere.vertices[t[e]] - sphere.vertices[t[(e + 1) % 3]]).norm());
    CounterRng rng(9);
    for (const Vec3& p : surface_sample(sphere, 2000, rng))
        CHECK(std::abs((p - Vec3{0.5, 0.5, 0.5}).norm() - 0.3) < max_edge);

    TriangleMesh degenerate;
    degenerate.vertices = {{0, 0, 0}, {0, 0, 0}, {0, 0, 0}};
    degenerate.triangles = {{0, 1, 2}};
    CHECK_THROWS_AS(surface_sample(degenerate, 10, rng), GeometryError);
}

TEST_CASE("marching_cubes: constant grid gives empty mesh") {
    VoxelGrid g = VoxelGrid::over_unit_cube(8);
    CHECK(marching_cubes(g).empty());
    for (auto& v : g.values)
        v = 1.0f;
    CHECK(marching_cubes(g).empty()); // iso above/below all values either way
}

TEST_CASE("marching_cubes: smoothed sphere is watertight with accurate radii") {
    const Vec3 c{0.5, 0.5, 0.5};
    const double r = 0.3;
    VoxelGrid g = VoxelGrid::over_unit_cube(64);
    const double band = 2.0 * g.spacing;
    g.fill([&](const Vec3& p) {
        return std::clamp(0.5 + (r - (p - c).norm()) / (2.0 * band), 0.0, 1.0);
    });
    TriangleMesh mesh = marching_cubes(g, 0.5);
    REQUIRE_FALSE(mesh.empty());
    CHECK(is_watertight(mesh));
    for (const Vec3& v : mesh.vertices)
        CHECK(std::abs((v - c).norm() - r) < 2.0 / 64.0);
}

TEST_CASE("marching_cubes: linear half-space field cuts on the exact plane") {
    const double z0 = 0.437;
    VoxelGrid g = VoxelGrid::over_unit_cube(16);
    g.fill([&](const Vec3& p) { return 0.5 + (z0 - p.z); });
    TriangleMesh mesh = marching_cubes(g, 0.5);
    REQUIRE_FALSE(mesh.empty());
    for (const Vec3& v : mesh.vertices)
        CHECK(std::abs(v.z - z0) < 1e-6);
}

TEST_CASE("marching_cubes: binary half-space on a grid plane is planar") {
    VoxelGrid g = VoxelGrid::over_unit_cube(12);
    g.fill([&](const Vec3& p) { return p.z > 0.5 ? 1.0 : 0.0; });
    TriangleMesh mesh = marching_cubes(g, 0.5);
    REQUIRE_FALSE(mesh.empty());
    double z = mesh.vertices.front().z;
    for (const Vec3& v : mesh.vertices)
        CHECK(std::abs(v.z - z) < 1e-9);
}

TEST_CASE("marching_cubes: degenerate resolution 2 does not crash") {
    VoxelGrid g = VoxelGrid::over_unit_cube(2);
    g.at(0, 0, 0) = 1.0f;
    TriangleMesh mesh = marching_cubes(g, 0.5);
    CHECK_FALSE(mesh.vertices.empty());
}

TEST_CASE("property: marching_cubes output is watertight for interior surfaces") {
    for (std::uint64_t seed = 1; seed <= 20; ++seed) {
        CounterRng rng(seed);
        struct Blob {
            Vec3 c;
            double s;
        };
        std::vector<Blob> blobs;
        int nb = 2 + static_cast<int>(rng.index(4));
        for (int b = 0; b < nb; ++b)
            blobs.push_back({{rng.uniform(0.3, 0.7), rng.uniform(0.3, 0.7),
                              rng.uniform(0.3, 0.7)},
                             rng.uniform(0.05, 0.15)});
        VoxelGrid g = VoxelGrid::over_unit_cube(24);
        g.fill([&](const Vec3& p) {
            // window forces the field to 0 near the boundary
            auto axis_window = [](double v) {
                return std::clamp((std::min(v, 1.0 - v) - 0.05) / 0.1, 0.0, 1.0);
            };
            double w = axis_window(p.x) * axis_window(p.y) * axis_window(p.z);
            double raw = 0.0;
            for (const Blob& b : blobs)
                raw += std::exp(-(p - b.c).norm2() / (2.0 * b.s * b.s));
            return std::clamp(raw * w, 0.0, 1.0);
        });
        TriangleMesh mesh = marching_cubes(g, 0.5);
        if (!mesh.empty())
            CHECK(is_watertight(mesh));
    }
}

TEST_CASE("chamfer_distance: identity, analytic pair, errors") {
    PointCloud x = {{0.1, 0.2, 0.3}, {0.4, 0.5, 0.6}, {0.7, 0.8, 0.9}};
    CHECK(chamfer_distance(x, x) == 0.0);
    PointCloud a = {{0, 0, 0}};
    PointCloud b = {{1, 0, 0}};
    CHECK(chamfer_distance(a, b) == doctest::Approx(2.0).epsilon(1e-14));
    CHECK_THROWS_AS(chamfer_distance({}, b), ParameterError);
    CHECK_THROWS_AS(chamfer_distance(a, {}), ParameterError);
}

TEST_CASE("chamfer_distance: kd-tree equals brute force on 100 random pairs") {
    CounterRng rng(31);
    for (int pair = 0; pair < 100; ++pair) {
        std::size_t nx = 1 + rng.index(512);
        std::size_t ny = 1 + rng.index(512);
        PointCloud x, y;
        for (std::size_t i = 0; i < nx; ++i)
            x.push_back({rng.uniform(), rng.uniform(), rng.uniform()});
        for (std::size_t i = 0; i < ny; ++i)
            y.push_back({rng.uniform(), rng.uniform(), rng.uniform()});
        double fast = chamfer_distance(x, y);
        double brute = chamfer_brute(x, y);
        CHECK(std::abs(fast - brute) <= 1e-7);
        // symmetric bit-for-bit
        CHECK(chamfer_distance(y, x) == fast);
    }
}

TEST_CASE("volume_fraction: identity, half-space, analytic sphere") {
    CounterRng rng(41);
    auto cube = [](const Vec3&) { return true; };
    auto est1 = volume_fraction(cube, cube, 10000, rng);
    CHECK(est1.fraction == 1.0);

    auto half = [](const Vec3& p) { return p.x < 0.5; };
    auto est2 = volume_fraction(half, cube, 1000000, rng);
    CHECK(std::abs(est2.fraction - 0.5) < 3.0 * est2.standard_error + 1e-6);

    const Vec3 c{0.5, 0.5, 0.5};
    auto ball = [&](const Vec3& p) { return (p - c).norm() < 0.3; };
    auto est3 = volume_fraction(ball, cube, 1000000, rng);
    double truth = 4.0 / 3.0 * 3.14159265358979 * 0.027;
    CHECK(std::abs(est3.fraction - truth) < 3.0 * est3.standard_error + 1e-6);
}

TEST_CASE("volume_fraction: errors and O(n^-1/2) convergence") {
    CounterRng rng(43);
    auto cube = [](const Vec3&) { return true; };
    auto never = [](const Vec3&) { return false; };
    CHECK_THROWS_AS(volume_fraction(cube, never, 10000, rng), GeometryError);
    CHECK_THROWS_AS(volume_fraction(cube, cube, 100, rng), ParameterError);

    auto ball = [](const Vec3& p) { return (p - Vec3{0.5, 0.5, 0.5}).norm() < 0.3; };
    auto spread = [&](std::size_t n) {
        double sum = 0.0, sum2 = 0.0;
        const int reps = 20;
        for (int r = 0; r < reps; ++r) {
            auto e = volume_fraction(ball, cube, n, rng);
            sum += e.fraction;
            sum2 += e.fraction * e.fraction;
        }
        return std::sqrt(std::max(0.0, sum2 / reps - (sum / reps) * (sum / reps)));
    };
    double s1 = spread(10000);
    double s4 = spread(40000);
    CHECK(s4 < s1); // quadrupling n must shrink the spread...
    CHECK(s1 / s4 > 1.2);
    CHECK(s1 / s4 < 3.5); // ...by roughly a factor of two
}

TEST_CASE("normalize_unit_cube: exact box placement and idempotence") {
    TriangleMesh big = make_box({-2, -2, -2}, {2, 2, 2});
    TriangleMesh unit = normalize_unit_cube(big, 0.05);
    Aabb box = bounding_box(unit);
    CHECK(box.lo.x == doctest::Approx(0.05).epsilon(1e-12));
    CHECK(box.hi.z == doctest::Approx(0.95).epsilon(1e-12));

    TriangleMesh again = normalize_unit_cube(unit, 0.05);
    for (std::size_t i = 0; i < unit.vertices.size(); ++i)
        CHECK((again.vertices[i] - unit.vertices[i]).norm() < 1e-9);
}

TEST_CASE("normalize_unit_cube: aspect ratios preserved, degenerate rejected") {
    TriangleMesh slab = make_box({0, 0, 0}, {4, 2, 1});
    TriangleMesh unit = normalize_unit_cube(slab, 0.1);
    auto edge_len = [](const TriangleMesh& m, std::size_t t, int e) {
        const auto& tri = m.triangles[t];
        return (m.vertices[tri[e]] - m.vertices[tri[(e + 1) % 3]]).norm();
    };
    double ratio_before = edge_len(slab, 0, 0) / edge_len(slab, 5, 1);
    double ratio_after = edge_len(unit, 0, 0) / edge_len(unit, 5, 1);
    CHECK(std::abs(ratio_before - ratio_after) < 1e-9);

    TriangleMesh degenerate;
    degenerate.vertices = {{1, 1, 1}, {1, 1, 1}, {1, 1, 1}};
    degenerate.triangles = {{0, 1, 2}};
    CHECK_THROWS_AS(normalize_unit_cube(degenerate, 0.05), GeometryError);
}

TEST_CASE("obj round-trip is exact; malformed faces rejected") {
    namespace fs = std::filesystem;
    fs::path dir = fs::temp_directory_path() / "mendkit_obj_test";
    fs::create_directories(dir);

    TriangleMesh sphere = make_uv_sphere({0.5, 0.5, 0.5}, 0.3, 8, 12);
    fs::path p = dir / "sphere.obj";
    write_obj(sphere, p);
    TriangleMesh back = read_obj(p);
    REQUIRE(back.vertices.size() == sphere.vertices.size());
    REQUIRE(back.triangles.size() == sphere.triangles.size());
    for (std::size_t i = 0; i < back.vertices.size(); ++i) {
        CHECK(back.vertices[i].x == sphere.vertices[i].x);
        CHECK(back.vertices[i].y == sphere.vertices[i].y);
        CHECK(back.vertices[i].z == sphere.vertices[i].z);
    }
    CHECK(back.triangles == sphere.triangles);

    fs::path quad = dir / "quad.obj";
    {
        std::ofstream out(quad);
        out << "v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3 4\n";
    }
    CHECK_THROWS_AS(read_obj(quad), IoError);
    CHECK_THROWS_AS(read_obj(dir / "missing.obj"), IoError);
    fs::remove_all(dir);
}
