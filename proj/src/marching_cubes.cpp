#include "mendkit/geometry.hpp"

#include <array>
#include <unordered_map>

namespace mendkit {

namespace {

// Cube corner c has offset bits (c&1, c>>1&1, c>>2&1). The six Kuhn
// tetrahedra around the 0-7 diagonal tile the cube and, repeated over the
// lattice, tile space with matching face diagonals, which is what makes the
// generated case table crack-free.
constexpr std::array<std::array<int, 4>, 6> kTets = {{
    {0, 1, 3, 7},
    {0, 1, 5, 7},
    {0, 2, 3, 7},
    {0, 2, 6, 7},
    {0, 4, 5, 7},
    {0, 4, 6, 7},
}};

inline Vec3 corner_pos(int c) {
    return Vec3{static_cast<double>(c & 1), static_cast<double>((c >> 1) & 1),
                static_cast<double>((c >> 2) & 1)};
}

struct CaseTri {
    // each vertex sits on the edge between two cube corners
    std::array<std::pair<std::uint8_t, std::uint8_t>, 3> edges;
};

using CaseTable = std::array<std::vector<CaseTri>, 256>;

void orient_and_emit(std::vector<CaseTri>& out,
                     std::array<std::pair<std::uint8_t, std::uint8_t>, 3> e,
                     const Vec3& inside_centroid) {
    // canonical geometry: cuts at edge midpoints
    std::array<Vec3, 3> p;
    for (int i = 0; i < 3; ++i)
        p[i] = (corner_pos(e[i].first) + corner_pos(e[i].second)) * 0.5;
    Vec3 n = (p[1] - p[0]).cross(p[2] - p[0]);
    Vec3 c = (p[0] + p[1] + p[2]) / 3.0;
    if (n.dot(inside_centroid - c) > 0.0)
        std::swap(e[1], e[2]); // outward normal points away from the inside
    out.push_back(CaseTri{e});
}

void emit_tet(std::vector<CaseTri>& out, const std::array<int, 4>& tet, unsigned cube_mask) {
    std::array<int, 4> in{}, outv{};
    int n_in = 0, n_out = 0;
    for (int c : tet) {
        if (cube_mask & (1u << c))
            in[n_in++] = c;
        else
            outv[n_out++] = c;
    }
    if (n_in == 0 || n_in == 4)
        return;
    Vec3 ic{0, 0, 0};
    for (int i = 0; i < n_in; ++i)
        ic += corner_pos(in[i]);
    ic = ic / n_in;

    auto edge = [](int a, int b) {
        return std::pair<std::uint8_t, std::uint8_t>{static_cast<std::uint8_t>(a),
                                                     static_cast<std::uint8_t>(b)};
    };
    if (n_in == 1) {
        orient_and_emit(out, {edge(in[0], outv[0]), edge(in[0], outv[1]), edge(in[0], outv[2])},
                        ic);
    } else if (n_in == 3) {
        orient_and_emit(out, {edge(outv[0], in[0]), edge(outv[0], in[1]), edge(outv[0], in[2])},
                        ic);
    } else { // 2 in, 2 out: quad, split into two triangles
        auto q0 = edge(in[0], outv[0]);
        auto q1 = edge(in[0], outv[1]);
        auto q2 = edge(in[1], outv[1]);
        auto q3 = edge(in[1], outv[0]);
        orient_and_emit(out, {q0, q1, q2}, ic);
        orient_and_emit(out, {q0, q2, q3}, ic);
    }
}

const CaseTable& case_table() {
    static const CaseTable table = [] {
        CaseTable t;
        for (unsigned mask = 0; mask < 256; ++mask)
            for (const auto& tet : kTets)
                emit_tet(t[mask], tet, mask);
        return t;
    }();
    return table;
}

struct EdgeKey {
    std::uint64_t a, b;
    bool operator==(const EdgeKey& o) const { return a == o.a && b == o.b; }
};

struct EdgeKeyHash {
    std::size_t operator()(const EdgeKey& k) const {
        std::uint64_t h = k.a * 0x9e3779b97f4a7c15ULL;
        h ^= k.b + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2);
        return static_cast<std::size_t>(h);
    }
};

} // namespace

TriangleMesh marching_cubes(const VoxelGrid& grid, double iso) {
    if (grid.n < 2)
        throw ParameterError("marching_cubes: grid resolution must be at least 2");
    const std::size_t n = grid.n;

    // nudge exact-iso samples so cuts never land on lattice corners
    auto sample = [&](std::size_t i, std::size_t j, std::size_t k) {
        double v = static_cast<double>(grid.at(i, j, k));
        if (v == iso)
            v = iso + 1e-7;
        return v;
    };

    const CaseTable& table = case_table();
    TriangleMesh mesh;
    std::unordered_map<EdgeKey, std::uint32_t, EdgeKeyHash> weld;

    auto global_id = [n](std::size_t i, std::size_t j, std::size_t k) {
        return static_cast<std::uint64_t>((k * n + j) * n + i);
    };

    std::array<double, 8> v{};
    std::array<std::uint64_t, 8> gid{};
    std::array<Vec3, 8> pos{};

    for (std::size_t k = 0; k + 1 < n; ++k) {
        for (std::size_t j = 0; j + 1 < n; ++j) {
            for (std::size_t i = 0; i + 1 < n; ++i) {
                unsigned mask = 0;
                for (int c = 0; c < 8; ++c) {
                    std::size_t ci = i + (c & 1), cj = j + ((c >> 1) & 1), ck = k + ((c >> 2) & 1);
                    v[c] = sample(ci, cj, ck);
                    gid[c] = global_id(ci, cj, ck);
                    pos[c] = grid.position(ci, cj, ck);
                    if (v[c] >= iso)
                        mask |= 1u << c;
                }
                const auto& tris = table[mask];
                if (tris.empty())
                    continue;
                for (const CaseTri& tri : tris) {
                    std::array<std::uint32_t, 3> idx{};
                    for (int e = 0; e < 3; ++e) {
                        int a = tri.edges[e].first, b = tri.edges[e].second;
                        // canonicalize by global id so neighbors interpolate
                        // identically and weld to the same vertex
                        if (gid[a] > gid[b])
                            std::swap(a, b);
                        EdgeKey key{gid[a], gid[b]};
                        auto it = weld.find(key);
                        if (it != weld.end()) {
                            idx[e] = it->second;
                            continue;
                        }
                        double t = (iso - v[a]) / (v[b] - v[a]);
                        t = std::clamp(t, 0.0, 1.0);
                        Vec3 p = pos[a] + (pos[b] - pos[a]) * t;
                        std::uint32_t vid = static_cast<std::uint32_t>(mesh.vertices.size());
                        mesh.vertices.push_back(p);
                        weld.emplace(key, vid);
                        idx[e] = vid;
                    }
                    mesh.triangles.push_back(idx);
                }
            }
        }
    }
    return mesh;
}

} // namespace mendkit
