#include "mendkit/obj_io.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace mendkit {

TriangleMesh read_obj(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in)
        throw IoError("read_obj: cannot open " + path.string());
    TriangleMesh mesh;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        std::istringstream ls(line);
        std::string tag;
        if (!(ls >> tag))
            continue;
        if (tag == "v") {
            Vec3 v;
            if (!(ls >> v.x >> v.y >> v.z))
                throw IoError("read_obj: malformed vertex at line " + std::to_string(line_no));
            mesh.vertices.push_back(v);
        } else if (tag == "f") {
            std::vector<std::uint32_t> idx;
            std::string tok;
            while (ls >> tok) {
                // accept i, i/t, i//n, i/t/n; only the vertex index is used
                long value = 0;
                auto end = tok.find('/');
                auto sv = tok.substr(0, end);
                auto res = std::from_chars(sv.data(), sv.data() + sv.size(), value);
                if (res.ec != std::errc() || value <= 0)
                    throw IoError("read_obj: bad face index '" + tok + "' at line " +
                                  std::to_string(line_no));
                idx.push_back(static_cast<std::uint32_t>(value - 1));
            }
            if (idx.size() != 3)
                throw IoError("read_obj: face with " + std::to_string(idx.size()) +
                              " vertices at line " + std::to_string(line_no) +
                              " (triangles only)");
            mesh.triangles.push_back({idx[0], idx[1], idx[2]});
        }
        // all other tags (comments, normals, ...) are ignored
    }
    mesh.validate();
    return mesh;
}

void write_obj(const TriangleMesh& mesh, const std::filesystem::path& path) {
    std::FILE* f = std::fopen(path.string().c_str(), "wb");
    if (!f)
        throw IoError("write_obj: cannot open " + path.string() + " for writing");
    for (const Vec3& v : mesh.vertices)
        std::fprintf(f, "v %.17g %.17g %.17g\n", v.x, v.y, v.z);
    for (const auto& t : mesh.triangles)
        std::fprintf(f, "f %u %u %u\n", t[0] + 1, t[1] + 1, t[2] + 1);
    if (std::fclose(f) != 0)
        throw IoError("write_obj: failed to finish writing " + path.string());
}

} // namespace mendkit
