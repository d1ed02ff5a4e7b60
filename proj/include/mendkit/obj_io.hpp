#pragma once

#include <filesystem>

#include "mendkit/geometry.hpp"

namespace mendkit {

// Wavefront OBJ, triangles only: `v x y z` and `f i j k` (1-based). Faces
// with more or fewer than three vertices are rejected. Written coordinates
// round-trip exactly.
TriangleMesh read_obj(const std::filesystem::path& path);
void write_obj(const TriangleMesh& mesh, const std::filesystem::path& path);

} // namespace mendkit
