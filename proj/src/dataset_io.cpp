#include "mendkit/dataset.hpp"

#include <atomic>
#include <cstring>
#include <fstream>
#include <mutex>
#include <ostream>
#include <thread>

#include <json.hpp>

#include "mendkit/obj_io.hpp"

namespace mendkit {

using nlohmann::json;

namespace {

constexpr char kMagic[4] = {'O', 'C', 'C', 'S'};
constexpr std::uint16_t kSampleVersion = 1;
constexpr int kManifestVersion = 1;

void put_u16(std::string& buf, std::uint16_t v) {
    buf.push_back(static_cast<char>(v & 0xff));
    buf.push_back(static_cast<char>((v >> 8) & 0xff));
}

void put_u64(std::string& buf, std::uint64_t v) {
    for (int i = 0; i < 8; ++i)
        buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_f32(std::string& buf, float v) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    for (int i = 0; i < 4; ++i)
        buf.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}

std::uint16_t get_u16(const char* p) {
    return static_cast<std::uint16_t>(static_cast<unsigned char>(p[0]) |
                                      (static_cast<unsigned char>(p[1]) << 8));
}

std::uint64_t get_u64(const char* p) {
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i)
        v = (v << 8) | static_cast<unsigned char>(p[i]);
    return v;
}

float get_f32(const char* p) {
    std::uint32_t bits = 0;
    for (int i = 3; i >= 0; --i)
        bits = (bits << 8) | static_cast<unsigned char>(p[i]);
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
}

Vec3 snap_to_float(const Vec3& p) {
    return {static_cast<double>(static_cast<float>(p.x)),
            static_cast<double>(static_cast<float>(p.y)),
            static_cast<double>(static_cast<float>(p.z))};
}

} // namespace

void write_samples(const std::filesystem::path& path, const SampleSet& samples) {
    if (samples.o_c.size() != samples.size() || samples.o_b.size() != samples.size())
        throw DimensionError("write_samples: label arrays do not match point count");
    std::string buf;
    buf.reserve(16 + 16 * samples.size());
    buf.append(kMagic, 4);
    put_u16(buf, kSampleVersion);
    put_u16(buf, 0);
    put_u64(buf, samples.size());
    for (std::size_t i = 0; i < samples.size(); ++i) {
        put_f32(buf, static_cast<float>(samples.points[i].x));
        put_f32(buf, static_cast<float>(samples.points[i].y));
        put_f32(buf, static_cast<float>(samples.points[i].z));
        buf.push_back(static_cast<char>(samples.o_c[i]));
        buf.push_back(static_cast<char>(samples.o_b[i]));
        buf.push_back(0);
        buf.push_back(0);
    }
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out)
        throw IoError("write_samples: cannot open " + path.string());
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!out)
        throw IoError("write_samples: short write to " + path.string());
}

SampleSet read_samples(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary | std::ios::ate);
    if (!in)
        throw IoError("read_samples: cannot open " + path.string());
    std::streamsize size = in.tellg();
    in.seekg(0);
    if (size < 16)
        throw IoError("read_samples: " + path.string() + " truncated: expected at least 16 " +
                      "header bytes, got " + std::to_string(size));
    std::string buf(static_cast<std::size_t>(size), '\0');
    in.read(buf.data(), size);
    if (!in)
        throw IoError("read_samples: short read from " + path.string());
    if (std::memcmp(buf.data(), kMagic, 4) != 0)
        throw IoError("read_samples: bad magic in " + path.string());
    std::uint16_t version = get_u16(buf.data() + 4);
    if (version != kSampleVersion)
        throw IoError("read_samples: unsupported version " + std::to_string(version) + " in " +
                      path.string());
    std::uint64_t count = get_u64(buf.data() + 8);
    std::uint64_t expected = 16 + 16 * count;
    if (static_cast<std::uint64_t>(size) != expected)
        throw IoError("read_samples: " + path.string() + " has " + std::to_string(size) +
                      " bytes, header promises " + std::to_string(expected));
    SampleSet s;
    s.points.reserve(count);
    s.o_c.reserve(count);
    s.o_b.reserve(count);
    for (std::uint64_t i = 0; i < count; ++i) {
        const char* rec = buf.data() + 16 + 16 * i;
        s.points.push_back(Vec3{get_f32(rec), get_f32(rec + 4), get_f32(rec + 8)});
        std::uint8_t oc = static_cast<std::uint8_t>(rec[12]);
        std::uint8_t ob = static_cast<std::uint8_t>(rec[13]);
        if (oc > 1 || ob > 1)
            throw IoError("read_samples: non-binary label in record " + std::to_string(i) +
                          " of " + path.string());
        s.o_c.push_back(oc);
        s.o_b.push_back(ob);
    }
    return s;
}

SampleSet sample_points(const MeshOccupancy& occ, const CutDescriptor& cut,
                        const TriangleMesh& complete, const SampleCounts& counts,
                        CounterRng& rng) {
    if (counts.uniform + counts.surface < 1)
        throw ParameterError("sample_points: need at least one sample");
    SampleSet s;
    CounterRng uni_rng = rng.substream("uniform");
    for (std::size_t i = 0; i < counts.uniform; ++i)
        s.points.push_back(
            snap_to_float({uni_rng.uniform(), uni_rng.uniform(), uni_rng.uniform()}));
    if (counts.surface > 0) {
        CounterRng surf_rng = rng.substream("surface");
        PointCloud on_surface = surface_sample(complete, counts.surface, surf_rng);
        for (Vec3 p : on_surface) {
            p.x = std::clamp(p.x + surf_rng.normal(0.0, counts.sigma), 0.0, 1.0);
            p.y = std::clamp(p.y + surf_rng.normal(0.0, counts.sigma), 0.0, 1.0);
            p.z = std::clamp(p.z + surf_rng.normal(0.0, counts.sigma), 0.0, 1.0);
            s.points.push_back(snap_to_float(p));
        }
    }
    CounterRng label_rng = rng.substream("labels");
    auto labels = occ.query(s.points, label_rng);
    s.o_c = std::move(labels);
    s.o_b.resize(s.points.size());
    for (std::size_t i = 0; i < s.points.size(); ++i)
        s.o_b[i] = cut.keeps(s.points[i]) ? 1 : 0;

    // every instance must expose both the fracture and the restoration
    auto has_both = [&] {
        bool f = false, r = false;
        for (std::size_t i = 0; i < s.size() && !(f && r); ++i) {
            f = f || s.o_f(i);
            r = r || s.o_r(i);
        }
        return f && r;
    };
    CounterRng extra_rng = rng.substream("extra");
    for (int round = 0; round < 10 && !has_both(); ++round) {
        PointCloud extra;
        for (int i = 0; i < 10000; ++i)
            extra.push_back(
                snap_to_float({extra_rng.uniform(), extra_rng.uniform(), extra_rng.uniform()}));
        auto lab = occ.query(extra, extra_rng);
        for (std::size_t i = 0; i < extra.size(); ++i) {
            s.points.push_back(extra[i]);
            s.o_c.push_back(lab[i]);
            s.o_b.push_back(cut.keeps(extra[i]) ? 1 : 0);
        }
    }
    if (!has_both())
        throw GeometryError("sample_points: could not find both fractured and restoration "
                            "samples; cut is degenerate");
    return s;
}

// ---------------------------------------------------------------------------
// manifest
// ---------------------------------------------------------------------------

namespace {

json cut_to_json(const CutDescriptor& cut) {
    json j;
    if (cut.kind == CutDescriptor::Kind::Plane) {
        j["kind"] = "plane";
        j["normal"] = {cut.normal.x, cut.normal.y, cut.normal.z};
        j["offset"] = cut.offset;
    } else {
        j["kind"] = "sphere";
        j["center"] = {cut.center.x, cut.center.y, cut.center.z};
        j["radius"] = cut.radius;
    }
    return j;
}

CutDescriptor cut_from_json(const json& j) {
    CutDescriptor cut;
    std::string kind = j.at("kind").get<std::string>();
    if (kind == "plane") {
        cut.kind = CutDescriptor::Kind::Plane;
        auto n = j.at("normal");
        cut.normal = {n.at(0).get<double>(), n.at(1).get<double>(), n.at(2).get<double>()};
        cut.offset = j.at("offset").get<double>();
    } else if (kind == "sphere") {
        cut.kind = CutDescriptor::Kind::SphereBite;
        auto c = j.at("center");
        cut.center = {c.at(0).get<double>(), c.at(1).get<double>(), c.at(2).get<double>()};
        cut.radius = j.at("radius").get<double>();
    } else {
        throw IoError("manifest: unknown cut kind '" + kind + "'");
    }
    return cut;
}

} // namespace

const InstanceEntry& DatasetManifest::entry(const std::string& id) const {
    for (const auto& e : instances)
        if (e.id == id)
            return e;
    throw ParameterError("dataset: unknown instance id '" + id + "'");
}

SplitSizes split_sizes(std::size_t n) {
    if (n < 3)
        throw ParameterError("split_sizes: need at least 3 instances");
    const double fracs[3] = {0.70, 0.15, 0.15};
    std::size_t base[3];
    double rem[3];
    std::size_t used = 0;
    for (int i = 0; i < 3; ++i) {
        double exact = fracs[i] * static_cast<double>(n);
        base[i] = static_cast<std::size_t>(exact);
        rem[i] = exact - static_cast<double>(base[i]);
        used += base[i];
    }
    // largest remainder; ties resolved train > val > test
    while (used < n) {
        int best = 0;
        for (int i = 1; i < 3; ++i)
            if (rem[i] > rem[best])
                best = i;
        ++base[best];
        rem[best] = -1.0;
        ++used;
    }
    return {base[0], base[1], base[2]};
}

void assign_splits(DatasetManifest& manifest, CounterRng& rng) {
    std::vector<std::size_t> order(manifest.instances.size());
    for (std::size_t i = 0; i < order.size(); ++i)
        order[i] = i;
    // Fisher-Yates with the dataset substream
    for (std::size_t i = order.size(); i > 1; --i)
        std::swap(order[i - 1], order[rng.index(i)]);
    SplitSizes sizes = split_sizes(order.size());
    manifest.train_ids.clear();
    manifest.val_ids.clear();
    manifest.test_ids.clear();
    for (std::size_t i = 0; i < order.size(); ++i) {
        const std::string& id = manifest.instances[order[i]].id;
        if (i < sizes.train)
            manifest.train_ids.push_back(id);
        else if (i < sizes.train + sizes.val)
            manifest.val_ids.push_back(id);
        else
            manifest.test_ids.push_back(id);
    }
}

void write_manifest(const std::filesystem::path& dir, const DatasetManifest& m) {
    json j;
    j["format_version"] = kManifestVersion;
    j["name"] = m.name;
    j["class"] = m.class_name;
    j["band"] = {m.band[0], m.band[1]};
    j["seed"] = m.seed;
    j["counts"] = {{"uniform", m.counts.uniform},
                   {"surface", m.counts.surface},
                   {"sigma", m.counts.sigma}};
    j["splits"] = {{"train", m.train_ids}, {"val", m.val_ids}, {"test", m.test_ids}};
    json instances = json::array();
    for (const auto& e : m.instances) {
        json ji;
        ji["id"] = e.id;
        ji["measured_fraction"] = e.measured_fraction;
        ji["cut"] = cut_to_json(e.cut);
        ji["files"] = {{"samples", "instances/" + e.id + ".occs"},
                       {"complete", "instances/" + e.id + "_complete.obj"},
                       {"fractured", "instances/" + e.id + "_fractured.obj"},
                       {"restoration", "instances/" + e.id + "_restoration.obj"}};
        instances.push_back(ji);
    }
    j["instances"] = instances;
    std::ofstream out(dir / "manifest.json", std::ios::binary | std::ios::trunc);
    if (!out)
        throw IoError("write_manifest: cannot open " + (dir / "manifest.json").string());
    out << j.dump(2) << "\n";
}

DatasetManifest read_manifest(const std::filesystem::path& dir) {
    std::ifstream in(dir / "manifest.json");
    if (!in)
        throw IoError("read_manifest: cannot open " + (dir / "manifest.json").string());
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw IoError("read_manifest: invalid JSON: " + std::string(e.what()));
    }
    if (j.value("format_version", 0) != kManifestVersion)
        throw IoError("read_manifest: unsupported format_version");
    DatasetManifest m;
    m.name = j.at("name").get<std::string>();
    m.class_name = j.at("class").get<std::string>();
    m.band = {j.at("band").at(0).get<double>(), j.at("band").at(1).get<double>()};
    m.seed = j.at("seed").get<std::uint64_t>();
    m.counts.uniform = j.at("counts").at("uniform").get<std::size_t>();
    m.counts.surface = j.at("counts").at("surface").get<std::size_t>();
    m.counts.sigma = j.at("counts").at("sigma").get<double>();
    m.train_ids = j.at("splits").at("train").get<std::vector<std::string>>();
    m.val_ids = j.at("splits").at("val").get<std::vector<std::string>>();
    m.test_ids = j.at("splits").at("test").get<std::vector<std::string>>();
    for (const auto& ji : j.at("instances")) {
        InstanceEntry e;
        e.id = ji.at("id").get<std::string>();
        e.measured_fraction = ji.at("measured_fraction").get<double>();
        e.cut = cut_from_json(ji.at("cut"));
        m.instances.push_back(std::move(e));
    }
    return m;
}

// ---------------------------------------------------------------------------
// Dataset handle
// ---------------------------------------------------------------------------

Dataset::Dataset(std::filesystem::path dir)
    : dir_(std::move(dir)), manifest_(read_manifest(dir_)) {}

std::filesystem::path Dataset::sample_path(const std::string& id) const {
    return dir_ / "instances" / (id + ".occs");
}

std::filesystem::path Dataset::mesh_path(const std::string& id,
                                         const std::string& which) const {
    return dir_ / "instances" / (id + "_" + which + ".obj");
}

SampleSet Dataset::samples(const std::string& id) const {
    manifest_.entry(id); // validates the id
    return read_samples(sample_path(id));
}

TriangleMesh Dataset::mesh(const std::string& id, const std::string& which) const {
    manifest_.entry(id);
    return read_obj(mesh_path(id, which));
}

// ---------------------------------------------------------------------------
// generation
// ---------------------------------------------------------------------------

namespace {

struct InstancePayload {
    InstanceEntry entry;
    SampleSet samples;
    TriangleMesh complete, fractured, restoration;
    bool skipped = false;
    std::string skip_reason;
};

InstancePayload generate_instance(const GenDataConfig& cfg, std::size_t index,
                                  const CounterRng& root) {
    InstancePayload out;
    char idbuf[32];
    std::snprintf(idbuf, sizeof(idbuf), "%s_%04zu", cfg.class_spec.name.c_str(), index);
    out.entry.id = idbuf;

    CounterRng inst = root.substream("instance").substream(index);
    CounterRng gen_rng = inst.substream("shape");
    GeneratedShape shape = gen_shape(cfg.class_spec, gen_rng);
    MeshOccupancy occ(shape.mesh);

    CounterRng cache_rng = inst.substream("cache");
    PointCloud cache;
    cache.reserve(cfg.cache_points);
    for (std::size_t i = 0; i < cfg.cache_points; ++i)
        cache.push_back({cache_rng.uniform(), cache_rng.uniform(), cache_rng.uniform()});
    auto cache_labels = occ.query(cache, cache_rng);

    // target a slightly shrunken band so the final high-precision measurement
    // still lands inside
    double shrink = std::min(0.01, (cfg.band[1] - cfg.band[0]) / 4.0);
    VolumeBand target{cfg.band[0] + shrink, cfg.band[1] - shrink};
    CounterRng cut_rng = inst.substream("cut");
    FractureResult fr;
    try {
        fr = fracture(cache, cache_labels, target, cut_rng);
    } catch (const FractureError& e) {
        out.skipped = true;
        out.skip_reason = e.what();
        return out;
    }
    CounterRng measure_rng = inst.substream("measure");
    out.entry.cut = fr.cut;
    out.entry.measured_fraction =
        measured_removed_fraction(occ, fr.cut, cfg.fraction_samples, measure_rng);
    if (out.entry.measured_fraction < cfg.band[0] || out.entry.measured_fraction > cfg.band[1]) {
        out.skipped = true;
        out.skip_reason = "measured fraction " + std::to_string(out.entry.measured_fraction) +
                          " escaped the band";
        return out;
    }

    CounterRng sample_rng = inst.substream("samples");
    out.samples = sample_points(occ, fr.cut, shape.mesh, cfg.counts, sample_rng);

    out.complete = shape.mesh;
    const CutDescriptor cut = fr.cut;
    const SignedField field = shape.field;
    out.fractured = mesh_signed_field(
        [&](const Vec3& p) { return std::max(field(p), cut.keep_field(p)); },
        cfg.class_spec.gen_resolution);
    out.restoration = mesh_signed_field(
        [&](const Vec3& p) { return std::max(field(p), -cut.keep_field(p)); },
        cfg.class_spec.gen_resolution);
    return out;
}

} // namespace

DatasetManifest generate_dataset(const GenDataConfig& cfg,
                                 const std::filesystem::path& out_dir, std::ostream* log) {
    namespace fs = std::filesystem;
    if (cfg.count < 3)
        throw ParameterError("generate_dataset: need at least 3 instances for splits");
    fs::create_directories(out_dir / "instances");

    CounterRng root(cfg.seed);
    std::vector<InstancePayload> payloads(cfg.count);
    int jobs = std::max(1, cfg.jobs);
    if (jobs == 1) {
        for (std::size_t i = 0; i < cfg.count; ++i)
            payloads[i] = generate_instance(cfg, i, root);
    } else {
        std::atomic<std::size_t> next{0};
        std::exception_ptr error;
        std::mutex error_mutex;
        auto worker = [&] {
            for (;;) {
                std::size_t i = next.fetch_add(1);
                if (i >= cfg.count)
                    return;
                try {
                    payloads[i] = generate_instance(cfg, i, root);
                } catch (...) {
                    std::lock_guard<std::mutex> lock(error_mutex);
                    if (!error)
                        error = std::current_exception();
                    return;
                }
            }
        };
        std::vector<std::thread> pool;
        for (int t = 0; t < jobs; ++t)
            pool.emplace_back(worker);
        for (auto& t : pool)
            t.join();
        if (error)
            std::rethrow_exception(error);
    }

    DatasetManifest manifest;
    manifest.name = cfg.name;
    manifest.class_name = cfg.class_spec.name;
    manifest.band = cfg.band;
    manifest.seed = cfg.seed;
    manifest.counts = cfg.counts;

    std::size_t skipped = 0;
    for (auto& p : payloads) {
        if (p.skipped) {
            ++skipped;
            if (log)
                *log << "skipping " << p.entry.id << ": " << p.skip_reason << "\n";
            continue;
        }
        write_samples(out_dir / "instances" / (p.entry.id + ".occs"), p.samples);
        write_obj(p.complete, out_dir / "instances" / (p.entry.id + "_complete.obj"));
        write_obj(p.fractured, out_dir / "instances" / (p.entry.id + "_fractured.obj"));
        write_obj(p.restoration, out_dir / "instances" / (p.entry.id + "_restoration.obj"));
        manifest.instances.push_back(p.entry);
    }
    if (skipped * 10 > cfg.count)
        throw FractureError("generate_dataset: " + std::to_string(skipped) + " of " +
                            std::to_string(cfg.count) + " instances skipped (>10%)");

    CounterRng split_rng = root.substream("splits");
    assign_splits(manifest, split_rng);
    write_manifest(out_dir, manifest);
    return manifest;
}

} // namespace mendkit
