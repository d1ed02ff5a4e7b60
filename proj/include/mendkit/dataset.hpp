#pragma once

#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "mendkit/fracture.hpp"
#include "mendkit/shapes.hpp"

namespace mendkit {

// Labeled occupancy samples of one instance. Fractured/restoration labels
// are always derived (o_F = o_C & o_B, o_R = o_C & !o_B), never stored.
struct SampleSet {
    PointCloud points;
    std::vector<std::uint8_t> o_c;
    std::vector<std::uint8_t> o_b;

    std::size_t size() const { return points.size(); }
    std::uint8_t o_f(std::size_t i) const { return o_c[i] & o_b[i]; }
    std::uint8_t o_r(std::size_t i) const {
        return static_cast<std::uint8_t>(o_c[i] & (1 - o_b[i]));
    }
};

struct SampleCounts {
    std::size_t uniform = 100000;
    std::size_t surface = 100000; // near-surface points, 0 for paper-pure sampling
    double sigma = 0.01;          // jitter radius for near-surface points
};

// Uniform cube samples plus jittered surface samples, labeled by exact
// queries. Coordinates are snapped to float32 before labeling so stored
// records stay exactly consistent. Guarantees at least one o_F=1 and one
// o_R=1 sample.
SampleSet sample_points(const MeshOccupancy& occ, const CutDescriptor& cut,
                        const TriangleMesh& complete, const SampleCounts& counts,
                        CounterRng& rng);

// Binary sample file: 16-byte header (magic "OCCS", version u16, reserved
// u16, record count u64, all little-endian) followed by 16-byte records of
// 3 x float32 coordinates, u8 o_C, u8 o_B and 2 zero pad bytes.
void write_samples(const std::filesystem::path& path, const SampleSet& samples);
SampleSet read_samples(const std::filesystem::path& path);

struct InstanceEntry {
    std::string id;
    CutDescriptor cut;
    double measured_fraction = 0.0;
};

struct DatasetManifest {
    std::string name;
    std::string class_name;
    VolumeBand band{0.05, 0.20};
    std::uint64_t seed = 0;
    SampleCounts counts;
    std::vector<std::string> train_ids, val_ids, test_ids;
    std::vector<InstanceEntry> instances;

    const InstanceEntry& entry(const std::string& id) const;
};

struct SplitSizes {
    std::size_t train = 0, val = 0, test = 0;
};

// 70/15/15 by largest remainder.
SplitSizes split_sizes(std::size_t n);

// Deterministic shuffled split assignment over manifest.instances.
void assign_splits(DatasetManifest& manifest, CounterRng& rng);

void write_manifest(const std::filesystem::path& dir, const DatasetManifest& manifest);
DatasetManifest read_manifest(const std::filesystem::path& dir);

// Read-side handle over a dataset directory.
class Dataset {
public:
    explicit Dataset(std::filesystem::path dir);

    const DatasetManifest& manifest() const { return manifest_; }
    const std::filesystem::path& dir() const { return dir_; }

    SampleSet samples(const std::string& id) const;
    TriangleMesh mesh(const std::string& id, const std::string& which) const;

    std::filesystem::path sample_path(const std::string& id) const;
    std::filesystem::path mesh_path(const std::string& id, const std::string& which) const;

private:
    std::filesystem::path dir_;
    DatasetManifest manifest_;
};

struct GenDataConfig {
    std::string name = "dataset";
    ClassSpec class_spec;
    std::size_t count = 240;
    VolumeBand band{0.05, 0.20};
    SampleCounts counts;
    std::uint64_t seed = 0;
    std::size_t cache_points = 200000;      // bisection label cache
    std::size_t fraction_samples = 1000000; // final fraction measurement
    int jobs = 1;
};

// Generates, fractures, samples and persists a class dataset. Instances that
// fail to fracture are skipped with a log line; more than 10% skipped is an
// error.
DatasetManifest generate_dataset(const GenDataConfig& config,
                                 const std::filesystem::path& out_dir,
                                 std::ostream* log = nullptr);

} // namespace mendkit
