#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "mendkit/dataset.hpp"
#include "mendkit/inference.hpp"
#include "mendkit/training.hpp"

namespace mendkit {

// One JSON document configuring the whole pipeline. Defaults mirror the
// published hyperparameters (latent dims 200, lr 5e-4/1e-3, alpha 0.1, TTT
// 3000 epochs, bands 5-20% / 45-55%). Unknown keys are rejected.
struct RunConfig {
    struct Data {
        std::string class_name = "boxes";
        std::size_t count = 240;
        VolumeBand band{0.05, 0.20};
        double jitter = 0.25;
        std::size_t gen_resolution = 96;
        std::size_t cache_points = 200000;
        std::size_t fraction_samples = 1000000;
        int jobs = 1;
        SampleCounts samples;
    } data;

    ModelConfig model;
    TrainConfig train;
    InferenceConfig infer;
    TTTConfig ttt;

    struct Eval {
        std::size_t grid_resolution = 128;
        std::size_t surface_samples = 30000;
        std::size_t curve_thresholds = 48;
    } eval;

    std::uint64_t seed = 0;

    GenDataConfig gen_data_config(const std::string& dataset_name) const;
    InstanceRunConfig instance_run_config(bool with_ttt) const;
};

// Load from a JSON file (optional), apply dotted overrides ("ttt.alpha=0.2"),
// then the MENDKIT_SEED environment variable. Unknown keys and malformed
// values raise UsageError.
RunConfig load_run_config(const std::optional<std::filesystem::path>& config_path,
                          const std::vector<std::string>& overrides);

std::string run_config_to_json(const RunConfig& config);

} // namespace mendkit
