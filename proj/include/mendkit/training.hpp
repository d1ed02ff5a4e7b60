#pragma once

#include <array>
#include <filesystem>
#include <iosfwd>
#include <map>

#include "mendkit/dataset.hpp"
#include "mendkit/decoder.hpp"

namespace mendkit {

struct TrainConfig {
    std::int64_t epochs = 2000;
    std::size_t instances_per_batch = 8;
    std::size_t points_per_instance = 4096;
    double lr_net = 5e-4;
    double lr_latent = 1e-3;
    int validation_period = 25; // epochs between validations, 0 = never
    int patience = 10;          // validation rounds without improvement
    std::uint64_t seed = 0;
    // validation protocol: short latent-only inference, then Chamfer distance
    // of the extracted complete mesh against ground-truth surface samples
    std::size_t val_infer_steps = 200;
    std::size_t val_points_per_step = 2048;
    std::size_t val_grid_resolution = 64;
    std::size_t val_surface_samples = 30000;
    // total point-evaluation budget; >= 0 overrides `epochs` (compute
    // fairness hook for offsetting test-time-training cost)
    std::int64_t iteration_budget = -1;

    void validate() const;
};

struct LossTerms {
    double l_c = 0.0, l_b = 0.0, l_f = 0.0, l_r = 0.0;
    double total() const { return l_c + l_b + l_f + l_r; }
};

// Four mean-reduced BCE terms (complete, break, fractured, restoration);
// fractured/restoration labels are derived from the stored binary labels.
template <typename T>
std::array<typename Tape<T>::NodeId, 4> loss_terms_on_tape(Tape<T>& tape,
                                                           const OccupancyNodes<T>& pred,
                                                           const std::vector<std::uint8_t>& o_c,
                                                           const std::vector<std::uint8_t>& o_b);

// Adam over the two parameter groups (network 5e-4, latents 1e-3 by
// default); latent states step only when their instance is in the batch.
class AdamGroups {
public:
    AdamGroups(AdamConfig<float> net, AdamConfig<float> latent)
        : net_cfg_(net), latent_cfg_(latent) {}

    void step_network(const std::vector<NamedParam<float>>& params,
                      const std::vector<const Tensor<float>*>& grads);
    void step_latent(const std::string& name, Tensor<float>& value,
                     const Tensor<float>& grad);

    const AdamConfig<float>& net_config() const { return net_cfg_; }
    const AdamConfig<float>& latent_config() const { return latent_cfg_; }

    void save(const std::filesystem::path& path) const;
    void load(const std::filesystem::path& path);

private:
    AdamConfig<float> net_cfg_;
    AdamConfig<float> latent_cfg_;
    std::map<std::string, AdamState<float>> states_;
};

struct TrainOutcome {
    RestorationModel<float> model; // best-validation state (last state if never validated)
    LatentTable<float> latents;
    CheckpointMeta meta;
    std::vector<LossTerms> history; // one entry per epoch
};

// Joint optimization of network parameters and per-instance latents over the
// dataset's train split. Persists the best checkpoint at ckpt_dir and the
// resumable last state at ckpt_dir/last when ckpt_dir is non-empty.
TrainOutcome train_class(const Dataset& data, const ModelConfig& model_config,
                         const TrainConfig& config, const std::filesystem::path& ckpt_dir,
                         bool resume = false, std::ostream* log = nullptr);

// Mean validation CD over `ids` with frozen weights (fresh latents, short
// inference). `salt` decorrelates repeated validations.
double validate_model(const RestorationModel<float>& model, const Dataset& data,
                      const std::vector<std::string>& ids, const TrainConfig& config,
                      std::uint64_t salt);

// Chamfer distance between ground-truth complete surface samples and the
// extracted complete mesh of (model, latent). Returns `kFailedCd` when the
// extraction is empty.
inline constexpr double kFailedCd = 10.0;
double complete_mesh_cd(const RestorationModel<float>& model, const LatentPair<float>& latent,
                        const TriangleMesh& gt_complete, std::size_t grid_resolution,
                        std::size_t surface_samples, CounterRng& rng);

// Scalar BCE between predictions and binary labels (reporting helper).
double bce_scalar(const std::vector<float>& pred, const std::vector<std::uint8_t>& target);

} // namespace mendkit
