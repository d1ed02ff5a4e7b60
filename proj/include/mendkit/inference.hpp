#pragma once

#include "mendkit/training.hpp"

namespace mendkit {

struct InferenceConfig {
    std::size_t steps = 1500;
    std::size_t points_per_step = 4096;
    double lr_latent = 1e-3;
    // L_reg = lambda_nonempty * max(0, m0 - mean(o_R))
    //       + lambda_prox * mean(o_R * d_box)
    // where d_box is the distance to the fracture's occupied bounding box
    // inflated by `bbox_inflate`
    double lambda_nonempty = 1.0;
    double m0 = 0.01;
    double lambda_prox = 0.5;
    double bbox_inflate = 0.1;
    std::uint64_t seed = 0;

    void validate() const;
};

struct TTTConfig {
    std::int64_t epochs = 3000; // 0 disables test-time training
    double alpha = 0.1;         // weight of the pseudo-restoration loss
    double tau = 0.5;           // pseudo-label threshold on predicted o_C
    double lr_net = 5e-4;
    double lr_latent = 1e-3;
    std::size_t points_per_step = 4096;
    double holdout_fraction = 0.1; // fracture points reserved for L_F reporting
    bool resample_queries = false; // re-draw the query subset every epoch
    std::uint64_t seed = 0;

    void validate() const;
};

// The observable input at test time: query points with fracture occupancy.
struct FracturedInput {
    PointCloud points;
    std::vector<std::uint8_t> o_f;
};

FracturedInput fractured_input_from_samples(const SampleSet& samples);

// Deterministic fit/holdout split of the fracture queries.
void split_holdout(const FracturedInput& input, double holdout_fraction, std::uint64_t seed,
                   FracturedInput& fit, FracturedInput& holdout);

struct InferenceResult {
    LatentPair<float> latents;
    double loss_f = 0.0;   // final fracture BCE over the full fit set
    double loss_reg = 0.0; // final regularizer value
    std::size_t steps_run = 0;
};

// Latent-only optimization of L_F + L_reg with frozen weights (fresh
// sigma0-initialized latents).
InferenceResult infer_latents(const RestorationModel<float>& model,
                              const FracturedInput& input, const InferenceConfig& config);

struct PseudoRestoration {
    PointCloud points;                  // the inference query set
    std::vector<std::uint8_t> o_r_hat;  // frozen pseudo-labels

    std::size_t count() const {
        std::size_t n = 0;
        for (auto v : o_r_hat)
            n += v;
        return n;
    }
};

// o_R_hat(x) = 1 iff predicted o_C(x) >= tau and the input fracture is
// absent there (restoration = predicted complete minus fracture).
PseudoRestoration build_pseudo_restoration(const std::vector<float>& o_c_pred,
                                           const FracturedInput& input, double tau);

struct TTTResult {
    RestorationModel<float> model; // per-instance finetuned clone
    LatentPair<float> latents;
    std::int64_t epochs_run = 0;
};

// Test-time training: minimize L_F + alpha * L_R_hat over latents and all
// network weights, with fresh optimizer state.
TTTResult ttt_finetune(const RestorationModel<float>& base, const LatentPair<float>& latents,
                       const FracturedInput& fit, const PseudoRestoration& pseudo,
                       const TTTConfig& config);

struct ExtractedFields {
    VoxelGrid o_c, o_f, o_r;
    TriangleMesh mesh_c, mesh_f, mesh_r;
};

// Evaluate the model on a grid and extract the three iso-surfaces at 0.5.
ExtractedFields extract_restoration(const RestorationModel<float>& model,
                                    const LatentPair<float>& latent,
                                    std::size_t resolution, std::ostream* log = nullptr);

// ---------------------------------------------------------------------------
// per-instance test pipeline
// ---------------------------------------------------------------------------

struct InstanceRunConfig {
    InferenceConfig infer;
    TTTConfig ttt;
    bool with_ttt = true;
    std::size_t grid_resolution = 128;
    std::size_t surface_samples = 30000;
};

struct InstanceRunResult {
    std::string id;
    std::string method; // "inference-only" | "with-TTT"
    double cd_complete = 0.0;
    double cd_restoration = 0.0;
    double loss_f_pre = 0.0;  // holdout L_F after inference
    double loss_f_post = 0.0; // holdout L_F after TTT (== pre when TTT off)
    double loss_reg = 0.0;
    double mean_o_r_pre = 0.0;
    std::size_t pseudo_count = 0;
    double wall_seconds = 0.0;
    LatentPair<float> latents;
    RestorationModel<float> model;
};

InstanceRunResult run_test_instance(const RestorationModel<float>& base, const Dataset& data,
                                    const std::string& id, const InstanceRunConfig& config);

} // namespace mendkit
