#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "mendkit/autodiff.hpp"
#include "mendkit/geometry.hpp"
#include "mendkit/rng.hpp"

namespace mendkit {

struct ModelConfig {
    std::size_t d_c = 200;    // complete-shape latent width
    std::size_t d_b = 200;    // break-set latent width
    std::size_t hidden = 512; // hidden layer width
    std::size_t depth = 8;    // linear layers per decoder
    int skip_layer = 4;       // concat (h, z, x) after this layer in f
    double dropout = 0.2;     // hidden-layer dropout rate in train mode
    double latent_sigma0 = 0.01;

    void validate() const;
};

// One MLP decoder: `depth` linear layers, ReLU + dropout between them,
// sigmoid output. The complete decoder re-injects (z, x) by concatenation
// after `skip_layer`, widening that activation; the break decoder has no
// skip.
template <typename T>
struct DecoderParams {
    std::vector<Tensor<T>> weights;
    std::vector<Tensor<T>> biases;
    int skip_layer = -1; // -1 = no skip
    std::size_t d_latent = 0;

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto& w : weights)
            n += w.size();
        for (const auto& b : biases)
            n += b.size();
        return n;
    }
};

template <typename T>
struct RestorationModel {
    ModelConfig config;
    DecoderParams<T> complete; // f_theta1
    DecoderParams<T> breaker;  // g_theta2

    std::size_t parameter_count() const {
        return complete.parameter_count() + breaker.parameter_count();
    }
    // stable name -> tensor view over both decoders
    std::vector<NamedParam<T>> parameters();
};

template <typename T>
RestorationModel<T> init_model(const ModelConfig& config, CounterRng& rng);

template <typename T>
struct LatentPair {
    Tensor<T> z_c;
    Tensor<T> z_b;
};

// instance id -> latent pair; ordered so iteration is deterministic
template <typename T>
using LatentTable = std::map<std::string, LatentPair<T>>;

template <typename T>
LatentPair<T> init_latent(const ModelConfig& config, CounterRng& rng);

template <typename T>
LatentTable<T> init_latents(const std::vector<std::string>& ids, const ModelConfig& config,
                            CounterRng& rng);

// [B x 3] tensor from points; validates the coordinate domain.
template <typename T>
Tensor<T> points_to_tensor(const PointCloud& points);

// ---------------------------------------------------------------------------
// forward passes
// ---------------------------------------------------------------------------

template <typename T>
struct StagedDecoder {
    std::vector<typename Tape<T>::NodeId> weights;
    std::vector<typename Tape<T>::NodeId> biases;
    int skip_layer = -1;
};

template <typename T>
struct StagedModel {
    StagedDecoder<T> complete;
    StagedDecoder<T> breaker;
    // aligned with RestorationModel::parameters()
    std::vector<typename Tape<T>::NodeId> param_ids;
};

template <typename T>
StagedModel<T> stage_model(Tape<T>& tape, const RestorationModel<T>& model,
                           bool requires_grad);

template <typename T>
typename Tape<T>::NodeId decoder_forward(Tape<T>& tape, const StagedDecoder<T>& dec,
                                         typename Tape<T>::NodeId points,
                                         typename Tape<T>::NodeId latent, bool training,
                                         double dropout_rate, CounterRng& dropout_rng,
                                         const char* tag);

template <typename T>
struct OccupancyNodes {
    typename Tape<T>::NodeId o_c, o_b, o_f, o_r;
};

// o_C = f(x + z_C), o_B = g(x + z_B), o_F = o_C*o_B, o_R = o_C*(1-o_B);
// composition is computed, never predicted independently.
template <typename T>
OccupancyNodes<T> predict_on_tape(Tape<T>& tape, const StagedModel<T>& staged,
                                  typename Tape<T>::NodeId points,
                                  typename Tape<T>::NodeId z_c,
                                  typename Tape<T>::NodeId z_b, bool training,
                                  double dropout_rate, CounterRng& dropout_rng);

template <typename T>
struct OccupancyBatch {
    std::vector<T> o_c, o_b, o_f, o_r;
};

// Tape-free eval-mode forward (deterministic, dropout off).
template <typename T>
OccupancyBatch<T> predict_eval(const RestorationModel<T>& model, const LatentPair<T>& latent,
                               const PointCloud& points);

// ---------------------------------------------------------------------------
// checkpoints
// ---------------------------------------------------------------------------

struct CheckpointMeta {
    std::uint64_t seed = 0;
    std::int64_t epoch = 0;
    double best_val_cd = -1.0; // -1 = never validated
    std::int64_t best_val_epoch = -1;
    double last_total_loss = -1.0;
    std::int64_t loss_history_length = 0;
};

// checkpoint.json (+layout table) + params.bin + latents.bin, all
// little-endian float32; round-trips must be bit-identical.
void save_checkpoint(const std::filesystem::path& dir, const RestorationModel<float>& model,
                     const LatentTable<float>& latents, const CheckpointMeta& meta);

struct LoadedCheckpoint {
    RestorationModel<float> model;
    LatentTable<float> latents;
    CheckpointMeta meta;
};

LoadedCheckpoint load_checkpoint(const std::filesystem::path& dir);

extern template struct RestorationModel<float>;
extern template struct RestorationModel<double>;

} // namespace mendkit
