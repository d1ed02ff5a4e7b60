#include "mendkit/training.hpp"

#include <chrono>
#include <cstring>
#include <fstream>

#include "mendkit/inference.hpp"

namespace mendkit {

void TrainConfig::validate() const {
    if (epochs < 0)
        throw ParameterError("train: epochs must be non-negative");
    if (instances_per_batch < 1 || points_per_instance < 1)
        throw ParameterError("train: batch sizes must be positive");
    if (!(lr_net > 0.0) || !(lr_latent > 0.0))
        throw ParameterError("train: learning rates must be positive");
    if (validation_period < 0 || patience < 1)
        throw ParameterError("train: validation_period must be >= 0 and patience >= 1");
}

template <typename T>
std::array<typename Tape<T>::NodeId, 4> loss_terms_on_tape(Tape<T>& tape,
                                                           const OccupancyNodes<T>& pred,
                                                           const std::vector<std::uint8_t>& o_c,
                                                           const std::vector<std::uint8_t>& o_b) {
    const std::size_t n = o_c.size();
    if (o_b.size() != n || tape.value(pred.o_c).size() != n)
        throw DimensionError("loss_terms: label arrays do not match prediction batch");
    Tensor<T> t_c = Tensor<T>::zeros({n, 1});
    Tensor<T> t_b = Tensor<T>::zeros({n, 1});
    Tensor<T> t_f = Tensor<T>::zeros({n, 1});
    Tensor<T> t_r = Tensor<T>::zeros({n, 1});
    for (std::size_t i = 0; i < n; ++i) {
        if (o_c[i] > 1 || o_b[i] > 1)
            throw ParameterError("loss_terms: labels must be binary");
        t_c.data[i] = static_cast<T>(o_c[i]);
        t_b.data[i] = static_cast<T>(o_b[i]);
        t_f.data[i] = static_cast<T>(o_c[i] & o_b[i]);
        t_r.data[i] = static_cast<T>(o_c[i] & (1 - o_b[i]));
    }
    return {tape.bce(pred.o_c, t_c), tape.bce(pred.o_b, t_b), tape.bce(pred.o_f, t_f),
            tape.bce(pred.o_r, t_r)};
}

template std::array<Tape<float>::NodeId, 4> loss_terms_on_tape<float>(
    Tape<float>&, const OccupancyNodes<float>&, const std::vector<std::uint8_t>&,
    const std::vector<std::uint8_t>&);
template std::array<Tape<double>::NodeId, 4> loss_terms_on_tape<double>(
    Tape<double>&, const OccupancyNodes<double>&, const std::vector<std::uint8_t>&,
    const std::vector<std::uint8_t>&);

double bce_scalar(const std::vector<float>& pred, const std::vector<std::uint8_t>& target) {
    if (pred.size() != target.size())
        throw DimensionError("bce_scalar: size mismatch");
    if (pred.empty())
        throw ParameterError("bce_scalar: empty batch");
    double acc = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        double p = std::clamp(static_cast<double>(pred[i]), 1e-7, 1.0 - 1e-7);
        double t = target[i];
        acc -= t * std::log(p) + (1.0 - t) * std::log(1.0 - p);
    }
    return acc / static_cast<double>(pred.size());
}

// ---------------------------------------------------------------------------
// AdamGroups
// ---------------------------------------------------------------------------

void AdamGroups::step_network(const std::vector<NamedParam<float>>& params,
                              const std::vector<const Tensor<float>*>& grads) {
    if (params.size() != grads.size())
        throw DimensionError("adam: parameter/gradient count mismatch");
    for (std::size_t i = 0; i < params.size(); ++i) {
        const Tensor<float>* g = grads[i];
        Tensor<float> zero;
        if (g == nullptr || g->size() == 0) {
            zero = Tensor<float>::zeros(params[i].tensor->shape);
            g = &zero;
        }
        states_[params[i].name].step(*params[i].tensor, *g, net_cfg_, params[i].name);
    }
}

void AdamGroups::step_latent(const std::string& name, Tensor<float>& value,
                             const Tensor<float>& grad) {
    if (grad.size() == 0) {
        Tensor<float> zero = Tensor<float>::zeros(value.shape);
        states_[name].step(value, zero, latent_cfg_, name);
        return;
    }
    states_[name].step(value, grad, latent_cfg_, name);
}

namespace {

void put_u64(std::string& buf, std::uint64_t v) {
    for (int i = 0; i < 8; ++i)
        buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint64_t get_u64(const char* p) {
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i)
        v = (v << 8) | static_cast<unsigned char>(p[i]);
    return v;
}

void put_f32(std::string& buf, float v) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    for (int i = 0; i < 4; ++i)
        buf.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}

float get_f32(const char* p) {
    std::uint32_t bits = 0;
    for (int i = 3; i >= 0; --i)
        bits = (bits << 8) | static_cast<unsigned char>(p[i]);
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
}

} // namespace

void AdamGroups::save(const std::filesystem::path& path) const {
    std::string buf;
    buf.append("MKOP", 4);
    put_u64(buf, 1); // version
    put_u64(buf, states_.size());
    for (const auto& [name, state] : states_) {
        put_u64(buf, name.size());
        buf.append(name);
        put_u64(buf, state.m().size());
        put_u64(buf, static_cast<std::uint64_t>(state.step_count()));
        for (float v : state.m())
            put_f32(buf, v);
        for (float v : state.v())
            put_f32(buf, v);
    }
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out)
        throw IoError("AdamGroups::save: cannot open " + path.string());
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!out)
        throw IoError("AdamGroups::save: short write to " + path.string());
}

void AdamGroups::load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary | std::ios::ate);
    if (!in)
        throw IoError("AdamGroups::load: cannot open " + path.string());
    std::streamsize size = in.tellg();
    in.seekg(0);
    std::string buf(static_cast<std::size_t>(size), '\0');
    in.read(buf.data(), size);
    if (!in || size < 20 || std::memcmp(buf.data(), "MKOP", 4) != 0)
        throw IoError("AdamGroups::load: invalid optimizer file " + path.string());
    if (get_u64(buf.data() + 4) != 1)
        throw IoError("AdamGroups::load: unsupported version");
    std::uint64_t count = get_u64(buf.data() + 12);
    std::size_t pos = 20;
    states_.clear();
    auto need = [&](std::size_t bytes) {
        if (pos + bytes > buf.size())
            throw IoError("AdamGroups::load: truncated optimizer file " + path.string());
    };
    for (std::uint64_t e = 0; e < count; ++e) {
        need(8);
        std::uint64_t name_len = get_u64(buf.data() + pos);
        pos += 8;
        need(name_len + 16);
        std::string name = buf.substr(pos, name_len);
        pos += name_len;
        std::uint64_t n = get_u64(buf.data() + pos);
        pos += 8;
        std::int64_t step = static_cast<std::int64_t>(get_u64(buf.data() + pos));
        pos += 8;
        need(8 * n);
        std::vector<float> m(n), v(n);
        for (std::uint64_t i = 0; i < n; ++i) {
            m[i] = get_f32(buf.data() + pos);
            pos += 4;
        }
        for (std::uint64_t i = 0; i < n; ++i) {
            v[i] = get_f32(buf.data() + pos);
            pos += 4;
        }
        states_[name].restore(std::move(m), std::move(v), step);
    }
}

// ---------------------------------------------------------------------------
// validation
// ---------------------------------------------------------------------------

double complete_mesh_cd(const RestorationModel<float>& model, const LatentPair<float>& latent,
                        const TriangleMesh& gt_complete, std::size_t grid_resolution,
                        std::size_t surface_samples, CounterRng& rng) {
    VoxelGrid grid = VoxelGrid::over_unit_cube(grid_resolution);
    PointCloud slice;
    slice.reserve(grid_resolution * grid_resolution);
    for (std::size_t k = 0; k < grid_resolution; ++k) {
        slice.clear();
        for (std::size_t j = 0; j < grid_resolution; ++j)
            for (std::size_t i = 0; i < grid_resolution; ++i)
                slice.push_back(grid.position(i, j, k));
        auto out = predict_eval(model, latent, slice);
        for (std::size_t j = 0; j < grid_resolution; ++j)
            for (std::size_t i = 0; i < grid_resolution; ++i)
                grid.at(i, j, k) = out.o_c[j * grid_resolution + i];
    }
    TriangleMesh mesh = marching_cubes(grid, 0.5);
    if (mesh.empty())
        return kFailedCd;
    PointCloud pred_pts = surface_sample(mesh, surface_samples, rng);
    PointCloud gt_pts = surface_sample(gt_complete, surface_samples, rng);
    return chamfer_distance(gt_pts, pred_pts);
}

double validate_model(const RestorationModel<float>& model, const Dataset& data,
                      const std::vector<std::string>& ids, const TrainConfig& config,
                      std::uint64_t salt) {
    if (ids.empty())
        throw ParameterError("validate: empty validation set");
    double sum = 0.0;
    for (const auto& id : ids) {
        SampleSet samples = data.samples(id);
        FracturedInput input = fractured_input_from_samples(samples);
        InferenceConfig icfg;
        icfg.steps = config.val_infer_steps;
        icfg.points_per_step = config.val_points_per_step;
        icfg.lr_latent = config.lr_latent;
        CounterRng seed_rng =
            CounterRng(config.seed).substream("validate").substream(salt).substream(id);
        icfg.seed = seed_rng.next_u64();
        InferenceResult inf = infer_latents(model, input, icfg);
        TriangleMesh gt = data.mesh(id, "complete");
        CounterRng cd_rng = seed_rng.substream("cd");
        sum += complete_mesh_cd(model, inf.latents, gt, config.val_grid_resolution,
                                config.val_surface_samples, cd_rng);
    }
    return sum / static_cast<double>(ids.size());
}

// ---------------------------------------------------------------------------
// train_class
// ---------------------------------------------------------------------------

namespace {

struct GatheredBatch {
    Tensor<float> points;
    std::vector<std::uint8_t> o_c, o_b;
};

GatheredBatch gather_batch(const SampleSet& samples, std::size_t k, CounterRng& rng) {
    GatheredBatch b;
    b.points = Tensor<float>::zeros({k, 3});
    b.o_c.resize(k);
    b.o_b.resize(k);
    for (std::size_t i = 0; i < k; ++i) {
        std::size_t idx = rng.index(samples.size());
        b.points.data[3 * i] = static_cast<float>(samples.points[idx].x);
        b.points.data[3 * i + 1] = static_cast<float>(samples.points[idx].y);
        b.points.data[3 * i + 2] = static_cast<float>(samples.points[idx].z);
        b.o_c[i] = samples.o_c[idx];
        b.o_b[i] = samples.o_b[idx];
    }
    return b;
}

} // namespace

TrainOutcome train_class(const Dataset& data, const ModelConfig& model_config,
                         const TrainConfig& config, const std::filesystem::path& ckpt_dir,
                         bool resume, std::ostream* log) {
    config.validate();
    model_config.validate();
    const std::vector<std::string>& train_ids = data.manifest().train_ids;
    if (train_ids.empty())
        throw ParameterError("train_class: dataset has no training instances");

    std::map<std::string, SampleSet> samples;
    for (const auto& id : train_ids)
        samples.emplace(id, data.samples(id));

    CounterRng root(config.seed);
    RestorationModel<float> model;
    LatentTable<float> latents;
    AdamGroups optim({static_cast<float>(config.lr_net)},
                     {static_cast<float>(config.lr_latent)});
    std::int64_t start_epoch = 0;
    CheckpointMeta meta;
    meta.seed = config.seed;

    RestorationModel<float> best_model;
    LatentTable<float> best_latents;
    double best_val_cd = -1.0;
    std::int64_t best_val_epoch = -1;
    int rounds_since_best = 0;

    if (resume) {
        LoadedCheckpoint last = load_checkpoint(ckpt_dir / "last");
        model = std::move(last.model);
        latents = std::move(last.latents);
        optim.load(ckpt_dir / "last" / "optim.bin");
        start_epoch = last.meta.epoch;
        meta = last.meta;
        best_val_cd = last.meta.best_val_cd;
        best_val_epoch = last.meta.best_val_epoch;
        LoadedCheckpoint best = load_checkpoint(ckpt_dir);
        best_model = std::move(best.model);
        best_latents = std::move(best.latents);
    } else {
        CounterRng model_rng = root.substream("model");
        model = init_model<float>(model_config, model_rng);
        CounterRng latent_rng = root.substream("latents");
        latents = init_latents<float>(train_ids, model_config, latent_rng);
        best_model = model;
        best_latents = latents;
    }

    std::int64_t epochs = config.epochs;
    if (config.iteration_budget >= 0) {
        std::int64_t per_epoch = static_cast<std::int64_t>(train_ids.size()) *
                                 static_cast<std::int64_t>(config.points_per_instance);
        epochs = config.iteration_budget / per_epoch;
    }

    std::ofstream csv;
    if (!ckpt_dir.empty()) {
        std::filesystem::create_directories(ckpt_dir);
        bool fresh = !resume || !std::filesystem::exists(ckpt_dir / "train_log.csv");
        csv.open(ckpt_dir / "train_log.csv",
                 fresh ? (std::ios::out | std::ios::trunc) : (std::ios::out | std::ios::app));
        if (fresh)
            csv << "epoch,L_C,L_B,L_F,L_R,total,val_CD,wall_seconds\n";
    }

    auto params = model.parameters();
    std::vector<LossTerms> history;
    auto t0 = std::chrono::steady_clock::now();
    bool stopped_early = false;

    for (std::int64_t epoch = start_epoch; epoch < epochs && !stopped_early; ++epoch) {
        CounterRng epoch_rng = root.substream("epoch").substream(epoch);
        std::vector<std::string> order = train_ids;
        CounterRng order_rng = epoch_rng.substream("order");
        for (std::size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[order_rng.index(i)]);

        LossTerms epoch_terms;
        std::size_t steps = 0;
        for (std::size_t begin = 0; begin < order.size();
             begin += config.instances_per_batch, ++steps) {
            std::size_t end = std::min(order.size(), begin + config.instances_per_batch);
            CounterRng step_rng = epoch_rng.substream("step").substream(steps);

            Tape<float> tape;
            StagedModel<float> staged = stage_model(tape, model, /*requires_grad=*/true);
            Tape<float>::NodeId chunk_loss = 0;
            bool have_loss = false;
            std::vector<std::pair<std::string, std::array<Tape<float>::NodeId, 2>>> latent_ids;

            for (std::size_t c = begin; c < end; ++c) {
                const std::string& id = order[c];
                CounterRng inst_rng = step_rng.substream(id);
                CounterRng pick_rng = inst_rng.substream("points");
                GatheredBatch batch =
                    gather_batch(samples.at(id), config.points_per_instance, pick_rng);
                auto pts = tape.constant(std::move(batch.points));
                LatentPair<float>& lat = latents.at(id);
                Tensor<float> zc = lat.z_c;
                zc.requires_grad = true;
                Tensor<float> zb = lat.z_b;
                zb.requires_grad = true;
                auto zc_id = tape.leaf(std::move(zc));
                auto zb_id = tape.leaf(std::move(zb));
                latent_ids.push_back({id, {zc_id, zb_id}});

                CounterRng drop_rng = inst_rng.substream("dropout");
                OccupancyNodes<float> pred =
                    predict_on_tape(tape, staged, pts, zc_id, zb_id, /*training=*/true,
                                    model_config.dropout, drop_rng);
                auto terms = loss_terms_on_tape(tape, pred, batch.o_c, batch.o_b);
                epoch_terms.l_c += tape.value(terms[0]).data[0];
                epoch_terms.l_b += tape.value(terms[1]).data[0];
                epoch_terms.l_f += tape.value(terms[2]).data[0];
                epoch_terms.l_r += tape.value(terms[3]).data[0];
                auto inst_loss =
                    tape.add(tape.add(terms[0], terms[1]), tape.add(terms[2], terms[3]));
                chunk_loss = have_loss ? tape.add(chunk_loss, inst_loss) : inst_loss;
                have_loss = true;
            }
            auto loss = tape.affine(chunk_loss, 1.0f / static_cast<float>(end - begin), 0.0f);
            float loss_val = tape.value(loss).data[0];
            if (!std::isfinite(loss_val))
                throw NumericError("train_class: non-finite loss at epoch " +
                                   std::to_string(epoch) + " step " + std::to_string(steps));
            tape.backward(loss);

            std::vector<const Tensor<float>*> grads;
            grads.reserve(params.size());
            for (std::size_t i = 0; i < params.size(); ++i)
                grads.push_back(&tape.grad(staged.param_ids[i]));
            optim.step_network(params, grads);
            for (auto& [id, ids2] : latent_ids) {
                optim.step_latent("latent." + id + ".z_c", latents.at(id).z_c,
                                  tape.grad(ids2[0]));
                optim.step_latent("latent." + id + ".z_b", latents.at(id).z_b,
                                  tape.grad(ids2[1]));
            }
        }

        // each train instance contributes one per-point mean per epoch
        double inv = 1.0 / static_cast<double>(std::max<std::size_t>(1, train_ids.size()));
        epoch_terms.l_c *= inv;
        epoch_terms.l_b *= inv;
        epoch_terms.l_f *= inv;
        epoch_terms.l_r *= inv;
        history.push_back(epoch_terms);
        meta.last_total_loss = epoch_terms.total();
        meta.epoch = epoch + 1;
        ++meta.loss_history_length;

        bool validated = false;
        double val_cd = -1.0;
        if (config.validation_period > 0 && !data.manifest().val_ids.empty() &&
            (epoch + 1) % config.validation_period == 0) {
            val_cd = validate_model(model, data, data.manifest().val_ids, config,
                                    static_cast<std::uint64_t>(epoch));
            validated = true;
            if (best_val_cd < 0.0 || val_cd < best_val_cd) {
                best_val_cd = val_cd;
                best_val_epoch = epoch + 1;
                best_model = model;
                best_latents = latents;
                rounds_since_best = 0;
            } else {
                ++rounds_since_best;
                if (rounds_since_best >= config.patience) {
                    stopped_early = true;
                    if (log)
                        *log << "early stop at epoch " << (epoch + 1) << ", best val CD "
                             << best_val_cd << " from epoch " << best_val_epoch << "\n";
                }
            }
        }

        if (csv.is_open()) {
            double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
                              .count();
            csv << (epoch + 1) << ',' << epoch_terms.l_c << ',' << epoch_terms.l_b << ','
                << epoch_terms.l_f << ',' << epoch_terms.l_r << ',' << epoch_terms.total()
                << ',';
            if (validated)
                csv << val_cd;
            csv << ',' << wall << "\n";
        }
        if (log && ((epoch + 1) % 50 == 0 || epoch + 1 == epochs))
            *log << "epoch " << (epoch + 1) << "/" << epochs << " total loss "
                 << epoch_terms.total() << (validated ? " val CD " + std::to_string(val_cd) : "")
                 << "\n";
    }

    meta.best_val_cd = best_val_cd;
    meta.best_val_epoch = best_val_epoch;
    if (best_val_cd < 0.0) { // never validated: best == last
        best_model = model;
        best_latents = latents;
    }

    if (!ckpt_dir.empty()) {
        save_checkpoint(ckpt_dir, best_model, best_latents, meta);
        save_checkpoint(ckpt_dir / "last", model, latents, meta);
        optim.save(ckpt_dir / "last" / "optim.bin");
    }

    TrainOutcome outcome;
    outcome.model = std::move(best_model);
    outcome.latents = std::move(best_latents);
    outcome.meta = meta;
    outcome.history = std::move(history);
    return outcome;
}

} // namespace mendkit
