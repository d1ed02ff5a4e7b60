#include "mendkit/inference.hpp"

#include <chrono>
#include <ostream>

namespace mendkit {

void InferenceConfig::validate() const {
    if (points_per_step < 1)
        throw ParameterError("inference: points_per_step must be positive");
    if (!(lr_latent > 0.0))
        throw ParameterError("inference: learning rate must be positive");
    if (lambda_nonempty < 0.0 || lambda_prox < 0.0)
        throw ParameterError("inference: regularizer weights must be non-negative");
}

void TTTConfig::validate() const {
    if (epochs < 0)
        throw ParameterError("ttt: epochs must be non-negative");
    if (alpha < 0.0)
        throw ParameterError("ttt: alpha must be non-negative");
    if (!(tau > 0.0 && tau < 1.0))
        throw ParameterError("ttt: tau must lie in (0,1)");
    if (!(holdout_fraction >= 0.0 && holdout_fraction < 1.0))
        throw ParameterError("ttt: holdout fraction must lie in [0,1)");
}

FracturedInput fractured_input_from_samples(const SampleSet& samples) {
    FracturedInput input;
    input.points = samples.points;
    input.o_f.resize(samples.size());
    for (std::size_t i = 0; i < samples.size(); ++i)
        input.o_f[i] = samples.o_f(i);
    return input;
}

void split_holdout(const FracturedInput& input, double holdout_fraction, std::uint64_t seed,
                   FracturedInput& fit, FracturedInput& holdout) {
    fit = FracturedInput{};
    holdout = FracturedInput{};
    CounterRng rng = CounterRng(seed).substream("holdout");
    for (std::size_t i = 0; i < input.points.size(); ++i) {
        bool held = rng.uniform() < holdout_fraction;
        FracturedInput& dst = held ? holdout : fit;
        dst.points.push_back(input.points[i]);
        dst.o_f.push_back(input.o_f[i]);
    }
    if (fit.points.empty()) // degenerate split, keep everything in fit
        fit = input;
}

namespace {

struct GatheredQuery {
    Tensor<float> points;
    std::vector<std::uint8_t> o_f;
    std::vector<float> d_box;
};

GatheredQuery gather_query(const FracturedInput& input, const std::vector<float>& d_box,
                           std::size_t k, CounterRng& rng) {
    GatheredQuery g;
    g.points = Tensor<float>::zeros({k, 3});
    g.o_f.resize(k);
    g.d_box.resize(k);
    for (std::size_t i = 0; i < k; ++i) {
        std::size_t idx = rng.index(input.points.size());
        g.points.data[3 * i] = static_cast<float>(input.points[idx].x);
        g.points.data[3 * i + 1] = static_cast<float>(input.points[idx].y);
        g.points.data[3 * i + 2] = static_cast<float>(input.points[idx].z);
        g.o_f[i] = input.o_f[idx];
        g.d_box[i] = d_box[idx];
    }
    return g;
}

// distance from each query to the occupied-fracture bounding box inflated by
// `inflate` (0 inside)
std::vector<float> fracture_box_distances(const FracturedInput& input, double inflate) {
    Aabb box;
    bool any = false;
    for (std::size_t i = 0; i < input.points.size(); ++i)
        if (input.o_f[i]) {
            box.extend(input.points[i]);
            any = true;
        }
    if (!any)
        throw ParameterError("inference: fracture labels are all zero (degenerate input)");
    box.lo = box.lo - Vec3{inflate, inflate, inflate};
    box.hi = box.hi + Vec3{inflate, inflate, inflate};
    std::vector<float> d(input.points.size());
    for (std::size_t i = 0; i < input.points.size(); ++i) {
        const Vec3& p = input.points[i];
        double dx = std::max({box.lo.x - p.x, 0.0, p.x - box.hi.x});
        double dy = std::max({box.lo.y - p.y, 0.0, p.y - box.hi.y});
        double dz = std::max({box.lo.z - p.z, 0.0, p.z - box.hi.z});
        d[i] = static_cast<float>(std::sqrt(dx * dx + dy * dy + dz * dz));
    }
    return d;
}

} // namespace

InferenceResult infer_latents(const RestorationModel<float>& model,
                              const FracturedInput& input, const InferenceConfig& config) {
    config.validate();
    if (input.points.empty())
        throw ParameterError("infer_latents: empty fracture sample set");
    std::vector<float> d_box = fracture_box_distances(input, config.bbox_inflate);

    CounterRng root(config.seed);
    CounterRng init_rng = root.substream("latent-init");
    InferenceResult result;
    result.latents = init_latent<float>(model.config, init_rng);

    AdamConfig<float> lat_cfg{static_cast<float>(config.lr_latent)};
    AdamState<float> state_zc, state_zb;

    const std::size_t k = std::min(config.points_per_step, input.points.size());
    for (std::size_t step = 0; step < config.steps; ++step) {
        CounterRng step_rng = root.substream("step").substream(step);
        GatheredQuery q = gather_query(input, d_box, k, step_rng);

        Tape<float> tape;
        StagedModel<float> staged = stage_model(tape, model, /*requires_grad=*/false);
        auto pts = tape.constant(std::move(q.points));
        Tensor<float> zc = result.latents.z_c;
        zc.requires_grad = true;
        Tensor<float> zb = result.latents.z_b;
        zb.requires_grad = true;
        auto zc_id = tape.leaf(std::move(zc));
        auto zb_id = tape.leaf(std::move(zb));
        CounterRng no_drop(0);
        OccupancyNodes<float> pred = predict_on_tape(tape, staged, pts, zc_id, zb_id,
                                                     /*training=*/false, 0.0, no_drop);
        Tensor<float> target = Tensor<float>::zeros({k, 1});
        for (std::size_t i = 0; i < k; ++i)
            target.data[i] = static_cast<float>(q.o_f[i]);
        auto loss_f = tape.bce(pred.o_f, target);

        // L_reg: non-emptiness hinge plus proximity penalty
        auto mean_or = tape.mean(pred.o_r);
        auto hinge = tape.relu(tape.affine(mean_or, -1.0f, static_cast<float>(config.m0)));
        Tensor<float> dbox_t = Tensor<float>::from({k, 1}, std::vector<float>(q.d_box));
        auto prox = tape.mean(tape.mul_const(pred.o_r, dbox_t));
        auto reg = tape.add(tape.affine(hinge, static_cast<float>(config.lambda_nonempty), 0.0f),
                            tape.affine(prox, static_cast<float>(config.lambda_prox), 0.0f));
        auto loss = tape.add(loss_f, reg);
        if (!std::isfinite(tape.value(loss).data[0]))
            throw NumericError("infer_latents: non-finite loss at step " +
                               std::to_string(step));
        tape.backward(loss);
        state_zc.step(result.latents.z_c, tape.grad(zc_id), lat_cfg, "z_c");
        state_zb.step(result.latents.z_b, tape.grad(zb_id), lat_cfg, "z_b");
        ++result.steps_run;
    }

    // final loss breakdown over the full input
    auto eval = predict_eval(model, result.latents, input.points);
    result.loss_f = bce_scalar(eval.o_f, input.o_f);
    double mean_or = 0.0, prox = 0.0;
    for (std::size_t i = 0; i < eval.o_r.size(); ++i) {
        mean_or += eval.o_r[i];
        prox += static_cast<double>(eval.o_r[i]) * d_box[i];
    }
    mean_or /= static_cast<double>(eval.o_r.size());
    prox /= static_cast<double>(eval.o_r.size());
    result.loss_reg = config.lambda_nonempty * std::max(0.0, config.m0 - mean_or) +
                      config.lambda_prox * prox;
    return result;
}

PseudoRestoration build_pseudo_restoration(const std::vector<float>& o_c_pred,
                                           const FracturedInput& input, double tau) {
    if (o_c_pred.size() != input.points.size())
        throw DimensionError("build_pseudo_restoration: prediction/query size mismatch");
    PseudoRestoration pseudo;
    pseudo.points = input.points;
    pseudo.o_r_hat.resize(input.points.size());
    for (std::size_t i = 0; i < input.points.size(); ++i)
        pseudo.o_r_hat[i] =
            (o_c_pred[i] >= static_cast<float>(tau) && input.o_f[i] == 0) ? 1 : 0;
    return pseudo;
}

TTTResult ttt_finetune(const RestorationModel<float>& base, const LatentPair<float>& latents,
                       const FracturedInput& fit, const PseudoRestoration& pseudo,
                       const TTTConfig& config) {
    config.validate();
    if (fit.points.size() != pseudo.points.size())
        throw DimensionError("ttt_finetune: fracture and pseudo query sets differ");
    TTTResult result;
    result.model = base;
    result.latents = latents;
    if (config.epochs == 0)
        return result;

    // fresh optimizer state for the test-time run
    AdamGroups optim({static_cast<float>(config.lr_net)},
                     {static_cast<float>(config.lr_latent)});
    auto params = result.model.parameters();
    CounterRng root(config.seed);
    std::vector<float> zero_dbox(fit.points.size(), 0.0f);

    const std::size_t k = std::min(config.points_per_step, fit.points.size());
    for (std::int64_t epoch = 0; epoch < config.epochs; ++epoch) {
        // deterministic reuse of the query set: the subset depends only on
        // the epoch index (and resampling mode)
        CounterRng step_rng = config.resample_queries
                                  ? root.substream("resample").substream(epoch)
                                  : root.substream("subset").substream(epoch);
        std::vector<std::size_t> idx(k);
        for (std::size_t i = 0; i < k; ++i)
            idx[i] = step_rng.index(fit.points.size());

        Tape<float> tape;
        StagedModel<float> staged = stage_model(tape, result.model, /*requires_grad=*/true);
        Tensor<float> pts_t = Tensor<float>::zeros({k, 3});
        Tensor<float> target_f = Tensor<float>::zeros({k, 1});
        Tensor<float> target_r = Tensor<float>::zeros({k, 1});
        for (std::size_t i = 0; i < k; ++i) {
            const Vec3& p = fit.points[idx[i]];
            pts_t.data[3 * i] = static_cast<float>(p.x);
            pts_t.data[3 * i + 1] = static_cast<float>(p.y);
            pts_t.data[3 * i + 2] = static_cast<float>(p.z);
            target_f.data[i] = static_cast<float>(fit.o_f[idx[i]]);
            target_r.data[i] = static_cast<float>(pseudo.o_r_hat[idx[i]]);
        }
        auto pts = tape.constant(std::move(pts_t));
        Tensor<float> zc = result.latents.z_c;
        zc.requires_grad = true;
        Tensor<float> zb = result.latents.z_b;
        zb.requires_grad = true;
        auto zc_id = tape.leaf(std::move(zc));
        auto zb_id = tape.leaf(std::move(zb));
        CounterRng no_drop(0);
        OccupancyNodes<float> pred = predict_on_tape(tape, staged, pts, zc_id, zb_id,
                                                     /*training=*/false, 0.0, no_drop);
        auto loss_f = tape.bce(pred.o_f, target_f);
        auto loss_r = tape.bce(pred.o_r, target_r);
        auto loss = tape.add(loss_f, tape.affine(loss_r, static_cast<float>(config.alpha), 0.0f));
        if (!std::isfinite(tape.value(loss).data[0]))
            throw NumericError("ttt_finetune: non-finite loss at epoch " +
                               std::to_string(epoch));
        tape.backward(loss);
        std::vector<const Tensor<float>*> grads;
        grads.reserve(params.size());
        for (std::size_t i = 0; i < params.size(); ++i)
            grads.push_back(&tape.grad(staged.param_ids[i]));
        optim.step_network(params, grads);
        optim.step_latent("z_c", result.latents.z_c, tape.grad(zc_id));
        optim.step_latent("z_b", result.latents.z_b, tape.grad(zb_id));
        ++result.epochs_run;
    }
    return result;
}

ExtractedFields extract_restoration(const RestorationModel<float>& model,
                                    const LatentPair<float>& latent, std::size_t resolution,
                                    std::ostream* log) {
    ExtractedFields out;
    out.o_c = VoxelGrid::over_unit_cube(resolution);
    out.o_f = VoxelGrid::over_unit_cube(resolution);
    out.o_r = VoxelGrid::over_unit_cube(resolution);
    PointCloud slice;
    slice.reserve(resolution * resolution);
    for (std::size_t kk = 0; kk < resolution; ++kk) {
        slice.clear();
        for (std::size_t j = 0; j < resolution; ++j)
            for (std::size_t i = 0; i < resolution; ++i)
                slice.push_back(out.o_c.position(i, j, kk));
        auto pred = predict_eval(model, latent, slice);
        for (std::size_t j = 0; j < resolution; ++j)
            for (std::size_t i = 0; i < resolution; ++i) {
                std::size_t at = j * resolution + i;
                out.o_c.at(i, j, kk) = pred.o_c[at];
                out.o_f.at(i, j, kk) = pred.o_f[at];
                out.o_r.at(i, j, kk) = pred.o_r[at];
            }
    }
    out.mesh_c = marching_cubes(out.o_c, 0.5);
    out.mesh_f = marching_cubes(out.o_f, 0.5);
    out.mesh_r = marching_cubes(out.o_r, 0.5);
    if (log) {
        if (out.mesh_c.empty())
            *log << "warning: complete iso-surface is empty\n";
        if (out.mesh_f.empty())
            *log << "warning: fractured iso-surface is empty\n";
        if (out.mesh_r.empty())
            *log << "warning: restoration iso-surface is empty\n";
    }
    return out;
}

InstanceRunResult run_test_instance(const RestorationModel<float>& base, const Dataset& data,
                                    const std::string& id, const InstanceRunConfig& config) {
    auto t0 = std::chrono::steady_clock::now();
    InstanceRunResult result;
    result.id = id;
    result.method = config.with_ttt && config.ttt.epochs > 0 ? "with-TTT" : "inference-only";

    SampleSet samples = data.samples(id);
    FracturedInput full = fractured_input_from_samples(samples);
    FracturedInput fit, holdout;
    split_holdout(full, config.ttt.holdout_fraction, config.ttt.seed, fit, holdout);
    if (holdout.points.empty())
        holdout = fit;

    InferenceResult inf = infer_latents(base, fit, config.infer);
    result.loss_reg = inf.loss_reg;

    {
        auto eval = predict_eval(base, inf.latents, holdout.points);
        result.loss_f_pre = bce_scalar(eval.o_f, holdout.o_f);
        double mo = 0.0;
        for (float v : eval.o_r)
            mo += v;
        result.mean_o_r_pre = mo / static_cast<double>(eval.o_r.size());
    }

    const RestorationModel<float>* final_model = &base;
    LatentPair<float> final_latents = inf.latents;
    TTTResult ttt;
    if (config.with_ttt && config.ttt.epochs > 0) {
        auto fit_eval = predict_eval(base, inf.latents, fit.points);
        PseudoRestoration pseudo = build_pseudo_restoration(fit_eval.o_c, fit, config.ttt.tau);
        result.pseudo_count = pseudo.count();
        ttt = ttt_finetune(base, inf.latents, fit, pseudo, config.ttt);
        final_model = &ttt.model;
        final_latents = ttt.latents;
        auto eval = predict_eval(ttt.model, ttt.latents, holdout.points);
        result.loss_f_post = bce_scalar(eval.o_f, holdout.o_f);
    } else {
        result.loss_f_post = result.loss_f_pre;
    }

    CounterRng cd_rng = CounterRng(config.infer.seed).substream("cd").substream(id);
    TriangleMesh gt_complete = data.mesh(id, "complete");
    ExtractedFields fields = extract_restoration(*final_model, final_latents,
                                                 config.grid_resolution, nullptr);
    if (fields.mesh_c.empty()) {
        result.cd_complete = kFailedCd;
    } else {
        PointCloud gt_pts = surface_sample(gt_complete, config.surface_samples, cd_rng);
        PointCloud pred_pts = surface_sample(fields.mesh_c, config.surface_samples, cd_rng);
        result.cd_complete = chamfer_distance(gt_pts, pred_pts);
    }

    // secondary diagnostic: restoration-only CD
    TriangleMesh gt_restoration = data.mesh(id, "restoration");
    if (!fields.mesh_r.empty() && !gt_restoration.empty()) {
        CounterRng r_rng = cd_rng.substream("restoration");
        PointCloud a = surface_sample(gt_restoration, config.surface_samples, r_rng);
        PointCloud b = surface_sample(fields.mesh_r, config.surface_samples, r_rng);
        result.cd_restoration = chamfer_distance(a, b);
    } else {
        result.cd_restoration = kFailedCd;
    }

    result.latents = final_latents;
    result.model = *final_model;
    result.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return result;
}

} // namespace mendkit
