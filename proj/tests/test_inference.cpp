#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <optional>

#include "mendkit/inference.hpp"

using namespace mendkit;
namespace fs = std::filesystem;

namespace {

ModelConfig tiny_model_config() {
    ModelConfig cfg;
    cfg.d_c = 16;
    cfg.d_b = 16;
    cfg.hidden = 32;
    cfg.depth = 8;
    cfg.skip_layer = 4;
    cfg.dropout = 0.0;
    return cfg;
}

struct InferWorld {
    fs::path dir;
    std::optional<Dataset> data;
    ModelConfig mcfg = tiny_model_config();
    std::optional<TrainOutcome> trained; // overfit on one instance
    std::string train_id;
    std::string test_id;
};

InferWorld& world() {
    static InferWorld w = [] {
        InferWorld w;
        w.dir = fs::temp_directory_path() / "mendkit_infer_world";
        fs::remove_all(w.dir);
        GenDataConfig g;
        g.name = "infer-world";
        g.class_spec.name = "boxes";
        g.class_spec.gen_resolution = 32;
        g.count = 4;
        g.band = {0.05, 0.20};
        g.counts.uniform = 1500;
        g.counts.surface = 500;
        g.counts.sigma = 0.03;
        g.seed = 555;
        g.cache_points = 30000;
        g.fraction_samples = 50000;
        DatasetManifest m = generate_dataset(g, w.dir);
        REQUIRE(m.instances.size() == 4);
        m.train_ids = {m.instances[0].id};
        m.val_ids = {m.instances[1].id};
        m.test_ids = {m.instances[2].id, m.instances[3].id};
        write_manifest(w.dir, m);
        w.data.emplace(w.dir);
        w.train_id = m.train_ids[0];
        w.test_id = m.test_ids[0];

        TrainConfig tc;
        tc.epochs = 1200;
        tc.instances_per_batch = 1;
        tc.points_per_instance = 1024;
        tc.validation_period = 0;
        tc.seed = 11;
        w.trained = train_class(*w.data, w.mcfg, tc, "");
        return w;
    }();
    return w;
}

InferenceConfig quick_infer(std::uint64_t seed, std::size_t steps = 250) {
    InferenceConfig cfg;
    cfg.steps = steps;
    cfg.points_per_step = 512;
    cfg.seed = seed;
    return cfg;
}

} // namespace

TEST_CASE("fractured_input: labels derive from the stored binary algebra") {
    InferWorld& w = world();
    SampleSet s = w.data->samples(w.train_id);
    FracturedInput input = fractured_input_from_samples(s);
    REQUIRE(input.points.size() == s.size());
    for (std::size_t i = 0; i < s.size(); ++i)
        CHECK(input.o_f[i] == (s.o_c[i] & s.o_b[i]));
}

TEST_CASE("infer_latents: steps=0 returns the seeded initialization") {
    InferWorld& w = world();
    SampleSet s = w.data->samples(w.test_id);
    FracturedInput input = fractured_input_from_samples(s);
    InferenceConfig cfg = quick_infer(77, 0);
    InferenceResult r1 = infer_latents(w.trained->model, input, cfg);
    InferenceResult r2 = infer_latents(w.trained->model, input, cfg);
    CHECK(r1.latents.z_c.data == r2.latents.z_c.data);
    CounterRng init_rng = CounterRng(77).substream("latent-init");
    auto expected = init_latent<float>(w.mcfg, init_rng);
    CHECK(r1.latents.z_c.data == expected.z_c.data);
    CHECK(r1.latents.z_b.data == expected.z_b.data);
    CHECK(r1.steps_run == 0);
}

TEST_CASE("infer_latents: degenerate all-zero fracture labels are rejected") {
    InferWorld& w = world();
    FracturedInput input;
    CounterRng rng(5);
    for (int i = 0; i < 100; ++i) {
        input.points.push_back({rng.uniform(), rng.uniform(), rng.uniform()});
        input.o_f.push_back(0);
    }
    CHECK_THROWS_AS(infer_latents(w.trained->model, input, quick_infer(1)), ParameterError);
    FracturedInput empty;
    CHECK_THROWS_AS(infer_latents(w.trained->model, empty, quick_infer(1)), ParameterError);
}

TEST_CASE("infer_latents: recovers a training instance close to its trained latent") {
    InferWorld& w = world();
    SampleSet s = w.data->samples(w.train_id);
    FracturedInput input = fractured_input_from_samples(s);
    InferenceResult inf = infer_latents(w.trained->model, input, quick_infer(13, 400));

    TriangleMesh gt = w.data->mesh(w.train_id, "complete");
    CounterRng r1(99);
    double trained_cd = complete_mesh_cd(w.trained->model, w.trained->latents.at(w.train_id),
                                         gt, 48, 6000, r1);
    CounterRng r2(99);
    double recovered_cd = complete_mesh_cd(w.trained->model, inf.latents, gt, 48, 6000, r2);
    CAPTURE(trained_cd);
    CAPTURE(recovered_cd);
    CHECK(recovered_cd <= 2.0 * trained_cd + 1e-6);
}

TEST_CASE("infer_latents: the regularizer keeps the restoration from collapsing") {
    InferWorld& w = world();
    SampleSet s = w.data->samples(w.train_id);
    // fracture covering the full complete shape: o_F := o_C
    FracturedInput full_cover;
    full_cover.points = s.points;
    full_cover.o_f.assign(s.size(), 0);
    for (std::size_t i = 0; i < s.size(); ++i)
        full_cover.o_f[i] = s.o_c[i];

    InferenceConfig noreg = quick_infer(21, 300);
    noreg.lambda_nonempty = 0.0;
    noreg.lambda_prox = 0.0;
    InferenceConfig reg = quick_infer(21, 300);

    InferenceResult a = infer_latents(w.trained->model, full_cover, noreg);
    InferenceResult b = infer_latents(w.trained->model, full_cover, reg);
    auto mean_or = [&](const LatentPair<float>& lat) {
        auto out = predict_eval(w.trained->model, lat, s.points);
        double m = 0.0;
        for (float v : out.o_r)
            m += v;
        return m / static_cast<double>(out.o_r.size());
    };
    double collapsed = mean_or(a.latents);
    double kept = mean_or(b.latents);
    CAPTURE(collapsed);
    CAPTURE(kept);
    CHECK(collapsed < kept);
}

TEST_CASE("build_pseudo_restoration: algebra and recount oracle") {
    FracturedInput input;
    CounterRng rng(3);
    std::vector<float> o_c;
    for (int i = 0; i < 1000; ++i) {
        Vec3 p{rng.uniform(), rng.uniform(), rng.uniform()};
        input.points.push_back(p);
        input.o_f.push_back(p.x < 0.5 ? 1 : 0); // fracture = left half
        o_c.push_back(0.99f);                   // predicted complete fills the cube
    }
    PseudoRestoration pseudo = build_pseudo_restoration(o_c, input, 0.5);
    // complement of the fracture
    std::size_t expected = 0;
    for (std::size_t i = 0; i < input.points.size(); ++i) {
        CHECK(pseudo.o_r_hat[i] == (input.o_f[i] ? 0 : 1));
        if (!input.o_f[i])
            ++expected;
        CHECK((pseudo.o_r_hat[i] & input.o_f[i]) == 0); // never overlaps the fracture
    }
    CHECK(pseudo.count() == expected);

    // all-fracture input gives an empty pseudo-restoration
    FracturedInput all_f = input;
    all_f.o_f.assign(all_f.o_f.size(), 1);
    CHECK(build_pseudo_restoration(o_c, all_f, 0.5).count() == 0);

    std::vector<float> short_pred = {0.5f};
    CHECK_THROWS_AS(build_pseudo_restoration(short_pred, input, 0.5), DimensionError);
}

TEST_CASE("ttt_finetune: zero epochs is the identity") {
    InferWorld& w = world();
    SampleSet s = w.data->samples(w.test_id);
    FracturedInput input = fractured_input_from_samples(s);
    InferenceResult inf = infer_latents(w.trained->model, input, quick_infer(31, 50));
    auto eval = predict_eval(w.trained->model, inf.latents, input.points);
    PseudoRestoration pseudo = build_pseudo_restoration(eval.o_c, input, 0.5);

    TTTConfig cfg;
    cfg.epochs = 0;
    cfg.seed = 31;
    TTTResult r = ttt_finetune(w.trained->model, inf.latents, input, pseudo, cfg);
    CHECK(r.epochs_run == 0);
    CHECK(r.latents.z_c.data == inf.latents.z_c.data);
    auto pa = r.model.parameters();
    auto pb = const_cast<RestorationModel<float>&>(w.trained->model).parameters();
    for (std::size_t i = 0; i < pa.size(); ++i)
        CHECK(pa[i].tensor->data == pb[i].tensor->data);
}

TEST_CASE("ttt_finetune: fracture fit improves and alpha keeps the restoration") {
    InferWorld& w = world();
    SampleSet s = w.data->samples(w.test_id);
    FracturedInput full = fractured_input_from_samples(s);
    FracturedInput fit, holdout;
    split_holdout(full, 0.1, 41, fit, holdout);
    InferenceResult inf = infer_latents(w.trained->model, fit, quick_infer(41, 300));
    auto fit_eval = predict_eval(w.trained->model, inf.latents, fit.points);
    PseudoRestoration pseudo = build_pseudo_restoration(fit_eval.o_c, fit, 0.5);

    auto lf_on = [&](const RestorationModel<float>& m, const LatentPair<float>& lat,
                     const FracturedInput& part) {
        auto e = predict_eval(m, lat, part.points);
        return bce_scalar(e.o_f, part.o_f);
    };
    double pre_fit = lf_on(w.trained->model, inf.latents, fit);
    double pre_hold = lf_on(w.trained->model, inf.latents, holdout);

    TTTConfig cfg;
    cfg.epochs = 400;
    cfg.points_per_step = 512;
    cfg.seed = 41;
    TTTResult ttt = ttt_finetune(w.trained->model, inf.latents, fit, pseudo, cfg);
    double post_fit = lf_on(ttt.model, ttt.latents, fit);
    double post_hold = lf_on(ttt.model, ttt.latents, holdout);
    CAPTURE(pre_fit);
    CAPTURE(post_fit);
    CAPTURE(pre_hold);
    CAPTURE(post_hold);
    CHECK(post_fit < pre_fit);
    CHECK(post_hold <= pre_hold + 1e-3); // held-out fracture fit must not degrade

    // alpha = 0 lets the restoration evaporate relative to alpha = 0.1
    TTTConfig no_alpha = cfg;
    no_alpha.alpha = 0.0;
    TTTResult bare = ttt_finetune(w.trained->model, inf.latents, fit, pseudo, no_alpha);
    auto mean_or = [&](const TTTResult& r) {
        auto e = predict_eval(r.model, r.latents, fit.points);
        double m = 0.0;
        for (float v : e.o_r)
            m += v;
        return m / static_cast<double>(e.o_r.size());
    };
    double with_alpha = mean_or(ttt);
    double without_alpha = mean_or(bare);
    CAPTURE(with_alpha);
    CAPTURE(without_alpha);
    CHECK(without_alpha < with_alpha);
}

TEST_CASE("ttt_finetune: deterministic given the seed") {
    InferWorld& w = world();
    SampleSet s = w.data->samples(w.test_id);
    FracturedInput input = fractured_input_from_samples(s);
    auto run = [&] {
        InferenceResult inf = infer_latents(w.trained->model, input, quick_infer(51, 60));
        auto eval = predict_eval(w.trained->model, inf.latents, input.points);
        PseudoRestoration pseudo = build_pseudo_restoration(eval.o_c, input, 0.5);
        TTTConfig cfg;
        cfg.epochs = 40;
        cfg.points_per_step = 256;
        cfg.seed = 51;
        return ttt_finetune(w.trained->model, inf.latents, input, pseudo, cfg);
    };
    TTTResult a = run();
    TTTResult b = run();
    CHECK(a.latents.z_c.data == b.latents.z_c.data);
    CHECK(a.latents.z_b.data == b.latents.z_b.data);
    auto pa = a.model.parameters();
    auto pb = b.model.parameters();
    for (std::size_t i = 0; i < pa.size(); ++i)
        CHECK(pa[i].tensor->data == pb[i].tensor->data);
}

TEST_CASE("extract_restoration: composition audits on the value grids") {
    InferWorld& w = world();
    ExtractedFields fields = extract_restoration(
        w.trained->model, w.trained->latents.at(w.train_id), 24, nullptr);
    const std::size_t n = fields.o_c.n;
    for (std::size_t k = 0; k < n; ++k)
        for (std::size_t j = 0; j < n; ++j)
            for (std::size_t i = 0; i < n; ++i) {
                float oc = fields.o_c.at(i, j, k);
                float of = fields.o_f.at(i, j, k);
                float orr = fields.o_r.at(i, j, k);
                CHECK(of <= oc + 1e-6f); // Eq. 3 monotonicity
                CHECK(orr <= oc + 1e-6f);
                CHECK_FALSE((of >= 0.5f && orr >= 0.5f)); // interiors disjoint
            }
    CHECK_FALSE(fields.mesh_c.empty());

    // degenerate resolution must not crash
    ExtractedFields tiny = extract_restoration(w.trained->model,
                                               w.trained->latents.at(w.train_id), 2, nullptr);
    CHECK(tiny.o_c.n == 2);
}

TEST_CASE("run_test_instance: inference-only vs with-TTT produce tagged results") {
    InferWorld& w = world();
    InstanceRunConfig rc;
    rc.infer = quick_infer(61, 120);
    rc.infer.points_per_step = 256;
    rc.ttt.epochs = 0;
    rc.ttt.seed = 61;
    rc.with_ttt = false;
    rc.grid_resolution = 32;
    rc.surface_samples = 4000;
    InstanceRunResult plain = run_test_instance(w.trained->model, *w.data, w.test_id, rc);
    CHECK(plain.method == "inference-only");
    CHECK(plain.cd_complete >= 0.0);
    CHECK(plain.loss_f_post == plain.loss_f_pre);

    rc.with_ttt = true;
    rc.ttt.epochs = 150;
    rc.ttt.points_per_step = 256;
    InstanceRunResult ttt = run_test_instance(w.trained->model, *w.data, w.test_id, rc);
    CHECK(ttt.method == "with-TTT");
    CHECK(ttt.pseudo_count > 0);
    CHECK(ttt.wall_seconds > 0.0);
}
