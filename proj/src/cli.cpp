#include "mendkit/cli.hpp"

#include <atomic>
#include <fstream>
#include <iostream>
#include <mutex>
#include <thread>

#include <CLI11.hpp>
#include <json.hpp>

#include "mendkit/eval_report.hpp"
#include "mendkit/inference.hpp"
#include "mendkit/obj_io.hpp"
#include "mendkit/run_config.hpp"

namespace mendkit {

namespace {

using nlohmann::json;
namespace fs = std::filesystem;

constexpr const char* kVersionLine =
    "mendkit 0.1.0 (dataset format 1, sample format 1, checkpoint format 1, results format 1)";

// ---------------------------------------------------------------------------
// content hashing for stage idempotency
// ---------------------------------------------------------------------------

std::uint64_t fnv1a(std::string_view bytes, std::uint64_t h = 0xcbf29ce484222325ULL) {
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::uint64_t hash_file(const fs::path& path, std::uint64_t h) {
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw IoError("cannot open " + path.string());
    char buf[65536];
    while (in.read(buf, sizeof(buf)) || in.gcount() > 0)
        h = fnv1a(std::string_view(buf, static_cast<std::size_t>(in.gcount())), h);
    return h;
}

// A completed stage records the hash of everything it consumed; rerunning
// with unchanged inputs is a no-op.
bool stage_up_to_date(const fs::path& out_dir, const std::string& stage,
                      std::uint64_t input_hash, const std::vector<fs::path>& outputs) {
    fs::path stamp = out_dir / ".mendkit_stamp.json";
    if (!fs::exists(stamp))
        return false;
    std::ifstream in(stamp);
    json j = json::parse(in, nullptr, false);
    if (j.is_discarded() || j.value("stage", "") != stage ||
        j.value("input_hash", std::string()) != std::to_string(input_hash))
        return false;
    for (const auto& p : outputs)
        if (!fs::exists(p))
            return false;
    return true;
}

void write_stamp(const fs::path& out_dir, const std::string& stage, std::uint64_t input_hash) {
    json j;
    j["stage"] = stage;
    j["input_hash"] = std::to_string(input_hash);
    std::ofstream out(out_dir / ".mendkit_stamp.json", std::ios::trunc);
    out << j.dump(2) << "\n";
}

std::uint64_t hash_dataset_inputs(const fs::path& data_dir, std::uint64_t h) {
    return hash_file(data_dir / "manifest.json", h);
}

std::uint64_t hash_checkpoint_inputs(const fs::path& ckpt_dir, std::uint64_t h) {
    h = hash_file(ckpt_dir / "checkpoint.json", h);
    h = hash_file(ckpt_dir / "params.bin", h);
    return hash_file(ckpt_dir / "latents.bin", h);
}

// ---------------------------------------------------------------------------
// stages
// ---------------------------------------------------------------------------

int do_gen_data(const RunConfig& cfg, const fs::path& out) {
    std::uint64_t h = fnv1a(run_config_to_json(cfg));
    h = fnv1a("gen-data", h);
    if (stage_up_to_date(out, "gen-data", h, {out / "manifest.json"})) {
        std::cerr << "gen-data: " << out.string() << " is up to date, skipping\n";
        return 0;
    }
    std::string name = out.filename().string();
    if (name.empty())
        name = "dataset";
    GenDataConfig g = cfg.gen_data_config(name);
    DatasetManifest m = generate_dataset(g, out, &std::cerr);
    std::cerr << "gen-data: " << m.instances.size() << " instances (" << m.train_ids.size()
              << " train / " << m.val_ids.size() << " val / " << m.test_ids.size()
              << " test) in " << out.string() << "\n";
    write_stamp(out, "gen-data", h);
    return 0;
}

int do_train(const RunConfig& cfg, const fs::path& data_dir, const fs::path& out,
             bool resume) {
    std::uint64_t h = fnv1a(run_config_to_json(cfg));
    h = fnv1a("train", h);
    h = hash_dataset_inputs(data_dir, h);
    if (!resume && stage_up_to_date(out, "train", h, {out / "checkpoint.json"})) {
        std::cerr << "train: " << out.string() << " is up to date, skipping\n";
        return 0;
    }
    Dataset data(data_dir);
    TrainOutcome outcome = train_class(data, cfg.model, cfg.train, out, resume, &std::cerr);
    std::cerr << "train: " << outcome.meta.epoch << " epochs, final loss "
              << outcome.meta.last_total_loss;
    if (outcome.meta.best_val_cd >= 0.0)
        std::cerr << ", best val CD " << outcome.meta.best_val_cd << " at epoch "
                  << outcome.meta.best_val_epoch;
    std::cerr << "\n";
    write_stamp(out, "train", h);
    return 0;
}

void write_result_json(const fs::path& path, const InstanceRunResult& r,
                       const std::string& class_name, std::uint64_t seed) {
    json j;
    j["id"] = r.id;
    j["class"] = class_name;
    j["method"] = r.method;
    j["cd_complete"] = r.cd_complete;
    j["cd_restoration"] = r.cd_restoration;
    j["loss_f_pre"] = r.loss_f_pre;
    j["loss_f_post"] = r.loss_f_post;
    j["loss_reg"] = r.loss_reg;
    j["mean_o_r_pre"] = r.mean_o_r_pre;
    j["pseudo_count"] = r.pseudo_count;
    j["wall_seconds"] = r.wall_seconds;
    j["seed"] = seed;
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out)
        throw IoError("cannot open " + path.string());
    out << j.dump(2) << "\n";
}

int do_infer(const RunConfig& cfg, const fs::path& data_dir, const fs::path& ckpt_dir,
             const fs::path& out, bool with_ttt, int jobs, bool meshes) {
    if (!fs::exists(ckpt_dir / "checkpoint.json"))
        throw IoError("infer: no checkpoint at " + ckpt_dir.string());
    if (!fs::exists(data_dir / "manifest.json"))
        throw IoError("infer: no dataset manifest at " + data_dir.string());
    std::uint64_t h = fnv1a(run_config_to_json(cfg));
    h = fnv1a(with_ttt ? "ttt" : "infer", h);
    h = fnv1a(meshes ? "meshes" : "nomeshes", h);
    h = hash_dataset_inputs(data_dir, h);
    h = hash_checkpoint_inputs(ckpt_dir, h);
    Dataset data(data_dir);
    const auto& test_ids = data.manifest().test_ids;
    if (test_ids.empty())
        throw ParameterError("infer: dataset has no test instances");
    std::vector<fs::path> outputs;
    for (const auto& id : test_ids)
        outputs.push_back(out / (id + ".json"));
    std::string stage = with_ttt ? "ttt" : "infer";
    if (stage_up_to_date(out, stage, h, outputs)) {
        std::cerr << stage << ": " << out.string() << " is up to date, skipping\n";
        return 0;
    }
    LoadedCheckpoint ckpt = load_checkpoint(ckpt_dir);
    fs::create_directories(out);

    InstanceRunConfig rc = cfg.instance_run_config(with_ttt);
    std::atomic<std::size_t> next{0};
    std::mutex log_mutex;
    std::exception_ptr error;
    auto worker = [&] {
        for (;;) {
            std::size_t i = next.fetch_add(1);
            if (i >= test_ids.size())
                return;
            try {
                const std::string& id = test_ids[i];
                InstanceRunResult r = run_test_instance(ckpt.model, data, id, rc);
                write_result_json(out / (id + ".json"), r, data.manifest().class_name,
                                  cfg.seed);
                if (meshes) {
                    ExtractedFields fields =
                        extract_restoration(r.model, r.latents, rc.grid_resolution, nullptr);
                    write_obj(fields.mesh_c, out / (id + "_pred_complete.obj"));
                    write_obj(fields.mesh_f, out / (id + "_pred_fractured.obj"));
                    write_obj(fields.mesh_r, out / (id + "_pred_restoration.obj"));
                }
                std::lock_guard<std::mutex> lock(log_mutex);
                std::cerr << stage << ": " << id << " " << r.method << " CD "
                          << r.cd_complete << " (" << r.wall_seconds << " s)\n";
            } catch (...) {
                std::lock_guard<std::mutex> lock(log_mutex);
                if (!error)
                    error = std::current_exception();
                return;
            }
        }
    };
    jobs = std::max(1, jobs);
    if (jobs == 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (int t = 0; t < jobs; ++t)
            pool.emplace_back(worker);
        for (auto& t : pool)
            t.join();
    }
    if (error)
        std::rethrow_exception(error);
    write_stamp(out, stage, h);
    return 0;
}

int do_mesh(const RunConfig& cfg, const fs::path& ckpt_dir, const std::string& instance,
            const fs::path& out) {
    LoadedCheckpoint ckpt = load_checkpoint(ckpt_dir);
    auto it = ckpt.latents.find(instance);
    if (it == ckpt.latents.end())
        throw ParameterError("mesh: checkpoint has no latent for instance '" + instance +
                             "' (training instances only)");
    fs::create_directories(out);
    ExtractedFields fields =
        extract_restoration(ckpt.model, it->second, cfg.eval.grid_resolution, &std::cerr);
    write_obj(fields.mesh_c, out / (instance + "_pred_complete.obj"));
    write_obj(fields.mesh_f, out / (instance + "_pred_fractured.obj"));
    write_obj(fields.mesh_r, out / (instance + "_pred_restoration.obj"));
    std::cerr << "mesh: wrote 3 meshes for " << instance << " to " << out.string() << "\n";
    return 0;
}

int do_eval(const std::vector<fs::path>& result_dirs, const fs::path& out_csv) {
    std::vector<EvalRecord> records;
    for (const auto& dir : result_dirs) {
        auto part = read_result_dir(dir);
        records.insert(records.end(), part.begin(), part.end());
    }
    if (records.empty())
        throw ParameterError("eval: no result records found");
    write_records_csv(records, out_csv);
    std::cerr << "eval: " << records.size() << " records -> " << out_csv.string() << "\n";
    return 0;
}

int do_report(const std::vector<fs::path>& result_dirs, const fs::path& out_dir,
              std::size_t thresholds) {
    std::vector<EvalRecord> records;
    for (const auto& dir : result_dirs) {
        auto part = read_result_dir(dir);
        records.insert(records.end(), part.begin(), part.end());
    }
    if (records.empty())
        throw ParameterError("report: no result records found");
    render_report(records, out_dir, thresholds, &std::cerr);
    std::cerr << "report: " << records.size() << " records -> "
              << (out_dir / "report.csv").string() << "\n";
    return 0;
}

int do_ablate(const RunConfig& base_cfg, const fs::path& data_dir,
              const std::vector<std::size_t>& dims, const fs::path& out, int jobs) {
    if (dims.empty())
        throw UsageError("ablate: no dimensions given");
    fs::create_directories(out);
    Dataset data(data_dir);

    std::ofstream csv(out / "ablate.csv", std::ios::binary | std::ios::trunc);
    if (!csv)
        throw IoError("ablate: cannot open " + (out / "ablate.csv").string());
    csv << "d_c,d_b,d_total,cd_mean_infer_x1e4,cd_median_infer_x1e4,cd_mean_ttt_x1e4,"
           "cd_median_ttt_x1e4,count\n";

    for (std::size_t dim : dims) {
        RunConfig cfg = base_cfg;
        cfg.model.d_c = dim;
        cfg.model.d_b = dim;
        fs::path dim_dir = out / ("dim_" + std::to_string(dim));
        std::cerr << "ablate: training with latent dimension " << dim << "\n";
        int rc = do_train(cfg, data_dir, dim_dir / "ckpt", false);
        if (rc != 0)
            return rc;
        rc = do_infer(cfg, data_dir, dim_dir / "ckpt", dim_dir / "infer", false, jobs, false);
        if (rc != 0)
            return rc;
        rc = do_infer(cfg, data_dir, dim_dir / "ckpt", dim_dir / "ttt", true, jobs, false);
        if (rc != 0)
            return rc;

        auto stats_for = [&](const fs::path& dir) {
            auto records = read_result_dir(dir);
            auto stats = aggregate(records);
            if (stats.size() != 1)
                throw IoError("ablate: expected one method group in " + dir.string());
            return stats.front();
        };
        MethodStats inf = stats_for(dim_dir / "infer");
        MethodStats ttt = stats_for(dim_dir / "ttt");
        char line[256];
        std::snprintf(line, sizeof(line), "%zu,%zu,%zu,%.6g,%.6g,%.6g,%.6g,%zu\n", dim, dim,
                      2 * dim, inf.mean_cd * 1e4, inf.median_cd * 1e4, ttt.mean_cd * 1e4,
                      ttt.median_cd * 1e4, inf.count);
        csv << line;
        csv.flush();
    }
    std::cerr << "ablate: wrote " << (out / "ablate.csv").string() << "\n";
    return 0;
}

} // namespace

int cli_main(const std::vector<std::string>& args) {
    CLI::App app{"volumetric shape restoration with twin occupancy decoders"};
    app.set_version_flag("--version", kVersionLine);
    app.require_subcommand(0, 1);

    std::string config_path;
    std::vector<std::string> overrides;
    std::string data_dir, ckpt_dir, out_path, instance_id;
    std::vector<std::string> result_dirs;
    std::string dims_csv = "100,200,400";
    int jobs = 1;
    bool resume = false;
    bool no_meshes = false;
    std::size_t thresholds = 48;

    auto add_config_opts = [&](CLI::App* sub) {
        sub->add_option("--config", config_path, "JSON config file");
        sub->add_option("--set", overrides,
                        "dotted config override, e.g. --set ttt.alpha=0.1");
    };

    CLI::App* gen = app.add_subcommand("gen-data", "generate a fractured shape dataset");
    add_config_opts(gen);
    gen->add_option("--out", out_path, "dataset directory")->required();

    CLI::App* train = app.add_subcommand("train", "train a class model");
    add_config_opts(train);
    train->add_option("--data", data_dir, "dataset directory")->required();
    train->add_option("--out", out_path, "checkpoint directory")->required();
    train->add_flag("--resume", resume, "resume from <out>/last");

    CLI::App* infer = app.add_subcommand("infer", "latent-only inference on test instances");
    add_config_opts(infer);
    infer->add_option("--data", data_dir)->required();
    infer->add_option("--checkpoint", ckpt_dir)->required();
    infer->add_option("--out", out_path, "results directory")->required();
    infer->add_option("--jobs", jobs, "parallel test instances");
    infer->add_flag("--no-meshes", no_meshes, "skip OBJ export");

    CLI::App* ttt = app.add_subcommand("ttt", "inference plus test-time training");
    add_config_opts(ttt);
    ttt->add_option("--data", data_dir)->required();
    ttt->add_option("--checkpoint", ckpt_dir)->required();
    ttt->add_option("--out", out_path)->required();
    ttt->add_option("--jobs", jobs);
    ttt->add_flag("--no-meshes", no_meshes);

    CLI::App* mesh = app.add_subcommand("mesh", "export meshes for a trained instance");
    add_config_opts(mesh);
    mesh->add_option("--checkpoint", ckpt_dir)->required();
    mesh->add_option("--instance", instance_id)->required();
    mesh->add_option("--out", out_path)->required();

    CLI::App* eval = app.add_subcommand("eval", "merge result dirs into a records CSV");
    eval->add_option("--results", result_dirs, "one or more results directories")->required();
    eval->add_option("--out", out_path, "records CSV path")->required();

    CLI::App* report = app.add_subcommand("report", "aggregate tables and cumulative curves");
    report->add_option("--results", result_dirs)->required();
    report->add_option("--out", out_path, "report directory")->required();
    report->add_option("--thresholds", thresholds, "curve threshold count");

    CLI::App* ablate = app.add_subcommand("ablate", "latent-dimension sweep");
    add_config_opts(ablate);
    ablate->add_option("--data", data_dir)->required();
    ablate->add_option("--out", out_path)->required();
    ablate->add_option("--dims", dims_csv, "comma-separated latent dims");
    ablate->add_option("--jobs", jobs);

    std::vector<std::string> argv_like = args;
    try {
        std::vector<const char*> argv;
        argv.push_back("mendkit");
        for (const auto& a : argv_like)
            argv.push_back(a.c_str());
        app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : 1;
    }

    try {
        if (app.get_subcommands().empty()) {
            std::cerr << app.help();
            return 1;
        }
        auto load_cfg = [&] {
            std::optional<fs::path> path;
            if (!config_path.empty())
                path = config_path;
            return load_run_config(path, overrides);
        };
        if (gen->parsed())
            return do_gen_data(load_cfg(), out_path);
        if (train->parsed())
            return do_train(load_cfg(), data_dir, out_path, resume);
        if (infer->parsed())
            return do_infer(load_cfg(), data_dir, ckpt_dir, out_path, false, jobs, !no_meshes);
        if (ttt->parsed())
            return do_infer(load_cfg(), data_dir, ckpt_dir, out_path, true, jobs, !no_meshes);
        if (mesh->parsed())
            return do_mesh(load_cfg(), ckpt_dir, instance_id, out_path);
        if (eval->parsed()) {
            std::vector<fs::path> dirs(result_dirs.begin(), result_dirs.end());
            return do_eval(dirs, out_path);
        }
        if (report->parsed()) {
            std::vector<fs::path> dirs(result_dirs.begin(), result_dirs.end());
            return do_report(dirs, out_path, thresholds);
        }
        if (ablate->parsed()) {
            std::vector<std::size_t> dims;
            std::stringstream ss(dims_csv);
            std::string tok;
            while (std::getline(ss, tok, ','))
                if (!tok.empty())
                    dims.push_back(static_cast<std::size_t>(std::stoull(tok)));
            return do_ablate(load_cfg(), data_dir, dims, out_path, jobs);
        }
        std::cerr << app.help();
        return 1;
    } catch (const UsageError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const NumericError& e) {
        std::cerr << "numeric error: " << e.what() << "\n";
        return 3;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
}

} // namespace mendkit
