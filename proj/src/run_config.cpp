#include "mendkit/run_config.hpp"

#include <cstdlib>
#include <fstream>

#include <json.hpp>

namespace mendkit {

using nlohmann::json;

namespace {

json defaults_json(const RunConfig& c) {
    json j;
    j["data"] = {{"class", c.data.class_name},
                 {"count", c.data.count},
                 {"band", {c.data.band[0], c.data.band[1]}},
                 {"jitter", c.data.jitter},
                 {"gen_resolution", c.data.gen_resolution},
                 {"cache_points", c.data.cache_points},
                 {"fraction_samples", c.data.fraction_samples},
                 {"jobs", c.data.jobs},
                 {"samples",
                  {{"uniform", c.data.samples.uniform},
                   {"surface", c.data.samples.surface},
                   {"sigma", c.data.samples.sigma}}}};
    j["model"] = {{"d_c", c.model.d_c},
                  {"d_b", c.model.d_b},
                  {"hidden", c.model.hidden},
                  {"depth", c.model.depth},
                  {"skip_layer", c.model.skip_layer},
                  {"dropout", c.model.dropout},
                  {"latent_sigma0", c.model.latent_sigma0}};
    j["train"] = {{"epochs", c.train.epochs},
                  {"instances_per_batch", c.train.instances_per_batch},
                  {"points_per_instance", c.train.points_per_instance},
                  {"lr_net", c.train.lr_net},
                  {"lr_latent", c.train.lr_latent},
                  {"validation_period", c.train.validation_period},
                  {"patience", c.train.patience},
                  {"val_infer_steps", c.train.val_infer_steps},
                  {"val_points_per_step", c.train.val_points_per_step},
                  {"val_grid_resolution", c.train.val_grid_resolution},
                  {"val_surface_samples", c.train.val_surface_samples},
                  {"iteration_budget", c.train.iteration_budget}};
    j["infer"] = {{"steps", c.infer.steps},
                  {"points_per_step", c.infer.points_per_step},
                  {"lr_latent", c.infer.lr_latent},
                  {"lambda_nonempty", c.infer.lambda_nonempty},
                  {"m0", c.infer.m0},
                  {"lambda_prox", c.infer.lambda_prox},
                  {"bbox_inflate", c.infer.bbox_inflate}};
    j["ttt"] = {{"epochs", c.ttt.epochs},
                {"alpha", c.ttt.alpha},
                {"tau", c.ttt.tau},
                {"lr_net", c.ttt.lr_net},
                {"lr_latent", c.ttt.lr_latent},
                {"points_per_step", c.ttt.points_per_step},
                {"holdout_fraction", c.ttt.holdout_fraction},
                {"resample_queries", c.ttt.resample_queries}};
    j["eval"] = {{"grid_resolution", c.eval.grid_resolution},
                 {"surface_samples", c.eval.surface_samples},
                 {"curve_thresholds", c.eval.curve_thresholds}};
    j["seed"] = c.seed;
    return j;
}

void reject_unknown_keys(const json& doc, const json& reference, const std::string& prefix) {
    if (!doc.is_object())
        throw UsageError("config: expected an object at '" + (prefix.empty() ? "." : prefix) +
                         "'");
    for (const auto& [key, value] : doc.items()) {
        std::string where = prefix.empty() ? key : prefix + "." + key;
        if (!reference.contains(key))
            throw UsageError("config: unknown key '" + where + "'");
        if (reference.at(key).is_object())
            reject_unknown_keys(value, reference.at(key), where);
    }
}

void merge_into(json& base, const json& overlay) {
    for (const auto& [key, value] : overlay.items()) {
        if (value.is_object() && base.contains(key) && base.at(key).is_object())
            merge_into(base.at(key), value);
        else
            base[key] = value;
    }
}

RunConfig from_json_doc(const json& j) {
    RunConfig c;
    try {
        const json& d = j.at("data");
        c.data.class_name = d.at("class").get<std::string>();
        c.data.count = d.at("count").get<std::size_t>();
        c.data.band = {d.at("band").at(0).get<double>(), d.at("band").at(1).get<double>()};
        c.data.jitter = d.at("jitter").get<double>();
        c.data.gen_resolution = d.at("gen_resolution").get<std::size_t>();
        c.data.cache_points = d.at("cache_points").get<std::size_t>();
        c.data.fraction_samples = d.at("fraction_samples").get<std::size_t>();
        c.data.jobs = d.at("jobs").get<int>();
        c.data.samples.uniform = d.at("samples").at("uniform").get<std::size_t>();
        c.data.samples.surface = d.at("samples").at("surface").get<std::size_t>();
        c.data.samples.sigma = d.at("samples").at("sigma").get<double>();

        const json& m = j.at("model");
        c.model.d_c = m.at("d_c").get<std::size_t>();
        c.model.d_b = m.at("d_b").get<std::size_t>();
        c.model.hidden = m.at("hidden").get<std::size_t>();
        c.model.depth = m.at("depth").get<std::size_t>();
        c.model.skip_layer = m.at("skip_layer").get<int>();
        c.model.dropout = m.at("dropout").get<double>();
        c.model.latent_sigma0 = m.at("latent_sigma0").get<double>();

        const json& t = j.at("train");
        c.train.epochs = t.at("epochs").get<std::int64_t>();
        c.train.instances_per_batch = t.at("instances_per_batch").get<std::size_t>();
        c.train.points_per_instance = t.at("points_per_instance").get<std::size_t>();
        c.train.lr_net = t.at("lr_net").get<double>();
        c.train.lr_latent = t.at("lr_latent").get<double>();
        c.train.validation_period = t.at("validation_period").get<int>();
        c.train.patience = t.at("patience").get<int>();
        c.train.val_infer_steps = t.at("val_infer_steps").get<std::size_t>();
        c.train.val_points_per_step = t.at("val_points_per_step").get<std::size_t>();
        c.train.val_grid_resolution = t.at("val_grid_resolution").get<std::size_t>();
        c.train.val_surface_samples = t.at("val_surface_samples").get<std::size_t>();
        c.train.iteration_budget = t.at("iteration_budget").get<std::int64_t>();

        const json& i = j.at("infer");
        c.infer.steps = i.at("steps").get<std::size_t>();
        c.infer.points_per_step = i.at("points_per_step").get<std::size_t>();
        c.infer.lr_latent = i.at("lr_latent").get<double>();
        c.infer.lambda_nonempty = i.at("lambda_nonempty").get<double>();
        c.infer.m0 = i.at("m0").get<double>();
        c.infer.lambda_prox = i.at("lambda_prox").get<double>();
        c.infer.bbox_inflate = i.at("bbox_inflate").get<double>();

        const json& tt = j.at("ttt");
        c.ttt.epochs = tt.at("epochs").get<std::int64_t>();
        c.ttt.alpha = tt.at("alpha").get<double>();
        c.ttt.tau = tt.at("tau").get<double>();
        c.ttt.lr_net = tt.at("lr_net").get<double>();
        c.ttt.lr_latent = tt.at("lr_latent").get<double>();
        c.ttt.points_per_step = tt.at("points_per_step").get<std::size_t>();
        c.ttt.holdout_fraction = tt.at("holdout_fraction").get<double>();
        c.ttt.resample_queries = tt.at("resample_queries").get<bool>();

        const json& e = j.at("eval");
        c.eval.grid_resolution = e.at("grid_resolution").get<std::size_t>();
        c.eval.surface_samples = e.at("surface_samples").get<std::size_t>();
        c.eval.curve_thresholds = e.at("curve_thresholds").get<std::size_t>();

        c.seed = j.at("seed").get<std::uint64_t>();
    } catch (const json::exception& e) {
        throw UsageError(std::string("config: malformed value: ") + e.what());
    }
    return c;
}

json parse_override_value(const std::string& raw) {
    json v = json::parse(raw, nullptr, false);
    if (v.is_discarded())
        return json(raw); // plain string
    return v;
}

} // namespace

GenDataConfig RunConfig::gen_data_config(const std::string& dataset_name) const {
    GenDataConfig g;
    g.name = dataset_name;
    g.class_spec.name = data.class_name;
    g.class_spec.jitter = data.jitter;
    g.class_spec.gen_resolution = data.gen_resolution;
    g.count = data.count;
    g.band = data.band;
    g.counts = data.samples;
    g.seed = seed;
    g.cache_points = data.cache_points;
    g.fraction_samples = data.fraction_samples;
    g.jobs = data.jobs;
    return g;
}

InstanceRunConfig RunConfig::instance_run_config(bool with_ttt) const {
    InstanceRunConfig rc;
    rc.infer = infer;
    rc.ttt = ttt;
    rc.with_ttt = with_ttt;
    rc.grid_resolution = eval.grid_resolution;
    rc.surface_samples = eval.surface_samples;
    return rc;
}

RunConfig load_run_config(const std::optional<std::filesystem::path>& config_path,
                          const std::vector<std::string>& overrides) {
    RunConfig defaults;
    json doc = defaults_json(defaults);

    if (config_path) {
        std::ifstream in(*config_path);
        if (!in)
            throw UsageError("config: cannot open " + config_path->string());
        json user;
        try {
            in >> user;
        } catch (const json::exception& e) {
            throw UsageError("config: invalid JSON in " + config_path->string() + ": " +
                             e.what());
        }
        reject_unknown_keys(user, doc, "");
        merge_into(doc, user);
    }
    for (const std::string& ov : overrides) {
        auto eq = ov.find('=');
        if (eq == std::string::npos)
            throw UsageError("config: override '" + ov + "' is not of the form key=value");
        std::string key = ov.substr(0, eq);
        std::string value = ov.substr(eq + 1);
        std::string pointer = "/" + key;
        for (auto& ch : pointer)
            if (ch == '.')
                ch = '/';
        // the key must already exist (same unknown-key policy as files)
        json probe = doc;
        if (!probe.contains(json::json_pointer(pointer)))
            throw UsageError("config: unknown override key '" + key + "'");
        doc[json::json_pointer(pointer)] = parse_override_value(value);
    }
    if (const char* env_seed = std::getenv("MENDKIT_SEED")) {
        try {
            doc["seed"] = static_cast<std::uint64_t>(std::stoull(env_seed));
        } catch (const std::exception&) {
            throw UsageError("MENDKIT_SEED is not an unsigned integer");
        }
    }
    RunConfig cfg = from_json_doc(doc);
    // one root seed feeds every stage; stages derive their own substreams
    cfg.train.seed = cfg.seed;
    cfg.infer.seed = cfg.seed;
    cfg.ttt.seed = cfg.seed;
    return cfg;
}

std::string run_config_to_json(const RunConfig& config) {
    return defaults_json(config).dump(2);
}

} // namespace mendkit
