#include "mendkit/decoder.hpp"

#include <cstring>
#include <fstream>

#include <json.hpp>

namespace mendkit {

using nlohmann::json;

void ModelConfig::validate() const {
    if (d_c < 1 || d_b < 1)
        throw ParameterError("model: latent dims must be at least 1");
    if (depth < 2)
        throw ParameterError("model: need at least input and output layers");
    if (hidden < 1)
        throw ParameterError("model: hidden width must be positive");
    if (skip_layer < 0 || skip_layer >= static_cast<int>(depth))
        throw ParameterError("model: skip layer out of range");
    if (!(dropout >= 0.0 && dropout < 1.0))
        throw ParameterError("model: dropout must lie in [0,1)");
    if (!(latent_sigma0 > 0.0))
        throw ParameterError("model: latent sigma0 must be positive");
}

namespace {

// layer input width for decoder layer `i` (0-based)
std::size_t layer_in(const ModelConfig& cfg, std::size_t d_latent, int skip_layer,
                     std::size_t i) {
    if (i == 0)
        return 3 + d_latent;
    if (skip_layer > 0 && i == static_cast<std::size_t>(skip_layer))
        return cfg.hidden + d_latent + 3;
    return cfg.hidden;
}

std::size_t layer_out(const ModelConfig& cfg, std::size_t i) {
    return (i + 1 == cfg.depth) ? 1 : cfg.hidden;
}

template <typename T>
DecoderParams<T> init_decoder(const ModelConfig& cfg, std::size_t d_latent, int skip_layer,
                              CounterRng& rng) {
    DecoderParams<T> dec;
    dec.skip_layer = skip_layer;
    dec.d_latent = d_latent;
    for (std::size_t i = 0; i < cfg.depth; ++i) {
        std::size_t in = layer_in(cfg, d_latent, skip_layer, i);
        std::size_t out = layer_out(cfg, i);
        Tensor<T> w = Tensor<T>::zeros({in, out});
        double bound = std::sqrt(6.0 / static_cast<double>(in)); // Kaiming uniform
        for (auto& v : w.data)
            v = static_cast<T>(rng.uniform(-bound, bound));
        dec.weights.push_back(std::move(w));
        dec.biases.push_back(Tensor<T>::zeros({out}));
    }
    return dec;
}

} // namespace

template <typename T>
std::vector<NamedParam<T>> RestorationModel<T>::parameters() {
    std::vector<NamedParam<T>> out;
    auto add = [&](const char* prefix, DecoderParams<T>& dec) {
        for (std::size_t i = 0; i < dec.weights.size(); ++i) {
            out.push_back({std::string(prefix) + ".layer" + std::to_string(i) + ".weight",
                           &dec.weights[i]});
            out.push_back({std::string(prefix) + ".layer" + std::to_string(i) + ".bias",
                           &dec.biases[i]});
        }
    };
    add("complete", complete);
    add("break", breaker);
    return out;
}

template <typename T>
RestorationModel<T> init_model(const ModelConfig& config, CounterRng& rng) {
    config.validate();
    RestorationModel<T> model;
    model.config = config;
    CounterRng rc = rng.substream("theta1");
    CounterRng rb = rng.substream("theta2");
    model.complete = init_decoder<T>(config, config.d_c, config.skip_layer, rc);
    model.breaker = init_decoder<T>(config, config.d_b, /*skip=*/-1, rb);
    return model;
}

template <typename T>
LatentPair<T> init_latent(const ModelConfig& config, CounterRng& rng) {
    LatentPair<T> lat;
    lat.z_c = Tensor<T>::zeros({config.d_c});
    lat.z_b = Tensor<T>::zeros({config.d_b});
    for (auto& v : lat.z_c.data)
        v = static_cast<T>(rng.normal(0.0, config.latent_sigma0));
    for (auto& v : lat.z_b.data)
        v = static_cast<T>(rng.normal(0.0, config.latent_sigma0));
    return lat;
}

template <typename T>
LatentTable<T> init_latents(const std::vector<std::string>& ids, const ModelConfig& config,
                            CounterRng& rng) {
    LatentTable<T> table;
    for (const auto& id : ids) {
        CounterRng sub = rng.substream(id);
        table.emplace(id, init_latent<T>(config, sub));
    }
    return table;
}

template <typename T>
Tensor<T> points_to_tensor(const PointCloud& points) {
    Tensor<T> t = Tensor<T>::zeros({points.size(), 3});
    for (std::size_t i = 0; i < points.size(); ++i) {
        const Vec3& p = points[i];
        if (!(p.x >= -0.1 && p.x <= 1.1 && p.y >= -0.1 && p.y <= 1.1 && p.z >= -0.1 &&
              p.z <= 1.1))
            throw ParameterError("points_to_tensor: coordinates outside [-0.1, 1.1]^3");
        t.data[3 * i] = static_cast<T>(p.x);
        t.data[3 * i + 1] = static_cast<T>(p.y);
        t.data[3 * i + 2] = static_cast<T>(p.z);
    }
    return t;
}

template <typename T>
StagedModel<T> stage_model(Tape<T>& tape, const RestorationModel<T>& model,
                           bool requires_grad) {
    StagedModel<T> staged;
    auto stage_decoder = [&](const DecoderParams<T>& dec) {
        StagedDecoder<T> s;
        s.skip_layer = dec.skip_layer;
        for (std::size_t i = 0; i < dec.weights.size(); ++i) {
            Tensor<T> w = dec.weights[i];
            w.requires_grad = requires_grad;
            Tensor<T> b = dec.biases[i];
            b.requires_grad = requires_grad;
            s.weights.push_back(tape.leaf(std::move(w)));
            s.biases.push_back(tape.leaf(std::move(b)));
        }
        return s;
    };
    staged.complete = stage_decoder(model.complete);
    staged.breaker = stage_decoder(model.breaker);
    for (std::size_t i = 0; i < staged.complete.weights.size(); ++i) {
        staged.param_ids.push_back(staged.complete.weights[i]);
        staged.param_ids.push_back(staged.complete.biases[i]);
    }
    for (std::size_t i = 0; i < staged.breaker.weights.size(); ++i) {
        staged.param_ids.push_back(staged.breaker.weights[i]);
        staged.param_ids.push_back(staged.breaker.biases[i]);
    }
    return staged;
}

template <typename T>
typename Tape<T>::NodeId decoder_forward(Tape<T>& tape, const StagedDecoder<T>& dec,
                                         typename Tape<T>::NodeId points,
                                         typename Tape<T>::NodeId latent, bool training,
                                         double dropout_rate, CounterRng& dropout_rng,
                                         const char* tag) {
    const std::size_t batch = tape.value(points).rows();
    auto z_rows = tape.broadcast_rows(latent, batch);
    auto h = tape.concat(points, z_rows);
    const std::size_t depth = dec.weights.size();
    for (std::size_t i = 0; i < depth; ++i) {
        h = tape.linear(h, dec.weights[i], dec.biases[i]);
        if (!tape.value(h).all_finite())
            throw NumericError(std::string(tag) + " decoder layer " + std::to_string(i) +
                               " produced non-finite activations");
        if (i + 1 == depth) {
            h = tape.sigmoid(h);
        } else {
            h = tape.relu(h);
            h = tape.dropout(h, static_cast<T>(dropout_rate), training, dropout_rng);
            if (dec.skip_layer > 0 && i + 1 == static_cast<std::size_t>(dec.skip_layer))
                h = tape.concat(tape.concat(h, z_rows), points);
        }
    }
    return h;
}

template <typename T>
OccupancyNodes<T> predict_on_tape(Tape<T>& tape, const StagedModel<T>& staged,
                                  typename Tape<T>::NodeId points,
                                  typename Tape<T>::NodeId z_c,
                                  typename Tape<T>::NodeId z_b, bool training,
                                  double dropout_rate, CounterRng& dropout_rng) {
    OccupancyNodes<T> out;
    out.o_c = decoder_forward(tape, staged.complete, points, z_c, training, dropout_rate,
                              dropout_rng, "complete");
    out.o_b = decoder_forward(tape, staged.breaker, points, z_b, training, dropout_rate,
                              dropout_rng, "break");
    out.o_f = tape.mul(out.o_c, out.o_b);
    out.o_r = tape.mul(out.o_c, tape.affine(out.o_b, T(-1), T(1)));
    return out;
}

template <typename T>
OccupancyBatch<T> predict_eval(const RestorationModel<T>& model, const LatentPair<T>& latent,
                               const PointCloud& points) {
    Tape<T> tape;
    auto pts = tape.constant(points_to_tensor<T>(points));
    StagedModel<T> staged = stage_model(tape, model, /*requires_grad=*/false);
    auto zc = tape.constant(latent.z_c);
    auto zb = tape.constant(latent.z_b);
    CounterRng unused(0);
    OccupancyNodes<T> nodes =
        predict_on_tape(tape, staged, pts, zc, zb, /*training=*/false, 0.0, unused);
    OccupancyBatch<T> out;
    out.o_c = tape.value(nodes.o_c).data;
    out.o_b = tape.value(nodes.o_b).data;
    out.o_f = tape.value(nodes.o_f).data;
    out.o_r = tape.value(nodes.o_r).data;
    return out;
}

// ---------------------------------------------------------------------------
// checkpoints
// ---------------------------------------------------------------------------

namespace {

void append_f32(std::string& buf, float v) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    for (int i = 0; i < 4; ++i)
        buf.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}

float take_f32(const char* p) {
    std::uint32_t bits = 0;
    for (int i = 3; i >= 0; --i)
        bits = (bits << 8) | static_cast<unsigned char>(p[i]);
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
}

void write_file(const std::filesystem::path& path, const std::string& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out)
        throw IoError("cannot open " + path.string() + " for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out)
        throw IoError("short write to " + path.string());
}

std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary | std::ios::ate);
    if (!in)
        throw IoError("cannot open " + path.string());
    std::streamsize size = in.tellg();
    in.seekg(0);
    std::string bytes(static_cast<std::size_t>(size), '\0');
    in.read(bytes.data(), size);
    if (!in)
        throw IoError("short read from " + path.string());
    return bytes;
}

} // namespace

void save_checkpoint(const std::filesystem::path& dir, const RestorationModel<float>& model,
                     const LatentTable<float>& latents, const CheckpointMeta& meta) {
    std::filesystem::create_directories(dir);
    json j;
    j["format_version"] = 1;
    j["arch"] = {{"d_c", model.config.d_c},       {"d_b", model.config.d_b},
                 {"hidden", model.config.hidden}, {"depth", model.config.depth},
                 {"skip_layer", model.config.skip_layer},
                 {"dropout", model.config.dropout},
                 {"latent_sigma0", model.config.latent_sigma0}};
    j["seed"] = meta.seed;
    j["epoch"] = meta.epoch;
    j["best_val_cd"] = meta.best_val_cd;
    j["best_val_epoch"] = meta.best_val_epoch;
    j["loss_summary"] = {{"last_total", meta.last_total_loss},
                         {"history_length", meta.loss_history_length}};

    std::string params;
    json layout = json::array();
    std::size_t offset = 0;
    auto& model_mut = const_cast<RestorationModel<float>&>(model);
    for (const auto& p : model_mut.parameters()) {
        json entry;
        entry["name"] = p.name;
        entry["shape"] = p.tensor->shape;
        entry["offset"] = offset;
        layout.push_back(entry);
        for (float v : p.tensor->data)
            append_f32(params, v);
        offset += p.tensor->size();
    }
    j["layout"] = layout;

    std::string latent_bytes;
    std::vector<std::string> ids;
    for (const auto& [id, lat] : latents) {
        ids.push_back(id);
        for (float v : lat.z_c.data)
            append_f32(latent_bytes, v);
        for (float v : lat.z_b.data)
            append_f32(latent_bytes, v);
    }
    j["latent_ids"] = ids;

    write_file(dir / "params.bin", params);
    write_file(dir / "latents.bin", latent_bytes);
    std::ofstream out(dir / "checkpoint.json", std::ios::binary | std::ios::trunc);
    if (!out)
        throw IoError("cannot open " + (dir / "checkpoint.json").string());
    out << j.dump(2) << "\n";
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& dir) {
    std::ifstream in(dir / "checkpoint.json");
    if (!in)
        throw IoError("load_checkpoint: cannot open " + (dir / "checkpoint.json").string());
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw IoError("load_checkpoint: invalid JSON: " + std::string(e.what()));
    }
    if (j.value("format_version", 0) != 1)
        throw IoError("load_checkpoint: unsupported format_version");

    ModelConfig cfg;
    cfg.d_c = j.at("arch").at("d_c").get<std::size_t>();
    cfg.d_b = j.at("arch").at("d_b").get<std::size_t>();
    cfg.hidden = j.at("arch").at("hidden").get<std::size_t>();
    cfg.depth = j.at("arch").at("depth").get<std::size_t>();
    cfg.skip_layer = j.at("arch").at("skip_layer").get<int>();
    cfg.dropout = j.at("arch").at("dropout").get<double>();
    cfg.latent_sigma0 = j.at("arch").at("latent_sigma0").get<double>();

    LoadedCheckpoint loaded;
    CounterRng dummy(0);
    loaded.model = init_model<float>(cfg, dummy); // allocates the layout
    loaded.meta.seed = j.at("seed").get<std::uint64_t>();
    loaded.meta.epoch = j.at("epoch").get<std::int64_t>();
    loaded.meta.best_val_cd = j.at("best_val_cd").get<double>();
    loaded.meta.best_val_epoch = j.at("best_val_epoch").get<std::int64_t>();
    loaded.meta.last_total_loss = j.at("loss_summary").at("last_total").get<double>();
    loaded.meta.loss_history_length =
        j.at("loss_summary").at("history_length").get<std::int64_t>();

    std::string params = read_file(dir / "params.bin");
    auto named = loaded.model.parameters();
    std::size_t expected = 0;
    for (const auto& p : named)
        expected += p.tensor->size();
    if (params.size() != expected * 4)
        throw IoError("load_checkpoint: params.bin has " + std::to_string(params.size()) +
                      " bytes, layout expects " + std::to_string(expected * 4));
    const json& layout = j.at("layout");
    if (layout.size() != named.size())
        throw IoError("load_checkpoint: layout table does not match architecture");
    for (std::size_t i = 0; i < named.size(); ++i) {
        const json& entry = layout.at(i);
        if (entry.at("name").get<std::string>() != named[i].name)
            throw IoError("load_checkpoint: layout order mismatch at " + named[i].name);
        std::size_t offset = entry.at("offset").get<std::size_t>();
        for (std::size_t k = 0; k < named[i].tensor->size(); ++k)
            named[i].tensor->data[k] = take_f32(params.data() + 4 * (offset + k));
    }

    std::vector<std::string> ids = j.at("latent_ids").get<std::vector<std::string>>();
    std::string latent_bytes = read_file(dir / "latents.bin");
    std::size_t per = (cfg.d_c + cfg.d_b) * 4;
    if (latent_bytes.size() != ids.size() * per)
        throw IoError("load_checkpoint: latents.bin has " + std::to_string(latent_bytes.size()) +
                      " bytes, expected " + std::to_string(ids.size() * per));
    std::size_t pos = 0;
    for (const auto& id : ids) {
        LatentPair<float> lat;
        lat.z_c = Tensor<float>::zeros({cfg.d_c});
        lat.z_b = Tensor<float>::zeros({cfg.d_b});
        for (auto& v : lat.z_c.data) {
            v = take_f32(latent_bytes.data() + pos);
            pos += 4;
        }
        for (auto& v : lat.z_b.data) {
            v = take_f32(latent_bytes.data() + pos);
            pos += 4;
        }
        loaded.latents.emplace(id, std::move(lat));
    }
    return loaded;
}

// explicit instantiations: float is the compute path, double the test path
template struct RestorationModel<float>;
template struct RestorationModel<double>;
template RestorationModel<float> init_model<float>(const ModelConfig&, CounterRng&);
template RestorationModel<double> init_model<double>(const ModelConfig&, CounterRng&);
template LatentPair<float> init_latent<float>(const ModelConfig&, CounterRng&);
template LatentPair<double> init_latent<double>(const ModelConfig&, CounterRng&);
template LatentTable<float> init_latents<float>(const std::vector<std::string>&,
                                                const ModelConfig&, CounterRng&);
template LatentTable<double> init_latents<double>(const std::vector<std::string>&,
                                                  const ModelConfig&, CounterRng&);
template Tensor<float> points_to_tensor<float>(const PointCloud&);
template Tensor<double> points_to_tensor<double>(const PointCloud&);
template StagedModel<float> stage_model<float>(Tape<float>&, const RestorationModel<float>&,
                                               bool);
template StagedModel<double> stage_model<double>(Tape<double>&,
                                                 const RestorationModel<double>&, bool);
template Tape<float>::NodeId decoder_forward<float>(Tape<float>&, const StagedDecoder<float>&,
                                                    Tape<float>::NodeId, Tape<float>::NodeId,
                                                    bool, double, CounterRng&, const char*);
template Tape<double>::NodeId decoder_forward<double>(Tape<double>&,
                                                      const StagedDecoder<double>&,
                                                      Tape<double>::NodeId,
                                                      Tape<double>::NodeId, bool, double,
                                                      CounterRng&, const char*);
template OccupancyNodes<float> predict_on_tape<float>(Tape<float>&, const StagedModel<float>&,
                                                      Tape<float>::NodeId, Tape<float>::NodeId,
                                                      Tape<float>::NodeId, bool, double,
                                                      CounterRng&);
template OccupancyNodes<double> predict_on_tape<double>(Tape<double>&,
                                                        const StagedModel<double>&,
                                                        Tape<double>::NodeId,
                                                        Tape<double>::NodeId,
                                                        Tape<double>::NodeId, bool, double,
                                                        CounterRng&);
template OccupancyBatch<float> predict_eval<float>(const RestorationModel<float>&,
                                                   const LatentPair<float>&, const PointCloud&);
template OccupancyBatch<double> predict_eval<double>(const RestorationModel<double>&,
                                                     const LatentPair<double>&,
                                                     const PointCloud&);

} // namespace mendkit
