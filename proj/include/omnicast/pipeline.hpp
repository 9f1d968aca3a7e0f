// Copyright (C) 2026 omnicast contributors
// SPDX-License-Identifier: Apache-2.0

// Run configuration documents and the end-to-end stages behind the CLI:
// dataset generation, VAE fit, stage-two training, ensemble forecasts,
// evaluation and sampler sweeps.

#pragma once

#include <nlohmann/json.hpp>

#include <algorithm>
#include <chrono>
#include <filesystem>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "omnicast/metrics.hpp"
#include "omnicast/sampler.hpp"

namespace omnicast::data {

inline void to_json(nlohmann::json& j, const SyntheticConfig& c) {
    j = nlohmann::json::object();
    j["height"] = c.height;
    j["width"] = c.width;
    j["channels"] = c.channels;
    j["seed"] = c.seed;
    j["frames"] = c.frames;
    j["spinup_frames"] = c.spinup_frames;
    j["frame_interval_hours"] = c.frame_interval_hours;
    j["substeps"] = c.substeps;
    j["diffusivity"] = c.diffusivity;
    j["damping"] = c.damping;
    j["mean_flow_speed"] = c.mean_flow_speed;
    j["mean_flow_angle"] = c.mean_flow_angle;
    j["rotating_flow_speed"] = c.rotating_flow_speed;
    j["flow_period_frames"] = c.flow_period_frames;
    j["noise_amplitude"] = c.noise_amplitude;
    j["forcing_wavenumber"] = c.forcing_wavenumber;
    j["pattern_amplitude"] = c.pattern_amplitude;
    j["seasonal_amplitude"] = c.seasonal_amplitude;
    j["seasonal_period_frames"] = c.seasonal_period_frames;
    j["coupling"] = c.coupling;
}

/// Missing keys keep their defaults.
inline void from_json(const nlohmann::json& j, SyntheticConfig& c) {
    c.height = j.value("height", c.height);
    c.width = j.value("width", c.width);
    c.channels = j.value("channels", c.channels);
    c.seed = j.value("seed", c.seed);
    c.frames = j.value("frames", c.frames);
    c.spinup_frames = j.value("spinup_frames", c.spinup_frames);
    c.frame_interval_hours = j.value("frame_interval_hours", c.frame_interval_hours);
    c.substeps = j.value("substeps", c.substeps);
    c.diffusivity = j.value("diffusivity", c.diffusivity);
    c.damping = j.value("damping", c.damping);
    c.mean_flow_speed = j.value("mean_flow_speed", c.mean_flow_speed);
    c.mean_flow_angle = j.value("mean_flow_angle", c.mean_flow_angle);
    c.rotating_flow_speed = j.value("rotating_flow_speed", c.rotating_flow_speed);
    c.flow_period_frames = j.value("flow_period_frames", c.flow_period_frames);
    c.noise_amplitude = j.value("noise_amplitude", c.noise_amplitude);
    c.forcing_wavenumber = j.value("forcing_wavenumber", c.forcing_wavenumber);
    c.pattern_amplitude = j.value("pattern_amplitude", c.pattern_amplitude);
    c.seasonal_amplitude = j.value("seasonal_amplitude", c.seasonal_amplitude);
    c.seasonal_period_frames = j.value("seasonal_period_frames", c.seasonal_period_frames);
    c.coupling = j.value("coupling", c.coupling);
}

}  // namespace omnicast::data

namespace omnicast::pipeline {

namespace fs = std::filesystem;
using nlohmann::json;

// ------------------------------------------------------------------ config

/// Every key a run document may carry, with desk-scale defaults.
inline json default_config() {
    data::SyntheticConfig syn;
    VaeConfig vae;
    vae.in_channels = syn.channels;
    vae.base_channels = 32;
    vae.mults = {1, 2, 4};
    vae.blocks = 2;
    vae.latent_dim = 8;
    VaeTrainConfig vt;
    vt.epochs = 20;
    vt.batch_size = 16;
    BackboneConfig bb;
    bb.encoder_layers = 4;
    bb.decoder_layers = 4;
    bb.heads = 4;
    bb.width = 128;
    bb.dropout = 0.1;
    DiffusionHeadConfig hd;
    hd.blocks = 3;
    hd.width = 128;
    hd.time_dim = 64;
    TrainConfig tr;
    tr.epochs = 100;
    tr.batch_size = 16;
    tr.sequence_length = 8;
    tr.base_lr = 5e-4;
    tr.warmup_epochs = 5;
    SamplerConfig sm;
    json j;
    j["seed"] = 0;
    j["data"] = {{"synthetic", syn}, {"train_frames", 6480}, {"val_frames", 360}, {"test_frames", 360}, {"shard_frames", 360}};
    j["vae"] = vae;
    j["vae_train"] = vt;
    j["model"] = {{"backbone", bb}, {"head", hd}};
    j["train"] = tr;
    j["sampler"] = sm;
    j["forecast"] = {{"mode", "joint"}, {"horizon_frames", 0}, {"initial_conditions", 8}, {"ic_stride", 20}, {"ic_offset", 0}};
    j["evaluate"] = {{"metrics", metrics::all_metric_names()}, {"images", false}};
    return j;
}

/// Parses `text` as JSON when possible, else keeps it as a string.
inline json parse_value(const std::string& text) {
    try {
        return json::parse(text);
    } catch (const json::exception&) {
        return text;
    }
}

/// Applies `a.b.c=value`; the key must already exist in the document.
inline void apply_override(json& doc, const std::string& assignment) {
    auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not key=value");
    std::string key = assignment.substr(0, eq);
    json* node = &doc;
    std::stringstream ks(key);
    std::string part;
    while (std::getline(ks, part, '.')) {
        if (!node->is_object() || !node->contains(part)) throw ConfigError("override key '" + key + "' does not exist");
        node = &(*node)[part];
    }
    *node = parse_value(assignment.substr(eq + 1));
}

/// Rejects keys that the defaults do not define (typos in config files).
inline void check_known_keys(const json& doc, const json& ref, const std::string& path = "") {
    if (!doc.is_object() || !ref.is_object()) return;
    for (auto& [k, v] : doc.items()) {
        std::string p = path.empty() ? k : path + "." + k;
        if (!ref.contains(k)) throw ConfigError("unknown config key '" + p + "'");
        check_known_keys(v, ref.at(k), p);
    }
}

/// Defaults, then the file (if any), then overrides, then a `--seed`.
inline json resolve_config(const fs::path& file, const std::vector<std::string>& overrides, std::optional<std::uint64_t> seed) {
    json doc = default_config();
    if (!file.empty()) {
        json user;
        try {
            user = json::parse(octf::read_bytes(file));
        } catch (const json::exception& e) {
            throw ConfigError(file.string() + ": invalid JSON: " + e.what());
        } catch (const IngestionFault& e) {
            throw ConfigError(e.what());
        }
        check_known_keys(user, doc);
        doc.merge_patch(user);
    }
    for (auto& o : overrides) apply_override(doc, o);
    if (seed) doc["seed"] = *seed;
    return doc;
}

struct RunConfig {
    std::uint64_t seed = 0;
    data::SyntheticConfig synthetic;
    std::size_t train_frames = 0, val_frames = 0, test_frames = 0, shard_frames = 360;
    VaeConfig vae;
    VaeTrainConfig vae_train;
    BackboneConfig backbone;
    DiffusionHeadConfig head;
    TrainConfig train;
    SamplerConfig sampler;
    std::string mode = "joint";
    std::size_t horizon_frames = 0;
    std::size_t initial_conditions = 8, ic_stride = 20, ic_offset = 0;
    std::vector<std::string> metric_names;
    bool images = false;

    /// Stage seeds derive from the root seed by name.
    std::uint64_t stage_seed(const char* stage) const { return RootRng(seed).stream(stage).seed(); }
};

inline RunConfig parse_config(const json& doc) {
    RunConfig c;
    try {
        c.seed = doc.at("seed").get<std::uint64_t>();
        const auto& d = doc.at("data");
        c.synthetic = d.at("synthetic").get<data::SyntheticConfig>();
        c.train_frames = d.at("train_frames");
        c.val_frames = d.at("val_frames");
        c.test_frames = d.at("test_frames");
        c.shard_frames = d.at("shard_frames");
        c.vae = doc.at("vae").get<VaeConfig>();
        c.vae_train = doc.at("vae_train").get<VaeTrainConfig>();
        c.backbone = doc.at("model").at("backbone").get<BackboneConfig>();
        c.head = doc.at("model").at("head").get<DiffusionHeadConfig>();
        c.train = doc.at("train").get<TrainConfig>();
        c.sampler = doc.at("sampler").get<SamplerConfig>();
        const auto& f = doc.at("forecast");
        c.mode = f.at("mode");
        c.horizon_frames = f.at("horizon_frames");
        c.initial_conditions = f.at("initial_conditions");
        c.ic_stride = f.at("ic_stride");
        c.ic_offset = f.at("ic_offset");
        c.metric_names = doc.at("evaluate").at("metrics").get<std::vector<std::string>>();
        c.images = doc.at("evaluate").at("images");
    } catch (const json::exception& e) {
        throw ConfigError(std::string("invalid config value: ") + e.what());
    }
    c.synthetic.seed = c.stage_seed("data");
    c.synthetic.frames = c.train_frames + c.val_frames + c.test_frames;
    c.vae.in_channels = c.synthetic.channels;
    c.vae_train.seed = c.stage_seed("vae");
    c.train.seed = c.stage_seed("model");
    c.train.frame_interval_hours = c.synthetic.frame_interval_hours;
    c.sampler.seed = c.stage_seed("sampler");
    c.synthetic.validate();
    c.vae.validate();
    c.backbone.validate();
    c.head.validate();
    c.train.validate();
    c.sampler.validate();
    if (c.train_frames == 0) throw ConfigError("data: train_frames must be positive");
    if (c.shard_frames == 0) throw ConfigError("data: shard_frames must be positive");
    if (c.mode != "joint" && c.mode != "autoregressive") throw ConfigError("forecast: mode must be 'joint' or 'autoregressive'");
    if (c.initial_conditions == 0) throw ConfigError("forecast: initial_conditions must be positive");
    if (c.ic_stride == 0) throw ConfigError("forecast: ic_stride must be positive");
    for (auto& m : c.metric_names)
        if (std::find(metrics::all_metric_names().begin(), metrics::all_metric_names().end(), m) == metrics::all_metric_names().end())
            throw ConfigError("evaluate: unknown metric '" + m + "'");
    return c;
}

// ---------------------------------------------------------------- datasets

/// Normalized splits of a dataset directory.
struct Dataset {
    fs::path dir;
    data::DatasetManifest manifest;
    std::vector<data::FieldGrid> train, val, test;
};

inline data::DatasetManifest gen_data(const RunConfig& c, const fs::path& out) {
    auto frames = data::gen_synthetic(c.synthetic);
    data::DatasetManifest m;
    m.frame_interval_hours = c.synthetic.frame_interval_hours;
    data::assign_splits(m, frames.front().timestamp_hours, c.train_frames, c.val_frames, c.test_frames);
    m.normalization = data::compute_normalization(std::span<const data::FieldGrid>(frames).subspan(0, c.train_frames));
    return data::write_dataset(out, frames, m, c.shard_frames);
}

inline Dataset load_dataset(const fs::path& dir) {
    Dataset d;
    d.dir = dir;
    d.manifest = data::read_manifest(dir);
    const auto& m = d.manifest;
    if (m.normalization.size() != m.V) throw IngestionFault((dir / "manifest.json").string(), "missing normalization statistics");
    auto load = [&](const data::TimeRange& r) {
        auto frames = data::load_fields(dir, m, r);
        for (auto& f : frames) f = data::normalize(f, m.normalization);
        return frames;
    };
    d.train = load(m.train);
    d.val = load(m.val);
    d.test = load(m.test);
    return d;
}

// ----------------------------------------------------------------- training

struct VaeBundle {
    Vae<float> vae;
    LatentStats stats;
};

using EpochHook = std::function<void(const EpochRecord&)>;

inline VaeBundle fit_vae(const RunConfig& c, const Dataset& d, std::vector<EpochRecord>* history = nullptr, const EpochHook& hook = {}) {
    VaeConfig vc = c.vae;
    vc.in_channels = d.manifest.V;
    Vae<float> vae(vc, c.vae_train.seed);
    auto h = train_vae(vae, std::span<const data::FieldGrid>(d.train), std::span<const data::FieldGrid>(d.val), c.vae_train, hook);
    if (history) *history = h;
    auto series = encode_series(vae, std::span<const data::FieldGrid>(d.train));
    return {std::move(vae), compute_latent_stats(series)};
}

inline LatentSeries standardized_series(const VaeBundle& v, std::span<const data::FieldGrid> frames) {
    auto s = encode_series(v.vae, frames);
    standardize(s, v.stats);
    return s;
}

inline ForecastModel<float> fit_model(const RunConfig& c, const Dataset& d, const VaeBundle& v, TrainResult* result = nullptr,
                                      const EpochHook& hook = {}) {
    auto train = standardized_series(v, d.train);
    auto val = standardized_series(v, d.val);
    SequenceLayout L{c.train.sequence_length, train.h, train.w, train.D};
    ForecastModel<float> model(L, c.backbone, c.head, c.train.seed);
    model.latent_stats = v.stats;
    auto r = train_run(model, train, val, c.train, hook);
    if (result) *result = r;
    return model;
}

// ---------------------------------------------------------------- forecasts

/// Forecast length in frames for the configured mode.
inline std::size_t horizon_frames(const RunConfig& c, const SequenceLayout& L) {
    if (c.mode == "joint") return L.T;
    std::size_t h = c.horizon_frames ? c.horizon_frames : L.T;
    if (h % L.T) throw ConfigError("forecast: horizon_frames " + std::to_string(h) + " is not a multiple of T=" + std::to_string(L.T));
    return h;
}

/// Indices into the test split usable as initial conditions.
inline std::vector<std::size_t> ic_indices(const RunConfig& c, std::size_t test_frames, std::size_t horizon) {
    std::vector<std::size_t> out;
    for (std::size_t k = 0; k < c.initial_conditions; ++k) {
        std::size_t i = c.ic_offset + k * c.ic_stride;
        if (i + horizon >= test_frames) break;
        out.push_back(i);
    }
    if (out.empty()) throw ConfigError("forecast: test split too short for the requested horizon and initial conditions");
    return out;
}

/// One ensemble per initial condition, in normalized space. Per-IC sampler
/// seeds derive from the sampler seed and the IC timestamp.
inline std::vector<EnsembleForecast> forecast_ensembles(const ForecastModel<float>& model, const Vae<float>& vae,
                                                        const std::vector<data::FieldGrid>& frames, const std::vector<std::size_t>& ics,
                                                        std::size_t horizon, double interval_hours, const SamplerConfig& sampler) {
    std::vector<EnsembleForecast> out;
    for (auto i : ics) {
        SamplerConfig sc = sampler;
        sc.seed = RootRng(sampler.seed).stream("ic", static_cast<std::uint64_t>(frames[i].timestamp_hours)).seed();
        std::size_t rec = horizon / model.layout.T;
        out.push_back(rollout_frames(model, vae, frames[i], rec, interval_hours, sc));
    }
    return out;
}

inline std::vector<data::FieldGrid> truth_for(const std::vector<data::FieldGrid>& frames, std::size_t ic, std::size_t horizon) {
    require(ic + horizon < frames.size(), "truth_for: horizon exceeds available frames");
    return {frames.begin() + static_cast<long>(ic + 1), frames.begin() + static_cast<long>(ic + 1 + horizon)};
}

/// Mean over initial conditions of per-IC reports.
inline metrics::MetricsReport score(const std::vector<EnsembleForecast>& fcs, const std::vector<data::FieldGrid>& frames,
                                    const std::vector<std::size_t>& ics, const std::vector<std::string>& names) {
    std::vector<metrics::MetricsReport> reps;
    for (std::size_t k = 0; k < fcs.size(); ++k) {
        auto truth = truth_for(frames, ics[k], fcs[k].lead_hours.size());
        reps.push_back(metrics::evaluate_ensemble(fcs[k].members, truth, fcs[k].lead_hours, names));
    }
    return metrics::MetricsReport::mean_of(reps);
}

inline EnsembleForecast denormalized(EnsembleForecast fc, std::span<const data::VariableStats> stats) {
    for (auto& m : fc.members)
        for (auto& f : m) f = data::denormalize(f, stats);
    return fc;
}

/// Rows `lead_hours,<variable>...` for one metric.
inline std::string metric_curve_csv(const metrics::MetricsReport& rep, const std::string& metric, const std::vector<std::string>& variables) {
    std::map<std::int64_t, std::map<std::string, std::optional<double>>> grid;
    for (auto& r : rep.rows())
        if (r.metric == metric) grid[r.lead_hours][r.variable] = r.value;
    std::string out = "lead_hours";
    for (auto& v : variables) out += "," + v;
    out += "\n";
    char buf[64];
    for (auto& [lead, row] : grid) {
        out += std::to_string(lead);
        for (auto& v : variables) {
            auto it = row.find(v);
            if (it == row.end() || !it->second) {
                out += ",undefined";
            } else {
                std::snprintf(buf, sizeof(buf), ",%.9g", *it->second);
                out += buf;
            }
        }
        out += "\n";
    }
    return out;
}

/// 8-bit binary PGM of one channel, linearly mapped from [lo, hi].
inline std::string pgm_image(std::span<const float> values, std::size_t H, std::size_t W, double lo, double hi) {
    require(values.size() == H * W, "pgm_image: size mismatch");
    std::string out = "P5\n" + std::to_string(W) + " " + std::to_string(H) + "\n255\n";
    double span = hi > lo ? hi - lo : 1.0;
    for (float v : values) {
        double t = std::clamp((static_cast<double>(v) - lo) / span, 0.0, 1.0);
        out.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(255.0 * t))));
    }
    return out;
}

// ------------------------------------------------------------------- sweeps

/// Applies one sweep value to a copy of the sampler config.
inline SamplerConfig sweep_sampler(const SamplerConfig& base, const std::string& sweep, const std::string& value) {
    SamplerConfig s = base;
    try {
        if (sweep == "tau") {
            s.temperature = std::stod(value);
        } else if (sweep == "ic-noise") {
            s.ic_noise_std = std::stod(value);
        } else if (sweep == "iterations") {
            s.iterations_per_frame = static_cast<std::size_t>(std::stoul(value));
        } else if (sweep == "order") {
            s.order = unmask_order_from(value);
        } else if (sweep == "members") {
            s.members = static_cast<std::size_t>(std::stoul(value));
        } else {
            throw ConfigError("unknown sweep '" + sweep + "' (tau, ic-noise, iterations, order, members, loss, sequence-length)");
        }
    } catch (const std::logic_error&) {
        throw ConfigError("sweep " + sweep + ": invalid value '" + value + "'");
    }
    s.validate();
    return s;
}

inline bool sweep_retrains(const std::string& sweep) { return sweep == "loss" || sweep == "sequence-length"; }

/// Training config for a retraining sweep value.
inline TrainConfig sweep_train(const TrainConfig& base, const std::string& sweep, const std::string& value) {
    TrainConfig t = base;
    try {
        if (sweep == "loss") {
            t.variant = loss_variant_from(value);
        } else if (sweep == "sequence-length") {
            t.sequence_length = static_cast<std::size_t>(std::stoul(value));
        }
    } catch (const std::logic_error&) {
        throw ConfigError("sweep " + sweep + ": invalid value '" + value + "'");
    }
    t.validate();
    return t;
}

// --------------------------------------------------------------- run files

/// Order-stable digest of every regular file under `root` (path + content).
inline std::string tree_hash(const fs::path& root) {
    if (fs::is_regular_file(root)) return octf::file_hash(root);
    std::vector<std::string> entries;
    for (auto& e : fs::recursive_directory_iterator(root))
        if (e.is_regular_file()) {
            auto rel = fs::relative(e.path(), root).generic_string();
            if (rel == "run_manifest.json" || rel == "run_timing.json") continue;
            entries.push_back(rel + "\t" + octf::file_hash(e.path()));
        }
    std::sort(entries.begin(), entries.end());
    std::string all;
    for (auto& s : entries) all += s + "\n";
    return octf::content_hash(all);
}

/// Output directory staged next to the target and renamed into place.
class StagedDir {
public:
    explicit StagedDir(fs::path target) : target_(std::move(target)) {
        if (target_.empty()) throw ConfigError("--out must be given");
        target_ = fs::absolute(target_).lexically_normal();
        if (target_.filename().empty()) target_ = target_.parent_path();
        tmp_ = target_.parent_path() / ("." + target_.filename().string() + ".partial");
        fs::remove_all(tmp_);
        fs::create_directories(tmp_);
    }
    ~StagedDir() {
        if (!committed_) {
            std::error_code ec;
            fs::remove_all(tmp_, ec);
        }
    }
    StagedDir(const StagedDir&) = delete;
    StagedDir& operator=(const StagedDir&) = delete;

    const fs::path& path() const { return tmp_; }
    const fs::path& target() const { return target_; }

    void commit() {
        fs::path old = target_.parent_path() / ("." + target_.filename().string() + ".old");
        fs::remove_all(old);
        if (fs::exists(target_)) fs::rename(target_, old);
        fs::rename(tmp_, target_);
        fs::remove_all(old);
        committed_ = true;
    }

private:
    fs::path target_, tmp_;
    bool committed_ = false;
};

/// run_manifest.json (deterministic) and run_timing.json (wall time).
inline void write_run_files(const fs::path& dir, const std::string& subcommand, const json& config, const std::map<std::string, fs::path>& inputs,
                            double wall_seconds) {
    json m;
    m["subcommand"] = subcommand;
    m["seed"] = config.at("seed");
    m["config"] = config;
    json in = json::object();
    for (auto& [name, p] : inputs) in[name] = tree_hash(p);
    m["inputs"] = in;
    json outs = json::object();
    std::vector<std::string> files;
    for (auto& e : fs::recursive_directory_iterator(dir))
        if (e.is_regular_file()) files.push_back(fs::relative(e.path(), dir).generic_string());
    std::sort(files.begin(), files.end());
    for (auto& f : files) outs[f] = octf::file_hash(dir / f);
    m["outputs"] = outs;
    octf::write_bytes(dir / "run_manifest.json", m.dump(2) + "\n");
    octf::write_bytes(dir / "run_timing.json", json{{"subcommand", subcommand}, {"wall_seconds", wall_seconds}}.dump(2) + "\n");
}

}  // namespace omnicast::pipeline
