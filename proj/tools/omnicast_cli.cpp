// Copyright (C) 2026 omnicast contributors
// SPDX-License-Identifier: Apache-2.0

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <iostream>

#include "omnicast/pipeline.hpp"

using namespace omnicast;
using namespace omnicast::pipeline;

namespace {

enum Exit { kOk = 0, kConfig = 2, kInput = 3, kNumeric = 4 };

struct Common {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out;
    std::vector<std::string> sets;
};

struct Args {
    Common common;
    std::string data, vae, model, forecast;
    std::optional<std::size_t> members, iterations;
    std::string mode;
    std::optional<double> horizon_hours;
    bool images = false;
    std::string sweep;
    std::vector<std::string> values;
};

void add_common(CLI::App* sub, Common& c) {
    sub->add_option("--config", c.config, "JSON run configuration");
    sub->add_option("--seed", c.seed, "Root seed (overrides the config)");
    sub->add_option("--out", c.out, "Output directory")->required();
    sub->add_option("--set", c.sets, "Override key=value (repeatable)");
}

fs::path need_dir(const std::string& p, const char* flag) {
    if (p.empty()) throw ConfigError(std::string(flag) + " is required");
    if (!fs::exists(p)) throw IngestionFault(p, "does not exist");
    return p;
}

VaeBundle load_vae_dir(const fs::path& dir) {
    auto [vae, st] = load_vae<float>(dir / "vae");
    return {std::move(vae), st};
}

void apply_sampler_flags(RunConfig& c, const Args& a) {
    if (a.members) c.sampler.members = *a.members;
    if (a.iterations) c.sampler.iterations_per_frame = *a.iterations;
    if (!a.mode.empty()) c.mode = a.mode;
    c.sampler.validate();
}

double interval_of(const Dataset& d) { return d.manifest.frame_interval_hours; }

void check_layout(const ForecastModel<float>& m, const VaeBundle& v, const Dataset& d) {
    auto shape = v.vae.config().latent_shape(d.manifest.H, d.manifest.W);
    if (v.vae.config().in_channels != d.manifest.V) throw IngestionFault(d.dir.string(), "variable count differs from the VAE");
    if (shape[0] != m.layout.D || shape[1] != m.layout.h || shape[2] != m.layout.w)
        throw IngestionFault(d.dir.string(), "latent grid of the VAE does not match the model layout");
}

void write_forecasts(const fs::path& dir, const std::vector<EnsembleForecast>& fcs, const Dataset& d) {
    for (std::size_t k = 0; k < fcs.size(); ++k) {
        char name[32];
        std::snprintf(name, sizeof(name), "ic_%03zu", k);
        write_forecast(dir / name, denormalized(fcs[k], d.manifest.normalization));
    }
}

void progress(const EpochRecord& r) {
    std::cerr << "epoch " << r.epoch << " train " << r.train_total << " val " << r.val_total << " lr " << r.lr << "\n";
}

int run(const std::string& cmd, const Args& a) {
    auto t0 = std::chrono::steady_clock::now();
    json doc = resolve_config(a.common.config, a.common.sets, a.common.seed);
    RunConfig c = parse_config(doc);
    std::map<std::string, fs::path> inputs;
    if (!a.common.config.empty()) inputs["config"] = a.common.config;
    StagedDir out(a.common.out);
    const fs::path& dir = out.path();

    if (cmd == "gen-data") {
        auto m = gen_data(c, dir);
        std::cout << "wrote " << m.files.size() << " shards (" << c.synthetic.frames << " frames)\n";
    } else if (cmd == "train-vae") {
        auto d = load_dataset(need_dir(a.data, "--data"));
        inputs["data"] = d.dir;
        std::vector<EpochRecord> hist;
        auto v = fit_vae(c, d, &hist, progress);
        save_vae(dir / "vae", v.vae, v.stats);
        octf::write_bytes(dir / "history.csv", history_csv(hist, "recon", "kl"));
        double rmse = vae_reconstruction_rmse(v.vae, std::span<const data::FieldGrid>(d.val));
        octf::write_bytes(dir / "summary.json", json{{"val_recon_rmse", rmse}, {"latent_stats", v.stats}}.dump(2) + "\n");
        std::cout << "validation reconstruction RMSE " << rmse << "\n";
    } else if (cmd == "train-model") {
        auto d = load_dataset(need_dir(a.data, "--data"));
        auto v = load_vae_dir(need_dir(a.vae, "--vae"));
        inputs["data"] = d.dir;
        inputs["vae"] = a.vae;
        TrainResult r;
        auto model = fit_model(c, d, v, &r, progress);
        save_model(dir / "model", model);
        octf::write_bytes(dir / "history.csv", history_csv(r.history, "diffusion", "deterministic"));
        octf::write_bytes(dir / "summary.json", json{{"best_epoch", r.best_epoch}, {"best_val", r.best_val}}.dump(2) + "\n");
        std::cout << "best validation loss " << r.best_val << " at epoch " << r.best_epoch << "\n";
    } else if (cmd == "forecast" || cmd == "ablate") {
        apply_sampler_flags(c, a);
        if (a.horizon_hours) {
            c.mode = "autoregressive";
            c.horizon_frames = 0;
        }
        auto d = load_dataset(need_dir(a.data, "--data"));
        auto v = load_vae_dir(need_dir(a.vae, "--vae"));
        inputs["data"] = d.dir;
        inputs["vae"] = a.vae;
        auto horizon_for = [&](const SequenceLayout& L) {
            if (!a.horizon_hours) return horizon_frames(c, L);
            double q = *a.horizon_hours / interval_of(d);
            if (std::abs(q - std::round(q)) > 1e-9 || q < 1) throw ConfigError("--horizon-hours is not a positive multiple of the frame interval");
            auto h = static_cast<std::size_t>(std::llround(q));
            if (h % L.T) throw ContractViolation("horizon is not a multiple of T'*interval");
            return h;
        };
        if (cmd == "forecast") {
            auto model = load_model<float>(fs::path(need_dir(a.model, "--model")) / "model");
            inputs["model"] = a.model;
            check_layout(model, v, d);
            std::size_t h = horizon_for(model.layout);
            auto ics = ic_indices(c, d.test.size(), h);
            auto fcs = forecast_ensembles(model, v.vae, d.test, ics, h, interval_of(d), c.sampler);
            write_forecasts(dir / "forecasts", fcs, d);
            std::cout << "wrote " << fcs.size() << " ensembles of " << c.sampler.members << " members, " << h << " frames\n";
        } else {
            if (a.sweep.empty() || a.values.empty()) throw ConfigError("ablate needs --sweep and --values");
            std::string sweep_csv = "value,variable,lead_hours,metric,metric_value,ensemble_size\n";
            std::optional<ForecastModel<float>> base;
            std::size_t common_horizon = 0;
            if (sweep_retrains(a.sweep)) {
                for (auto& val : a.values) {
                    auto t = sweep_train(c.train, a.sweep, val);
                    common_horizon = std::max(common_horizon, t.sequence_length);
                }
                for (auto& val : a.values)
                    if (common_horizon % sweep_train(c.train, a.sweep, val).sequence_length)
                        throw ConfigError("sequence-length sweep: values must divide the largest value");
            } else {
                base.emplace(load_model<float>(fs::path(need_dir(a.model, "--model")) / "model"));
                inputs["model"] = a.model;
                check_layout(*base, v, d);
                common_horizon = horizon_for(base->layout);
            }
            for (auto& val : a.values) {
                SamplerConfig sc = c.sampler;
                std::optional<ForecastModel<float>> trained;
                if (sweep_retrains(a.sweep)) {
                    RunConfig rc = c;
                    rc.train = sweep_train(c.train, a.sweep, val);
                    trained.emplace(fit_model(rc, d, v, nullptr, progress));
                    save_model(dir / "models" / val / "model", *trained);
                } else {
                    sc = sweep_sampler(c.sampler, a.sweep, val);
                }
                const auto& model = trained ? *trained : *base;
                auto ics = ic_indices(c, d.test.size(), common_horizon);
                auto fcs = forecast_ensembles(model, v.vae, d.test, ics, common_horizon, interval_of(d), sc);
                std::vector<EnsembleForecast> phys;
                for (auto& f : fcs) phys.push_back(denormalized(f, d.manifest.normalization));
                std::vector<data::FieldGrid> truth_phys;
                for (auto& f : d.test) truth_phys.push_back(data::denormalize(f, d.manifest.normalization));
                auto rep = score(phys, truth_phys, ics, c.metric_names);
                octf::write_bytes(dir / "reports" / (a.sweep + "=" + val + ".csv"), rep.to_csv());
                for (auto& r : rep.rows()) {
                    char buf[64];
                    std::string v_str = "undefined";
                    if (r.value) {
                        std::snprintf(buf, sizeof(buf), "%.9g", *r.value);
                        v_str = buf;
                    }
                    sweep_csv += val + "," + r.variable + "," + std::to_string(r.lead_hours) + "," + r.metric + "," + v_str + "," +
                                 std::to_string(r.ensemble_size) + "\n";
                }
                std::cout << a.sweep << "=" << val << " done\n";
            }
            octf::write_bytes(dir / "sweep.csv", sweep_csv);
        }
    } else if (cmd == "evaluate") {
        auto d = load_dataset(need_dir(a.data, "--data"));
        fs::path fdir = need_dir(a.forecast, "--forecast");
        inputs["data"] = d.dir;
        inputs["forecast"] = fdir;
        if (fs::exists(fdir / "forecasts")) fdir /= "forecasts";
        std::vector<fs::path> ens_dirs;
        if (fs::exists(fdir / "forecast.json")) {
            ens_dirs.push_back(fdir);
        } else {
            for (auto& e : fs::directory_iterator(fdir))
                if (e.is_directory() && fs::exists(e.path() / "forecast.json")) ens_dirs.push_back(e.path());
            std::sort(ens_dirs.begin(), ens_dirs.end());
        }
        if (ens_dirs.empty()) throw IngestionFault(fdir.string(), "no forecast.json found");
        // Truth in physical units, indexed by timestamp.
        std::map<std::int64_t, data::FieldGrid> truth_at;
        for (auto* split : {&d.train, &d.val, &d.test})
            for (auto& f : *split) truth_at[f.timestamp_hours] = data::denormalize(f, d.manifest.normalization);
        std::vector<metrics::MetricsReport> reps;
        bool images = a.images || c.images;
        for (std::size_t k = 0; k < ens_dirs.size(); ++k) {
            auto fc = read_forecast(ens_dirs[k]);
            std::vector<data::FieldGrid> truth;
            for (auto lead : fc.lead_hours) {
                auto it = truth_at.find(fc.init_hours + lead);
                if (it == truth_at.end())
                    throw IngestionFault(ens_dirs[k].string(), "no truth frame at hour " + std::to_string(fc.init_hours + lead));
                truth.push_back(it->second);
            }
            auto rep = metrics::evaluate_ensemble(fc.members, truth, fc.lead_hours, c.metric_names);
            octf::write_bytes(dir / "per_ic" / (ens_dirs[k].filename().string() + ".csv"), rep.to_csv());
            reps.push_back(std::move(rep));
            if (images && k == 0) {
                const auto& y0 = truth.front();
                for (std::size_t v = 0; v < y0.V; ++v) {
                    auto ch = y0.channel(v);
                    auto [lo, hi] = std::minmax_element(ch.begin(), ch.end());
                    for (std::size_t t = 0; t < truth.size(); ++t) {
                        std::string tag = y0.variables[v] + "_lead" + std::to_string(fc.lead_hours[t]);
                        octf::write_bytes(dir / "images" / ("truth_" + tag + ".pgm"), pgm_image(truth[t].channel(v), y0.H, y0.W, *lo, *hi));
                        octf::write_bytes(dir / "images" / ("member0_" + tag + ".pgm"),
                                          pgm_image(fc.members[0][t].channel(v), y0.H, y0.W, *lo, *hi));
                    }
                }
            }
        }
        auto mean = metrics::MetricsReport::mean_of(reps);
        octf::write_bytes(dir / "metrics.csv", mean.to_csv());
        const auto& vars = d.manifest.variables;
        for (auto& m : c.metric_names) octf::write_bytes(dir / "curves" / (m + ".csv"), metric_curve_csv(mean, m, vars));
        octf::write_bytes(dir / "summary.json", json{{"initial_conditions", ens_dirs.size()}, {"weighting", mean.weighting}}.dump(2) + "\n");
        std::cout << "scored " << ens_dirs.size() << " forecasts\n";
    }
    double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    write_run_files(dir, cmd, doc, inputs, wall);
    out.commit();
    std::cout << "output: " << out.target().string() << "\n";
    return kOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"omnicast: masked latent diffusion weather forecasting on gridded fields"};
    app.require_subcommand(1);
    Args a;
    std::map<std::string, CLI::App*> subs;
    subs["gen-data"] = app.add_subcommand("gen-data", "Generate the synthetic dataset");
    subs["train-vae"] = app.add_subcommand("train-vae", "Fit the VAE");
    subs["train-model"] = app.add_subcommand("train-model", "Train backbone and heads on VAE latents");
    subs["forecast"] = app.add_subcommand("forecast", "Ensemble forecasts from test-split initial conditions");
    subs["evaluate"] = app.add_subcommand("evaluate", "Score forecasts against the dataset");
    subs["ablate"] = app.add_subcommand("ablate", "Sampler or training sweeps with metric reports");
    for (auto& [name, sub] : subs) add_common(sub, a.common);
    for (auto* s : {subs["train-vae"], subs["train-model"], subs["forecast"], subs["evaluate"], subs["ablate"]})
        s->add_option("--data", a.data, "Dataset directory");
    for (auto* s : {subs["train-model"], subs["forecast"], subs["ablate"]}) s->add_option("--vae", a.vae, "train-vae output directory");
    for (auto* s : {subs["forecast"], subs["ablate"]}) {
        s->add_option("--model", a.model, "train-model output directory");
        s->add_option("--members", a.members, "Ensemble size");
        s->add_option("--iterations-per-frame", a.iterations, "Unmasking iterations per frame");
        s->add_option("--mode", a.mode, "joint or autoregressive")->check(CLI::IsMember({"joint", "autoregressive"}));
        s->add_option("--horizon-hours", a.horizon_hours, "Autoregressive rollout horizon");
    }
    subs["evaluate"]->add_option("--forecast", a.forecast, "forecast output directory");
    subs["evaluate"]->add_flag("--images", a.images, "Write PGM heatmaps for the first initial condition");
    subs["ablate"]->add_option("--sweep", a.sweep, "tau | ic-noise | iterations | order | members | loss | sequence-length");
    subs["ablate"]->add_option("--values", a.values, "Comma-separated sweep values")->delimiter(',');

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int rc = app.exit(e);
        return rc == 0 ? kOk : kConfig;
    }
    std::string cmd;
    for (auto& [name, sub] : subs)
        if (sub->parsed()) cmd = name;
    try {
        return run(cmd, a);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kConfig;
    } catch (const NumericFault& e) {
        std::cerr << "numeric fault: " << e.what() << "\n";
        return kNumeric;
    } catch (const IngestionFault& e) {
        std::cerr << "input error: " << e.what() << "\n";
        return kInput;
    } catch (const ContractViolation& e) {
        std::cerr << "input error: " << e.what() << "\n";
        return kInput;
    } catch (const std::filesystem::filesystem_error& e) {
        std::cerr << "input error: " << e.what() << "\n";
        return kInput;
    }
}
