// Copyright (C) 2026 omnicast contributors
// SPDX-License-Identifier: Apache-2.0

// Iterative parallel decoding: unmasking schedule, position orders, ensemble
// generation from an initial condition, and autoregressive rollout.

#pragma once

#include <nlohmann/json.hpp>

#include <cmath>
#include <filesystem>
#include <numbers>
#include <string>
#include <vector>

#include "omnicast/training.hpp"

namespace omnicast {

enum class UnmaskOrder { random, random_framewise, autoregressive_framewise };

inline std::string to_string(UnmaskOrder o) {
    switch (o) {
        case UnmaskOrder::random_framewise: return "random-framewise";
        case UnmaskOrder::autoregressive_framewise: return "autoregressive-framewise";
        default: return "random";
    }
}
inline UnmaskOrder unmask_order_from(const std::string& s) {
    if (s == "random") return UnmaskOrder::random;
    if (s == "random-framewise") return UnmaskOrder::random_framewise;
    if (s == "autoregressive-framewise") return UnmaskOrder::autoregressive_framewise;
    throw ConfigError("unknown unmask order '" + s + "'");
}

struct SamplerConfig {
    std::size_t iterations_per_frame = 1;  // K = iterations_per_frame * T
    UnmaskOrder order = UnmaskOrder::random;
    double temperature = 1.3;
    std::size_t diffusion_steps = 100;
    std::size_t members = 50;
    double ic_noise_std = 0.0;
    std::uint64_t seed = 0;

    void validate() const {
        if (iterations_per_frame < 1) throw ConfigError("sampler: iterations_per_frame must be >= 1");
        if (temperature < 0) throw ConfigError("sampler: temperature must be >= 0");
        if (members < 1) throw ConfigError("sampler: members must be >= 1");
        if (diffusion_steps < 1) throw ConfigError("sampler: diffusion_steps must be >= 1");
        if (ic_noise_std < 0) throw ConfigError("sampler: ic_noise_std must be >= 0");
    }
};

inline void to_json(nlohmann::json& j, const SamplerConfig& c) {
    j = {{"iterations_per_frame", c.iterations_per_frame}, {"order", to_string(c.order)}, {"temperature", c.temperature},
         {"diffusion_steps", c.diffusion_steps},           {"members", c.members},        {"ic_noise_std", c.ic_noise_std}};
}
inline void from_json(const nlohmann::json& j, SamplerConfig& c) {
    c.iterations_per_frame = j.at("iterations_per_frame");
    c.order = unmask_order_from(j.at("order"));
    c.temperature = j.at("temperature");
    c.diffusion_steps = j.at("diffusion_steps");
    c.members = j.at("members");
    c.ic_noise_std = j.at("ic_noise_std");
}

/// Tokens still masked after iteration t is round(N cos(pi t / 2K)); counts
/// are successive differences, with zero counts repaired by taking one token
/// from the largest step.
inline std::vector<std::size_t> unmask_counts(std::size_t N, std::size_t K) {
    require(K >= 1 && K <= N, "unmask_counts: need 1 <= K <= N");
    std::vector<std::size_t> remaining(K + 1);
    for (std::size_t t = 0; t <= K; ++t)
        remaining[t] = static_cast<std::size_t>(std::llround(static_cast<double>(N) *
                                                             std::cos(std::numbers::pi * static_cast<double>(t) / (2.0 * static_cast<double>(K)))));
    remaining[K] = 0;
    std::vector<std::size_t> counts(K);
    for (std::size_t t = 0; t < K; ++t) counts[t] = remaining[t] - remaining[t + 1];
    for (std::size_t t = 0; t < K; ++t)
        if (counts[t] == 0) {
            auto big = std::max_element(counts.begin(), counts.end());
            --*big;
            counts[t] = 1;
        }
    return counts;
}

/// Remaining-masked table round(N cos(pi t / 2K)) for t = 1..K.
inline std::vector<std::size_t> remaining_after(std::size_t N, std::size_t K) {
    auto counts = unmask_counts(N, K);
    std::vector<std::size_t> out;
    std::size_t left = N;
    for (auto c : counts) out.push_back(left -= c);
    return out;
}

/// Chooses `count` positions among `masked` (future-token indices).
/// Framewise orders return whole frames: max(1, round(count / hw)) of them.
inline std::vector<std::size_t> pick_positions(const std::vector<std::size_t>& masked, const SequenceLayout& L, UnmaskOrder order,
                                               std::size_t count, RngStream& rng) {
    require(count <= masked.size(), "pick_positions: count exceeds masked set");
    if (order == UnmaskOrder::random) {
        std::vector<std::size_t> pool = masked;
        rng.partial_shuffle(pool, count);
        pool.resize(count);
        std::sort(pool.begin(), pool.end());
        return pool;
    }
    std::vector<std::size_t> frames;
    for (auto i : masked) {
        std::size_t f = L.lead_frame(i);
        if (frames.empty() || frames.back() != f) frames.push_back(f);
    }
    std::size_t nf = std::clamp<std::size_t>(
        static_cast<std::size_t>(std::llround(static_cast<double>(count) / static_cast<double>(L.hw()))), 1, frames.size());
    if (count == masked.size()) nf = frames.size();
    if (order == UnmaskOrder::random_framewise) {
        rng.partial_shuffle(frames, nf);
        frames.resize(nf);
    } else {
        frames.resize(nf);
    }
    std::vector<std::uint8_t> take(L.T, 0);
    for (auto f : frames) take[f] = 1;
    std::vector<std::size_t> out;
    for (auto i : masked)
        if (take[L.lead_frame(i)]) out.push_back(i);
    return out;
}

/// Frame order produced by framewise decoding, for inspection and tests.
inline std::vector<std::size_t> frames_of(const std::vector<std::size_t>& positions, const SequenceLayout& L) {
    std::vector<std::size_t> out;
    for (auto i : positions) {
        std::size_t f = L.lead_frame(i);
        if (out.empty() || out.back() != f) out.push_back(f);
    }
    return out;
}

struct EnsembleForecast {
    std::vector<std::vector<data::FieldGrid>> members;  // M x T frames
    std::vector<std::uint64_t> member_seeds;
    SamplerConfig config;
    std::vector<std::int64_t> lead_hours;
    std::int64_t init_hours = 0;
    std::vector<std::size_t> iteration_counts;  // tokens revealed per iteration (member 0)
};

/// Samples future tokens (standardized) for each member given its
/// conditioning tokens. Every future token is sampled exactly once; tokens
/// revealed earlier stay fixed and visible to later iterations.
template <class T>
std::vector<std::vector<float>> decode_tokens(const ForecastModel<T>& model, const std::vector<std::vector<float>>& cond,
                                              const SamplerConfig& cfg, std::vector<RngStream>& member_streams,
                                              std::vector<std::size_t>* iteration_counts = nullptr) {
    NoGradGuard ng;
    const auto& L = model.layout;
    std::size_t M = cond.size(), N = L.future_count(), D = L.D, C = model.backbone.config().width;
    require(member_streams.size() == M, "decode_tokens: one stream per member");
    std::size_t K = std::min(N, cfg.iterations_per_frame * L.T);
    auto counts = unmask_counts(N, K);
    std::vector<std::vector<float>> future(M, std::vector<float>(N * D, 0.0f));
    std::vector<std::vector<std::uint8_t>> masked(M, std::vector<std::uint8_t>(N, 1));
    if (iteration_counts) iteration_counts->clear();
    RngStream no_dropout(0);
    auto sampling = model.head.schedule().respaced(cfg.diffusion_steps);
    for (std::size_t t = 0; t < K; ++t) {
        std::vector<TokenSequence<T>> seqs(M);
        for (std::size_t m = 0; m < M; ++m) {
            seqs[m].layout = L;
            seqs[m].cond.assign(cond[m].begin(), cond[m].end());
            seqs[m].future.assign(future[m].begin(), future[m].end());
            seqs[m].mask = masked[m];
        }
        auto z = reshape(model.backbone.forward(make_batch(seqs), no_dropout, false), {M * N, C});
        std::vector<std::size_t> rows;
        std::vector<RngStream> streams;
        std::vector<std::pair<std::size_t, std::size_t>> dest;
        for (std::size_t m = 0; m < M; ++m) {
            std::vector<std::size_t> still;
            for (std::size_t i = 0; i < N; ++i)
                if (masked[m][i]) still.push_back(i);
            if (still.empty()) continue;
            std::size_t want = t + 1 >= K ? still.size() : std::min(counts[t], still.size());
            RngStream pr = member_streams[m].child("pick", t);
            auto pos = pick_positions(still, L, cfg.order, want, pr);
            if (m == 0 && iteration_counts) iteration_counts->push_back(pos.size());
            for (auto i : pos) {
                rows.push_back(m * N + i);
                streams.push_back(member_streams[m].child("token", i));
                dest.emplace_back(m, i);
            }
        }
        if (rows.empty()) break;
        auto x = sample_tokens(model.head, index_rows(z, rows), cfg.temperature, streams, sampling);
        for (std::size_t r = 0; r < dest.size(); ++r) {
            auto [m, i] = dest[r];
            for (std::size_t d = 0; d < D; ++d) future[m][i * D + d] = static_cast<float>(x[r * D + d]);
            masked[m][i] = 0;
        }
    }
    return future;
}

/// Standardized token rows (hw, D) for normalized frames.
template <class T>
std::vector<std::vector<float>> encode_tokens(const Vae<T>& vae, const std::vector<data::FieldGrid>& frames, const LatentStats& st) {
    auto series = encode_series(vae, frames);
    standardize(series, st);
    return series.tokens;
}

/// Standardized token rows -> normalized frames (batched decode).
template <class T>
std::vector<data::FieldGrid> decode_frames(const Vae<T>& vae, const std::vector<std::vector<float>>& tokens, std::size_t h, std::size_t w,
                                           const LatentStats& st, const data::FieldGrid& like) {
    NoGradGuard ng;
    std::size_t D = vae.config().latent_dim, per = D * h * w;
    std::vector<data::FieldGrid> out(tokens.size());
    const std::size_t batch = 32;
    std::size_t nb = (tokens.size() + batch - 1) / batch;
    parallel_for(nb, [&](std::size_t b) {
        std::size_t s = b * batch, n = std::min(batch, tokens.size() - s);
        std::vector<T> buf;
        buf.reserve(n * per);
        for (std::size_t k = 0; k < n; ++k) {
            std::vector<float> raw(per);
            for (std::size_t i = 0; i < per; ++i) raw[i] = static_cast<float>(tokens[s + k][i] * st.std + st.mean);
            auto lat = tokens_to_latent<float>(raw, D, h, w);
            buf.insert(buf.end(), lat.begin(), lat.end());
        }
        auto frames = tensor_to_frames(vae.decode(Tensor<T>({n, D, h, w}, std::move(buf))), like);
        for (std::size_t k = 0; k < n; ++k) out[s + k] = std::move(frames[k]);
    });
    return out;
}

/// Replaces `frame` with frame + N(0, std^2) noise (normalized space).
inline data::FieldGrid perturb(const data::FieldGrid& frame, double std, RngStream& rng) {
    data::FieldGrid out = frame;
    if (std <= 0) return out;
    for (auto& v : out.values) v = static_cast<float>(v + std * rng.normal());
    return out;
}

/// Ensemble of joint forecasts from one normalized initial condition.
/// `recursions` > 1 chains generations, re-encoding each member's last
/// predicted frame as the next initial condition.
template <class T>
EnsembleForecast rollout_frames(const ForecastModel<T>& model, const Vae<T>& vae, const data::FieldGrid& ic, std::size_t recursions,
                                double interval_hours, SamplerConfig cfg) {
    cfg.validate();
    require(recursions >= 1, "rollout: need at least one recursion");
    const auto& L = model.layout;
    std::size_t M = cfg.members;
    EnsembleForecast fc;
    fc.config = cfg;
    fc.init_hours = ic.timestamp_hours;
    fc.members.assign(M, {});
    RootRng root(cfg.seed);
    std::vector<RngStream> base;
    for (std::size_t m = 0; m < M; ++m) {
        base.push_back(root.stream("member", m));
        fc.member_seeds.push_back(base.back().seed());
    }
    std::vector<data::FieldGrid> starts(M);
    for (std::size_t m = 0; m < M; ++m) {
        RngStream r = base[m].child("ic");
        starts[m] = perturb(ic, cfg.ic_noise_std, r);
    }
    for (std::size_t r = 0; r < recursions; ++r) {
        auto cond = encode_tokens(vae, starts, model.latent_stats);
        std::vector<RngStream> streams;
        for (std::size_t m = 0; m < M; ++m) streams.push_back(r == 0 ? base[m] : base[m].child("recursion", r));
        auto future = decode_tokens(model, cond, cfg, streams, r == 0 ? &fc.iteration_counts : nullptr);
        std::vector<std::vector<float>> per_frame;
        for (std::size_t m = 0; m < M; ++m)
            for (std::size_t k = 0; k < L.T; ++k)
                per_frame.emplace_back(future[m].begin() + static_cast<long>(k * L.hw() * L.D),
                                       future[m].begin() + static_cast<long>((k + 1) * L.hw() * L.D));
        auto frames = decode_frames(vae, per_frame, L.h, L.w, model.latent_stats, ic);
        for (std::size_t m = 0; m < M; ++m) {
            for (std::size_t k = 0; k < L.T; ++k) {
                auto& f = frames[m * L.T + k];
                std::size_t lead = r * L.T + k + 1;
                f.timestamp_hours = ic.timestamp_hours + static_cast<std::int64_t>(std::llround(static_cast<double>(lead) * interval_hours));
                for (float v : f.values)
                    if (!std::isfinite(v)) throw NumericFault("rollout", "non-finite forecast value");
                fc.members[m].push_back(f);
            }
            starts[m] = fc.members[m].back();
        }
    }
    for (std::size_t k = 1; k <= recursions * L.T; ++k)
        fc.lead_hours.push_back(static_cast<std::int64_t>(std::llround(static_cast<double>(k) * interval_hours)));
    return fc;
}

template <class T>
EnsembleForecast generate(const ForecastModel<T>& model, const Vae<T>& vae, const data::FieldGrid& ic, double interval_hours,
                          const SamplerConfig& cfg) {
    return rollout_frames(model, vae, ic, 1, interval_hours, cfg);
}

/// Rollout to `horizon_hours`, which must be a multiple of T' * interval.
template <class T>
EnsembleForecast rollout_autoregressive(const ForecastModel<T>& model, const Vae<T>& vae, const data::FieldGrid& ic, double horizon_hours,
                                        double interval_hours, const SamplerConfig& cfg) {
    double block = static_cast<double>(model.layout.T) * interval_hours;
    double q = horizon_hours / block;
    require(horizon_hours > 0 && std::abs(q - std::round(q)) < 1e-9,
            "rollout: horizon " + std::to_string(horizon_hours) + " h is not a multiple of T'*interval = " + std::to_string(block) + " h");
    return rollout_frames(model, vae, ic, static_cast<std::size_t>(std::llround(q)), interval_hours, cfg);
}

// ------------------------------------------------------------- persistence

template <class T>
nlohmann::json model_config_json(const ForecastModel<T>& m) {
    return {{"layout", {{"T", m.layout.T}, {"h", m.layout.h}, {"w", m.layout.w}, {"D", m.layout.D}}},
            {"backbone", m.backbone.config()},
            {"head", m.head.config()},
            {"latent_stats", m.latent_stats}};
}

template <class T>
void save_model(const std::filesystem::path& stem, const ForecastModel<T>& m, nlohmann::json extra = {}) {
    auto cfg = model_config_json(m);
    if (!extra.is_null()) cfg["extra"] = extra;
    nn::save_checkpoint(stem, m.parameters(), cfg);
}

template <class T>
ForecastModel<T> load_model(const std::filesystem::path& stem) {
    auto cfg = nn::read_checkpoint_config(stem);
    try {
        auto& l = cfg.at("layout");
        SequenceLayout L{l.at("T"), l.at("h"), l.at("w"), l.at("D")};
        ForecastModel<T> m(L, cfg.at("backbone").get<BackboneConfig>(), cfg.at("head").get<DiffusionHeadConfig>(), 0);
        m.latent_stats = cfg.at("latent_stats").get<LatentStats>();
        auto params = m.parameters();
        nn::load_checkpoint(stem, params);
        return m;
    } catch (const nlohmann::json::exception& e) {
        throw IngestionFault(stem.string() + ".json", std::string("malformed model config: ") + e.what());
    }
}

template <class T>
void save_vae(const std::filesystem::path& stem, const Vae<T>& vae, const LatentStats& st, nlohmann::json extra = {}) {
    nlohmann::json cfg = {{"vae", vae.config()}, {"latent_stats", st}};
    if (!extra.is_null()) cfg["extra"] = extra;
    nn::save_checkpoint(stem, vae.parameters(), cfg);
}

template <class T>
std::pair<Vae<T>, LatentStats> load_vae(const std::filesystem::path& stem) {
    auto cfg = nn::read_checkpoint_config(stem);
    try {
        Vae<T> vae(cfg.at("vae").get<VaeConfig>());
        auto params = vae.parameters();
        nn::load_checkpoint(stem, params);
        return {std::move(vae), cfg.at("latent_stats").get<LatentStats>()};
    } catch (const nlohmann::json::exception& e) {
        throw IngestionFault(stem.string() + ".json", std::string("malformed VAE config: ") + e.what());
    }
}

/// members/member_XXX.octf (T, V, H, W) + forecast.json.
inline void write_forecast(const std::filesystem::path& dir, const EnsembleForecast& fc, const nlohmann::json& extra = {}) {
    std::filesystem::create_directories(dir / "members");
    nlohmann::json j;
    j["init_hours"] = fc.init_hours;
    j["lead_hours"] = fc.lead_hours;
    j["sampler"] = fc.config;
    j["seeds"] = fc.member_seeds;
    j["iteration_counts"] = fc.iteration_counts;
    auto files = nlohmann::json::array();
    for (std::size_t m = 0; m < fc.members.size(); ++m) {
        const auto& frames = fc.members[m];
        require(!frames.empty(), "write_forecast: empty member");
        std::vector<float> buf;
        for (auto& f : frames) buf.insert(buf.end(), f.values.begin(), f.values.end());
        char name[64];
        std::snprintf(name, sizeof(name), "members/member_%03zu.octf", m);
        octf::write<float>(dir / name, Shape{frames.size(), frames[0].V, frames[0].H, frames[0].W}, buf);
        files.push_back(name);
    }
    j["files"] = files;
    j["variables"] = fc.members.at(0).at(0).variables;
    j["grid"] = data::to_string(fc.members[0][0].grid);
    if (!extra.is_null()) j["extra"] = extra;
    octf::write_bytes(dir / "forecast.json", j.dump(2) + "\n");
}

inline EnsembleForecast read_forecast(const std::filesystem::path& dir) {
    auto j = nn::read_json(dir / "forecast.json");
    EnsembleForecast fc;
    try {
        fc.init_hours = j.at("init_hours");
        fc.lead_hours = j.at("lead_hours").get<std::vector<std::int64_t>>();
        fc.config = j.at("sampler").get<SamplerConfig>();
        fc.member_seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
        auto vars = j.at("variables").get<std::vector<std::string>>();
        auto grid = data::grid_kind_from(j.at("grid"));
        for (auto& f : j.at("files")) {
            auto path = dir / f.get<std::string>();
            auto dec = octf::read<float>(path);
            if (dec.shape.size() != 4 || dec.shape[0] != fc.lead_hours.size() || dec.shape[1] != vars.size())
                throw IngestionFault(path.string(), "member shape " + shape_str(dec.shape) + " does not match forecast.json");
            std::vector<data::FieldGrid> frames;
            std::size_t n = dec.shape[1] * dec.shape[2] * dec.shape[3];
            for (std::size_t k = 0; k < dec.shape[0]; ++k) {
                data::FieldGrid g(dec.shape[1], dec.shape[2], dec.shape[3], vars, grid);
                std::copy_n(dec.values.data() + k * n, n, g.values.data());
                g.timestamp_hours = fc.init_hours + fc.lead_hours[k];
                frames.push_back(std::move(g));
            }
            fc.members.push_back(std::move(frames));
        }
    } catch (const nlohmann::json::exception& e) {
        throw IngestionFault((dir / "forecast.json").string(), e.what());
    }
    return fc;
}

}  // namespace omnicast
