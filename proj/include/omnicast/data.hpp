// Copyright (C) 2026 omnicast contributors
// SPDX-License-Identifier: Apache-2.0

// Gridded multi-channel fields, the synthetic geophysical generator, dataset
// manifests, normalization statistics and time-based splits.

#pragma once

#include <fftw3.h>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdint>
#include <filesystem>
#include <iostream>
#include <numbers>
#include <string>
#include <vector>

#include "omnicast/error.hpp"
#include "omnicast/fft.hpp"
#include "omnicast/octf.hpp"
#include "omnicast/rng.hpp"

namespace omnicast::data {

enum class GridKind { periodic, lat_lon };

inline std::string to_string(GridKind g) { return g == GridKind::periodic ? "periodic" : "lat-lon"; }
inline GridKind grid_kind_from(const std::string& s) {
    if (s == "periodic") return GridKind::periodic;
    if (s == "lat-lon" || s == "lat_lon") return GridKind::lat_lon;
    throw ConfigError("unknown grid kind '" + s + "'");
}

/// One time-stamped V x H x W state.
struct FieldGrid {
    std::size_t V = 0, H = 0, W = 0;
    std::vector<float> values;
    std::int64_t timestamp_hours = 0;
    std::vector<std::string> variables;
    GridKind grid = GridKind::periodic;

    FieldGrid() = default;
    FieldGrid(std::size_t v, std::size_t h, std::size_t w, std::vector<std::string> names, GridKind g = GridKind::periodic)
        : V(v), H(h), W(w), values(v * h * w, 0.0f), variables(std::move(names)), grid(g) {}

    std::size_t plane() const { return H * W; }
    float& at(std::size_t v, std::size_t i, std::size_t j) { return values[(v * H + i) * W + j]; }
    float at(std::size_t v, std::size_t i, std::size_t j) const { return values[(v * H + i) * W + j]; }
    std::span<const float> channel(std::size_t v) const { return std::span<const float>(values).subspan(v * plane(), plane()); }

    void validate() const {
        require(variables.size() == V, "FieldGrid: variable-name count differs from V");
        require(values.size() == V * H * W, "FieldGrid: value count differs from V*H*W");
        for (float x : values)
            if (!std::isfinite(x)) throw NumericFault("FieldGrid", "non-finite value");
    }
};

inline std::vector<std::string> default_variable_names(std::size_t V) {
    std::vector<std::string> names;
    for (std::size_t v = 0; v < V; ++v) names.push_back("var" + std::to_string(v));
    return names;
}

// ------------------------------------------------------------------ synthetic

/// Doubly periodic advection-diffusion system: uniform rotating mean flow,
/// implicit diffusion + linear damping, cross-channel coupling, and a
/// seasonally modulated (deterministic pattern + stochastic) forcing at low
/// wavenumbers. Lengths in grid cells, time in frames.
struct SyntheticConfig {
    std::size_t height = 32;
    std::size_t width = 64;
    std::size_t channels = 4;
    std::uint64_t seed = 0;
    std::size_t frames = 7200;
    std::size_t spinup_frames = 120;
    double frame_interval_hours = 24.0;
    std::size_t substeps = 4;
    double diffusivity = 0.15;
    double damping = 0.04;
    double mean_flow_speed = 0.25;
    double mean_flow_angle = 0.6;
    double rotating_flow_speed = 0.1;
    double flow_period_frames = 360.0;
    double noise_amplitude = 0.35;
    std::size_t forcing_wavenumber = 3;
    double pattern_amplitude = 0.03;
    double seasonal_amplitude = 0.3;
    double seasonal_period_frames = 360.0;
    double coupling = 0.05;

    double dt() const { return 1.0 / static_cast<double>(substeps); }
    double max_flow_speed() const { return std::abs(mean_flow_speed) + std::abs(rotating_flow_speed); }

    /// Rejects configurations whose explicit advection/coupling step could
    /// amplify any resolved mode, plus the classic CFL bound |u| dt <= 1 cell.
    void validate() const {
        if (height < 2 || width < 2) throw ConfigError("synthetic: grid must be at least 2x2");
        if (channels < 2) throw ConfigError("synthetic: need at least 2 channels");
        if (substeps < 1) throw ConfigError("synthetic: substeps must be >= 1");
        if (diffusivity < 0 || damping < 0 || noise_amplitude < 0) throw ConfigError("synthetic: negative coefficient");
        double cfl = max_flow_speed() * dt();
        if (cfl > 1.0) throw ConfigError("synthetic: CFL number " + std::to_string(cfl) + " exceeds 1");
        for (std::size_t a = 0; a < height; ++a)
            for (std::size_t b = 0; b < width; ++b) {
                double ky = 2 * std::numbers::pi * static_cast<double>(fft_freq(a, height)) / static_cast<double>(height);
                double kx = 2 * std::numbers::pi * static_cast<double>(fft_freq(b, width)) / static_cast<double>(width);
                // Advection and the antisymmetric ring coupling both have purely
                // imaginary spectra, so forward Euler amplifies by |1 + i theta|.
                double theta = dt() * (max_flow_speed() * std::hypot(kx, ky) + 2.0 * std::abs(coupling));
                double amp = std::hypot(1.0, theta);
                double denom = 1.0 + dt() * (diffusivity * (kx * kx + ky * ky) + damping);
                if (amp > denom + 1e-12)
                    throw ConfigError("synthetic: unstable time step (CFL violated) at wavenumber (" + std::to_string(fft_freq(a, height)) +
                                      "," + std::to_string(fft_freq(b, width)) + ")");
            }
    }
};

/// Stateful spectral integrator; the state lives in r2c Fourier space.
class SyntheticIntegrator {
public:
    using cplx = std::complex<double>;

    explicit SyntheticIntegrator(SyntheticConfig cfg) : cfg_(std::move(cfg)), rng_(RootRng(cfg_.seed).stream("synthetic")) {
        cfg_.validate();
        Hc_ = cfg_.width / 2 + 1;
        spec_.assign(cfg_.channels, std::vector<cplx>(cfg_.height * Hc_, cplx(0, 0)));
        pattern_.assign(cfg_.channels, std::vector<cplx>(cfg_.height * Hc_, cplx(0, 0)));
        RngStream prng = RootRng(cfg_.seed).stream("synthetic-pattern");
        for (std::size_t v = 0; v < cfg_.channels; ++v)
            for_forced_modes([&](std::size_t idx, double kmag) {
                double a = cfg_.pattern_amplitude / std::max(1.0, kmag);
                pattern_[v][idx] = cplx(prng.normal() * a, prng.normal() * a) * static_cast<double>(cfg_.height * cfg_.width);
            });
        grid_buf_.resize(cfg_.height * cfg_.width);
        spec_buf_.resize(cfg_.height * Hc_);
        std::lock_guard lock(detail::fftw_planner_mutex());
        fwd_ = fftw_plan_dft_r2c_2d(static_cast<int>(cfg_.height), static_cast<int>(cfg_.width), grid_buf_.data(),
                                    reinterpret_cast<fftw_complex*>(spec_buf_.data()), FFTW_ESTIMATE);
        inv_ = fftw_plan_dft_c2r_2d(static_cast<int>(cfg_.height), static_cast<int>(cfg_.width),
                                    reinterpret_cast<fftw_complex*>(spec_buf_.data()), grid_buf_.data(), FFTW_ESTIMATE);
    }
    ~SyntheticIntegrator() {
        std::lock_guard lock(detail::fftw_planner_mutex());
        fftw_destroy_plan(fwd_);
        fftw_destroy_plan(inv_);
    }
    SyntheticIntegrator(const SyntheticIntegrator&) = delete;
    SyntheticIntegrator& operator=(const SyntheticIntegrator&) = delete;

    const SyntheticConfig& config() const { return cfg_; }
    double time_frames() const { return time_; }

    /// Overwrites the state with a physical-space field (V x H x W).
    void set_state(std::span<const double> values) {
        require(values.size() == cfg_.channels * cfg_.height * cfg_.width, "set_state: size mismatch");
        for (std::size_t v = 0; v < cfg_.channels; ++v) {
            std::copy_n(values.data() + v * cfg_.height * cfg_.width, cfg_.height * cfg_.width, grid_buf_.data());
            fftw_execute(fwd_);
            spec_[v] = spec_buf_;
        }
    }

    std::vector<double> state() {
        std::vector<double> out(cfg_.channels * cfg_.height * cfg_.width);
        double norm = 1.0 / static_cast<double>(cfg_.height * cfg_.width);
        for (std::size_t v = 0; v < cfg_.channels; ++v) {
            spec_buf_ = spec_[v];
            fftw_execute(inv_);
            for (std::size_t i = 0; i < grid_buf_.size(); ++i) out[v * grid_buf_.size() + i] = grid_buf_[i] * norm;
        }
        return out;
    }

    /// Advances one frame (cfg.substeps semi-implicit steps).
    void advance_frame() {
        for (std::size_t s = 0; s < cfg_.substeps; ++s) substep();
    }

private:
    template <class Fn>
    void for_forced_modes(Fn&& fn) const {
        long kf = static_cast<long>(cfg_.forcing_wavenumber);
        for (std::size_t a = 0; a < cfg_.height; ++a)
            for (std::size_t b = 0; b < Hc_; ++b) {
                long ny = fft_freq(a, cfg_.height), nx = static_cast<long>(b);
                double kmag = std::hypot(static_cast<double>(nx), static_cast<double>(ny));
                if (kmag == 0 || kmag > static_cast<double>(kf)) continue;
                // Hermitian half: on the kx == 0 column keep only ny > 0.
                if (nx == 0 && ny <= 0) continue;
                if (2 * nx == static_cast<long>(cfg_.width)) continue;
                fn(a * Hc_ + b, kmag);
            }
    }

    void substep() {
        const double dt = cfg_.dt();
        const double two_pi = 2 * std::numbers::pi;
        double phase = two_pi * time_ / cfg_.flow_period_frames;
        double ux = cfg_.mean_flow_speed * std::cos(cfg_.mean_flow_angle) + cfg_.rotating_flow_speed * std::cos(phase);
        double uy = cfg_.mean_flow_speed * std::sin(cfg_.mean_flow_angle) + cfg_.rotating_flow_speed * std::sin(phase);
        double season = 1.0 + cfg_.seasonal_amplitude * std::sin(two_pi * time_ / cfg_.seasonal_period_frames);
        double scale_hw = static_cast<double>(cfg_.height * cfg_.width);

        // Stochastic forcing increments for this substep (per channel).
        std::vector<std::vector<cplx>> noise(cfg_.channels, std::vector<cplx>(cfg_.height * Hc_, cplx(0, 0)));
        if (cfg_.noise_amplitude > 0) {
            double amp = cfg_.noise_amplitude * std::sqrt(dt) * scale_hw / std::sqrt(2.0);
            for (std::size_t v = 0; v < cfg_.channels; ++v)
                for_forced_modes([&](std::size_t idx, double kmag) {
                    double a = amp / std::sqrt(kmag);
                    noise[v][idx] = cplx(rng_.normal() * a, rng_.normal() * a);
                });
        }

        const std::size_t V = cfg_.channels;
        std::vector<std::vector<cplx>> next = spec_;
        for (std::size_t a = 0; a < cfg_.height; ++a)
            for (std::size_t b = 0; b < Hc_; ++b) {
                std::size_t idx = a * Hc_ + b;
                double ky = two_pi * static_cast<double>(fft_freq(a, cfg_.height)) / static_cast<double>(cfg_.height);
                double kx = two_pi * static_cast<double>(b) / static_cast<double>(cfg_.width);
                cplx adv(0, -dt * (kx * ux + ky * uy));
                double denom = 1.0 + dt * (cfg_.diffusivity * (kx * kx + ky * ky) + cfg_.damping);
                for (std::size_t v = 0; v < V; ++v) {
                    cplx q = spec_[v][idx];
                    // Ring coupling: channel v is rotated towards v+1 and away from v-1.
                    cplx coup = cfg_.coupling * (spec_[(v + 1) % V][idx] - spec_[(v + V - 1) % V][idx]);
                    cplx rhs = q + adv * q + dt * coup + season * (dt * pattern_[v][idx] + noise[v][idx]);
                    next[v][idx] = rhs / denom;
                }
            }
        spec_ = std::move(next);
        time_ += dt;
    }

    SyntheticConfig cfg_;
    RngStream rng_;
    std::size_t Hc_ = 0;
    std::vector<std::vector<cplx>> spec_, pattern_;
    std::vector<double> grid_buf_;
    std::vector<cplx> spec_buf_;
    fftw_plan fwd_ = nullptr, inv_ = nullptr;
    double time_ = 0.0;
};

/// Spins up from rest and records cfg.frames consecutive frames.
inline std::vector<FieldGrid> gen_synthetic(const SyntheticConfig& cfg, std::int64_t start_hours = 0) {
    SyntheticIntegrator integ(cfg);
    for (std::size_t f = 0; f < cfg.spinup_frames; ++f) integ.advance_frame();
    auto names = default_variable_names(cfg.channels);
    std::vector<FieldGrid> frames;
    frames.reserve(cfg.frames);
    for (std::size_t f = 0; f < cfg.frames; ++f) {
        auto st = integ.state();
        FieldGrid g(cfg.channels, cfg.height, cfg.width, names);
        for (std::size_t i = 0; i < st.size(); ++i) g.values[i] = static_cast<float>(st[i]);
        g.timestamp_hours = start_hours + static_cast<std::int64_t>(std::llround(static_cast<double>(f) * cfg.frame_interval_hours));
        g.validate();
        frames.push_back(std::move(g));
        integ.advance_frame();
    }
    return frames;
}

// ---------------------------------------------------------------- statistics

struct VariableStats {
    std::string name;
    double mean = 0.0;
    double std = 1.0;
};

/// Per-variable mean/std over a (training) set of frames; std floored at 1e-6.
inline std::vector<VariableStats> compute_normalization(std::span<const FieldGrid> train) {
    require(!train.empty(), "compute_normalization: empty training split");
    const auto& f0 = train.front();
    std::vector<VariableStats> stats(f0.V);
    for (std::size_t v = 0; v < f0.V; ++v) {
        double s = 0, ss = 0;
        std::size_t n = 0;
        for (const auto& f : train) {
            require(f.V == f0.V && f.H == f0.H && f.W == f0.W, "compute_normalization: inconsistent frame shapes");
            for (float x : f.channel(v)) {
                s += x;
                ss += static_cast<double>(x) * x;
                ++n;
            }
        }
        double mu = s / static_cast<double>(n);
        double var = std::max(0.0, ss / static_cast<double>(n) - mu * mu);
        double sd = std::sqrt(var);
        if (sd < 1e-6) {
            std::clog << "warning: variable '" << f0.variables[v] << "' has zero variance; std floored at 1e-6\n";
            sd = 1e-6;
        }
        stats[v] = {f0.variables[v], mu, sd};
    }
    return stats;
}

inline FieldGrid normalize(const FieldGrid& f, std::span<const VariableStats> stats) {
    require(stats.size() == f.V, "normalize: stats/variable count mismatch");
    FieldGrid out = f;
    for (std::size_t v = 0; v < f.V; ++v)
        for (std::size_t p = 0; p < f.plane(); ++p)
            out.values[v * f.plane() + p] = static_cast<float>((f.values[v * f.plane() + p] - stats[v].mean) / stats[v].std);
    return out;
}

inline FieldGrid denormalize(const FieldGrid& f, std::span<const VariableStats> stats) {
    require(stats.size() == f.V, "denormalize: stats/variable count mismatch");
    FieldGrid out = f;
    for (std::size_t v = 0; v < f.V; ++v)
        for (std::size_t p = 0; p < f.plane(); ++p)
            out.values[v * f.plane() + p] = static_cast<float>(f.values[v * f.plane() + p] * stats[v].std + stats[v].mean);
    return out;
}

/// Per-gridpoint climatological mean and standard deviation.
struct Climatology {
    std::size_t V = 0, H = 0, W = 0;
    std::vector<double> mean, std;
};

inline Climatology compute_climatology(std::span<const FieldGrid> frames) {
    require(!frames.empty(), "compute_climatology: no frames");
    Climatology c{frames[0].V, frames[0].H, frames[0].W, {}, {}};
    std::size_t n = frames[0].values.size();
    c.mean.assign(n, 0.0);
    c.std.assign(n, 0.0);
    for (const auto& f : frames)
        for (std::size_t i = 0; i < n; ++i) c.mean[i] += f.values[i];
    for (auto& m : c.mean) m /= static_cast<double>(frames.size());
    for (const auto& f : frames)
        for (std::size_t i = 0; i < n; ++i) c.std[i] += (f.values[i] - c.mean[i]) * (f.values[i] - c.mean[i]);
    for (auto& s : c.std) s = std::sqrt(s / static_cast<double>(frames.size()));
    return c;
}

/// Pearson lag-`lag` autocorrelation of channel v, averaged over grid points.
inline double lag_autocorrelation(std::span<const FieldGrid> frames, std::size_t v, std::size_t lag) {
    require(frames.size() > lag + 1, "lag_autocorrelation: series too short");
    std::size_t P = frames[0].plane(), n = frames.size() - lag;
    double acc = 0;
    for (std::size_t p = 0; p < P; ++p) {
        double ma = 0, mb = 0;
        for (std::size_t t = 0; t < n; ++t) {
            ma += frames[t].values[v * P + p];
            mb += frames[t + lag].values[v * P + p];
        }
        ma /= static_cast<double>(n);
        mb /= static_cast<double>(n);
        double sab = 0, saa = 0, sbb = 0;
        for (std::size_t t = 0; t < n; ++t) {
            double a = frames[t].values[v * P + p] - ma, b = frames[t + lag].values[v * P + p] - mb;
            sab += a * b;
            saa += a * a;
            sbb += b * b;
        }
        acc += sab / std::sqrt(saa * sbb);
    }
    return acc / static_cast<double>(P);
}

// ------------------------------------------------------------------ manifests

/// Half-open time range [begin, end) in hours.
struct TimeRange {
    std::int64_t begin = 0;
    std::int64_t end = 0;
    bool contains(std::int64_t t) const { return t >= begin && t < end; }
    bool empty() const { return end <= begin; }
};

struct ShardEntry {
    std::string file;  // relative to the dataset directory
    std::int64_t start_hours = 0;
    std::size_t count = 0;
    std::string hash;
};

struct DatasetManifest {
    std::vector<ShardEntry> files;
    double frame_interval_hours = 24.0;
    std::size_t V = 0, H = 0, W = 0;
    GridKind grid = GridKind::periodic;
    std::vector<std::string> variables;
    TimeRange train, val, test;
    std::vector<VariableStats> normalization;

    std::int64_t interval() const { return static_cast<std::int64_t>(std::llround(frame_interval_hours)); }

    /// Timestamps strictly increasing with constant interval across shards;
    /// splits disjoint and ordered train < val < test.
    void validate() const {
        if (frame_interval_hours <= 0) throw IngestionFault("manifest", "frame interval must be positive");
        if (variables.size() != V) throw IngestionFault("manifest", "variable count differs from V");
        std::int64_t expect = 0;
        for (std::size_t i = 0; i < files.size(); ++i) {
            const auto& f = files[i];
            if (f.count == 0) throw IngestionFault(f.file, "empty shard");
            if (i > 0 && f.start_hours != expect)
                throw IngestionFault(f.file, "timestamps out of order or not at a constant interval");
            expect = f.start_hours + static_cast<std::int64_t>(f.count) * interval();
        }
        if (train.empty()) throw IngestionFault("manifest", "empty training split");
        if (!(train.end <= val.begin && val.end <= test.begin) || val.end < val.begin || test.end < test.begin)
            throw IngestionFault("manifest", "splits must be disjoint and ordered train < val < test");
    }
};

inline nlohmann::json to_json(const DatasetManifest& m) {
    nlohmann::json j;
    j["format"] = "omnicast-dataset";
    j["version"] = 1;
    j["frame_interval_hours"] = m.frame_interval_hours;
    j["grid"] = {{"V", m.V}, {"H", m.H}, {"W", m.W}, {"kind", to_string(m.grid)}};
    j["variables"] = m.variables;
    auto files = nlohmann::json::array();
    for (auto& f : m.files) files.push_back({{"file", f.file}, {"start_hours", f.start_hours}, {"count", f.count}, {"hash", f.hash}});
    j["files"] = files;
    auto range = [](const TimeRange& r) { return nlohmann::json{{"begin_hours", r.begin}, {"end_hours", r.end}}; };
    j["splits"] = {{"train", range(m.train)}, {"val", range(m.val)}, {"test", range(m.test)}};
    auto norm = nlohmann::json::array();
    for (auto& s : m.normalization) norm.push_back({{"name", s.name}, {"mean", s.mean}, {"std", s.std}});
    j["normalization"] = norm;
    return j;
}

inline DatasetManifest manifest_from_json(const nlohmann::json& j) {
    try {
        DatasetManifest m;
        m.frame_interval_hours = j.at("frame_interval_hours").get<double>();
        m.V = j.at("grid").at("V");
        m.H = j.at("grid").at("H");
        m.W = j.at("grid").at("W");
        m.grid = grid_kind_from(j.at("grid").at("kind"));
        m.variables = j.at("variables").get<std::vector<std::string>>();
        for (auto& f : j.at("files")) m.files.push_back({f.at("file"), f.at("start_hours"), f.at("count"), f.value("hash", "")});
        auto range = [](const nlohmann::json& r) { return TimeRange{r.at("begin_hours"), r.at("end_hours")}; };
        m.train = range(j.at("splits").at("train"));
        m.val = range(j.at("splits").at("val"));
        m.test = range(j.at("splits").at("test"));
        for (auto& s : j.value("normalization", nlohmann::json::array())) m.normalization.push_back({s.at("name"), s.at("mean"), s.at("std")});
        return m;
    } catch (const nlohmann::json::exception& e) {
        throw IngestionFault("manifest", std::string("malformed manifest: ") + e.what());
    }
}

/// Splits a frame count by whole "years" into train/val/test time ranges.
inline void assign_splits(DatasetManifest& m, std::int64_t first_hours, std::size_t train_frames, std::size_t val_frames,
                          std::size_t test_frames) {
    auto iv = m.interval();
    m.train = {first_hours, first_hours + static_cast<std::int64_t>(train_frames) * iv};
    m.val = {m.train.end, m.train.end + static_cast<std::int64_t>(val_frames) * iv};
    m.test = {m.val.end, m.val.end + static_cast<std::int64_t>(test_frames) * iv};
}

/// Writes frames as (count, V, H, W) f32 shards plus manifest.json.
/// `m` supplies interval and splits; files/grid/normalization are filled in.
inline DatasetManifest write_dataset(const std::filesystem::path& dir, std::span<const FieldGrid> frames, DatasetManifest m,
                                     std::size_t shard_frames = 360) {
    require(!frames.empty(), "write_dataset: no frames");
    require(shard_frames > 0, "write_dataset: shard size must be positive");
    const auto& f0 = frames.front();
    m.V = f0.V;
    m.H = f0.H;
    m.W = f0.W;
    m.grid = f0.grid;
    m.variables = f0.variables;
    m.files.clear();
    std::filesystem::create_directories(dir / "shards");
    for (std::size_t start = 0, k = 0; start < frames.size(); start += shard_frames, ++k) {
        std::size_t count = std::min(shard_frames, frames.size() - start);
        std::vector<float> buf;
        buf.reserve(count * f0.values.size());
        for (std::size_t i = 0; i < count; ++i) buf.insert(buf.end(), frames[start + i].values.begin(), frames[start + i].values.end());
        char name[64];
        std::snprintf(name, sizeof(name), "shards/frames_%05zu.octf", k);
        auto bytes = octf::encode<float>(Shape{count, m.V, m.H, m.W}, buf);
        octf::write_bytes(dir / name, bytes);
        m.files.push_back({name, frames[start].timestamp_hours, count, octf::content_hash(bytes)});
    }
    m.validate();
    octf::write_bytes(dir / "manifest.json", to_json(m).dump(2) + "\n");
    return m;
}

inline DatasetManifest read_manifest(const std::filesystem::path& dir) {
    auto path = dir / "manifest.json";
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(octf::read_bytes(path));
    } catch (const nlohmann::json::exception& e) {
        throw IngestionFault(path.string(), e.what());
    }
    auto m = manifest_from_json(j);
    m.validate();
    return m;
}

/// Frames with timestamps in `range`, in timestamp order. Shards are
/// checksum- and shape-verified before use.
inline std::vector<FieldGrid> load_fields(const std::filesystem::path& dir, const DatasetManifest& m, TimeRange range) {
    m.validate();
    std::vector<FieldGrid> out;
    if (range.empty()) return out;
    auto iv = m.interval();
    for (const auto& f : m.files) {
        std::int64_t last = f.start_hours + static_cast<std::int64_t>(f.count - 1) * iv;
        if (last < range.begin || f.start_hours >= range.end) continue;
        auto path = dir / f.file;
        auto bytes = octf::read_bytes(path);
        if (!f.hash.empty() && octf::content_hash(bytes) != f.hash) throw IngestionFault(path.string(), "checksum mismatch");
        auto dec = octf::decode<float>(bytes, path.string());
        if (dec.shape != Shape{f.count, m.V, m.H, m.W})
            throw IngestionFault(path.string(), "shape " + shape_str(dec.shape) + " does not match manifest");
        std::size_t n = m.V * m.H * m.W;
        for (std::size_t i = 0; i < f.count; ++i) {
            std::int64_t t = f.start_hours + static_cast<std::int64_t>(i) * iv;
            if (!range.contains(t)) continue;
            FieldGrid g(m.V, m.H, m.W, m.variables, m.grid);
            std::copy_n(dec.values.data() + i * n, n, g.values.data());
            g.timestamp_hours = t;
            out.push_back(std::move(g));
        }
    }
    return out;
}

}  // namespace omnicast::data
