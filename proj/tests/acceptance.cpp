// Copyright (C) 2026 omnicast contributors
// SPDX-License-Identifier: Apache-2.0

// Acceptance suite. Prints one PASS/FAIL line per criterion and exits
// non-zero if any fails. Arguments select criteria by number (default: all).

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <numbers>
#include <numeric>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "omnicast/pipeline.hpp"
#include "support/gradcheck.hpp"

using namespace omnicast;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

std::string fmt(const char* f, double a) {
    char buf[96];
    std::snprintf(buf, sizeof(buf), f, a);
    return buf;
}

class Checks {
public:
    void expect(bool ok, const std::string& what) {
        if (!ok) failures_.push_back(what);
        ++count_;
    }
    void note(const std::string& s) { notes_.push_back(s); }
    Outcome outcome() const {
        Outcome o{failures_.empty(), ""};
        std::ostringstream os;
        if (!failures_.empty()) {
            os << failures_.size() << "/" << count_ << " checks failed:";
            for (auto& f : failures_) os << " [" << f << "]";
        } else {
            os << count_ << " checks";
        }
        for (auto& n : notes_) os << "; " << n;
        o.detail = os.str();
        return o;
    }

private:
    std::vector<std::string> failures_, notes_;
    std::size_t count_ = 0;
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

void log(const std::string& s) { std::cerr << "  .. " << s << std::endl; }

// ------------------------------------------------------------------ 1

Outcome autodiff() {
    Checks c;
    auto t0 = std::chrono::steady_clock::now();
    RngStream rng(20261018);
    double worst_all = 0;
    for (auto& op : omnicast::testing::differentiable_ops()) {
        double worst = 0;
        for (int trial = 0; trial < 20; ++trial) worst = std::max(worst, omnicast::testing::check_gradients(op.make(rng), rng).max_rel_error);
        c.expect(worst < 1e-4, op.name + " rel err " + fmt("%.3g", worst));
        worst_all = std::max(worst_all, worst);
    }
    double secs = seconds_since(t0);
    c.expect(secs < 300, "suite took " + fmt("%.1f s", secs));
    c.note("ops " + std::to_string(omnicast::testing::differentiable_ops().size()) + ", worst rel err " + fmt("%.2e", worst_all) + ", " +
           fmt("%.1f s", secs));
    return c.outcome();
}

// ------------------------------------------------------------------ 2

Outcome diffusion_math() {
    Checks c;
    // Forward process endpoints.
    RngStream r(7);
    for (int i = 0; i < 100; ++i) {
        double x = r.normal(), e = r.normal();
        c.expect(forward_diffuse(x, e, 1.0) == x, "abar=1 leaves x unchanged");
        c.expect(std::abs(forward_diffuse(x, e, 1e-16) - e) < 1e-7, "abar->0 gives pure noise");
    }
    // Zero temperature removes the sampling noise.
    auto sched = NoiseSchedule::linear();
    for (std::size_t k : {0u, 10u, 500u, 999u}) {
        const auto& st = sched.steps[k];
        double a = denoise_step(0.4, -0.2, st, 0.0, 2.5, false), b = denoise_step(0.4, -0.2, st, 0.0, -1.1, false);
        c.expect(a == b, "tau=0 is deterministic at step " + std::to_string(k));
    }
    // 1-D Gaussian data: E[eps | x_s] = sqrt(1 - abar_s) x_s is the exact denoiser.
    const std::size_t chains = 10000;
    std::vector<double> x(chains);
    RngStream rr(11);
    for (auto& v : x) v = rr.normal();
    for (std::size_t k = sched.steps.size(); k-- > 0;) {
        const auto& st = sched.steps[k];
        for (auto& v : x) v = denoise_step(v, std::sqrt(1 - st.alpha_bar) * v, st, 1.0, rr.normal(), k == 0);
    }
    double m = std::accumulate(x.begin(), x.end(), 0.0) / chains, var = 0;
    for (double v : x) var += (v - m) * (v - m);
    var /= chains - 1;
    c.expect(std::abs(m) < 0.03, "chain mean " + fmt("%.4f", m));
    c.expect(std::abs(var - 1.0) < 0.03, "chain variance " + fmt("%.4f", var));
    c.note("chain mean " + fmt("%.4f", m) + " var " + fmt("%.4f", var));
    return c.outcome();
}

// ------------------------------------------------------------------ 3

BackboneConfig small_backbone() {
    BackboneConfig b;
    b.encoder_layers = 1;
    b.decoder_layers = 1;
    b.heads = 2;
    b.width = 16;
    b.dropout = 0.0;
    return b;
}

DiffusionHeadConfig small_head() {
    DiffusionHeadConfig h;
    h.blocks = 1;
    h.width = 16;
    h.time_dim = 8;
    h.train_steps = 50;
    h.sample_steps = 10;
    return h;
}

TokenSequence<float> random_sequence(const SequenceLayout& L, std::uint64_t seed, double gamma) {
    RngStream r(seed);
    TokenSequence<float> s;
    s.layout = L;
    s.cond.resize(L.hw() * L.D);
    s.future.resize(L.future_count() * L.D);
    r.fill_normal(s.cond);
    r.fill_normal(s.future);
    s.mask = sample_mask(L.future_count(), gamma, r).mask;
    return s;
}

Outcome objective_wiring() {
    Checks c;
    // No-MSE: the deterministic term is exactly zero.
    {
        SequenceLayout L{4, 2, 2, 3};
        ForecastModel<float> model(L, small_backbone(), small_head(), 1);
        TrainConfig cfg;
        cfg.sequence_length = 4;
        cfg.variant = LossVariant::no_mse;
        std::vector<TokenSequence<float>> seqs{random_sequence(L, 1, 0.6), random_sequence(L, 2, 0.9)};
        RngStream r(3);
        auto l = compute_losses(model, to_batch<float>(seqs), cfg, r, true, 2);
        c.expect(l.deter.item() == 0.0f, "no-mse deterministic term is " + fmt("%g", l.deter.item()));
        c.expect(l.gen.item() > 0.0f, "generative term positive");
    }
    // Frame weights: zero beyond frame 10, normalized to one.
    for (std::size_t T : {12u, 16u, 44u}) {
        SequenceLayout L{T, 2, 3, 1};
        FrameWeights fw(L, 10);
        double sum = std::accumulate(fw.weights.begin(), fw.weights.end(), 0.0);
        c.expect(std::abs(sum - 1.0) < 1e-12, "weights sum " + fmt("%.15f", sum));
        bool zero_tail = true, positive_head = true;
        for (std::size_t i = 0; i < L.future_count(); ++i) {
            if (i / L.hw() >= 10) zero_tail &= fw.weights[i] == 0.0;
            else positive_head &= fw.weights[i] > 0.0;
        }
        c.expect(zero_tail, "w(i)=0 beyond frame 10 at T=" + std::to_string(T));
        c.expect(positive_head, "w(i)>0 within the first 10 frames at T=" + std::to_string(T));
        // Independent decay oracle: frame k gets e^{-k} / (hw sum_{j<10} e^{-j}).
        double Z = 0;
        for (int j = 0; j < 10; ++j) Z += std::exp(-j);
        double w3 = std::exp(-3.0) / (static_cast<double>(L.hw()) * Z);
        c.expect(std::abs(fw.weights[3 * L.hw()] - w3) < 1e-14, "frame-3 weight matches decay");
    }
    // A probe added to the backbone output only at unmasked positions can
    // reach the objective only through unmasked-position terms.
    {
        SequenceLayout L{3, 2, 2, 3};
        ForecastModel<double> model(L, small_backbone(), small_head(), 9);
        RngStream pr(1);
        for (auto& p : model.head.parameters()) {
            std::vector<double> v(p.tensor.numel());
            pr.fill_normal(v);
            for (auto& x : v) x *= 0.2;
            p.tensor.assign(v);
        }
        auto s = random_sequence(L, 40, 0.5);
        auto batch = to_batch<double>({s});
        std::size_t N = L.future_count(), C = 16;
        auto probe = Tensor<double>({N, C}).set_requires_grad();
        RngStream r(0);
        auto z = add(reshape(model.backbone.forward(batch, r, false), {N, C}), probe);
        std::vector<std::size_t> idx;
        for (std::size_t i = 0; i < N; ++i)
            if (s.mask[i]) idx.push_back(i);
        auto x_m = index_rows(reshape(batch.future, {N, L.D}), idx);
        auto z_m = index_rows(z, idx);
        FrameWeights fw(L, 10);
        std::vector<double> w;
        for (auto i : idx) w.push_back(fw.weights[i]);
        RngStream dr(2);
        auto loss = add(diffusion_loss(model.head, x_m, z_m, dr, 2), deter_loss(x_m, model.deter(z_m), w));
        backward(loss);
        auto g = probe.grad();
        double unmasked = 0, masked = 0;
        for (std::size_t i = 0; i < N; ++i)
            for (std::size_t k = 0; k < C; ++k) (s.mask[i] ? masked : unmasked) += std::abs(g[i * C + k]);
        c.expect(unmasked == 0.0, "unmasked-position gradient " + fmt("%g", unmasked));
        c.expect(masked > 0.0, "masked-position gradient is non-zero");
    }
    return c.outcome();
}

// ------------------------------------------------------------------ 4

std::vector<long> cosine_remaining(std::size_t N, std::size_t K) {
    std::vector<long> out;
    for (std::size_t t = 1; t <= K; ++t)
        out.push_back(std::lround(static_cast<long double>(N) *
                                  std::cos(std::numbers::pi_v<long double> * static_cast<long double>(t) / (2.0L * static_cast<long double>(K)))));
    return out;
}

Outcome scheduler() {
    Checks c;
    for (auto [N, K] : {std::pair<std::size_t, std::size_t>{100, 4}, {5632, 44}}) {
        auto counts = unmask_counts(N, K);
        auto table = cosine_remaining(N, K);
        c.expect(counts.size() == K, "K counts");
        c.expect(std::accumulate(counts.begin(), counts.end(), std::size_t{0}) == N, "counts sum to N");
        bool positive = std::all_of(counts.begin(), counts.end(), [](std::size_t v) { return v > 0; });
        c.expect(positive, "counts positive");
        long prev = static_cast<long>(N);
        bool match = true;
        for (std::size_t t = 0; t < K; ++t) {
            match &= prev - table[t] == static_cast<long>(counts[t]);
            prev = table[t];
        }
        c.expect(match, "table match for N=" + std::to_string(N) + " K=" + std::to_string(K));
    }
    // Default sampler with T = 44 runs exactly 44 iterations.
    SequenceLayout L{44, 1, 2, 2};
    ForecastModel<float> model(L, small_backbone(), small_head(), 1);
    SamplerConfig sc;
    sc.members = 1;
    sc.diffusion_steps = 2;
    std::vector<RngStream> streams{RootRng(5).stream("member", 0)};
    std::vector<std::vector<float>> cond(1, std::vector<float>(L.hw() * L.D, 0.1f));
    std::vector<std::size_t> iters;
    decode_tokens(model, cond, sc, streams, &iters);
    c.expect(iters.size() == 44, "T=44 default iterations " + std::to_string(iters.size()));
    c.note("T=44 ran " + std::to_string(iters.size()) + " iterations");
    return c.outcome();
}

// ------------------------------------------------------------------ 5

Outcome metric_oracles() {
    Checks c;
    using namespace metrics;
    // CRPS of N(0,1) members at y = 0 against sigma (2 phi(0) - 1/sqrt(pi)).
    {
        std::vector<double> x(10000);
        RngStream r(13);
        r.fill_normal(x);
        double ref = 2.0 / std::sqrt(2 * std::numbers::pi) - 1.0 / std::sqrt(std::numbers::pi);
        double v = crps(x, 0.0);
        c.expect(std::abs(v - ref) < 0.02 * ref, "crps " + fmt("%.5f", v));
        c.note("crps " + fmt("%.4f", v) + " vs " + fmt("%.4f", ref));
    }
    // SSR: truth and members drawn from the same distribution.
    {
        const std::size_t M = 50, P = 64 * 64;
        RngStream r(14);
        std::vector<std::vector<double>> mem(M, std::vector<double>(P));
        for (auto& m : mem) r.fill_normal(m);
        std::vector<double> truth(P);
        r.fill_normal(truth);
        std::vector<std::span<const double>> ens;
        for (auto& m : mem) ens.emplace_back(m);
        std::vector<double> w(P, 1.0 / P);
        auto ss = spread_skill(ens, std::span<const double>(truth), std::span<const double>(w));
        c.expect(ss.ssr && std::abs(*ss.ssr - 1.0) <= 0.1, "ssr " + fmt("%.4f", ss.ssr.value_or(-1)));
        c.note("ssr " + fmt("%.4f", ss.ssr.value_or(-1)));
    }
    // Identity cases on a smooth random field with noise.
    {
        const std::size_t H = 176, W = 176;
        RngStream r(15);
        std::vector<double> f(H * W);
        for (int m = 0; m < 6; ++m) {
            double kx = 1 + static_cast<double>(r.below(5)), ky = static_cast<double>(r.below(5)), a = r.normal(), ph = r.uniform(0, 6.28);
            for (std::size_t i = 0; i < H; ++i)
                for (std::size_t j = 0; j < W; ++j)
                    f[i * W + j] += a * std::cos(2 * std::numbers::pi * (kx * static_cast<double>(j) / W + ky * static_cast<double>(i) / H) + ph);
        }
        for (auto& v : f) v += 0.1 * r.normal();
        std::span<const double> s(f);
        c.expect(sdiv(s, s, H, W) == 0.0, "sdiv identity");
        c.expect(sres(s, s, H, W) == 0.0, "sres identity");
        double ms = ms_ssim(s, s, H, W);
        c.expect(ms == 1.0, "ms-ssim identity " + fmt("%.17g", ms));
    }
    // A pure sinusoid puts all spectral energy in its wavenumber bin.
    {
        const std::size_t H = 32, W = 64;
        for (auto [kx, ky, bin] : {std::tuple{5, 0, 5}, std::tuple{3, 4, 5}, std::tuple{0, 9, 9}}) {
            std::vector<double> f(H * W);
            for (std::size_t i = 0; i < H; ++i)
                for (std::size_t j = 0; j < W; ++j)
                    f[i * W + j] = std::sin(2 * std::numbers::pi * (kx * static_cast<double>(j) / W + ky * static_cast<double>(i) / H) + 0.4);
            auto sp = power_spectrum(std::span<const double>(f), H, W);
            double total = std::accumulate(sp.begin(), sp.end(), 0.0);
            c.expect(sp[bin] / total > 1 - 1e-12, "sinusoid (" + std::to_string(kx) + "," + std::to_string(ky) + ") concentrated");
        }
    }
    return c.outcome();
}

// ------------------------------------------------------------ desk model

// Per-lead scores pooled over initial conditions, variables and grid points.
struct LeadScores {
    std::vector<double> rmse, spread, ssr, clim_rmse;
};

LeadScores lead_scores(const std::vector<EnsembleForecast>& fcs, const std::vector<data::FieldGrid>& frames, const std::vector<std::size_t>& ics,
                       const data::Climatology& clim) {
    std::size_t T = fcs.front().lead_hours.size(), M = fcs.front().members.size();
    std::vector<double> se(T, 0), var(T, 0), cse(T, 0);
    double n = 0;
    for (std::size_t k = 0; k < fcs.size(); ++k) {
        auto truth = pipeline::truth_for(frames, ics[k], T);
        for (std::size_t t = 0; t < T; ++t) {
            const auto& y = truth[t].values;
            for (std::size_t i = 0; i < y.size(); ++i) {
                double mu = 0;
                for (std::size_t m = 0; m < M; ++m) mu += fcs[k].members[m][t].values[i];
                mu /= static_cast<double>(M);
                double v = 0;
                for (std::size_t m = 0; m < M; ++m) v += std::pow(fcs[k].members[m][t].values[i] - mu, 2);
                var[t] += v / static_cast<double>(M - 1);
                se[t] += std::pow(mu - y[i], 2);
                cse[t] += std::pow(clim.mean[i] - y[i], 2);
            }
        }
        n += static_cast<double>(truth[0].values.size());
    }
    LeadScores out;
    double fac = std::sqrt((static_cast<double>(M) + 1) / static_cast<double>(M));
    for (std::size_t t = 0; t < T; ++t) {
        out.rmse.push_back(std::sqrt(se[t] / n));
        out.spread.push_back(std::sqrt(var[t] / n));
        out.clim_rmse.push_back(std::sqrt(cse[t] / n));
        out.ssr.push_back(fac * out.spread.back() / out.rmse.back());
    }
    return out;
}

std::string series(const std::vector<double>& v) {
    std::string s = "[";
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? " " : "") + fmt("%.3f", v[i]);
    return s + "]";
}

double tail_mean(const std::vector<double>& v) {
    std::size_t h = v.size() / 2;
    return std::accumulate(v.begin() + static_cast<long>(h), v.end(), 0.0) / static_cast<double>(v.size() - h);
}

struct Desk {
    pipeline::RunConfig c;
    pipeline::Dataset d;
    std::optional<pipeline::VaeBundle> vae;
    std::optional<ForecastModel<float>> model;
    std::optional<ForecastModel<float>> model_t2;
    data::Climatology clim;
    std::vector<std::size_t> ics;
    std::optional<std::vector<EnsembleForecast>> base;

    static Desk& get() {
        static Desk desk = build();
        return desk;
    }

    static Desk build() {
        Desk k;
        auto t0 = std::chrono::steady_clock::now();
        k.c = pipeline::parse_config(pipeline::resolve_config(OMNICAST_CONFIG_DIR "/fast.json", {}, std::nullopt));
        fs::path dir = fs::path(OMNICAST_WORK_DIR) / "desk_data";
        fs::remove_all(dir);
        pipeline::gen_data(k.c, dir);
        k.d = pipeline::load_dataset(dir);
        log("dataset " + fmt("%.0f s", seconds_since(t0)));
        k.vae = pipeline::fit_vae(k.c, k.d);
        log("vae trained " + fmt("%.0f s", seconds_since(t0)));
        k.model = pipeline::fit_model(k.c, k.d, *k.vae);
        log("T=8 model trained " + fmt("%.0f s", seconds_since(t0)));
        k.clim = data::compute_climatology(std::span<const data::FieldGrid>(k.d.train));
        k.ics = pipeline::ic_indices(k.c, k.d.test.size(), k.model->layout.T);
        return k;
    }

    double interval() const { return d.manifest.frame_interval_hours; }

    std::vector<EnsembleForecast> forecast(const ForecastModel<float>& m, std::size_t horizon, const SamplerConfig& s) const {
        return pipeline::forecast_ensembles(m, vae->vae, d.test, ics, horizon, interval(), s);
    }

    const std::vector<EnsembleForecast>& baseline() {
        if (!base) {
            auto t0 = std::chrono::steady_clock::now();
            base = forecast(*model, model->layout.T, c.sampler);
            log("baseline forecasts " + fmt("%.0f s", seconds_since(t0)));
        }
        return *base;
    }

    const ForecastModel<float>& short_model() {
        if (!model_t2) {
            auto t0 = std::chrono::steady_clock::now();
            auto c2 = c;
            c2.train = pipeline::sweep_train(c.train, "sequence-length", "2");
            model_t2 = pipeline::fit_model(c2, d, *vae);
            log("T=2 model trained " + fmt("%.0f s", seconds_since(t0)));
        }
        return *model_t2;
    }
};

// ------------------------------------------------------------------ 6

Outcome desk_skill() {
    Checks c;
    auto& k = Desk::get();
    c.expect(k.c.sampler.members == 50, "50-member ensemble");
    c.expect(k.model->layout.T == 8, "stage-two model at T=8");
    auto s = lead_scores(k.baseline(), k.d.test, k.ics, k.clim);
    for (std::size_t t : {0u, 1u})
        c.expect(s.rmse[t] < s.clim_rmse[t], "lead " + std::to_string(t + 1) + " rmse " + fmt("%.4f", s.rmse[t]) + " vs climatology " +
                                                 fmt("%.4f", s.clim_rmse[t]));
    for (std::size_t t = 1; t < s.spread.size(); ++t)
        c.expect(s.spread[t] > s.spread[t - 1], "spread increases at lead " + std::to_string(t + 1));
    double last = s.ssr.back();
    c.expect(last >= 0.5 && last <= 1.5, "final-lead ssr " + fmt("%.3f", last));
    c.note("rmse " + series(s.rmse) + " clim " + series(s.clim_rmse) + " spread " + series(s.spread) + " ssr " + series(s.ssr));
    return c.outcome();
}

// ------------------------------------------------------------------ 7

Outcome ablation_trends() {
    Checks c;
    auto& k = Desk::get();
    std::size_t T = k.model->layout.T;
    auto base = lead_scores(k.baseline(), k.d.test, k.ics, k.clim);
    // (a) temperature.
    {
        auto cold_cfg = pipeline::sweep_sampler(k.c.sampler, "tau", "0.7");
        auto hot_cfg = pipeline::sweep_sampler(k.c.sampler, "tau", "1.3");
        auto hot = k.c.sampler.temperature == 1.3 ? base : lead_scores(k.forecast(*k.model, T, hot_cfg), k.d.test, k.ics, k.clim);
        auto cold = lead_scores(k.forecast(*k.model, T, cold_cfg), k.d.test, k.ics, k.clim);
        double h = tail_mean(hot.ssr), cl = tail_mean(cold.ssr);
        c.expect(h > cl, "(a) long-lead ssr tau=1.3 " + fmt("%.3f", h) + " vs tau=0.7 " + fmt("%.3f", cl));
        c.note("(a) ssr tau1.3 " + fmt("%.3f", h) + " tau0.7 " + fmt("%.3f", cl));
    }
    // (b) unmasking order.
    {
        auto rnd = lead_scores(k.forecast(*k.model, T, pipeline::sweep_sampler(k.c.sampler, "order", "random")), k.d.test, k.ics, k.clim);
        auto arf = lead_scores(k.forecast(*k.model, T, pipeline::sweep_sampler(k.c.sampler, "order", "autoregressive-framewise")), k.d.test,
                               k.ics, k.clim);
        double r = tail_mean(rnd.ssr), a = tail_mean(arf.ssr);
        c.expect(r >= a, "(b) long-lead ssr random " + fmt("%.3f", r) + " vs ar-framewise " + fmt("%.3f", a));
        c.note("(b) ssr random " + fmt("%.3f", r) + " ar-framewise " + fmt("%.3f", a));
    }
    // (c) short training sequences rolled out to the same horizon.
    {
        const auto& m2 = k.short_model();
        auto short_fc = lead_scores(k.forecast(m2, T, k.c.sampler), k.d.test, k.ics, k.clim);
        c.expect(short_fc.rmse.front() < base.rmse.front(),
                 "(c) lead-1 rmse T=2 " + fmt("%.4f", short_fc.rmse.front()) + " vs T=8 " + fmt("%.4f", base.rmse.front()));
        c.expect(short_fc.rmse.back() > base.rmse.back(),
                 "(c) final-lead rmse T=2 " + fmt("%.4f", short_fc.rmse.back()) + " vs T=8 " + fmt("%.4f", base.rmse.back()));
        c.note("(c) rmse T=2 " + series(short_fc.rmse) + " T=8 " + series(base.rmse));
    }
    return c.outcome();
}

// ------------------------------------------------------------------ 8

Outcome stability() {
    Checks c;
    auto& k = Desk::get();
    const std::size_t frames = 1000;
    std::size_t T = k.model->layout.T;
    SamplerConfig s = k.c.sampler;
    s.members = 2;
    auto t0 = std::chrono::steady_clock::now();
    auto fc = rollout_frames(*k.model, k.vae->vae, k.d.test[k.ics.front()], (frames + T - 1) / T, k.interval(), s);
    double worst = 0;
    bool finite = true;
    std::size_t checked = 0;
    for (auto& member : fc.members) {
        c.expect(member.size() >= frames, "rollout length " + std::to_string(member.size()));
        for (std::size_t t = 0; t < std::min(frames, member.size()); ++t) {
            const auto& v = member[t].values;
            for (std::size_t i = 0; i < v.size(); ++i) {
                finite &= std::isfinite(v[i]);
                worst = std::max(worst, std::abs(v[i] - k.clim.mean[i]) / std::max(k.clim.std[i], 1e-12));
                ++checked;
            }
        }
    }
    c.expect(finite, "all values finite");
    c.expect(worst <= 6.0, "max deviation " + fmt("%.2f", worst) + " climatological std");
    c.note(std::to_string(checked) + " values at tau " + fmt("%.1f", s.temperature) + ", max |x - clim| / std " + fmt("%.2f", worst) + ", " +
           fmt("%.0f s", seconds_since(t0)));
    // Informational only: the same rollout without temperature scaling.
    if (s.temperature != 1.0) {
        s.temperature = 1.0;
        auto plain = rollout_frames(*k.model, k.vae->vae, k.d.test[k.ics.front()], (frames + T - 1) / T, k.interval(), s);
        double w1 = 0;
        for (auto& member : plain.members)
            for (std::size_t t = 0; t < frames; ++t)
                for (std::size_t i = 0; i < member[t].values.size(); ++i)
                    w1 = std::max(w1, std::abs(member[t].values[i] - k.clim.mean[i]) / std::max(k.clim.std[i], 1e-12));
        c.note("at tau 1.0 the max is " + fmt("%.2f", w1));
    }
    return c.outcome();
}

// ------------------------------------------------------------------ 9

int run(const std::string& cmd) { return std::system((cmd + " > /dev/null 2>&1").c_str()); }

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), {}};
}

// Relative path -> contents for every regular file except the timing sidecar.
std::map<std::string, std::string> tree(const fs::path& root) {
    std::map<std::string, std::string> out;
    for (auto& e : fs::recursive_directory_iterator(root))
        if (e.is_regular_file() && e.path().filename() != "run_timing.json") out[fs::relative(e.path(), root).string()] = slurp(e.path());
    return out;
}

Outcome reproducibility() {
    Checks c;
    fs::path work = fs::path(OMNICAST_WORK_DIR) / "repro";
    fs::remove_all(work);
    const std::string cli = OMNICAST_CLI, cfg = std::string(" --config ") + OMNICAST_CONFIG_DIR "/tiny.json";
    std::vector<std::pair<std::string, std::string>> steps{
        {"data", "gen-data" + cfg},
        {"vae", "train-vae" + cfg + " --data @/data"},
        {"model", "train-model" + cfg + " --data @/data --vae @/vae"},
        {"forecast", "forecast" + cfg + " --data @/data --vae @/vae --model @/model"},
        {"rollout", "forecast" + cfg + " --data @/data --vae @/vae --model @/model --mode autoregressive --horizon-hours 48"},
        {"evaluate", "evaluate" + cfg + " --data @/data --forecast @/forecast --images"},
        {"ablate", "ablate" + cfg + " --data @/data --vae @/vae --model @/model --sweep tau --values 0.7,1.3"},
        {"ablate_seq", "ablate" + cfg + " --data @/data --vae @/vae --model @/model --sweep sequence-length --values 1,2"},
    };
    std::size_t files = 0;
    for (const char* rep : {"a", "b"}) {
        fs::path base = work / rep;
        for (auto& [name, args] : steps) {
            std::string a = args;
            for (std::size_t p; (p = a.find('@')) != std::string::npos;) a.replace(p, 1, base.string());
            int rc = run(cli + " " + a + " --out " + (base / name).string());
            c.expect(rc == 0, std::string(rep) + "/" + name + " exit " + std::to_string(rc));
        }
    }
    for (auto& [name, args] : steps) {
        auto ta = tree(work / "a" / name), tb = tree(work / "b" / name);
        c.expect(!ta.empty(), name + " produced files");
        c.expect(ta.size() == tb.size(), name + " file count " + std::to_string(ta.size()) + " vs " + std::to_string(tb.size()));
        for (auto& [rel, bytes] : ta) {
            auto it = tb.find(rel);
            c.expect(it != tb.end() && it->second == bytes, name + "/" + rel + " identical");
            ++files;
        }
    }
    c.note(std::to_string(steps.size()) + " subcommand runs x2, " + std::to_string(files) + " files compared");
    return c.outcome();
}

// ----------------------------------------------------------------- 10

Outcome compression() {
    Checks c;
    // 100 channels of 32-bit floats on 64x64 at f = 4: 13-bit codes vs 16-dim latents.
    double raw = 32.0 * 100 * 64 * 64;
    double discrete = raw / (13.0 * 16 * 16), continuous = raw / (32.0 * 16 * 16 * 16);
    double d = compression_ratio_discrete(100, 64, 64, 4, 32, 13), k = compression_ratio(100, 64, 64, 4, 32, 16);
    c.expect(std::abs(d - discrete) < 1e-9 && std::llround(d) == 3938, "discrete " + fmt("%.4f", d));
    c.expect(k == continuous && k == 100.0, "continuous " + fmt("%.4f", k));
    c.note("discrete " + fmt("%.2f", d) + ", continuous " + fmt("%.2f", k));
    return c.outcome();
}

}  // namespace

int main(int argc, char** argv) {
    const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria{
        {"autodiff gradient checks", autodiff},
        {"diffusion endpoint identities and reverse chain", diffusion_math},
        {"objective wiring", objective_wiring},
        {"cosine unmask scheduler", scheduler},
        {"metric oracles", metric_oracles},
        {"desk-scale skill", desk_skill},
        {"ablation trends", ablation_trends},
        {"1000-frame rollout stability", stability},
        {"CLI byte reproducibility", reproducibility},
        {"compression ratio arithmetic", compression},
    };
    std::set<std::size_t> only;
    for (int i = 1; i < argc; ++i) only.insert(static_cast<std::size_t>(std::atoi(argv[i])));
    fs::create_directories(OMNICAST_WORK_DIR);
    int failed = 0;
    for (std::size_t i = 0; i < criteria.size(); ++i) {
        if (!only.empty() && !only.contains(i + 1)) continue;
        auto t0 = std::chrono::steady_clock::now();
        Outcome o;
        try {
            o = criteria[i].second();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        failed += !o.pass;
        std::cout << (o.pass ? "PASS" : "FAIL") << " [" << i + 1 << "] " << criteria[i].first << " (" << fmt("%.1f s", seconds_since(t0)) << "): "
                  << o.detail << std::endl;
    }
    return failed ? 1 : 0;
}
