// Copyright (C) 2026 omnicast contributors
// SPDX-License-Identifier: Apache-2.0

// Per-token prediction heads: the denoising MLP with adaptive layer norm and
// its noise schedule, and the deterministic MLP head with frame weights.

#pragma once

#include <nlohmann/json.hpp>

#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "omnicast/nn.hpp"
#include "omnicast/tokenizer.hpp"

namespace omnicast {

// ------------------------------------------------------------ noise schedule

/// One reverse step of a (possibly respaced) chain. `t` is the training-step
/// index used for the time embedding; alpha is the per-step ratio of
/// consecutive cumulative products.
struct DiffusionStep {
    std::size_t t = 0;
    double alpha_bar = 1.0;
    double alpha_bar_prev = 1.0;
    double alpha = 1.0;
    double sigma = 0.0;
};

struct NoiseSchedule {
    std::size_t S = 0;
    std::vector<double> beta;       // [1..S], index 0 unused (0)
    std::vector<double> alpha_bar;  // [0..S], alpha_bar[0] == 1
    std::vector<DiffusionStep> steps;  // reverse chain, steps[0] is the first kept index

    /// Linear beta from beta_1 to beta_S.
    static NoiseSchedule linear(std::size_t S = 1000, double beta_1 = 1e-4, double beta_S = 0.02) {
        require(S >= 1, "NoiseSchedule: need at least one step");
        NoiseSchedule n;
        n.S = S;
        n.beta.assign(S + 1, 0.0);
        n.alpha_bar.assign(S + 1, 1.0);
        for (std::size_t s = 1; s <= S; ++s) {
            n.beta[s] = S == 1 ? beta_1 : beta_1 + (beta_S - beta_1) * static_cast<double>(s - 1) / static_cast<double>(S - 1);
            n.alpha_bar[s] = n.alpha_bar[s - 1] * (1.0 - n.beta[s]);
        }
        std::vector<std::size_t> all(S);
        for (std::size_t s = 0; s < S; ++s) all[s] = s + 1;
        n.set_steps(all);
        return n;
    }

    /// n evenly spaced indices round(j*S/n), j = 1..n (always includes S).
    NoiseSchedule respaced(std::size_t n) const {
        require(n >= 1 && n <= S, "NoiseSchedule::respaced: step count must lie in [1, S]");
        std::vector<std::size_t> kept;
        for (std::size_t j = 1; j <= n; ++j) {
            auto k = static_cast<std::size_t>(std::llround(static_cast<double>(j) * static_cast<double>(S) / static_cast<double>(n)));
            kept.push_back(std::max<std::size_t>(k, 1));
        }
        NoiseSchedule out = *this;
        out.set_steps(kept);
        return out;
    }

    double alpha(std::size_t s) const { return 1.0 - beta.at(s); }

    /// Installs the kept training indices (ascending) as the reverse chain.
    void set_steps(const std::vector<std::size_t>& kept) {
        steps.clear();
        std::size_t prev = 0;
        for (std::size_t k : kept) {
            require(k > prev && k <= S, "NoiseSchedule: kept indices must be strictly increasing within [1, S]");
            DiffusionStep st;
            st.t = k;
            st.alpha_bar = alpha_bar[k];
            st.alpha_bar_prev = alpha_bar[prev];
            st.alpha = st.alpha_bar / st.alpha_bar_prev;
            double b = 1.0 - st.alpha;
            double denom = 1.0 - st.alpha_bar;
            st.sigma = denom > 0 ? std::sqrt((1.0 - st.alpha_bar_prev) / denom * b) : 0.0;
            steps.push_back(st);
            prev = k;
        }
    }
};

/// x_s = sqrt(abar) x + sqrt(1 - abar) eps.
template <class T>
T forward_diffuse(T x, T eps, double alpha_bar) {
    return static_cast<T>(std::sqrt(alpha_bar) * x + std::sqrt(1.0 - alpha_bar) * eps);
}

template <class T>
T forward_diffuse(T x, T eps, std::size_t s, const NoiseSchedule& sched) {
    require(s >= 1 && s <= sched.S, "forward_diffuse: step out of range");
    return forward_diffuse(x, eps, sched.alpha_bar[s]);
}

/// x_{s-1} = (x_s - (1 - alpha)/sqrt(1 - abar) eps_hat)/sqrt(alpha) + tau sigma delta.
/// The noise term is dropped when `final_step`.
template <class T>
T denoise_step(T xs, T eps_hat, const DiffusionStep& st, double tau, T delta, bool final_step) {
    double c = st.alpha_bar < 1.0 ? (1.0 - st.alpha) / std::sqrt(1.0 - st.alpha_bar) : 0.0;
    double mean = (static_cast<double>(xs) - c * static_cast<double>(eps_hat)) / std::sqrt(st.alpha);
    if (final_step) return static_cast<T>(mean);
    return static_cast<T>(mean + tau * st.sigma * static_cast<double>(delta));
}

/// Sinusoidal embedding [cos(s f_i), sin(s f_i)], f_i = 10000^(-i/half).
template <class T>
Tensor<T> timestep_embedding(const std::vector<std::size_t>& s, std::size_t dim) {
    require(dim >= 2 && dim % 2 == 0, "timestep_embedding: dim must be even");
    std::size_t half = dim / 2;
    std::vector<T> out(s.size() * dim);
    for (std::size_t r = 0; r < s.size(); ++r)
        for (std::size_t i = 0; i < half; ++i) {
            double f = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
            double a = static_cast<double>(s[r]) * f;
            out[r * dim + i] = static_cast<T>(std::cos(a));
            out[r * dim + half + i] = static_cast<T>(std::sin(a));
        }
    return Tensor<T>({s.size(), dim}, std::move(out));
}

// ------------------------------------------------------------ diffusion head

struct DiffusionHeadConfig {
    std::size_t blocks = 3;
    std::size_t width = 256;
    std::size_t cond_width = 128;
    std::size_t time_dim = 64;
    std::size_t token_dim = 8;
    std::size_t train_steps = 1000;
    std::size_t sample_steps = 100;
    std::size_t repeats = 4;

    void validate() const {
        if (blocks < 1) throw ConfigError("diffusion head: blocks must be >= 1");
        if (width == 0 || cond_width == 0 || token_dim == 0) throw ConfigError("diffusion head: widths must be positive");
        if (time_dim < 2 || time_dim % 2) throw ConfigError("diffusion head: time_dim must be even");
        if (sample_steps < 1 || sample_steps > train_steps) throw ConfigError("diffusion head: sample_steps must lie in [1, train_steps]");
        if (repeats < 1) throw ConfigError("diffusion head: repeats must be >= 1");
    }
};

inline void to_json(nlohmann::json& j, const DiffusionHeadConfig& c) {
    j = {{"blocks", c.blocks},           {"width", c.width},
         {"cond_width", c.cond_width},   {"time_dim", c.time_dim},
         {"token_dim", c.token_dim},     {"train_steps", c.train_steps},
         {"sample_steps", c.sample_steps}, {"repeats", c.repeats}};
}
inline void from_json(const nlohmann::json& j, DiffusionHeadConfig& c) {
    c.blocks = j.at("blocks");
    c.width = j.at("width");
    c.cond_width = j.at("cond_width");
    c.time_dim = j.at("time_dim");
    c.token_dim = j.at("token_dim");
    c.train_steps = j.at("train_steps");
    c.sample_steps = j.at("sample_steps");
    c.repeats = j.at("repeats");
}

template <class T>
struct AdaLNBlock {
    nn::Linear<T> modulation, fc1, fc2;

    AdaLNBlock() = default;
    AdaLNBlock(std::size_t W, std::size_t C, RngStream& rng) : modulation(C, 3 * W, rng), fc1(W, W, rng), fc2(W, W, rng) {
        modulation.zero_init();
    }

    Tensor<T> operator()(const Tensor<T>& x, const Tensor<T>& c_act) const {
        std::size_t W = x.dim(1);
        auto mod = modulation(c_act);
        auto h = ada_layer_norm(x, slice(mod, 1, 0, W), slice(mod, 1, W, W));
        h = fc2(silu(fc1(h)));
        return add(x, mul(slice(mod, 1, 2 * W, W), h));
    }
    void collect(nn::ParamList<T>& out, const std::string& p) const {
        modulation.collect(out, p + ".modulation");
        fc1.collect(out, p + ".fc1");
        fc2.collect(out, p + ".fc2");
    }
};

/// Denoiser eps_theta(x_s, s, z). Modulations and output layer start at zero,
/// so an untrained head predicts eps_hat = 0.
template <class T>
class DiffusionHead {
public:
    DiffusionHead(DiffusionHeadConfig cfg, std::uint64_t seed = 0)
        : cfg_(cfg), schedule_(NoiseSchedule::linear(cfg.train_steps)), sampling_(schedule_.respaced(cfg.sample_steps)) {
        cfg_.validate();
        RngStream rng = RootRng(seed).stream("diffusion-head-init");
        in_proj_ = nn::Linear<T>(cfg_.token_dim, cfg_.width, rng);
        time_proj_ = nn::Linear<T>(cfg_.time_dim, cfg_.cond_width, rng);
        for (std::size_t b = 0; b < cfg_.blocks; ++b) blocks_.emplace_back(cfg_.width, cfg_.cond_width, rng);
        final_mod_ = nn::Linear<T>(cfg_.cond_width, 2 * cfg_.width, rng);
        final_mod_.zero_init();
        out_ = nn::Linear<T>(cfg_.width, cfg_.token_dim, rng);
        out_.zero_init();
    }

    const DiffusionHeadConfig& config() const { return cfg_; }
    const NoiseSchedule& schedule() const { return schedule_; }
    const NoiseSchedule& sampling_schedule() const { return sampling_; }
    void set_sample_steps(std::size_t n) {
        cfg_.sample_steps = n;
        sampling_ = schedule_.respaced(n);
    }

    /// x_s (R, D), z (R, C), one training-step index per row -> eps_hat (R, D).
    Tensor<T> operator()(const Tensor<T>& xs, const std::vector<std::size_t>& s, const Tensor<T>& z) const {
        require(xs.ndim() == 2 && xs.dim(1) == cfg_.token_dim, "diffusion head: x_s must be (R, token_dim)");
        require(z.ndim() == 2 && z.dim(0) == xs.dim(0) && z.dim(1) == cfg_.cond_width, "diffusion head: z must be (R, cond_width)");
        require(s.size() == xs.dim(0), "diffusion head: one step index per row");
        auto c = silu(add(z, time_proj_(timestep_embedding<T>(s, cfg_.time_dim))));
        auto h = in_proj_(xs);
        for (const auto& b : blocks_) h = b(h, c);
        auto mod = final_mod_(c);
        std::size_t W = cfg_.width;
        h = ada_layer_norm(h, slice(mod, 1, 0, W), slice(mod, 1, W, W));
        return out_(h);
    }

    nn::ParamList<T> parameters() const {
        nn::ParamList<T> out;
        in_proj_.collect(out, "head.in");
        time_proj_.collect(out, "head.time");
        for (std::size_t b = 0; b < blocks_.size(); ++b) blocks_[b].collect(out, "head.block" + std::to_string(b));
        final_mod_.collect(out, "head.final_mod");
        out_.collect(out, "head.out");
        return out;
    }

private:
    DiffusionHeadConfig cfg_;
    NoiseSchedule schedule_, sampling_;
    nn::Linear<T> in_proj_, time_proj_, final_mod_, out_;
    std::vector<AdaLNBlock<T>> blocks_;
};

/// Noised inputs for the denoising objective: per row s ~ U{1..S}, eps ~ N(0, I)
/// and x_s = sqrt(abar_s) x + sqrt(1 - abar_s) eps.
template <class T>
struct DiffusionTargets {
    Tensor<T> xs, eps;
    std::vector<std::size_t> s;
};

template <class T>
DiffusionTargets<T> diffusion_targets(const Tensor<T>& x, const NoiseSchedule& sched, RngStream& rng) {
    require(x.ndim() == 2, "diffusion_targets: x must be (R, D)");
    std::size_t R = x.dim(0), D = x.dim(1);
    DiffusionTargets<T> out;
    out.s.resize(R);
    std::vector<T> ca(R), cb(R);
    for (std::size_t r = 0; r < R; ++r) {
        out.s[r] = 1 + rng.below(sched.S);
        ca[r] = static_cast<T>(std::sqrt(sched.alpha_bar[out.s[r]]));
        cb[r] = static_cast<T>(std::sqrt(1.0 - sched.alpha_bar[out.s[r]]));
    }
    out.eps = Tensor<T>::randn({R, D}, rng);
    out.xs = add(mul(x, Tensor<T>({R, 1}, std::move(ca))), mul(out.eps, Tensor<T>({R, 1}, std::move(cb))));
    return out;
}

/// Mean over rows of ||eps_hat - eps||^2 (0 for no rows).
template <class T>
Tensor<T> noise_prediction_loss(const Tensor<T>& eps_hat, const Tensor<T>& eps) {
    require(eps_hat.shape() == eps.shape() && eps.ndim() == 2, "noise_prediction_loss: shape mismatch");
    if (eps.dim(0) == 0) return Tensor<T>::scalar(T(0));
    return scale(sum(square(sub(eps_hat, eps))), static_cast<T>(1.0 / static_cast<double>(eps.dim(0))));
}

/// Denoising loss for clean tokens x (M, D) conditioned on z (M, C); each
/// row is repeated `repeats` times with independent s and eps.
template <class T>
Tensor<T> diffusion_loss(const DiffusionHead<T>& head, const Tensor<T>& x, const Tensor<T>& z, RngStream& rng, std::size_t repeats = 1) {
    require(x.ndim() == 2 && z.ndim() == 2 && x.dim(0) == z.dim(0), "diffusion_loss: x and z must have one row per token");
    std::size_t M = x.dim(0);
    if (M == 0) return Tensor<T>::scalar(T(0));
    std::vector<std::size_t> rows;
    for (std::size_t r = 0; r < repeats; ++r)
        for (std::size_t i = 0; i < M; ++i) rows.push_back(i);
    auto xr = repeats == 1 ? x : index_rows(x, rows);
    auto zr = repeats == 1 ? z : index_rows(z, rows);
    auto tg = diffusion_targets(xr, head.schedule(), rng);
    return noise_prediction_loss(head(tg.xs, tg.s, zr), tg.eps);
}

/// Runs the reverse chain for every row of z (R, C). Row r draws its noise
/// from streams[r], so results do not depend on how rows are batched.
template <class T>
Tensor<T> sample_tokens(const DiffusionHead<T>& head, const Tensor<T>& z, double tau, std::vector<RngStream>& streams,
                        const NoiseSchedule& sampling) {
    NoGradGuard ng;
    std::size_t R = z.dim(0), D = head.config().token_dim;
    require(streams.size() == R, "sample_tokens: one stream per row");
    require(tau >= 0, "sample_tokens: temperature must be >= 0");
    std::vector<T> x(R * D);
    for (std::size_t r = 0; r < R; ++r)
        for (std::size_t d = 0; d < D; ++d) x[r * D + d] = static_cast<T>(streams[r].normal());
    const auto& steps = sampling.steps;
    for (std::size_t k = steps.size(); k-- > 0;) {
        const auto& st = steps[k];
        bool final_step = k == 0;
        auto eps_hat = head(Tensor<T>({R, D}, x), std::vector<std::size_t>(R, st.t), z);
        for (std::size_t r = 0; r < R; ++r)
            for (std::size_t d = 0; d < D; ++d) {
                T delta = final_step ? T(0) : static_cast<T>(streams[r].normal());
                x[r * D + d] = denoise_step(x[r * D + d], eps_hat[r * D + d], st, tau, delta, final_step);
            }
    }
    return Tensor<T>({R, D}, std::move(x));
}

template <class T>
Tensor<T> sample_tokens(const DiffusionHead<T>& head, const Tensor<T>& z, double tau, std::vector<RngStream>& streams) {
    return sample_tokens(head, z, tau, streams, head.sampling_schedule());
}

// ------------------------------------------------------- deterministic head

template <class T>
struct DeterHead {
    nn::Linear<T> fc1, fc2;

    DeterHead() = default;
    DeterHead(std::size_t C, std::size_t D, std::uint64_t seed = 0) {
        RngStream rng = RootRng(seed).stream("deter-head-init");
        fc1 = nn::Linear<T>(C, C, rng);
        fc2 = nn::Linear<T>(C, D, rng);
    }
    Tensor<T> operator()(const Tensor<T>& z) const { return fc2(silu(fc1(z))); }
    nn::ParamList<T> parameters() const {
        nn::ParamList<T> out;
        fc1.collect(out, "deter.fc1");
        fc2.collect(out, "deter.fc2");
        return out;
    }
};

/// w(i) = e^{-k} / (hw * sum_{j < min(cutoff, T)} e^{-j}) for lead frame k <
/// cutoff, else 0. Nonzero weights sum to 1 across all N tokens.
struct FrameWeights {
    std::size_t cutoff = 10;
    std::vector<double> weights;  // one per future token

    FrameWeights() = default;
    FrameWeights(const SequenceLayout& L, std::size_t cutoff_) : cutoff(cutoff_) {
        std::size_t frames = std::min(cutoff, L.T);
        double Z = 0;
        for (std::size_t j = 0; j < frames; ++j) Z += std::exp(-static_cast<double>(j));
        weights.assign(L.future_count(), 0.0);
        if (frames == 0) return;
        for (std::size_t i = 0; i < weights.size(); ++i) {
            std::size_t k = L.lead_frame(i);
            if (k < cutoff) weights[i] = std::exp(-static_cast<double>(k)) / (static_cast<double>(L.hw()) * Z);
        }
    }
};

/// Sum over rows of w_r ||x_r - x_hat_r||^2; x, x_hat (M, D), w M weights.
template <class T>
Tensor<T> deter_loss(const Tensor<T>& x, const Tensor<T>& x_hat, const std::vector<double>& w) {
    require(x.shape() == x_hat.shape() && x.ndim() == 2, "deter_loss: shape mismatch");
    require(w.size() == x.dim(0), "deter_loss: one weight per row");
    if (w.empty()) return Tensor<T>::scalar(T(0));
    std::vector<T> wt(w.begin(), w.end());
    return sum(mul(sum_last(square(sub(x_hat, x))), Tensor<T>({w.size()}, std::move(wt))));
}

}  // namespace omnicast
