// Copyright (C) 2026 omnicast contributors
// SPDX-License-Identifier: Apache-2.0

// VAE training, latent precomputation, and the stage-two loop that trains
// backbone + diffusion head (+ deterministic head) on masked token sequences.

#pragma once

#include <nlohmann/json.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "omnicast/backbone.hpp"
#include "omnicast/heads.hpp"
#include "omnicast/optim.hpp"
#include "omnicast/parallel.hpp"
#include "omnicast/vae.hpp"

namespace omnicast {

// ------------------------------------------------------------------- VAE fit

struct VaeTrainConfig {
    std::size_t epochs = 20;
    std::size_t batch_size = 16;
    double base_lr = 1e-3;
    double warmup_epochs = 1;
    double weight_decay = 1e-5;
    double grad_clip = 1.0;
    std::size_t max_batches_per_epoch = 0;  // 0 = full pass
    std::uint64_t seed = 0;
};

inline void to_json(nlohmann::json& j, const VaeTrainConfig& c) {
    j = {{"epochs", c.epochs},         {"batch_size", c.batch_size}, {"base_lr", c.base_lr},
         {"warmup_epochs", c.warmup_epochs}, {"weight_decay", c.weight_decay}, {"grad_clip", c.grad_clip},
         {"max_batches_per_epoch", c.max_batches_per_epoch}};
}
inline void from_json(const nlohmann::json& j, VaeTrainConfig& c) {
    c.epochs = j.at("epochs");
    c.batch_size = j.at("batch_size");
    c.base_lr = j.at("base_lr");
    c.warmup_epochs = j.at("warmup_epochs");
    c.weight_decay = j.at("weight_decay");
    c.grad_clip = j.at("grad_clip");
    c.max_batches_per_epoch = j.at("max_batches_per_epoch");
}

struct EpochRecord {
    std::size_t epoch = 0;
    double train_a = 0;  // reconstruction / diffusion
    double train_b = 0;  // KL / deterministic
    double train_total = 0;
    double val_total = 0;
    double lr = 0;
};

/// Rows `epoch,<a>,<b>,train_total,val_total,lr`.
inline std::string history_csv(const std::vector<EpochRecord>& h, const std::string& a, const std::string& b) {
    std::ostringstream os;
    os << "epoch," << a << "," << b << ",train_total,val_total,lr\n" << std::setprecision(9);
    for (auto& r : h) os << r.epoch << "," << r.train_a << "," << r.train_b << "," << r.train_total << "," << r.val_total << "," << r.lr << "\n";
    return os.str();
}

/// Reconstruction RMSE of decode(encode(x).mean) over frames (normalized space).
template <class T>
double vae_reconstruction_rmse(const Vae<T>& vae, std::span<const data::FieldGrid> frames, std::size_t batch = 16) {
    NoGradGuard ng;
    double se = 0;
    std::size_t n = 0;
    for (std::size_t s = 0; s < frames.size(); s += batch) {
        auto x = frames_to_tensor<T>(frames.subspan(s, std::min(batch, frames.size() - s)));
        auto r = vae.decode(vae.encode(x).mean);
        for (std::size_t i = 0; i < x.numel(); ++i) se += std::pow(static_cast<double>(r[i]) - static_cast<double>(x[i]), 2);
        n += x.numel();
    }
    return std::sqrt(se / static_cast<double>(n));
}

/// Fits the VAE on normalized training frames; keeps the parameters with the
/// lowest validation loss (total loss, posterior means, fixed noise).
template <class T>
std::vector<EpochRecord> train_vae(Vae<T>& vae, std::span<const data::FieldGrid> train, std::span<const data::FieldGrid> val,
                                   const VaeTrainConfig& cfg, const std::function<void(const EpochRecord&)>& on_epoch = {}) {
    require(!train.empty(), "train_vae: empty training set");
    require(cfg.batch_size >= 1 && cfg.epochs >= 1, "train_vae: epochs and batch size must be positive");
    auto params = vae.parameters();
    auto tensors = nn::tensors_of(params);
    OptimizerState<T> opt;
    opt.schedule = {cfg.base_lr, cfg.warmup_epochs, static_cast<double>(cfg.epochs)};
    opt.weight_decay = cfg.weight_decay;
    RootRng root(cfg.seed);
    std::size_t nb = (train.size() + cfg.batch_size - 1) / cfg.batch_size;
    if (cfg.max_batches_per_epoch) nb = std::min(nb, cfg.max_batches_per_epoch);
    std::vector<EpochRecord> hist;
    double best = std::numeric_limits<double>::infinity();
    auto best_snap = nn::snapshot(params);
    std::vector<std::size_t> order(train.size());
    for (std::size_t e = 0; e < cfg.epochs; ++e) {
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        RngStream shuf = root.stream("vae-shuffle", e);
        shuf.partial_shuffle(order, order.size());
        EpochRecord rec{e + 1};
        for (std::size_t b = 0; b < nb; ++b) {
            std::vector<data::FieldGrid> batch;
            for (std::size_t k = b * cfg.batch_size; k < std::min(order.size(), (b + 1) * cfg.batch_size); ++k) batch.push_back(train[order[k]]);
            RngStream noise = root.stream("vae-noise", e * nb + b);
            auto x = frames_to_tensor<T>(batch);
            auto lat = vae.encode(x, &noise);
            auto loss = vae_loss(x, vae.decode(lat.sample), lat, vae.config().kl_weight);
            zero_grads<T>(tensors);
            backward(loss.total);
            clip_grad_norm<T>(tensors, cfg.grad_clip);
            double frac = (static_cast<double>(e) + static_cast<double>(b) / static_cast<double>(nb)) / static_cast<double>(cfg.epochs);
            rec.lr = optimizer_step<T>(opt, tensors, std::min(frac, 1.0));
            rec.train_a += loss.recon.item() / static_cast<double>(nb);
            rec.train_b += loss.kl.item() / static_cast<double>(nb);
            rec.train_total += loss.total.item() / static_cast<double>(nb);
        }
        zero_grads<T>(tensors);
        if (!val.empty()) {
            NoGradGuard ng;
            double tot = 0;
            std::size_t cnt = 0;
            for (std::size_t s = 0; s < val.size(); s += cfg.batch_size) {
                auto x = frames_to_tensor<T>(val.subspan(s, std::min(cfg.batch_size, val.size() - s)));
                auto lat = vae.encode(x);
                auto loss = vae_loss(x, vae.decode(lat.mean), lat, vae.config().kl_weight);
                tot += loss.total.item() * static_cast<double>(x.dim(0));
                cnt += x.dim(0);
            }
            rec.val_total = tot / static_cast<double>(cnt);
        } else {
            rec.val_total = rec.train_total;
        }
        if (rec.val_total < best) {
            best = rec.val_total;
            best_snap = nn::snapshot(params);
        }
        hist.push_back(rec);
        if (on_epoch) on_epoch(rec);
    }
    nn::restore(best_snap, params);
    return hist;
}

// ----------------------------------------------------------------- latents

/// Per-frame latent token rows (h*w, D), standardized by LatentStats.
struct LatentSeries {
    std::size_t h = 0, w = 0, D = 0;
    std::vector<std::vector<float>> tokens;
    std::vector<std::int64_t> timestamps;

    std::size_t size() const { return tokens.size(); }
};

/// Posterior means for frames, as raw (unstandardized) token rows.
template <class T>
LatentSeries encode_series(const Vae<T>& vae, std::span<const data::FieldGrid> frames, std::size_t batch = 32) {
    NoGradGuard ng;
    LatentSeries out;
    out.D = vae.config().latent_dim;
    out.tokens.resize(frames.size());
    out.timestamps.resize(frames.size());
    std::size_t nb = (frames.size() + batch - 1) / batch;
    std::vector<std::size_t> hs(nb), ws(nb);
    parallel_for(nb, [&](std::size_t b) {
        std::size_t s = b * batch, n = std::min(batch, frames.size() - s);
        auto lat = vae.encode(frames_to_tensor<T>(frames.subspan(s, n))).mean;
        std::size_t D = lat.dim(1), h = lat.dim(2), w = lat.dim(3), per = D * h * w;
        hs[b] = h;
        ws[b] = w;
        for (std::size_t k = 0; k < n; ++k) {
            std::vector<float> lf(per);
            for (std::size_t i = 0; i < per; ++i) lf[i] = static_cast<float>(lat[k * per + i]);
            out.tokens[s + k] = latent_to_tokens<float>(lf, D, h, w);
            out.timestamps[s + k] = frames[s + k].timestamp_hours;
        }
    });
    if (nb) {
        out.h = hs[0];
        out.w = ws[0];
    }
    return out;
}

inline LatentStats compute_latent_stats(const LatentSeries& s) {
    require(s.size() > 0, "compute_latent_stats: empty series");
    double sum = 0, sq = 0;
    std::size_t n = 0;
    for (auto& t : s.tokens)
        for (float v : t) {
            sum += v;
            sq += static_cast<double>(v) * v;
            ++n;
        }
    double mu = sum / static_cast<double>(n);
    return {mu, std::sqrt(std::max(sq / static_cast<double>(n) - mu * mu, 1e-12))};
}

inline void standardize(LatentSeries& s, const LatentStats& st) {
    for (auto& t : s.tokens)
        for (auto& v : t) v = static_cast<float>((v - st.mean) / st.std);
}

// -------------------------------------------------------------- stage two

enum class LossVariant { standard, no_mse, mse_all_frames };

inline std::string to_string(LossVariant v) {
    switch (v) {
        case LossVariant::no_mse: return "no-mse";
        case LossVariant::mse_all_frames: return "mse-all-frames";
        default: return "default";
    }
}
inline LossVariant loss_variant_from(const std::string& s) {
    if (s == "default") return LossVariant::standard;
    if (s == "no-mse") return LossVariant::no_mse;
    if (s == "mse-all-frames") return LossVariant::mse_all_frames;
    throw ConfigError("unknown loss variant '" + s + "'");
}

struct TrainConfig {
    std::size_t epochs = 100;
    std::size_t batch_size = 32;
    std::size_t sequence_length = 8;
    double frame_interval_hours = 24.0;
    double mask_ratio_min = 0.5;
    double mask_ratio_max = 1.0;
    std::size_t mse_cutoff = 10;
    LossVariant variant = LossVariant::standard;
    std::uint64_t seed = 0;
    double base_lr = 2e-4;
    double warmup_epochs = 10;
    double weight_decay = 1e-5;
    double beta1 = 0.9;
    double beta2 = 0.95;
    double grad_clip = 1.0;
    std::size_t max_batches_per_epoch = 0;  // 0 = full pass
    std::size_t val_sequences = 64;

    /// Cutoff actually used for the frame weights under the loss variant.
    std::size_t effective_cutoff() const { return variant == LossVariant::mse_all_frames ? sequence_length : mse_cutoff; }

    void validate() const {
        if (epochs < 1 || batch_size < 1) throw ConfigError("train: epochs and batch_size must be positive");
        if (sequence_length < 1) throw ConfigError("train: sequence_length must be >= 1");
        if (!(0.0 <= mask_ratio_min && mask_ratio_min <= mask_ratio_max && mask_ratio_max <= 1.0))
            throw ConfigError("train: mask ratio range must lie within [0, 1]");
        if (frame_interval_hours <= 0) throw ConfigError("train: frame interval must be positive");
    }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
    j = {{"epochs", c.epochs},
         {"batch_size", c.batch_size},
         {"sequence_length", c.sequence_length},
         {"frame_interval_hours", c.frame_interval_hours},
         {"mask_ratio_min", c.mask_ratio_min},
         {"mask_ratio_max", c.mask_ratio_max},
         {"mse_cutoff", c.mse_cutoff},
         {"variant", to_string(c.variant)},
         {"base_lr", c.base_lr},
         {"warmup_epochs", c.warmup_epochs},
         {"weight_decay", c.weight_decay},
         {"beta1", c.beta1},
         {"beta2", c.beta2},
         {"grad_clip", c.grad_clip},
         {"max_batches_per_epoch", c.max_batches_per_epoch},
         {"val_sequences", c.val_sequences}};
}
inline void from_json(const nlohmann::json& j, TrainConfig& c) {
    c.epochs = j.at("epochs");
    c.batch_size = j.at("batch_size");
    c.sequence_length = j.at("sequence_length");
    c.frame_interval_hours = j.at("frame_interval_hours");
    c.mask_ratio_min = j.at("mask_ratio_min");
    c.mask_ratio_max = j.at("mask_ratio_max");
    c.mse_cutoff = j.at("mse_cutoff");
    c.variant = loss_variant_from(j.at("variant"));
    c.base_lr = j.at("base_lr");
    c.warmup_epochs = j.at("warmup_epochs");
    c.weight_decay = j.at("weight_decay");
    c.beta1 = j.at("beta1");
    c.beta2 = j.at("beta2");
    c.grad_clip = j.at("grad_clip");
    c.max_batches_per_epoch = j.at("max_batches_per_epoch");
    c.val_sequences = j.at("val_sequences");
}

/// Backbone + heads + the latent standardization they were trained with.
template <class T>
struct ForecastModel {
    SequenceLayout layout;
    Backbone<T> backbone;
    DiffusionHead<T> head;
    DeterHead<T> deter;
    LatentStats latent_stats;

    ForecastModel(const SequenceLayout& L, const BackboneConfig& bc, DiffusionHeadConfig hc, std::uint64_t seed)
        : layout(L), backbone(bc, L, seed), head(fix_head(hc, L, bc), seed), deter(bc.width, L.D, seed) {}

    nn::ParamList<T> parameters() const {
        auto out = backbone.parameters();
        for (auto& p : head.parameters()) out.push_back(p);
        for (auto& p : deter.parameters()) out.push_back(p);
        return out;
    }

private:
    static DiffusionHeadConfig fix_head(DiffusionHeadConfig hc, const SequenceLayout& L, const BackboneConfig& bc) {
        hc.token_dim = L.D;
        hc.cond_width = bc.width;
        return hc;
    }
};

struct StepLosses {
    double gen = 0;
    double deter = 0;
    double total = 0;
    double lr = 0;
};

/// Training sequence: conditioning frame `start`, future frames start+1..start+T.
inline TokenSequence<float> sequence_at(const LatentSeries& s, std::size_t start, std::size_t T) {
    require(start + T < s.size(), "sequence_at: window exceeds series");
    TokenSequence<float> seq;
    seq.layout = {T, s.h, s.w, s.D};
    seq.cond = s.tokens[start];
    for (std::size_t k = 1; k <= T; ++k) seq.future.insert(seq.future.end(), s.tokens[start + k].begin(), s.tokens[start + k].end());
    seq.mask.assign(seq.layout.future_count(), 0);
    return seq;
}

/// Forward pass of L_gen + L_deter for a batch whose masks are already set.
/// L_gen: mean over masked tokens; L_deter: weighted sum per sequence,
/// averaged over the batch.
template <class T>
struct LossTerms {
    Tensor<T> gen, deter, total;
};

template <class T>
LossTerms<T> compute_losses(const ForecastModel<T>& model, const TokenBatch<T>& batch, const TrainConfig& cfg, RngStream& rng,
                            bool training, std::size_t repeats) {
    const auto& L = model.layout;
    std::size_t B = batch.batch(), N = L.future_count(), C = model.backbone.config().width;
    RngStream drop = rng.child("dropout"), diff = rng.child("diffusion");
    auto z = reshape(model.backbone.forward(batch, drop, training), {B * N, C});
    std::vector<std::size_t> idx;
    for (std::size_t r = 0; r < B * N; ++r)
        if (batch.mask[r]) idx.push_back(r);
    auto x_all = reshape(batch.future, {B * N, L.D});
    LossTerms<T> out;
    if (idx.empty()) {
        out.gen = Tensor<T>::scalar(T(0));
        out.deter = Tensor<T>::scalar(T(0));
        out.total = add(out.gen, out.deter);
        return out;
    }
    auto x_m = index_rows(x_all, idx);
    auto z_m = index_rows(z, idx);
    out.gen = diffusion_loss(model.head, x_m, z_m, diff, repeats);
    if (cfg.variant == LossVariant::no_mse) {
        out.deter = Tensor<T>::scalar(T(0));
    } else {
        FrameWeights fw(L, cfg.effective_cutoff());
        std::vector<std::size_t> sel;
        std::vector<double> w;
        for (std::size_t k = 0; k < idx.size(); ++k) {
            double wi = fw.weights[idx[k] % N];
            if (wi > 0) {
                sel.push_back(k);
                w.push_back(wi / static_cast<double>(B));
            }
        }
        if (sel.empty()) {
            out.deter = Tensor<T>::scalar(T(0));
        } else {
            auto z_s = index_rows(z_m, sel);
            out.deter = deter_loss(index_rows(x_m, sel), model.deter(z_s), w);
        }
    }
    out.total = add(out.gen, out.deter);
    return out;
}

/// Per-example masks with gamma ~ U[min, max] from stream children.
inline void assign_masks(std::vector<TokenSequence<float>>& seqs, const TrainConfig& cfg, const RngStream& rng) {
    for (std::size_t b = 0; b < seqs.size(); ++b) {
        RngStream r = rng.child("mask", b);
        seqs[b].mask = sample_mask(seqs[b].layout.future_count(), cfg.mask_ratio_min, cfg.mask_ratio_max, r).mask;
    }
}

template <class T>
TokenBatch<T> to_batch(const std::vector<TokenSequence<float>>& seqs) {
    if constexpr (std::is_same_v<T, float>) {
        return make_batch(seqs);
    } else {
        std::vector<TokenSequence<T>> conv;
        for (auto& s : seqs) conv.push_back({s.layout, {s.cond.begin(), s.cond.end()}, {s.future.begin(), s.future.end()}, s.mask});
        return make_batch(conv);
    }
}

struct TrainState {
    std::size_t epoch = 0;
    std::size_t steps = 0;
};

/// One optimizer step on the sequences starting at `starts`.
template <class T>
StepLosses train_step(ForecastModel<T>& model, OptimizerState<T>& opt, const LatentSeries& series, const std::vector<std::size_t>& starts,
                      const TrainConfig& cfg, const RngStream& rng, double epoch_fraction, std::size_t repeats) {
    std::vector<TokenSequence<float>> seqs;
    for (auto s : starts) seqs.push_back(sequence_at(series, s, cfg.sequence_length));
    assign_masks(seqs, cfg, rng);
    auto batch = to_batch<T>(seqs);
    auto params = nn::tensors_of(model.parameters());
    RngStream r = rng.child("losses");
    auto losses = compute_losses(model, batch, cfg, r, true, repeats);
    if (!std::isfinite(static_cast<double>(losses.total.item()))) throw NumericFault("train_step", "non-finite loss, step aborted");
    zero_grads<T>(params);
    backward(losses.total);
    clip_grad_norm<T>(params, cfg.grad_clip);
    StepLosses out;
    out.lr = optimizer_step<T>(opt, params, std::clamp(epoch_fraction, 0.0, 1.0));
    zero_grads<T>(params);
    out.gen = losses.gen.item();
    out.deter = losses.deter.item();
    out.total = losses.total.item();
    return out;
}

/// Mean total loss over up to cfg.val_sequences evenly spaced windows, with
/// fixed masks/noise and dropout off.
template <class T>
double validation_loss(const ForecastModel<T>& model, const LatentSeries& val, const TrainConfig& cfg, std::size_t repeats) {
    NoGradGuard ng;
    if (val.size() <= cfg.sequence_length) return std::numeric_limits<double>::quiet_NaN();
    std::size_t windows = val.size() - cfg.sequence_length;
    std::size_t n = std::min(windows, std::max<std::size_t>(cfg.val_sequences, 1));
    RootRng root(cfg.seed ^ 0x76616cULL);
    double tot = 0;
    std::size_t count = 0;
    for (std::size_t s = 0; s < n; s += cfg.batch_size) {
        std::vector<std::size_t> starts;
        for (std::size_t k = s; k < std::min(n, s + cfg.batch_size); ++k) starts.push_back(k * windows / n);
        std::vector<TokenSequence<float>> seqs;
        for (auto st : starts) seqs.push_back(sequence_at(val, st, cfg.sequence_length));
        RngStream r = root.stream("val", s);
        assign_masks(seqs, cfg, r);
        auto batch = to_batch<T>(seqs);
        RngStream lr = r.child("losses");
        auto losses = compute_losses(model, batch, cfg, lr, false, repeats);
        tot += losses.total.item() * static_cast<double>(starts.size());
        count += starts.size();
    }
    return tot / static_cast<double>(count);
}

struct TrainResult {
    std::vector<EpochRecord> history;
    std::size_t best_epoch = 0;
    double best_val = std::numeric_limits<double>::infinity();
};

/// Trains for cfg.epochs and restores the parameters of the best validation
/// epoch (train total when no validation windows exist).
template <class T>
TrainResult train_run(ForecastModel<T>& model, const LatentSeries& train, const LatentSeries& val, const TrainConfig& cfg,
                      const std::function<void(const EpochRecord&)>& on_epoch = {}) {
    cfg.validate();
    require(train.size() > cfg.sequence_length, "train_run: training series shorter than one sequence");
    require(train.h == model.layout.h && train.w == model.layout.w && train.D == model.layout.D, "train_run: latent layout mismatch");
    require(cfg.sequence_length == model.layout.T, "train_run: sequence length differs from the model layout");
    auto params = model.parameters();
    OptimizerState<T> opt;
    opt.schedule = {cfg.base_lr, cfg.warmup_epochs, static_cast<double>(cfg.epochs)};
    opt.beta1 = cfg.beta1;
    opt.beta2 = cfg.beta2;
    opt.weight_decay = cfg.weight_decay;
    RootRng root(cfg.seed);
    std::size_t repeats = model.head.config().repeats;
    std::size_t windows = train.size() - cfg.sequence_length;
    std::size_t nb = (windows + cfg.batch_size - 1) / cfg.batch_size;
    if (cfg.max_batches_per_epoch) nb = std::min(nb, cfg.max_batches_per_epoch);
    TrainResult res;
    auto best_snap = nn::snapshot(params);
    std::vector<std::size_t> order(windows);
    for (std::size_t e = 0; e < cfg.epochs; ++e) {
        for (std::size_t i = 0; i < windows; ++i) order[i] = i;
        RngStream shuf = root.stream("shuffle", e);
        shuf.partial_shuffle(order, std::min(windows, nb * cfg.batch_size));
        EpochRecord rec{e + 1};
        std::size_t used = 0;
        for (std::size_t b = 0; b < nb; ++b) {
            std::vector<std::size_t> starts(order.begin() + static_cast<long>(b * cfg.batch_size),
                                            order.begin() + static_cast<long>(std::min(windows, (b + 1) * cfg.batch_size)));
            if (starts.empty()) break;
            double frac = (static_cast<double>(e) + static_cast<double>(b) / static_cast<double>(nb)) / static_cast<double>(cfg.epochs);
            auto st = train_step(model, opt, train, starts, cfg, root.stream("step", e * nb + b), frac, repeats);
            rec.train_a += st.gen;
            rec.train_b += st.deter;
            rec.train_total += st.total;
            rec.lr = st.lr;
            ++used;
        }
        rec.train_a /= static_cast<double>(used);
        rec.train_b /= static_cast<double>(used);
        rec.train_total /= static_cast<double>(used);
        double v = validation_loss(model, val, cfg, repeats);
        rec.val_total = std::isnan(v) ? rec.train_total : v;
        if (rec.val_total < res.best_val) {
            res.best_val = rec.val_total;
            res.best_epoch = rec.epoch;
            best_snap = nn::snapshot(params);
        }
        res.history.push_back(rec);
        if (on_epoch) on_epoch(rec);
    }
    nn::restore(best_snap, params);
    return res;
}

}  // namespace omnicast
