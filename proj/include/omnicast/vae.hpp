// Copyright (C) 2026 omnicast contributors
// SPDX-License-Identifier: Apache-2.0

// Per-frame convolutional VAE (UNet-style stages, no attention, no skip
// connections across the bottleneck).

#pragma once

#include <nlohmann/json.hpp>

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "omnicast/data.hpp"
#include "omnicast/nn.hpp"

namespace omnicast {

struct VaeConfig {
    std::size_t in_channels = 4;
    std::size_t base_channels = 32;
    std::vector<std::size_t> mults{1, 2, 4};
    std::size_t blocks = 2;
    std::size_t latent_dim = 8;
    double kl_weight = 5e-5;
    double logvar_min = -30.0;
    double logvar_max = 20.0;

    /// Product of the stride-2 downsamplings between stages.
    std::size_t downsample() const { return std::size_t{1} << (mults.size() - 1); }

    void validate() const {
        if (in_channels == 0 || base_channels == 0 || latent_dim == 0) throw ConfigError("vae: channel counts must be positive");
        if (mults.empty()) throw ConfigError("vae: mults must be non-empty");
        if (blocks == 0) throw ConfigError("vae: blocks must be >= 1");
        if (kl_weight < 0) throw ConfigError("vae: kl_weight must be >= 0");
        if (!(logvar_min < logvar_max)) throw ConfigError("vae: empty log-variance range");
    }

    /// (D, H/f, W/f) for an H x W input.
    std::vector<std::size_t> latent_shape(std::size_t H, std::size_t W) const {
        check_grid(H, W);
        return {latent_dim, H / downsample(), W / downsample()};
    }

    void check_grid(std::size_t H, std::size_t W) const {
        std::size_t f = downsample();
        require(H % f == 0 && W % f == 0, "vae: downsample factor " + std::to_string(f) + " does not divide grid " +
                                              std::to_string(H) + "x" + std::to_string(W));
    }
};

inline void to_json(nlohmann::json& j, const VaeConfig& c) {
    j = {{"in_channels", c.in_channels}, {"base_channels", c.base_channels}, {"mults", c.mults}, {"blocks", c.blocks},
         {"latent_dim", c.latent_dim},   {"kl_weight", c.kl_weight},         {"logvar_min", c.logvar_min},
         {"logvar_max", c.logvar_max}};
}
inline void from_json(const nlohmann::json& j, VaeConfig& c) {
    c.in_channels = j.at("in_channels");
    c.base_channels = j.at("base_channels");
    c.mults = j.at("mults").get<std::vector<std::size_t>>();
    c.blocks = j.at("blocks");
    c.latent_dim = j.at("latent_dim");
    c.kl_weight = j.at("kl_weight");
    c.logvar_min = j.value("logvar_min", -30.0);
    c.logvar_max = j.value("logvar_max", 20.0);
}

/// Latent for a batch of frames; every tensor is (B, D, h, w).
template <class T>
struct LatentMap {
    Tensor<T> mean, logvar, sample, noise;
};

template <class T>
struct ResBlock {
    nn::Conv2d<T> conv1, conv2, skip;
    bool has_skip = false;

    ResBlock() = default;
    ResBlock(std::size_t in, std::size_t out, RngStream& rng)
        : conv1(in, out, 3, 1, 1, rng), conv2(out, out, 3, 1, 1, rng, 0.5), has_skip(in != out) {
        if (has_skip) skip = nn::Conv2d<T>(in, out, 1, 1, 0, rng);
    }

    Tensor<T> operator()(const Tensor<T>& x) const {
        auto h = conv2(silu(conv1(silu(x))));
        return add(has_skip ? skip(x) : x, h);
    }
    void collect(nn::ParamList<T>& out, const std::string& p) const {
        conv1.collect(out, p + ".conv1");
        conv2.collect(out, p + ".conv2");
        if (has_skip) skip.collect(out, p + ".skip");
    }
};

template <class T>
class Vae {
public:
    explicit Vae(VaeConfig cfg, std::uint64_t seed = 0) : cfg_(std::move(cfg)) {
        cfg_.validate();
        RngStream rng = RootRng(seed).stream("vae-init");
        std::size_t ch = cfg_.base_channels;
        enc_in_ = nn::Conv2d<T>(cfg_.in_channels, ch, 3, 1, 1, rng);
        for (std::size_t s = 0; s < cfg_.mults.size(); ++s) {
            std::size_t out = cfg_.base_channels * cfg_.mults[s];
            for (std::size_t b = 0; b < cfg_.blocks; ++b) {
                enc_blocks_.emplace_back(ch, out, rng);
                ch = out;
            }
            if (s + 1 < cfg_.mults.size()) enc_down_.emplace_back(ch, ch, 3, 2, 1, rng);
        }
        enc_out_ = nn::Conv2d<T>(ch, 2 * cfg_.latent_dim, 3, 1, 1, rng);

        dec_in_ = nn::Conv2d<T>(cfg_.latent_dim, ch, 3, 1, 1, rng);
        for (std::size_t s = cfg_.mults.size(); s-- > 0;) {
            std::size_t out = cfg_.base_channels * cfg_.mults[s];
            for (std::size_t b = 0; b < cfg_.blocks; ++b) {
                dec_blocks_.emplace_back(ch, out, rng);
                ch = out;
            }
            if (s > 0) dec_up_.emplace_back(ch, ch, 3, 1, 1, rng);
        }
        dec_out_ = nn::Conv2d<T>(ch, cfg_.in_channels, 3, 1, 1, rng);
    }

    const VaeConfig& config() const { return cfg_; }

    /// x (B, V, H, W) normalized frames. With `noise_rng` the sample is
    /// mean + exp(logvar/2) * eps; without it the sample is the mean.
    LatentMap<T> encode(const Tensor<T>& x, RngStream* noise_rng = nullptr) const {
        require(x.ndim() == 4 && x.dim(1) == cfg_.in_channels,
                "vae.encode: expected (B," + std::to_string(cfg_.in_channels) + ",H,W), got " + shape_str(x.shape()));
        cfg_.check_grid(x.dim(2), x.dim(3));
        auto h = enc_in_(x);
        std::size_t bi = 0;
        for (std::size_t s = 0; s < cfg_.mults.size(); ++s) {
            for (std::size_t b = 0; b < cfg_.blocks; ++b) h = enc_blocks_[bi++](h);
            if (s + 1 < cfg_.mults.size()) h = enc_down_[s](h);
        }
        h = enc_out_(silu(h));
        LatentMap<T> lat;
        std::size_t D = cfg_.latent_dim;
        lat.mean = slice(h, 1, 0, D);
        lat.logvar = clamp(slice(h, 1, D, D), static_cast<T>(cfg_.logvar_min), static_cast<T>(cfg_.logvar_max));
        if (noise_rng) {
            lat.noise = Tensor<T>::randn(lat.mean.shape(), *noise_rng);
            lat.sample = add(lat.mean, mul(exp(scale(lat.logvar, T(0.5))), lat.noise));
        } else {
            lat.noise = Tensor<T>(lat.mean.shape());
            lat.sample = lat.mean;
        }
        return lat;
    }

    /// z (B, D, h, w) -> (B, V, h*f, w*f).
    Tensor<T> decode(const Tensor<T>& z) const {
        require(z.ndim() == 4 && z.dim(1) == cfg_.latent_dim,
                "vae.decode: expected (B," + std::to_string(cfg_.latent_dim) + ",h,w), got " + shape_str(z.shape()));
        auto h = dec_in_(z);
        std::size_t bi = 0, ui = 0;
        for (std::size_t s = cfg_.mults.size(); s-- > 0;) {
            for (std::size_t b = 0; b < cfg_.blocks; ++b) h = dec_blocks_[bi++](h);
            if (s > 0) h = dec_up_[ui++](upsample2x(h));
        }
        return dec_out_(silu(h));
    }

    nn::ParamList<T> parameters() const {
        nn::ParamList<T> out;
        enc_in_.collect(out, "enc.in");
        for (std::size_t i = 0; i < enc_blocks_.size(); ++i) enc_blocks_[i].collect(out, "enc.block" + std::to_string(i));
        for (std::size_t i = 0; i < enc_down_.size(); ++i) enc_down_[i].collect(out, "enc.down" + std::to_string(i));
        enc_out_.collect(out, "enc.out");
        dec_in_.collect(out, "dec.in");
        for (std::size_t i = 0; i < dec_blocks_.size(); ++i) dec_blocks_[i].collect(out, "dec.block" + std::to_string(i));
        for (std::size_t i = 0; i < dec_up_.size(); ++i) dec_up_[i].collect(out, "dec.up" + std::to_string(i));
        dec_out_.collect(out, "dec.out");
        return out;
    }

private:
    VaeConfig cfg_;
    nn::Conv2d<T> enc_in_, enc_out_, dec_in_, dec_out_;
    std::vector<ResBlock<T>> enc_blocks_, dec_blocks_;
    std::vector<nn::Conv2d<T>> enc_down_, dec_up_;
};

template <class T>
struct VaeLoss {
    Tensor<T> total, recon, kl;
};

/// MSE reconstruction + kl_weight * KL(q || N(0, I)), KL averaged over latent
/// elements.
template <class T>
VaeLoss<T> vae_loss(const Tensor<T>& frame, const Tensor<T>& recon, const LatentMap<T>& lat, double kl_weight) {
    require(frame.shape() == recon.shape(), "vae_loss: frame/reconstruction shape mismatch");
    VaeLoss<T> out;
    out.recon = mean(square(sub(recon, frame)));
    out.kl = kl_divergence(lat.mean, lat.logvar);
    out.total = add(out.recon, scale(out.kl, static_cast<T>(kl_weight)));
    return out;
}

/// Mean over elements of 0.5 (mu^2 + sigma^2 - 1 - log sigma^2).
template <class T>
Tensor<T> kl_divergence(const Tensor<T>& mu, const Tensor<T>& logvar) {
    require(mu.shape() == logvar.shape(), "kl_divergence: shape mismatch");
    auto terms = sub(add(square(mu), exp(logvar)), add_scalar(logvar, T(1)));
    return scale(mean(terms), T(0.5));
}

/// Continuous latent: (bits V H W) / (bits D (H/f)(W/f)).
inline double compression_ratio(std::size_t V, std::size_t H, std::size_t W, std::size_t f, double bits, std::size_t D) {
    require(V > 0 && H > 0 && W > 0 && f > 0 && D > 0 && bits > 0, "compression_ratio: dimensions must be positive");
    require(H % f == 0 && W % f == 0, "compression_ratio: f must divide H and W");
    double hw = static_cast<double>(H / f) * static_cast<double>(W / f);
    return bits * static_cast<double>(V * H * W) / (bits * static_cast<double>(D) * hw);
}

/// Discrete tokens of `vocab_bits` each: (bits V H W) / (vocab_bits (H/f)(W/f)).
inline double compression_ratio_discrete(std::size_t V, std::size_t H, std::size_t W, std::size_t f, double bits, double vocab_bits) {
    require(V > 0 && H > 0 && W > 0 && f > 0 && bits > 0 && vocab_bits > 0, "compression_ratio: dimensions must be positive");
    require(H % f == 0 && W % f == 0, "compression_ratio: f must divide H and W");
    double hw = static_cast<double>(H / f) * static_cast<double>(W / f);
    return bits * static_cast<double>(V * H * W) / (vocab_bits * hw);
}

/// Scalar statistics used to standardize latent tokens for stage two.
struct LatentStats {
    double mean = 0.0;
    double std = 1.0;
};

inline void to_json(nlohmann::json& j, const LatentStats& s) { j = {{"mean", s.mean}, {"std", s.std}}; }
inline void from_json(const nlohmann::json& j, LatentStats& s) {
    s.mean = j.at("mean");
    s.std = j.at("std");
}

// --------------------------------------------------------- frame <-> tensor

template <class T>
Tensor<T> frames_to_tensor(std::span<const data::FieldGrid> frames) {
    require(!frames.empty(), "frames_to_tensor: no frames");
    const auto& f0 = frames.front();
    std::vector<T> buf;
    buf.reserve(frames.size() * f0.values.size());
    for (const auto& f : frames) {
        require(f.V == f0.V && f.H == f0.H && f.W == f0.W, "frames_to_tensor: inconsistent frame shapes");
        for (float v : f.values) buf.push_back(static_cast<T>(v));
    }
    return Tensor<T>({frames.size(), f0.V, f0.H, f0.W}, std::move(buf));
}

/// Inverse of frames_to_tensor; metadata copied from `like`.
template <class T>
std::vector<data::FieldGrid> tensor_to_frames(const Tensor<T>& x, const data::FieldGrid& like) {
    require(x.ndim() == 4 && x.dim(1) == like.V && x.dim(2) == like.H && x.dim(3) == like.W, "tensor_to_frames: shape mismatch");
    std::vector<data::FieldGrid> out;
    std::size_t n = like.values.size();
    for (std::size_t b = 0; b < x.dim(0); ++b) {
        data::FieldGrid g(like.V, like.H, like.W, like.variables, like.grid);
        for (std::size_t i = 0; i < n; ++i) g.values[i] = static_cast<float>(x[b * n + i]);
        out.push_back(std::move(g));
    }
    return out;
}

}  // namespace omnicast
