// Copyright (C) 2026 omnicast contributors
// SPDX-License-Identifier: Apache-2.0

// Bidirectional encoder-decoder transformer over token sequences. The encoder
// sees the conditioning frame plus visible future tokens; the decoder sees
// the full sequence with [MASK] re-inserted and emits one z per future token.

#pragma once

#include <nlohmann/json.hpp>

#include <cstdint>
#include <string>
#include <vector>

#include "omnicast/nn.hpp"
#include "omnicast/tokenizer.hpp"

namespace omnicast {

struct BackboneConfig {
    std::size_t encoder_layers = 4;
    std::size_t decoder_layers = 4;
    std::size_t heads = 4;
    std::size_t width = 128;
    double dropout = 0.1;

    void validate() const {
        if (width == 0 || heads == 0 || width % heads != 0) throw ConfigError("backbone: width must be divisible by heads");
        if (encoder_layers == 0 || decoder_layers == 0) throw ConfigError("backbone: need at least one encoder and decoder layer");
        if (dropout < 0 || dropout >= 1) throw ConfigError("backbone: dropout must lie in [0, 1)");
    }
};

inline void to_json(nlohmann::json& j, const BackboneConfig& c) {
    j = {{"encoder_layers", c.encoder_layers}, {"decoder_layers", c.decoder_layers}, {"heads", c.heads}, {"width", c.width},
         {"dropout", c.dropout}};
}
inline void from_json(const nlohmann::json& j, BackboneConfig& c) {
    c.encoder_layers = j.at("encoder_layers");
    c.decoder_layers = j.at("decoder_layers");
    c.heads = j.at("heads");
    c.width = j.at("width");
    c.dropout = j.at("dropout");
}

/// Pre-norm block: x + Drop(MHA(LN x)), then x + Drop(MLP(LN x)), GELU MLP x4.
template <class T>
struct TransformerBlock {
    nn::LayerNorm<T> norm1, norm2;
    nn::Linear<T> qkv, proj, fc1, fc2;
    std::size_t heads = 1;

    TransformerBlock() = default;
    TransformerBlock(std::size_t C, std::size_t heads_, RngStream& rng)
        : norm1(C), norm2(C), qkv(C, 3 * C, rng), proj(C, C, rng), fc1(C, 4 * C, rng), fc2(4 * C, C, rng), heads(heads_) {}

    /// x (B, L, C); key_valid optional (B*L flags).
    Tensor<T> operator()(const Tensor<T>& x, const std::vector<std::uint8_t>* key_valid, double p, RngStream& rng, bool training) const {
        std::size_t C = x.dim(2);
        auto h = qkv(norm1(x));
        auto a = attention(slice(h, 2, 0, C), slice(h, 2, C, C), slice(h, 2, 2 * C, C), heads, key_valid);
        RngStream r1 = rng.child("attn"), r2 = rng.child("mlp");
        auto y = add(x, dropout(proj(a), p, r1, training));
        auto m = fc2(gelu(fc1(norm2(y))));
        return add(y, dropout(m, p, r2, training));
    }
    void collect(nn::ParamList<T>& out, const std::string& pre) const {
        norm1.collect(out, pre + ".norm1");
        qkv.collect(out, pre + ".qkv");
        proj.collect(out, pre + ".proj");
        norm2.collect(out, pre + ".norm2");
        fc1.collect(out, pre + ".fc1");
        fc2.collect(out, pre + ".fc2");
    }
};

/// Batched token input: cond (B, hw, D), future (B, N, D), mask B*N flags.
template <class T>
struct TokenBatch {
    SequenceLayout layout;
    Tensor<T> cond, future;
    std::vector<std::uint8_t> mask;

    std::size_t batch() const { return cond.dim(0); }
    std::span<const std::uint8_t> mask_of(std::size_t b) const {
        return std::span<const std::uint8_t>(mask).subspan(b * layout.future_count(), layout.future_count());
    }
};

template <class T>
TokenBatch<T> make_batch(const std::vector<TokenSequence<T>>& seqs) {
    require(!seqs.empty(), "make_batch: empty batch");
    TokenBatch<T> b;
    b.layout = seqs.front().layout;
    std::vector<T> cond, fut;
    for (const auto& s : seqs) {
        require(s.layout == b.layout, "make_batch: sequences disagree on layout");
        cond.insert(cond.end(), s.cond.begin(), s.cond.end());
        fut.insert(fut.end(), s.future.begin(), s.future.end());
        b.mask.insert(b.mask.end(), s.mask.begin(), s.mask.end());
    }
    const auto& L = b.layout;
    b.cond = Tensor<T>({seqs.size(), L.hw(), L.D}, std::move(cond));
    b.future = Tensor<T>({seqs.size(), L.future_count(), L.D}, std::move(fut));
    return b;
}

/// Sequence lengths seen by the last forward pass (for inspection).
struct ForwardTrace {
    std::vector<std::size_t> encoder_lengths;  // per batch row, excluding padding
    std::size_t decoder_length = 0;
};

template <class T>
class Backbone {
public:
    Backbone(BackboneConfig cfg, SequenceLayout layout, std::uint64_t seed = 0) : cfg_(cfg), layout_(layout) {
        cfg_.validate();
        RngStream rng = RootRng(seed).stream("backbone-init");
        std::size_t C = cfg_.width;
        value_embed_ = nn::Linear<T>(layout_.D, C, rng);
        enc_time_ = nn::make_param<T>({layout_.T + 1, C}, rng, 0.02);
        enc_space_ = nn::make_param<T>({layout_.hw(), C}, rng, 0.02);
        for (std::size_t l = 0; l < cfg_.encoder_layers; ++l) enc_blocks_.emplace_back(C, cfg_.heads, rng);
        enc_norm_ = nn::LayerNorm<T>(C);
        dec_embed_ = nn::Linear<T>(C, C, rng);
        mask_token_ = nn::make_param<T>({C}, rng, 0.02);
        dec_time_ = nn::make_param<T>({layout_.T + 1, C}, rng, 0.02);
        dec_space_ = nn::make_param<T>({layout_.hw(), C}, rng, 0.02);
        for (std::size_t l = 0; l < cfg_.decoder_layers; ++l) dec_blocks_.emplace_back(C, cfg_.heads, rng);
        dec_norm_ = nn::LayerNorm<T>(C);
    }

    const BackboneConfig& config() const { return cfg_; }
    const SequenceLayout& layout() const { return layout_; }
    const Tensor<T>& mask_token() const { return mask_token_; }

    /// z (B, N, C), one vector per future position. `rng` feeds dropout only.
    Tensor<T> forward(const TokenBatch<T>& batch, RngStream& rng, bool training, ForwardTrace* trace = nullptr) const {
        const auto& L = layout_;
        require(batch.layout.T == L.T && batch.layout.hw() == L.hw() && batch.layout.D == L.D, "backbone: batch layout mismatch");
        const std::size_t B = batch.batch(), Lf = L.length(), C = cfg_.width, hw = L.hw(), N = L.future_count();
        require(batch.mask.size() == B * N, "backbone: mask size mismatch");

        auto tokens = concat<T>({batch.cond, batch.future}, 1);  // (B, Lf, D)
        auto emb = add(value_embed_(tokens), positional(enc_time_, enc_space_));

        // Visible set: conditioning + unmasked future tokens, padded per batch.
        std::vector<std::vector<std::size_t>> visible(B);
        std::size_t Lv = 0;
        for (std::size_t b = 0; b < B; ++b) {
            for (std::size_t j = 0; j < hw; ++j) visible[b].push_back(j);
            auto m = batch.mask_of(b);
            for (std::size_t i = 0; i < N; ++i)
                if (!m[i]) visible[b].push_back(hw + i);
            Lv = std::max(Lv, visible[b].size());
        }
        if (trace) {
            trace->encoder_lengths.clear();
            for (auto& v : visible) trace->encoder_lengths.push_back(v.size());
            trace->decoder_length = Lf;
        }
        std::vector<std::size_t> gather(B * Lv), real_rows, real_dest;
        std::vector<std::uint8_t> key_valid(B * Lv, 0);
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t k = 0; k < Lv; ++k) {
                bool real = k < visible[b].size();
                gather[b * Lv + k] = b * Lf + (real ? visible[b][k] : 0);
                key_valid[b * Lv + k] = real;
                if (real) {
                    real_rows.push_back(b * Lv + k);
                    real_dest.push_back(b * Lf + visible[b][k]);
                }
            }
        auto x = reshape(index_rows(reshape(emb, {B * Lf, C}), gather), {B, Lv, C});
        for (std::size_t l = 0; l < enc_blocks_.size(); ++l) {
            RngStream r = rng.child("enc", l);
            x = enc_blocks_[l](x, &key_valid, cfg_.dropout, r, training);
        }
        x = dec_embed_(enc_norm_(x));

        auto enc_rows = index_rows(reshape(x, {B * Lv, C}), real_rows);
        auto y = reshape(expand_with_mask(enc_rows, real_dest, B * Lf, mask_token_), {B, Lf, C});
        y = add(y, positional(dec_time_, dec_space_));
        for (std::size_t l = 0; l < dec_blocks_.size(); ++l) {
            RngStream r = rng.child("dec", l);
            y = dec_blocks_[l](y, nullptr, cfg_.dropout, r, training);
        }
        y = dec_norm_(y);
        return slice(y, 1, hw, N);
    }

    nn::ParamList<T> parameters() const {
        nn::ParamList<T> out;
        value_embed_.collect(out, "value_embed");
        out.push_back({"enc.time", enc_time_});
        out.push_back({"enc.space", enc_space_});
        for (std::size_t l = 0; l < enc_blocks_.size(); ++l) enc_blocks_[l].collect(out, "enc.block" + std::to_string(l));
        enc_norm_.collect(out, "enc.norm");
        dec_embed_.collect(out, "dec.embed");
        out.push_back({"dec.mask_token", mask_token_});
        out.push_back({"dec.time", dec_time_});
        out.push_back({"dec.space", dec_space_});
        for (std::size_t l = 0; l < dec_blocks_.size(); ++l) dec_blocks_[l].collect(out, "dec.block" + std::to_string(l));
        dec_norm_.collect(out, "dec.norm");
        return out;
    }

private:
    /// time[j / hw] + space[j % hw] for every sequence index, shape (Lf, C).
    Tensor<T> positional(const Tensor<T>& time, const Tensor<T>& space) const {
        std::vector<std::size_t> ti, si;
        for (std::size_t j = 0; j < layout_.length(); ++j) {
            ti.push_back(j / layout_.hw());
            si.push_back(j % layout_.hw());
        }
        return add(index_rows(time, ti), index_rows(space, si));
    }

    BackboneConfig cfg_;
    SequenceLayout layout_;
    nn::Linear<T> value_embed_, dec_embed_;
    Tensor<T> enc_time_, enc_space_, dec_time_, dec_space_, mask_token_;
    std::vector<TransformerBlock<T>> enc_blocks_, dec_blocks_;
    nn::LayerNorm<T> enc_norm_, dec_norm_;
};

}  // namespace omnicast
