// Copyright (C) 2026 omnicast contributors
// SPDX-License-Identifier: Apache-2.0

// Latent maps <-> flat token sequences, masking plans and [MASK] substitution.
//
// Two index spaces are used. Future-token index i runs over the N = T*h*w
// tokens to predict; its lead frame is i / (h*w). Sequence index j runs over
// the conditioning frame followed by the future tokens, so the positional
// frame index is j / (h*w), with 0 for the conditioning frame.

#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "omnicast/ops.hpp"

namespace omnicast {

struct SequenceLayout {
    std::size_t T = 1, h = 1, w = 1, D = 1;

    std::size_t hw() const { return h * w; }
    std::size_t future_count() const { return T * hw(); }
    std::size_t length() const { return (T + 1) * hw(); }
    std::size_t lead_frame(std::size_t i) const { return i / hw(); }

    struct Position {
        std::size_t frame, row, col;
    };
    /// Position of sequence index j (conditioning frame has frame 0).
    Position position(std::size_t j) const {
        require(j < length(), "SequenceLayout::position: index out of range");
        std::size_t s = j % hw();
        return {j / hw(), s / w, s % w};
    }
    bool operator==(const SequenceLayout&) const = default;
};

/// One conditioning frame plus T future frames of tokens; tokens are (hw, D)
/// row-major per frame, frames in order.
template <class T>
struct TokenSequence {
    SequenceLayout layout;
    std::vector<T> cond;    // hw * D
    std::vector<T> future;  // N * D
    std::vector<std::uint8_t> mask;  // N flags, 1 = masked

    std::span<const T> token(std::size_t i) const { return std::span<const T>(future).subspan(i * layout.D, layout.D); }
};

/// Latent (D, h, w) channel-first -> (h*w, D) token rows.
template <class T>
std::vector<T> latent_to_tokens(std::span<const T> latent, std::size_t D, std::size_t h, std::size_t w) {
    require(latent.size() == D * h * w, "latent_to_tokens: size mismatch");
    std::vector<T> out(latent.size());
    for (std::size_t d = 0; d < D; ++d)
        for (std::size_t p = 0; p < h * w; ++p) out[p * D + d] = latent[d * h * w + p];
    return out;
}

template <class T>
std::vector<T> tokens_to_latent(std::span<const T> tokens, std::size_t D, std::size_t h, std::size_t w) {
    require(tokens.size() == D * h * w, "tokens_to_latent: size mismatch");
    std::vector<T> out(tokens.size());
    for (std::size_t d = 0; d < D; ++d)
        for (std::size_t p = 0; p < h * w; ++p) out[d * h * w + p] = tokens[p * D + d];
    return out;
}

/// Initial latent and future latents, each (D, h, w) channel-first.
template <class T>
TokenSequence<T> build_sequence(std::span<const T> initial, const std::vector<std::span<const T>>& futures, std::size_t D,
                                std::size_t h, std::size_t w) {
    require(!futures.empty(), "build_sequence: need at least one future frame");
    TokenSequence<T> seq;
    seq.layout = {futures.size(), h, w, D};
    require(initial.size() == D * h * w, "build_sequence: initial latent shape mismatch");
    seq.cond = latent_to_tokens(initial, D, h, w);
    seq.future.reserve(seq.layout.future_count() * D);
    for (auto f : futures) {
        require(f.size() == D * h * w, "build_sequence: inconsistent future latent shapes");
        auto t = latent_to_tokens(f, D, h, w);
        seq.future.insert(seq.future.end(), t.begin(), t.end());
    }
    seq.mask.assign(seq.layout.future_count(), 0);
    return seq;
}

struct MaskPlan {
    double gamma = 0.0;
    std::vector<std::uint8_t> mask;
    std::uint64_t stream_seed = 0;

    std::size_t masked_count() const {
        std::size_t n = 0;
        for (auto m : mask) n += m;
        return n;
    }
};

/// round(gamma * N), half-up.
inline std::size_t mask_count(std::size_t N, double gamma) {
    return static_cast<std::size_t>(std::floor(gamma * static_cast<double>(N) + 0.5));
}

/// Exactly round(gamma*N) positions chosen uniformly over all N.
inline MaskPlan sample_mask(std::size_t N, double gamma, RngStream& rng) {
    require(N >= 1, "sample_mask: N must be >= 1");
    require(gamma >= 0.0 && gamma <= 1.0, "sample_mask: gamma must lie in [0, 1]");
    MaskPlan plan{gamma, std::vector<std::uint8_t>(N, 0), rng.seed()};
    std::size_t count = mask_count(N, gamma);
    std::vector<std::size_t> idx(N);
    for (std::size_t i = 0; i < N; ++i) idx[i] = i;
    rng.partial_shuffle(idx, count);
    for (std::size_t i = 0; i < count; ++i) plan.mask[idx[i]] = 1;
    return plan;
}

/// gamma ~ U[lo, hi], then sample_mask.
inline MaskPlan sample_mask(std::size_t N, double lo, double hi, RngStream& rng) {
    require(lo >= 0.0 && hi <= 1.0 && lo <= hi, "sample_mask: ratio range must lie within [0, 1]");
    return sample_mask(N, rng.uniform(lo, hi), rng);
}

inline std::vector<std::size_t> masked_indices(std::span<const std::uint8_t> mask) {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < mask.size(); ++i)
        if (mask[i]) out.push_back(i);
    return out;
}

/// Rows of `values` (R, C) at masked positions replaced by the shared
/// `mask_token` (C). Gradients reach the token through every masked row.
template <class T>
Tensor<T> corrupt(const Tensor<T>& values, std::span<const std::uint8_t> mask, const Tensor<T>& mask_token) {
    require(values.ndim() == 2 && values.dim(0) == mask.size(), "corrupt: values must be (N, C) with one flag per row");
    require(mask_token.ndim() == 1 && mask_token.dim(0) == values.dim(1), "corrupt: mask token width differs from value width");
    auto idx = masked_indices(mask);
    if (idx.empty()) return values;
    auto tokens = add(Tensor<T>({idx.size(), values.dim(1)}), mask_token);
    return scatter_rows(values, std::move(idx), tokens);
}

/// A (R, C) block filled with `mask_token` except rows `positions`, which
/// receive `rows` (|positions|, C). Used to re-expand an encoded visible set.
template <class T>
Tensor<T> expand_with_mask(const Tensor<T>& rows, const std::vector<std::size_t>& positions, std::size_t R, const Tensor<T>& mask_token) {
    require(mask_token.ndim() == 1, "expand_with_mask: mask token must be 1-D");
    auto base = add(Tensor<T>({R, mask_token.dim(0)}), mask_token);
    if (positions.empty()) return base;
    return scatter_rows(base, positions, rows);
}

}  // namespace omnicast
