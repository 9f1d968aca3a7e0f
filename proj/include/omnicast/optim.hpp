// Copyright (C) 2026 omnicast contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <numbers>
#include <span>
#include <vector>

#include "omnicast/tensor.hpp"

namespace omnicast {

/// Linear warmup followed by cosine decay to zero, indexed in epochs.
struct LrSchedule {
    double base_lr = 2e-4;
    double warmup_epochs = 10;
    double total_epochs = 100;

    double at_epoch(double epoch) const {
        if (warmup_epochs > 0 && epoch < warmup_epochs) return base_lr * epoch / warmup_epochs;
        double span = total_epochs - warmup_epochs;
        if (span <= 0) return base_lr;
        double progress = std::clamp((epoch - warmup_epochs) / span, 0.0, 1.0);
        return base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
    }
    /// `fraction` is training progress in [0,1] (epoch / total_epochs).
    double at_fraction(double fraction) const { return at_epoch(fraction * total_epochs); }
};

/// AdamW state: schedule, per-parameter first/second moments, step counter.
template <class T>
struct OptimizerState {
    LrSchedule schedule;
    double beta1 = 0.9;
    double beta2 = 0.95;
    double eps = 1e-8;
    double weight_decay = 1e-5;
    std::vector<std::vector<T>> m, v;
    std::size_t steps = 0;
};

/// One decoupled-weight-decay Adam update using each parameter's accumulated
/// grad. Non-finite gradients reject the whole step (state untouched).
/// Returns the learning rate that was applied.
template <class T>
double optimizer_step(OptimizerState<T>& st, std::span<Tensor<T>> params, double epoch_fraction) {
    require(epoch_fraction >= 0.0 && epoch_fraction <= 1.0, "optimizer_step: epoch fraction outside [0,1]");
    for (auto& p : params)
        for (T g : p.grad_data())
            if (!std::isfinite(g)) throw NumericFault("optimizer_step", "non-finite gradient, step rejected");
    if (st.m.empty()) {
        for (auto& p : params) {
            st.m.emplace_back(p.numel(), T(0));
            st.v.emplace_back(p.numel(), T(0));
        }
    }
    require(st.m.size() == params.size(), "optimizer_step: parameter list changed");
    double lr = st.schedule.at_fraction(epoch_fraction);
    ++st.steps;
    double bc1 = 1.0 - std::pow(st.beta1, static_cast<double>(st.steps));
    double bc2 = 1.0 - std::pow(st.beta2, static_cast<double>(st.steps));
    for (std::size_t k = 0; k < params.size(); ++k) {
        auto& p = params[k];
        require(st.m[k].size() == p.numel(), "optimizer_step: moment shape mismatch");
        auto g = p.grad_data();
        auto w = p.data();
        auto& m = st.m[k];
        auto& v = st.v[k];
        for (std::size_t i = 0; i < w.size(); ++i) {
            double gi = g.empty() ? 0.0 : static_cast<double>(g[i]);
            m[i] = static_cast<T>(st.beta1 * m[i] + (1 - st.beta1) * gi);
            v[i] = static_cast<T>(st.beta2 * v[i] + (1 - st.beta2) * gi * gi);
            double mh = m[i] / bc1, vh = v[i] / bc2;
            double wi = static_cast<double>(w[i]) * (1.0 - lr * st.weight_decay);
            w[i] = static_cast<T>(wi - lr * mh / (std::sqrt(vh) + st.eps));
        }
    }
    return lr;
}

/// Rescales gradients so their global L2 norm is at most max_norm.
/// Returns the norm before clipping.
template <class T>
double clip_grad_norm(std::span<Tensor<T>> params, double max_norm) {
    double sq = 0;
    for (auto& p : params)
        for (T g : p.grad_data()) sq += static_cast<double>(g) * g;
    double norm = std::sqrt(sq);
    if (norm > max_norm && norm > 0) {
        T f = static_cast<T>(max_norm / norm);
        for (auto& p : params)
            for (auto& g : p.grad_vec()) g *= f;
    }
    return norm;
}

template <class T>
void zero_grads(std::span<Tensor<T>> params) {
    for (auto& p : params) p.zero_grad();
}

}  // namespace omnicast
