// Copyright (C) 2026 omnicast contributors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>

#include "omnicast/training.hpp"

using namespace omnicast;

namespace {

const SequenceLayout kLayout{2, 2, 2, 3};

BackboneConfig small_backbone(double dropout = 0.0) {
    BackboneConfig c;
    c.encoder_layers = 2;
    c.decoder_layers = 1;
    c.heads = 2;
    c.width = 16;
    c.dropout = dropout;
    return c;
}

TokenSequence<double> random_sequence(std::uint64_t seed, double gamma) {
    RngStream r(seed);
    TokenSequence<double> s;
    s.layout = kLayout;
    s.cond.resize(kLayout.hw() * kLayout.D);
    s.future.resize(kLayout.future_count() * kLayout.D);
    r.fill_normal(s.cond);
    r.fill_normal(s.future);
    s.mask = sample_mask(kLayout.future_count(), gamma, r).mask;
    return s;
}

double max_abs_diff(const Tensor<double>& a, const Tensor<double>& b) {
    double m = 0;
    for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

}  // namespace

TEST(Backbone, OutputHasOneVectorPerFutureToken) {
    Backbone<double> bb(small_backbone(), kLayout, 1);
    RngStream r(0);
    auto z = bb.forward(make_batch<double>({random_sequence(1, 0.5), random_sequence(2, 0.5)}), r, false);
    EXPECT_EQ(z.shape(), (Shape{2, kLayout.future_count(), 16}));
}

TEST(Backbone, EncoderSeesOnlyVisibleTokens) {
    Backbone<double> bb(small_backbone(), kLayout, 1);
    RngStream r(0);
    auto all = random_sequence(1, 1.0);
    auto none = random_sequence(2, 0.0);
    auto half = random_sequence(3, 0.5);
    ForwardTrace tr;
    bb.forward(make_batch<double>({all, none, half}), r, false, &tr);
    EXPECT_EQ(tr.encoder_lengths, (std::vector<std::size_t>{4, 12, 8}));
    EXPECT_EQ(tr.decoder_length, 12u);
}

TEST(Backbone, BatchRowsAreIndependent) {
    Backbone<double> bb(small_backbone(), kLayout, 3);
    RngStream r(0);
    auto a = random_sequence(10, 0.75), b = random_sequence(11, 0.25), c = random_sequence(12, 1.0);
    auto abc = bb.forward(make_batch<double>({a, b, c}), r, false);
    auto cab = bb.forward(make_batch<double>({c, a, b}), r, false);
    std::size_t per = kLayout.future_count() * 16;
    std::size_t perm[3] = {1, 2, 0};
    for (std::size_t k = 0; k < 3; ++k)
        for (std::size_t i = 0; i < per; ++i) EXPECT_NEAR(abc[k * per + i], cab[perm[k] * per + i], 1e-12);
}

TEST(Backbone, MaskedValuesDoNotLeak) {
    Backbone<double> bb(small_backbone(), kLayout, 4);
    RngStream r(0);
    auto s = random_sequence(20, 0.5);
    auto z1 = bb.forward(make_batch<double>({s}), r, false);
    auto t = s;
    for (auto i : masked_indices(t.mask))
        for (std::size_t d = 0; d < kLayout.D; ++d) t.future[i * kLayout.D + d] = 1e3 * static_cast<double>(i + d + 1);
    auto z2 = bb.forward(make_batch<double>({t}), r, false);
    EXPECT_EQ(max_abs_diff(z1, z2), 0.0);
}

TEST(Backbone, VisibleTokensInfluenceEveryPosition) {
    Backbone<double> bb(small_backbone(), kLayout, 5);
    RngStream r(0);
    auto s = random_sequence(21, 0.5);
    auto z1 = bb.forward(make_batch<double>({s}), r, false);
    auto t = s;
    std::size_t vis = 0;
    while (t.mask[vis]) ++vis;
    t.future[vis * kLayout.D] += 1.0;
    auto z2 = bb.forward(make_batch<double>({t}), r, false);
    for (std::size_t i = 0; i < kLayout.future_count(); ++i) {
        double d = 0;
        for (std::size_t c = 0; c < 16; ++c) d = std::max(d, std::abs(z1[i * 16 + c] - z2[i * 16 + c]));
        EXPECT_GT(d, 1e-9) << "position " << i;
    }
}

TEST(Backbone, EvalModeIsDeterministicAndTrainModeUsesDropout) {
    Backbone<double> bb(small_backbone(0.3), kLayout, 6);
    auto batch = make_batch<double>({random_sequence(30, 0.5)});
    RngStream r1(1), r2(2);
    EXPECT_EQ(max_abs_diff(bb.forward(batch, r1, false), bb.forward(batch, r2, false)), 0.0);
    RngStream a(1), b(1), c(2);
    auto ta = bb.forward(batch, a, true), tb = bb.forward(batch, b, true), tc = bb.forward(batch, c, true);
    EXPECT_EQ(max_abs_diff(ta, tb), 0.0);
    EXPECT_GT(max_abs_diff(ta, tc), 1e-6);
}

TEST(Backbone, LayoutMismatchIsRejected) {
    Backbone<double> bb(small_backbone(), kLayout, 1);
    RngStream r(0);
    auto s = random_sequence(1, 0.5);
    s.layout.T = 3;
    s.future.resize(3 * 4 * 3);
    s.mask.resize(12);
    EXPECT_THROW(bb.forward(make_batch<double>({s}), r, false), ContractViolation);
}

TEST(Backbone, InvalidConfigIsRejected) {
    auto c = small_backbone();
    c.heads = 3;
    EXPECT_THROW(c.validate(), ConfigError);
    c = small_backbone();
    c.dropout = 1.0;
    EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Backbone, GradientsMatchFiniteDifferences) {
    BackboneConfig c = small_backbone();
    c.width = 8;
    c.encoder_layers = c.decoder_layers = 1;
    SequenceLayout L{1, 1, 2, 2};
    Backbone<double> bb(c, L, 7);
    TokenSequence<double> s;
    s.layout = L;
    s.cond = {0.3, -0.2, 0.5, 0.1};
    s.future = {0.7, -0.4, -0.6, 0.2};
    s.mask = {1, 0};
    auto batch = make_batch<double>({s});
    RngStream r(0), dir_rng(3);
    auto dir = Tensor<double>::randn({1, 2, 8}, dir_rng);
    auto params = bb.parameters();
    auto loss_fn = [&] { return sum(mul(bb.forward(batch, r, false), dir)); };
    backward(loss_fn());
    for (auto& p : params) {
        auto g = p.tensor.grad();
        for (std::size_t i = 0; i < p.tensor.numel(); i += std::max<std::size_t>(1, p.tensor.numel() / 5)) {
            NoGradGuard ng;
            double orig = p.tensor[i], h = 1e-5;
            p.tensor[i] = orig + h;
            double lp = loss_fn().item();
            p.tensor[i] = orig - h;
            double lm = loss_fn().item();
            p.tensor[i] = orig;
            double fd = (lp - lm) / (2 * h);
            EXPECT_NEAR(g[i], fd, 1e-6 + 1e-4 * std::abs(fd)) << p.name << "[" << i << "]";
        }
    }
}

// A probe added to z only at unmasked positions is reachable solely through
// unmasked-position loss terms, so the masked-only objective must not move it.
TEST(Backbone, LossIgnoresUnmaskedPositions) {
    SequenceLayout L{2, 2, 2, 3};
    BackboneConfig bc = small_backbone();
    DiffusionHeadConfig hc;
    hc.blocks = 1;
    hc.width = 16;
    hc.time_dim = 8;
    hc.train_steps = 50;
    hc.sample_steps = 10;
    ForecastModel<double> model(L, bc, hc, 9);
    // Non-zero head output so the diffusion loss depends on z.
    RngStream pr(1);
    for (auto& p : model.head.parameters()) {
        std::vector<double> v(p.tensor.numel());
        pr.fill_normal(v);
        for (auto& x : v) x *= 0.2;
        p.tensor.assign(v);
    }
    auto s = random_sequence(40, 0.5);
    auto batch = make_batch<double>({s});
    std::size_t N = L.future_count(), C = bc.width;
    auto probe = Tensor<double>({N, C}).set_requires_grad();
    RngStream r(0);
    auto z = reshape(model.backbone.forward(batch, r, false), {N, C});
    auto zp = add(z, probe);
    auto idx = masked_indices(s.mask);
    auto x_m = index_rows(reshape(batch.future, {N, L.D}), idx);
    auto z_m = index_rows(zp, idx);
    RngStream dr(2);
    FrameWeights fw(L, 10);
    std::vector<double> w;
    for (auto i : idx) w.push_back(fw.weights[i]);
    auto loss = add(diffusion_loss(model.head, x_m, z_m, dr, 2), deter_loss(x_m, model.deter(z_m), w));
    backward(loss);
    auto g = probe.grad();
    double masked_norm = 0;
    for (std::size_t i = 0; i < N; ++i)
        for (std::size_t c = 0; c < C; ++c) {
            if (s.mask[i])
                masked_norm += std::abs(g[i * C + c]);
            else
                EXPECT_EQ(g[i * C + c], 0.0);
        }
    EXPECT_GT(masked_norm, 0.0);
}
