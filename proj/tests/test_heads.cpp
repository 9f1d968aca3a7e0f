// Copyright (C) 2026 omnicast contributors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <memory>
#include <numeric>

#include "omnicast/heads.hpp"
#include "omnicast/optim.hpp"

using namespace omnicast;

namespace {

struct Moments {
    double mean = 0, std = 0;
};

template <class V>
Moments moments(const V& v) {
    double m = 0, s = 0;
    for (double x : v) m += x;
    m /= static_cast<double>(v.size());
    for (double x : v) s += (x - m) * (x - m);
    return {m, std::sqrt(s / static_cast<double>(v.size() - 1))};
}

DiffusionHeadConfig tiny_head(std::size_t D, std::size_t C) {
    DiffusionHeadConfig c;
    c.blocks = 2;
    c.width = 32;
    c.cond_width = C;
    c.time_dim = 16;
    c.token_dim = D;
    return c;
}

void randomize(const nn::ParamList<float>& params, std::uint64_t seed, double scale) {
    RngStream r(seed);
    for (auto& p : params) {
        std::vector<float> v(p.tensor.numel());
        r.fill_normal(v);
        for (auto& x : v) x = static_cast<float>(x * scale);
        auto t = p.tensor;
        t.assign(v);
    }
}

std::vector<RngStream> streams_for(std::size_t n, std::uint64_t seed) {
    std::vector<RngStream> out;
    RootRng root(seed);
    for (std::size_t i = 0; i < n; ++i) out.push_back(root.stream("row", i));
    return out;
}

}  // namespace

// ------------------------------------------------------------ schedule

TEST(NoiseSchedule, LinearBetaAndCumulativeProduct) {
    auto s = NoiseSchedule::linear();
    ASSERT_EQ(s.S, 1000u);
    EXPECT_DOUBLE_EQ(s.beta[1], 1e-4);
    EXPECT_NEAR(s.beta[1000], 0.02, 1e-15);
    double ab = 1;
    for (std::size_t k = 1; k <= 1000; ++k) {
        ab *= 1 - (1e-4 + (0.02 - 1e-4) * static_cast<double>(k - 1) / 999.0);
        ASSERT_NEAR(s.alpha_bar[k], ab, 1e-12 * std::max(ab, 1e-300));
        ASSERT_LT(s.alpha_bar[k], s.alpha_bar[k - 1]);
    }
    EXPECT_LT(s.alpha_bar[1000], 1e-4);
    EXPECT_EQ(s.steps.size(), 1000u);
    for (auto& st : s.steps) {
        EXPECT_TRUE(std::isfinite(st.sigma));
        EXPECT_GE(st.sigma, 0.0);
    }
    EXPECT_EQ(s.steps.front().sigma, 0.0);
}

TEST(NoiseSchedule, RespacedChainKeepsTrainingProducts) {
    auto full = NoiseSchedule::linear();
    auto r = full.respaced(100);
    ASSERT_EQ(r.steps.size(), 100u);
    EXPECT_EQ(r.steps.back().t, 1000u);
    EXPECT_EQ(r.steps.front().t, 10u);
    double prod = 1;
    for (auto& st : r.steps) {
        EXPECT_DOUBLE_EQ(st.alpha_bar, full.alpha_bar[st.t]);
        prod *= st.alpha;
    }
    EXPECT_NEAR(prod, full.alpha_bar[1000], 1e-12);
    EXPECT_THROW(full.respaced(0), ContractViolation);
    EXPECT_THROW(full.respaced(1001), ContractViolation);
    EXPECT_EQ(full.respaced(1000).steps.size(), 1000u);
}

TEST(ForwardDiffuse, Endpoints) {
    EXPECT_EQ(forward_diffuse(0.7, -1.3, 1.0), 0.7);
    EXPECT_NEAR(forward_diffuse(0.7, -1.3, 1e-14), -1.3, 1e-6);
    auto s = NoiseSchedule::linear();
    EXPECT_THROW(forward_diffuse(0.0, 0.0, 0, s), ContractViolation);
}

TEST(ForwardDiffuse, StandardizedInputKeepsUnitVariance) {
    auto sched = NoiseSchedule::linear();
    RngStream r(1);
    for (std::size_t s : {1, 250, 500, 1000}) {
        std::vector<double> xs(100000);
        for (auto& v : xs) v = forward_diffuse(r.normal(), r.normal(), s, sched);
        auto m = moments(xs);
        EXPECT_NEAR(m.std * m.std, 1.0, 0.02) << "s=" << s;
        EXPECT_NEAR(m.mean, 0.0, 0.02);
    }
}

TEST(DenoiseStep, ZeroTemperatureIsDeterministic) {
    auto sched = NoiseSchedule::linear();
    const auto& st = sched.steps[500];
    EXPECT_EQ(denoise_step(0.4, 0.2, st, 0.0, 1.7, false), denoise_step(0.4, 0.2, st, 0.0, -3.0, false));
    EXPECT_EQ(denoise_step(0.4, 0.2, st, 1.0, 1.7, true), denoise_step(0.4, 0.2, st, 1.0, -3.0, true));
    EXPECT_NE(denoise_step(0.4, 0.2, st, 1.0, 1.7, false), denoise_step(0.4, 0.2, st, 1.0, -3.0, false));
}

TEST(DenoiseStep, ExactNoiseRecoversCleanValueAtFirstStep) {
    auto sched = NoiseSchedule::linear();
    const auto& st = sched.steps[0];
    double x = 0.9, eps = -0.4;
    double x1 = forward_diffuse(x, eps, 1, sched);
    EXPECT_NEAR(denoise_step(x1, eps, st, 1.0, 0.5, true), x, 1e-12);
}

TEST(DenoiseStep, NoiseScalesWithTemperature) {
    auto sched = NoiseSchedule::linear();
    const auto& st = sched.steps[400];
    double base = denoise_step(0.3, 0.1, st, 1.0, 0.0, false);
    double d1 = denoise_step(0.3, 0.1, st, 1.0, 1.0, false) - base;
    double d13 = denoise_step(0.3, 0.1, st, 1.3, 1.0, false) - base;
    EXPECT_NEAR(d1, st.sigma, 1e-12);
    EXPECT_NEAR(d13, 1.3 * st.sigma, 1e-12);
}

// Data x ~ N(0,1): x_s ~ N(0,1) for every s and E[eps | x_s] = sqrt(1 - abar_s) x_s.
TEST(ReverseChain, AnalyticDenoiserReproducesStandardNormal) {
    auto sched = NoiseSchedule::linear();
    const std::size_t chains = 10000;
    std::vector<double> x(chains);
    RngStream r(3);
    for (auto& v : x) v = r.normal();
    for (std::size_t k = sched.steps.size(); k-- > 0;) {
        const auto& st = sched.steps[k];
        for (auto& v : x) v = denoise_step(v, std::sqrt(1 - st.alpha_bar) * v, st, 1.0, r.normal(), k == 0);
    }
    auto m = moments(x);
    EXPECT_NEAR(m.mean, 0.0, 0.03);
    EXPECT_NEAR(m.std * m.std, 1.0, 0.03);
}

TEST(TimestepEmbedding, Values) {
    auto e = timestep_embedding<double>({0, 3}, 4);
    EXPECT_EQ(e.shape(), (Shape{2, 4}));
    EXPECT_EQ(e[0], 1.0);
    EXPECT_EQ(e[2], 0.0);
    EXPECT_NEAR(e[4], std::cos(3.0), 1e-12);
    EXPECT_NEAR(e[5], std::cos(3.0 * 0.01), 1e-12);
    EXPECT_NEAR(e[6], std::sin(3.0), 1e-12);
    EXPECT_THROW(timestep_embedding<double>({1}, 3), ContractViolation);
}

// ------------------------------------------------------------ head

TEST(DiffusionHead, UntrainedHeadPredictsZero) {
    DiffusionHead<float> head(tiny_head(4, 6), 1);
    RngStream r(1);
    auto out = head(Tensor<float>::randn({5, 4}, r), {1, 10, 100, 500, 1000}, Tensor<float>::randn({5, 6}, r));
    for (float v : out.data()) EXPECT_EQ(v, 0.0f);
}

TEST(DiffusionHead, ZeroPredictorLossEqualsTokenDimension) {
    const std::size_t D = 8;
    DiffusionHead<float> head(tiny_head(D, 4), 2);
    RngStream r(2);
    auto x = Tensor<float>::randn({20000, D}, r);
    auto z = Tensor<float>::randn({20000, 4}, r);
    double loss = diffusion_loss(head, x, z, r).item();
    EXPECT_NEAR(loss, static_cast<double>(D), 0.03 * D);
}

TEST(DiffusionHead, LossIsZeroForExactPrediction) {
    RngStream r(3);
    auto x = Tensor<double>::randn({64, 3}, r);
    auto tg = diffusion_targets(x, NoiseSchedule::linear(), r);
    EXPECT_EQ(noise_prediction_loss(tg.eps, tg.eps).item(), 0.0);
    for (auto s : tg.s) {
        EXPECT_GE(s, 1u);
        EXPECT_LE(s, 1000u);
    }
    EXPECT_EQ(noise_prediction_loss(Tensor<double>(Shape{0, 3}), Tensor<double>(Shape{0, 3})).item(), 0.0);
}

TEST(DiffusionHead, NoMaskedRowsGiveZeroLoss) {
    DiffusionHead<float> head(tiny_head(2, 4), 2);
    RngStream r(3);
    EXPECT_EQ(diffusion_loss(head, Tensor<float>(Shape{0, 2}), Tensor<float>(Shape{0, 4}), r).item(), 0.0f);
}

TEST(DiffusionHead, ConditioningModulatesOutput) {
    DiffusionHead<float> head(tiny_head(3, 5), 4);
    randomize(head.parameters(), 5, 0.3);
    RngStream r(4);
    auto xs = Tensor<float>::randn({2, 3}, r);
    auto z = Tensor<float>::randn({2, 5}, r);
    auto a = head(xs, {50, 50}, z), b = head(xs, {50, 50}, z);
    auto c = head(xs, {50, 50}, scale(z, 2.0f));
    auto d = head(xs, {900, 900}, z);
    double dz = 0, ds = 0;
    for (std::size_t i = 0; i < a.numel(); ++i) {
        EXPECT_EQ(a[i], b[i]);
        dz = std::max(dz, static_cast<double>(std::abs(a[i] - c[i])));
        ds = std::max(ds, static_cast<double>(std::abs(a[i] - d[i])));
    }
    EXPECT_GT(dz, 1e-4);
    EXPECT_GT(ds, 1e-4);
}

TEST(DiffusionHead, SamplingIsReproducibleAndBatchInvariant) {
    DiffusionHead<float> head(tiny_head(3, 5), 6);
    randomize(head.parameters(), 7, 0.2);
    RngStream r(5);
    auto z = Tensor<float>::randn({4, 5}, r);
    auto s1 = streams_for(4, 9), s2 = streams_for(4, 9);
    auto a = sample_tokens(head, z, 1.0, s1), b = sample_tokens(head, z, 1.0, s2);
    EXPECT_EQ(a.vec(), b.vec());
    auto s3 = streams_for(4, 9);
    std::vector<RngStream> one{s3[2]};
    auto z2 = index_rows(z, {2});
    auto c = sample_tokens(head, z2, 1.0, one);
    for (std::size_t d = 0; d < 3; ++d) EXPECT_NEAR(c[d], a[2 * 3 + d], 1e-5);
    auto s4 = streams_for(4, 10);
    EXPECT_NE(sample_tokens(head, z, 1.0, s4).vec(), a.vec());
}

TEST(DiffusionHead, ConfigValidation) {
    auto c = tiny_head(2, 2);
    c.time_dim = 7;
    EXPECT_THROW(c.validate(), ConfigError);
    c = tiny_head(2, 2);
    c.sample_steps = 2000;
    EXPECT_THROW(c.validate(), ConfigError);
}

// A tiny head trained on x | u ~ N(u, 0.5^2) with z = (u, 1, 0, ...).
class TrainedConditionalHead : public ::testing::Test {
protected:
    static void SetUpTestSuite() {
        auto cfg = tiny_head(1, kCond);
        cfg.width = 64;
        head_ = std::make_unique<DiffusionHead<float>>(cfg, 11);
        auto params = nn::tensors_of(head_->parameters());
        OptimizerState<float> opt;
        const std::size_t steps = 3000, B = 512;
        opt.schedule = {2e-3, 0.05 * steps, static_cast<double>(steps)};
        opt.weight_decay = 0;
        RngStream r(12);
        for (std::size_t it = 0; it < steps; ++it) {
            std::vector<float> xv(B), zv(kCond * B, 0.0f);
            for (std::size_t b = 0; b < B; ++b) {
                double u = r.uniform(-1, 1);
                xv[b] = static_cast<float>(u + 0.5 * r.normal());
                zv[kCond * b] = static_cast<float>(u);
                zv[kCond * b + 1] = 1.0f;
            }
            auto loss = diffusion_loss(*head_, Tensor<float>({B, 1}, xv), Tensor<float>({B, kCond}, zv), r);
            zero_grads<float>(params);
            backward(loss);
            clip_grad_norm<float>(params, 1.0);
            optimizer_step<float>(opt, params, static_cast<double>(it) / steps);
        }
    }
    static void TearDownTestSuite() { head_.reset(); }

    static std::vector<float> draws(double u, double tau, std::size_t n, std::uint64_t seed) {
        std::vector<float> zv(kCond * n, 0.0f);
        for (std::size_t i = 0; i < n; ++i) {
            zv[kCond * i] = static_cast<float>(u);
            zv[kCond * i + 1] = 1.0f;
        }
        auto streams = streams_for(n, seed);
        return sample_tokens(*head_, Tensor<float>({n, kCond}, zv), tau, streams, head_->schedule()).values();
    }

    static constexpr std::size_t kCond = 32;
    static std::unique_ptr<DiffusionHead<float>> head_;
};
std::unique_ptr<DiffusionHead<float>> TrainedConditionalHead::head_;

TEST_F(TrainedConditionalHead, SamplesMatchTargetMoments) {
    auto m = moments(draws(0.5, 1.0, 10000, 1));
    EXPECT_NEAR(m.mean, 0.5, 0.05 * 0.5);
    EXPECT_NEAR(m.std, 0.5, 0.05 * 0.5);
}

TEST_F(TrainedConditionalHead, TemperatureOrdersSpread) {
    auto hot = moments(draws(-0.3, 1.3, 1000, 2)), cold = moments(draws(-0.3, 0.7, 1000, 2));
    EXPECT_GT(hot.std, cold.std);
}

// ------------------------------------------------------------ deterministic head

TEST(FrameWeights, ExponentialDecayWithCutoff) {
    SequenceLayout L{12, 1, 1, 1};
    FrameWeights fw(L, 10);
    double Z = 0;
    for (int j = 0; j < 10; ++j) Z += std::exp(-j);
    EXPECT_NEAR(fw.weights[0], 1 / Z, 1e-12);
    EXPECT_NEAR(fw.weights[0], 0.632, 1e-3);
    EXPECT_NEAR(fw.weights[9], 7.8e-5, 1e-6);
    EXPECT_EQ(fw.weights[10], 0.0);
    EXPECT_EQ(fw.weights[11], 0.0);
    EXPECT_NEAR(std::accumulate(fw.weights.begin(), fw.weights.end(), 0.0), 1.0, 1e-12);
}

TEST(FrameWeights, SpatialTokensShareFrameWeight) {
    SequenceLayout L{3, 2, 2, 1};
    FrameWeights fw(L, 10);
    EXPECT_NEAR(std::accumulate(fw.weights.begin(), fw.weights.end(), 0.0), 1.0, 1e-12);
    for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(fw.weights[i], fw.weights[0]);
    EXPECT_NEAR(fw.weights[4] / fw.weights[0], std::exp(-1.0), 1e-12);
    FrameWeights all(L, 3);
    EXPECT_GT(all.weights.back(), 0.0);
}

TEST(DeterLoss, WeightedSquaredError) {
    auto x = Tensor<double>({2, 2}, std::vector<double>{1, 2, 3, 4});
    auto y = Tensor<double>({2, 2}, std::vector<double>{1, 3, 3, 2});
    EXPECT_EQ(deter_loss(x, x, {0.5, 0.5}).item(), 0.0);
    EXPECT_NEAR(deter_loss(x, y, {0.25, 2.0}).item(), 0.25 * 1 + 2.0 * 4, 1e-12);
    EXPECT_THROW(deter_loss(x, y, {1.0}), ContractViolation);
}
