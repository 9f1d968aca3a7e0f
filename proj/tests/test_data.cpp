// Copyright (C) 2026 omnicast contributors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <Eigen/Dense>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "omnicast/data.hpp"

using namespace omnicast;
using namespace omnicast::data;

namespace {

std::filesystem::path scratch_dir(const std::string& name) {
    auto p = std::filesystem::temp_directory_path() / ("omnicast_test_data_" + name);
    std::filesystem::remove_all(p);
    return p;
}

SyntheticConfig small_config() {
    SyntheticConfig c;
    c.height = 16;
    c.width = 32;
    c.frames = 40;
    c.spinup_frames = 10;
    return c;
}

double channel_sum(const std::vector<double>& s, std::size_t v, std::size_t plane) {
    return std::accumulate(s.begin() + static_cast<long>(v * plane), s.begin() + static_cast<long>((v + 1) * plane), 0.0);
}

}  // namespace

TEST(Synthetic, ZeroForcingFromRestStaysZero) {
    auto c = small_config();
    c.noise_amplitude = 0;
    c.pattern_amplitude = 0;
    for (const auto& f : gen_synthetic(c))
        for (float v : f.values) ASSERT_EQ(v, 0.0f);
}

TEST(Synthetic, PureDiffusionConservesIntegral) {
    auto c = small_config();
    c.noise_amplitude = c.pattern_amplitude = c.coupling = 0;
    c.mean_flow_speed = c.rotating_flow_speed = 0;
    c.damping = 0;
    c.diffusivity = 0.5;
    SyntheticIntegrator integ(c);
    std::size_t plane = c.height * c.width;
    std::vector<double> init(c.channels * plane, 0.0);
    init[3 * c.width + 5] = 1.0;
    integ.set_state(init);
    for (int f = 0; f < 200; ++f) integ.advance_frame();
    auto s = integ.state();
    EXPECT_NEAR(channel_sum(s, 0, plane), 1.0, 1e-6);
    // The delta has spread out.
    EXPECT_LT(*std::max_element(s.begin(), s.begin() + static_cast<long>(plane)), 0.1);
}

TEST(Synthetic, AdvectionAndCouplingAlsoConserveTheMean) {
    auto c = small_config();
    c.noise_amplitude = c.pattern_amplitude = 0;
    c.damping = 0;
    c.coupling = 0;
    SyntheticIntegrator integ(c);
    std::size_t plane = c.height * c.width;
    RngStream rng(7);
    std::vector<double> init(c.channels * plane);
    rng.fill_normal(init);
    integ.set_state(init);
    for (int f = 0; f < 50; ++f) integ.advance_frame();
    auto s = integ.state();
    for (std::size_t v = 0; v < c.channels; ++v) EXPECT_NEAR(channel_sum(s, v, plane), channel_sum(init, v, plane), 1e-8);
}

TEST(Synthetic, RejectsCflViolation) {
    auto c = small_config();
    c.mean_flow_speed = 5.0;
    EXPECT_THROW(c.validate(), ConfigError);
    EXPECT_THROW(SyntheticIntegrator{c}, ConfigError);
    c = small_config();
    c.substeps = 1;
    c.diffusivity = 0;
    c.damping = 0;
    EXPECT_THROW(c.validate(), ConfigError);  // explicit advection without damping amplifies
    c = small_config();
    c.channels = 1;
    EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Synthetic, BitReproducibleGivenSeed) {
    auto c = small_config();
    auto a = gen_synthetic(c), b = gen_synthetic(c);
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i) ASSERT_EQ(a[i].values, b[i].values);
    c.seed = 1;
    auto d = gen_synthetic(c);
    EXPECT_NE(a.back().values, d.back().values);
}

TEST(Synthetic, TimestampsAndNames) {
    auto c = small_config();
    auto fr = gen_synthetic(c, 1000);
    EXPECT_EQ(fr.size(), c.frames);
    EXPECT_EQ(fr[0].timestamp_hours, 1000);
    EXPECT_EQ(fr[1].timestamp_hours, 1024);
    EXPECT_EQ(fr[0].variables, (std::vector<std::string>{"var0", "var1", "var2", "var3"}));
}

// Regression constants measured once on seed 0 with the default configuration.
TEST(Synthetic, DefaultConfigAutocorrelation) {
    SyntheticConfig c;
    auto fr = gen_synthetic(c);
    ASSERT_EQ(fr.size(), 7200u);
    const double lag1[] = {0.9478, 0.9478, 0.9476, 0.9477};
    for (std::size_t v = 0; v < c.channels; ++v) {
        double a1 = lag_autocorrelation(fr, v, 1), a30 = lag_autocorrelation(fr, v, 30);
        EXPECT_GT(a1, 0.9) << "channel " << v;
        EXPECT_LT(a30, 0.5) << "channel " << v;
        EXPECT_NEAR(a1, lag1[v], 2e-3) << "channel " << v;
        EXPECT_NEAR(a30, 0.0, 0.1) << "channel " << v;
    }
}

TEST(Normalization, TrainSplitIsStandardized) {
    auto c = small_config();
    c.frames = 200;
    auto fr = gen_synthetic(c);
    std::span<const FieldGrid> train(fr.data(), 150), val(fr.data() + 150, 50);
    auto stats = compute_normalization(train);
    ASSERT_EQ(stats.size(), 4u);
    for (std::size_t v = 0; v < 4; ++v) {
        double s = 0, ss = 0;
        std::size_t n = 0;
        for (const auto& f : train) {
            auto g = normalize(f, stats);
            for (float x : g.channel(v)) {
                s += x;
                ss += static_cast<double>(x) * x;
                ++n;
            }
        }
        double mu = s / static_cast<double>(n);
        EXPECT_NEAR(mu, 0.0, 1e-6);
        EXPECT_NEAR(std::sqrt(ss / static_cast<double>(n) - mu * mu), 1.0, 1e-6);
    }
    // Validation statistics are not forced to 0/1.
    auto vstats = compute_normalization(val);
    EXPECT_NE(vstats[0].mean, stats[0].mean);
    // denormalize inverts normalize.
    auto back = denormalize(normalize(fr[170], stats), stats);
    for (std::size_t i = 0; i < back.values.size(); ++i) EXPECT_NEAR(back.values[i], fr[170].values[i], 1e-5);
}

TEST(Normalization, ConstantChannelFloorsStd) {
    std::vector<FieldGrid> fr;
    for (int t = 0; t < 5; ++t) {
        FieldGrid g(2, 2, 2, {"a", "b"});
        for (std::size_t i = 0; i < 4; ++i) {
            g.values[i] = 3.0f;
            g.values[4 + i] = static_cast<float>(t + i);
        }
        fr.push_back(g);
    }
    auto stats = compute_normalization(fr);
    EXPECT_EQ(stats[0].std, 1e-6);
    auto g = normalize(fr[2], stats);
    for (float x : g.channel(0)) EXPECT_EQ(x, 0.0f);
    EXPECT_THROW(compute_normalization(std::span<const FieldGrid>{}), ContractViolation);
}

TEST(FieldGridType, Invariants) {
    FieldGrid g(2, 2, 2, {"a"});
    EXPECT_THROW(g.validate(), ContractViolation);
    FieldGrid h(1, 1, 2, {"a"});
    h.values[1] = std::nanf("");
    EXPECT_THROW(h.validate(), NumericFault);
}

TEST(Dataset, WriteReadRoundTripIsBitExact) {
    auto c = small_config();
    c.frames = 30;
    auto fr = gen_synthetic(c, 0);
    DatasetManifest m;
    m.frame_interval_hours = 24;
    assign_splits(m, 0, 20, 5, 5);
    m.normalization = compute_normalization(std::span<const FieldGrid>(fr.data(), 20));
    auto dir = scratch_dir("roundtrip");
    auto written = write_dataset(dir, fr, m, 8);
    EXPECT_EQ(written.files.size(), 4u);
    auto read = read_manifest(dir);
    EXPECT_EQ(read.files.size(), 4u);
    EXPECT_EQ(read.test.end, 30 * 24);
    auto all = load_fields(dir, read, {0, 30 * 24});
    ASSERT_EQ(all.size(), fr.size());
    for (std::size_t i = 0; i < fr.size(); ++i) {
        EXPECT_EQ(all[i].values, fr[i].values);
        EXPECT_EQ(all[i].timestamp_hours, fr[i].timestamp_hours);
    }
    auto val = load_fields(dir, read, read.val);
    ASSERT_EQ(val.size(), 5u);
    EXPECT_EQ(val.front().timestamp_hours, 20 * 24);
    EXPECT_TRUE(load_fields(dir, read, {100, 100}).empty());
    EXPECT_EQ(read.normalization.size(), 4u);
    EXPECT_DOUBLE_EQ(read.normalization[1].std, written.normalization[1].std);
}

TEST(Dataset, RejectsOutOfOrderFiles) {
    DatasetManifest m;
    m.V = 1;
    m.variables = {"a"};
    m.files = {{"b.octf", 240, 10, ""}, {"a.octf", 0, 10, ""}};
    assign_splits(m, 0, 10, 5, 5);
    EXPECT_THROW(m.validate(), IngestionFault);
    m.files = {{"a.octf", 0, 10, ""}, {"b.octf", 240, 10, ""}};
    EXPECT_NO_THROW(m.validate());
    m.files[1].start_hours = 264;  // gap breaks the constant interval
    EXPECT_THROW(m.validate(), IngestionFault);
}

TEST(Dataset, RejectsOverlappingSplits) {
    DatasetManifest m;
    m.V = 1;
    m.variables = {"a"};
    m.files = {{"a.octf", 0, 10, ""}};
    m.train = {0, 100};
    m.val = {50, 150};
    m.test = {150, 200};
    EXPECT_THROW(m.validate(), IngestionFault);
}

TEST(Dataset, ChecksumAndShapeMismatchNameTheFile) {
    auto c = small_config();
    c.frames = 10;
    auto fr = gen_synthetic(c);
    DatasetManifest m;
    assign_splits(m, 0, 6, 2, 2);
    auto dir = scratch_dir("corrupt");
    auto written = write_dataset(dir, fr, m, 5);
    auto target = dir / written.files[1].file;
    {
        std::fstream f(target, std::ios::in | std::ios::out | std::ios::binary);
        f.seekp(-4, std::ios::end);
        f.write("\x01\x02\x03\x04", 4);
    }
    try {
        load_fields(dir, written, {0, 240});
        FAIL() << "expected IngestionFault";
    } catch (const IngestionFault& e) {
        EXPECT_NE(std::string(e.what()).find("frames_00001"), std::string::npos);
    }
    // Shape mismatch with a valid checksum.
    auto bad = written;
    bad.H = 8;
    bad.files[1].hash.clear();
    EXPECT_THROW(load_fields(dir, bad, {0, 240}), IngestionFault);
}

// One-frame-ahead linear regression across channels (shared over grid
// points) fitted on train must beat the climatological mean on test.
TEST(Synthetic, LinearRegressionBeatsClimatology) {
    auto c = small_config();
    c.frames = 2000;
    auto fr = gen_synthetic(c);
    std::span<const FieldGrid> train(fr.data(), 1600), test(fr.data() + 1600, 400);
    auto clim = compute_climatology(train);
    std::size_t V = c.channels, P = c.height * c.width;
    Eigen::MatrixXd XtX = Eigen::MatrixXd::Zero(V + 1, V + 1), XtY = Eigen::MatrixXd::Zero(V + 1, V);
    Eigen::VectorXd x(V + 1);
    Eigen::VectorXd y(V);
    for (std::size_t t = 0; t + 1 < train.size(); ++t)
        for (std::size_t p = 0; p < P; ++p) {
            for (std::size_t v = 0; v < V; ++v) {
                x(static_cast<long>(v)) = train[t].values[v * P + p];
                y(static_cast<long>(v)) = train[t + 1].values[v * P + p];
            }
            x(static_cast<long>(V)) = 1.0;
            XtX += x * x.transpose();
            XtY += x * y.transpose();
        }
    Eigen::MatrixXd A = XtX.ldlt().solve(XtY);
    double se_reg = 0, se_clim = 0;
    for (std::size_t t = 0; t + 1 < test.size(); ++t)
        for (std::size_t p = 0; p < P; ++p) {
            for (std::size_t v = 0; v < V; ++v) x(static_cast<long>(v)) = test[t].values[v * P + p];
            x(static_cast<long>(V)) = 1.0;
            Eigen::VectorXd pred = A.transpose() * x;
            for (std::size_t v = 0; v < V; ++v) {
                double truth = test[t + 1].values[v * P + p];
                se_reg += std::pow(pred(static_cast<long>(v)) - truth, 2);
                se_clim += std::pow(clim.mean[v * P + p] - truth, 2);
            }
        }
    EXPECT_LT(se_reg, 0.5 * se_clim);
}
