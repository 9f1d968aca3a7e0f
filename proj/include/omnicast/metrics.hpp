// Copyright (C) 2026 omnicast contributors
// SPDX-License-Identifier: Apache-2.0

// Verification metrics: RMSE, absolute bias, MS-SSIM, power spectra with
// spectral divergence/residual, fair CRPS and spread/skill ratio.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <tuple>
#include <vector>

#include "omnicast/data.hpp"
#include "omnicast/fft.hpp"

namespace omnicast::metrics {

/// Per-point weights summing to one: uniform on periodic grids, cos(latitude)
/// of row centres on lat-lon grids (row 0 northernmost).
inline std::vector<double> grid_weights(std::size_t H, std::size_t W, data::GridKind kind) {
    require(H > 0 && W > 0, "grid_weights: empty grid");
    std::vector<double> w(H * W, 1.0);
    if (kind == data::GridKind::lat_lon)
        for (std::size_t i = 0; i < H; ++i) {
            double lat = 90.0 - (static_cast<double>(i) + 0.5) * 180.0 / static_cast<double>(H);
            double c = std::cos(lat * std::numbers::pi / 180.0);
            for (std::size_t j = 0; j < W; ++j) w[i * W + j] = c;
        }
    double s = 0;
    for (double v : w) s += v;
    for (double& v : w) v /= s;
    return w;
}

namespace detail {
inline void check_same(std::size_t a, std::size_t b, std::size_t w, const char* op) {
    require(a == b, std::string(op) + ": prediction and truth differ in size");
    require(w == a, std::string(op) + ": weights differ in size");
}
}  // namespace detail

/// sqrt(sum w (p - o)^2).
template <class A, class B>
double rmse(std::span<const A> p, std::span<const B> o, std::span<const double> w) {
    detail::check_same(p.size(), o.size(), w.size(), "rmse");
    double s = 0;
    for (std::size_t i = 0; i < p.size(); ++i) s += w[i] * std::pow(static_cast<double>(p[i]) - static_cast<double>(o[i]), 2);
    return std::sqrt(s);
}

/// |sum w (p - o)|.
template <class A, class B>
double abs_bias(std::span<const A> p, std::span<const B> o, std::span<const double> w) {
    detail::check_same(p.size(), o.size(), w.size(), "abs_bias");
    double s = 0;
    for (std::size_t i = 0; i < p.size(); ++i) s += w[i] * (static_cast<double>(p[i]) - static_cast<double>(o[i]));
    return std::abs(s);
}

// -------------------------------------------------------------------- MS-SSIM

struct SsimOptions {
    double k1 = 0.01;
    double k2 = 0.03;
    std::size_t window = 11;
    double sigma = 1.5;
    std::vector<double> scale_weights{0.0448, 0.2856, 0.3001, 0.2363, 0.1333};
};

namespace detail {

inline std::vector<double> gaussian_window(std::size_t n, double sigma) {
    std::vector<double> g(n);
    double c = (static_cast<double>(n) - 1) / 2, s = 0;
    for (std::size_t i = 0; i < n; ++i) s += g[i] = std::exp(-std::pow(static_cast<double>(i) - c, 2) / (2 * sigma * sigma));
    for (auto& v : g) v /= s;
    return g;
}

/// Separable 'valid' filtering of an H x W image.
inline std::vector<double> filter_valid(const std::vector<double>& img, std::size_t H, std::size_t W, const std::vector<double>& g) {
    std::size_t n = g.size(), OH = H - n + 1, OW = W - n + 1;
    std::vector<double> tmp(H * OW, 0.0), out(OH * OW, 0.0);
    for (std::size_t i = 0; i < H; ++i)
        for (std::size_t j = 0; j < OW; ++j) {
            double s = 0;
            for (std::size_t k = 0; k < n; ++k) s += g[k] * img[i * W + j + k];
            tmp[i * OW + j] = s;
        }
    for (std::size_t i = 0; i < OH; ++i)
        for (std::size_t j = 0; j < OW; ++j) {
            double s = 0;
            for (std::size_t k = 0; k < n; ++k) s += g[k] * tmp[(i + k) * OW + j];
            out[i * OW + j] = s;
        }
    return out;
}

/// Mean SSIM and mean contrast-structure term at one scale.
inline std::pair<double, double> ssim_terms(const std::vector<double>& x, const std::vector<double>& y, std::size_t H, std::size_t W,
                                            double C1, double C2, const std::vector<double>& g) {
    std::vector<double> xx(x.size()), yy(x.size()), xy(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        xx[i] = x[i] * x[i];
        yy[i] = y[i] * y[i];
        xy[i] = x[i] * y[i];
    }
    auto mx = filter_valid(x, H, W, g), my = filter_valid(y, H, W, g);
    auto sxx = filter_valid(xx, H, W, g), syy = filter_valid(yy, H, W, g), sxy = filter_valid(xy, H, W, g);
    double ssim = 0, cs = 0;
    for (std::size_t i = 0; i < mx.size(); ++i) {
        double vx = sxx[i] - mx[i] * mx[i], vy = syy[i] - my[i] * my[i], cxy = sxy[i] - mx[i] * my[i];
        double c = (2 * cxy + C2) / (vx + vy + C2);
        double l = (2 * mx[i] * my[i] + C1) / (mx[i] * mx[i] + my[i] * my[i] + C1);
        cs += c;
        ssim += l * c;
    }
    return {ssim / static_cast<double>(mx.size()), cs / static_cast<double>(mx.size())};
}

inline std::vector<double> avg_pool2(const std::vector<double>& x, std::size_t H, std::size_t W) {
    std::size_t h = H / 2, w = W / 2;
    std::vector<double> out(h * w);
    for (std::size_t i = 0; i < h; ++i)
        for (std::size_t j = 0; j < w; ++j)
            out[i * w + j] = 0.25 * (x[2 * i * W + 2 * j] + x[2 * i * W + 2 * j + 1] + x[(2 * i + 1) * W + 2 * j] + x[(2 * i + 1) * W + 2 * j + 1]);
    return out;
}

}  // namespace detail

/// Number of dyadic scales whose smaller side still fits the window (max 5).
inline std::size_t ms_ssim_scales(std::size_t H, std::size_t W, const SsimOptions& opt = {}) {
    std::size_t n = 0;
    while (n < opt.scale_weights.size() && std::min(H, W) >= opt.window) {
        ++n;
        H /= 2;
        W /= 2;
    }
    return n;
}

/// Multi-scale SSIM with a Gaussian window; dynamic range from the truth.
/// Scale weights are renormalized over the usable scales. Per-scale terms
/// combine as prod |v_j|^{w_j}, negated when any scale is anti-correlated,
/// so the score lies in [-1, 1] and equals the usual value when all terms
/// are nonnegative.
template <class A, class B>
double ms_ssim(std::span<const A> pred, std::span<const B> truth, std::size_t H, std::size_t W, const SsimOptions& opt = {}) {
    require(pred.size() == H * W && truth.size() == H * W, "ms_ssim: field sizes differ from H*W");
    std::size_t scales = ms_ssim_scales(H, W, opt);
    require(scales >= 1, "ms_ssim: field smaller than the " + std::to_string(opt.window) + "-point window");
    std::vector<double> x(pred.begin(), pred.end()), y(truth.begin(), truth.end());
    auto [lo, hi] = std::minmax_element(y.begin(), y.end());
    double range = *hi - *lo;
    if (range <= 0) range = 1.0;
    double C1 = std::pow(opt.k1 * range, 2), C2 = std::pow(opt.k2 * range, 2);
    auto g = detail::gaussian_window(opt.window, opt.sigma);
    double wsum = 0;
    for (std::size_t s = 0; s < scales; ++s) wsum += opt.scale_weights[s];
    double mag = 1.0;
    bool negative = false;
    for (std::size_t s = 0; s < scales; ++s) {
        auto [ssim, cs] = detail::ssim_terms(x, y, H, W, C1, C2, g);
        double v = s + 1 == scales ? ssim : cs;
        negative = negative || v < 0;
        mag *= std::pow(std::abs(v), opt.scale_weights[s] / wsum);
        if (s + 1 < scales) {
            x = detail::avg_pool2(x, H, W);
            y = detail::avg_pool2(y, H, W);
            H /= 2;
            W /= 2;
        }
    }
    return std::clamp(negative ? -mag : mag, -1.0, 1.0);
}

// ------------------------------------------------------------------ spectra

/// |FFT|^2 / (H W) averaged over modes with round(sqrt(kx^2 + ky^2)) == k.
template <class A>
std::vector<double> power_spectrum(std::span<const A> field, std::size_t H, std::size_t W) {
    require(field.size() == H * W, "power_spectrum: field size differs from H*W");
    auto F = fft2_real(field.data(), H, W);
    std::size_t kmax = 0;
    std::vector<std::size_t> bin(H * W);
    for (std::size_t a = 0; a < H; ++a)
        for (std::size_t b = 0; b < W; ++b) {
            double ky = static_cast<double>(fft_freq(a, H)), kx = static_cast<double>(fft_freq(b, W));
            bin[a * W + b] = static_cast<std::size_t>(std::llround(std::sqrt(kx * kx + ky * ky)));
            kmax = std::max(kmax, bin[a * W + b]);
        }
    std::vector<double> sum(kmax + 1, 0.0), cnt(kmax + 1, 0.0);
    double norm = 1.0 / static_cast<double>(H * W);
    for (std::size_t i = 0; i < H * W; ++i) {
        sum[bin[i]] += std::norm(F[i]) * norm;
        cnt[bin[i]] += 1;
    }
    for (std::size_t k = 0; k <= kmax; ++k) sum[k] = cnt[k] > 0 ? sum[k] / cnt[k] : 0.0;
    return sum;
}

inline constexpr double kSpectrumFloor = 1e-12;

/// sum_k p_k log(p_k / q_k), p/q the truth/prediction spectra floored at
/// 1e-12 and normalized to sum 1.
inline double sdiv_spectra(const std::vector<double>& s_pred, const std::vector<double>& s_truth) {
    require(s_pred.size() == s_truth.size(), "sdiv: spectra differ in length");
    auto normalize = [](const std::vector<double>& s) {
        std::vector<double> out(s.size());
        double t = 0;
        for (std::size_t k = 0; k < s.size(); ++k) t += out[k] = std::max(s[k], kSpectrumFloor);
        for (auto& v : out) v /= t;
        return out;
    };
    auto p = normalize(s_truth), q = normalize(s_pred);
    double d = 0;
    for (std::size_t k = 0; k < p.size(); ++k) d += p[k] * std::log(p[k] / q[k]);
    return std::max(d, 0.0);
}

/// Mean over bins k >= K/2 of |S_pred - S_truth| / S_truth (floored).
inline double sres_spectra(const std::vector<double>& s_pred, const std::vector<double>& s_truth) {
    require(s_pred.size() == s_truth.size() && !s_truth.empty(), "sres: spectra differ in length");
    std::size_t K = s_truth.size(), start = K / 2;
    double s = 0;
    for (std::size_t k = start; k < K; ++k) s += std::abs(s_pred[k] - s_truth[k]) / std::max(s_truth[k], kSpectrumFloor);
    return s / static_cast<double>(K - start);
}

template <class A, class B>
double sdiv(std::span<const A> pred, std::span<const B> truth, std::size_t H, std::size_t W) {
    return sdiv_spectra(power_spectrum(pred, H, W), power_spectrum(truth, H, W));
}

template <class A, class B>
double sres(std::span<const A> pred, std::span<const B> truth, std::size_t H, std::size_t W) {
    return sres_spectra(power_spectrum(pred, H, W), power_spectrum(truth, H, W));
}

// ------------------------------------------------------------ probabilistic

/// Fair CRPS; |x - y| for a single member. Members are sorted internally.
inline double crps(std::vector<double> members, double y) {
    require(!members.empty(), "crps: need at least one member");
    std::size_t M = members.size();
    double skill = 0;
    for (double x : members) skill += std::abs(x - y);
    skill /= static_cast<double>(M);
    if (M == 1) return skill;
    std::sort(members.begin(), members.end());
    double pair = 0;  // sum over i<j of |x_i - x_j|
    for (std::size_t j = 0; j < M; ++j) pair += members[j] * (2.0 * static_cast<double>(j) - static_cast<double>(M) + 1.0);
    return skill - pair / (static_cast<double>(M) * static_cast<double>(M - 1));
}

/// Weighted mean over points of the pointwise fair CRPS. ens[m] are fields.
template <class A, class B>
double crps_field(const std::vector<std::span<const A>>& ens, std::span<const B> truth, std::span<const double> w) {
    require(!ens.empty(), "crps: need at least one member");
    std::vector<double> vals(ens.size());
    double s = 0;
    for (std::size_t i = 0; i < truth.size(); ++i) {
        for (std::size_t m = 0; m < ens.size(); ++m) vals[m] = static_cast<double>(ens[m][i]);
        s += w[i] * crps(vals, static_cast<double>(truth[i]));
    }
    return s;
}

struct SpreadSkill {
    double spread = 0;  // sqrt(sum w var), unbiased member variance
    double skill = 0;   // RMSE of the ensemble mean
    std::optional<double> ssr;
};

/// SSR = sqrt((M+1)/M) spread / skill; undefined (nullopt) for zero skill.
template <class A, class B>
SpreadSkill spread_skill(const std::vector<std::span<const A>>& ens, std::span<const B> truth, std::span<const double> w) {
    std::size_t M = ens.size();
    require(M >= 2, "ssr: need at least two members");
    double var = 0, se = 0;
    for (std::size_t i = 0; i < truth.size(); ++i) {
        double mu = 0;
        for (std::size_t m = 0; m < M; ++m) mu += static_cast<double>(ens[m][i]);
        mu /= static_cast<double>(M);
        double v = 0;
        for (std::size_t m = 0; m < M; ++m) v += std::pow(static_cast<double>(ens[m][i]) - mu, 2);
        var += w[i] * v / static_cast<double>(M - 1);
        se += w[i] * std::pow(mu - static_cast<double>(truth[i]), 2);
    }
    SpreadSkill out{std::sqrt(var), std::sqrt(se), std::nullopt};
    if (out.skill > 0) out.ssr = std::sqrt((static_cast<double>(M) + 1) / static_cast<double>(M)) * out.spread / out.skill;
    return out;
}

// ------------------------------------------------------------------- report

struct MetricRow {
    std::string variable;
    std::int64_t lead_hours = 0;
    std::string metric;
    std::optional<double> value;
    std::size_t ensemble_size = 1;
};

class MetricsReport {
public:
    std::string weighting = "uniform";

    /// Adds a cell; a repeated cell is rejected.
    void add(MetricRow row) {
        auto key = std::make_tuple(row.variable, row.lead_hours, row.metric);
        require(!rows_.contains(key), "MetricsReport: duplicate cell " + row.variable + "/" + std::to_string(row.lead_hours) + "/" + row.metric);
        rows_.emplace(std::move(key), std::move(row));
    }

    const MetricRow* find(const std::string& variable, std::int64_t lead, const std::string& metric) const {
        auto it = rows_.find({variable, lead, metric});
        return it == rows_.end() ? nullptr : &it->second;
    }
    std::optional<double> value(const std::string& variable, std::int64_t lead, const std::string& metric) const {
        auto r = find(variable, lead, metric);
        return r ? r->value : std::nullopt;
    }

    std::vector<MetricRow> rows() const {
        std::vector<MetricRow> out;
        for (auto& [k, v] : rows_) out.push_back(v);
        return out;
    }
    std::size_t size() const { return rows_.size(); }

    /// Columns variable,lead_hours,metric,value,ensemble_size ordered by
    /// (variable, lead, metric); undefined values are written as "undefined".
    std::string to_csv() const {
        std::string out = "variable,lead_hours,metric,value,ensemble_size\n";
        char buf[64];
        for (auto& [k, r] : rows_) {
            out += r.variable + "," + std::to_string(r.lead_hours) + "," + r.metric + ",";
            if (r.value) {
                std::snprintf(buf, sizeof(buf), "%.9g", *r.value);
                out += buf;
            } else {
                out += "undefined";
            }
            out += "," + std::to_string(r.ensemble_size) + "\n";
        }
        return out;
    }

    /// Cellwise arithmetic mean over reports (e.g. over initial conditions);
    /// a cell is undefined if it is undefined in any input.
    static MetricsReport mean_of(const std::vector<MetricsReport>& reports) {
        require(!reports.empty(), "MetricsReport::mean_of: no reports");
        MetricsReport out;
        out.weighting = reports.front().weighting;
        for (auto& [k, r] : reports.front().rows_) {
            MetricRow agg = r;
            double s = 0;
            bool defined = true;
            for (auto& rep : reports) {
                auto v = rep.value(r.variable, r.lead_hours, r.metric);
                if (!v) {
                    defined = false;
                    break;
                }
                s += *v;
            }
            agg.value = defined ? std::optional<double>(s / static_cast<double>(reports.size())) : std::nullopt;
            out.add(agg);
        }
        return out;
    }

private:
    std::map<std::tuple<std::string, std::int64_t, std::string>, MetricRow> rows_;
};

inline const std::vector<std::string>& all_metric_names() {
    static const std::vector<std::string> names{"abs_bias", "crps", "ms_ssim", "rmse", "sdiv", "spread", "sres", "ssr"};
    return names;
}

/// Scores one ensemble forecast against truth frames (same leads). rmse,
/// abs_bias and ms_ssim use the ensemble mean; sdiv/sres average over
/// members; crps/spread/ssr use the full ensemble (spread/ssr need M >= 2).
inline MetricsReport evaluate_ensemble(const std::vector<std::vector<data::FieldGrid>>& members, const std::vector<data::FieldGrid>& truth,
                                       const std::vector<std::int64_t>& lead_hours, const std::vector<std::string>& metric_names = all_metric_names()) {
    require(!members.empty() && !truth.empty(), "evaluate: empty forecast or truth");
    std::size_t M = members.size(), T = truth.size();
    require(lead_hours.size() == T, "evaluate: one lead time per truth frame");
    for (auto& m : members) require(m.size() >= T, "evaluate: member shorter than the truth sequence");
    const auto& f0 = truth.front();
    auto w = grid_weights(f0.H, f0.W, f0.grid);
    MetricsReport rep;
    rep.weighting = f0.grid == data::GridKind::lat_lon ? "cos-latitude" : "uniform";
    auto wants = [&](const char* n) { return std::find(metric_names.begin(), metric_names.end(), n) != metric_names.end(); };
    std::size_t P = f0.plane();
    for (std::size_t k = 0; k < T; ++k) {
        const auto& y = truth[k];
        require(y.V == f0.V && y.H == f0.H && y.W == f0.W, "evaluate: inconsistent truth shapes");
        for (std::size_t v = 0; v < f0.V; ++v) {
            auto yt = y.channel(v);
            std::vector<std::span<const float>> ens;
            for (auto& m : members) {
                require(m[k].V == y.V && m[k].plane() == P, "evaluate: forecast/truth shape mismatch");
                ens.push_back(m[k].channel(v));
            }
            std::vector<double> mean(P, 0.0);
            for (auto& e : ens)
                for (std::size_t i = 0; i < P; ++i) mean[i] += e[i];
            for (auto& x : mean) x /= static_cast<double>(M);
            std::span<const double> ms(mean);
            auto add = [&](const char* name, std::optional<double> val) {
                if (wants(name)) rep.add({y.variables[v], lead_hours[k], name, val, M});
            };
            add("rmse", rmse(ms, yt, w));
            add("abs_bias", abs_bias(ms, yt, w));
            // Grids below the SSIM window leave the cell undefined.
            if (wants("ms_ssim"))
                add("ms_ssim", ms_ssim_scales(y.H, y.W) ? std::optional<double>(ms_ssim(ms, yt, y.H, y.W)) : std::nullopt);
            if (wants("sdiv") || wants("sres")) {
                auto st = power_spectrum(yt, y.H, y.W);
                double sd = 0, sr = 0;
                for (auto& e : ens) {
                    auto sp = power_spectrum(e, y.H, y.W);
                    sd += sdiv_spectra(sp, st);
                    sr += sres_spectra(sp, st);
                }
                add("sdiv", sd / static_cast<double>(M));
                add("sres", sr / static_cast<double>(M));
            }
            if (wants("crps")) add("crps", crps_field(ens, yt, w));
            if ((wants("ssr") || wants("spread")) && M >= 2) {
                auto ss = spread_skill(ens, yt, w);
                add("spread", ss.spread);
                add("ssr", ss.ssr);
            }
        }
    }
    return rep;
}

}  // namespace omnicast::metrics
