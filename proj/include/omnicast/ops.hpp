// Copyright (C) 2026 omnicast contributors
// SPDX-License-Identifier: Apache-2.0

// Differentiable tensor operations. Every op validates shapes, records its
// inputs for the backward sweep when grad mode is on, and rejects NaN/Inf
// outputs with a NumericFault naming the op.

#pragma once

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <vector>

#include "omnicast/tensor.hpp"

namespace omnicast {

namespace detail {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapMat = Eigen::Map<RowMat<T>>;
template <class T>
using CMapMat = Eigen::Map<const RowMat<T>>;
template <class T>
using StridedMap = Eigen::Map<RowMat<T>, 0, Eigen::OuterStride<>>;
template <class T>
using CStridedMap = Eigen::Map<const RowMat<T>, 0, Eigen::OuterStride<>>;

template <class T>
void add_grad(const Tensor<T>& t, std::span<const T> g) {
    if (!t.requires_grad()) return;
    auto& node = *t.node();
    node.ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) node.grad[i] += g[i];
}

// Element-wise broadcasting plan (numpy rules).
struct Broadcast {
    enum class Mode { same, b_suffix, a_suffix, general } mode = Mode::same;
    Shape out;
    std::vector<std::size_t> a_idx, b_idx;  // only for general mode
};

inline Broadcast plan_broadcast(const Shape& a, const Shape& b, const char* op) {
    Broadcast p;
    if (a == b) {
        p.out = a;
        return p;
    }
    auto is_suffix = [](const Shape& big, const Shape& small) {
        if (small.size() > big.size()) return false;
        return std::equal(small.rbegin(), small.rend(), big.rbegin());
    };
    if (is_suffix(a, b)) {
        p.mode = Broadcast::Mode::b_suffix;
        p.out = a;
        return p;
    }
    if (is_suffix(b, a)) {
        p.mode = Broadcast::Mode::a_suffix;
        p.out = b;
        return p;
    }
    std::size_t nd = std::max(a.size(), b.size());
    Shape pa(nd, 1), pb(nd, 1);
    std::copy(a.begin(), a.end(), pa.begin() + (nd - a.size()));
    std::copy(b.begin(), b.end(), pb.begin() + (nd - b.size()));
    p.out.resize(nd);
    for (std::size_t i = 0; i < nd; ++i) {
        if (pa[i] != pb[i] && pa[i] != 1 && pb[i] != 1)
            throw ContractViolation(std::string(op) + ": cannot broadcast " + shape_str(a) + " with " + shape_str(b));
        p.out[i] = std::max(pa[i], pb[i]);
    }
    p.mode = Broadcast::Mode::general;
    std::size_t n = shape_numel(p.out);
    p.a_idx.resize(n);
    p.b_idx.resize(n);
    std::vector<std::size_t> sa(nd, 0), sb(nd, 0);
    for (std::size_t i = nd, accA = 1, accB = 1; i-- > 0;) {
        sa[i] = pa[i] == 1 ? 0 : accA;
        sb[i] = pb[i] == 1 ? 0 : accB;
        accA *= pa[i];
        accB *= pb[i];
    }
    std::vector<std::size_t> idx(nd, 0);
    for (std::size_t o = 0; o < n; ++o) {
        std::size_t ia = 0, ib = 0;
        for (std::size_t d = 0; d < nd; ++d) {
            ia += idx[d] * sa[d];
            ib += idx[d] * sb[d];
        }
        p.a_idx[o] = ia;
        p.b_idx[o] = ib;
        for (std::size_t d = nd; d-- > 0;) {
            if (++idx[d] < p.out[d]) break;
            idx[d] = 0;
        }
    }
    return p;
}

template <class Fn>
void for_each_pair(const Broadcast& p, std::size_t na, std::size_t nb, Fn&& fn) {
    std::size_t n = shape_numel(p.out);
    switch (p.mode) {
        case Broadcast::Mode::same:
            for (std::size_t o = 0; o < n; ++o) fn(o, o, o);
            break;
        case Broadcast::Mode::b_suffix:
            for (std::size_t o = 0; o < n; ++o) fn(o, o, nb ? o % nb : 0);
            break;
        case Broadcast::Mode::a_suffix:
            for (std::size_t o = 0; o < n; ++o) fn(o, na ? o % na : 0, o);
            break;
        case Broadcast::Mode::general:
            for (std::size_t o = 0; o < n; ++o) fn(o, p.a_idx[o], p.b_idx[o]);
            break;
    }
}

// f(a,b) -> out; da(a,b,out), db(a,b,out) are local partials.
template <class T, class F, class DA, class DB>
Tensor<T> binary(const Tensor<T>& a, const Tensor<T>& b, const char* op, F f, DA da, DB db) {
    auto plan = std::make_shared<Broadcast>(plan_broadcast(a.shape(), b.shape(), op));
    Buffer<T> out(shape_numel(plan->out));
    const auto& av = a.vec();
    const auto& bv = b.vec();
    for_each_pair(*plan, av.size(), bv.size(), [&](std::size_t o, std::size_t ia, std::size_t ib) { out[o] = f(av[ia], bv[ib]); });
    Shape shape = plan->out;
    return make_result<T>(std::move(shape), std::move(out), op, {&a, &b}, [a, b, plan, da, db](const Buffer<T>& g) {
        const auto& av = a.vec();
        const auto& bv = b.vec();
        if (a.requires_grad()) {
            auto& ga = *a.node();
            ga.ensure_grad();
            for_each_pair(*plan, av.size(), bv.size(), [&](std::size_t o, std::size_t ia, std::size_t ib) {
                ga.grad[ia] += g[o] * da(av[ia], bv[ib]);
            });
        }
        if (b.requires_grad()) {
            auto& gb = *b.node();
            gb.ensure_grad();
            for_each_pair(*plan, av.size(), bv.size(), [&](std::size_t o, std::size_t ia, std::size_t ib) {
                gb.grad[ib] += g[o] * db(av[ia], bv[ib]);
            });
        }
    });
}

// f(x) -> y; df(x, y) is dy/dx.
template <class T, class F, class DF>
Tensor<T> unary(const Tensor<T>& a, const char* op, F f, DF df) {
    const auto& av = a.vec();
    Buffer<T> out(av.size());
    for (std::size_t i = 0; i < av.size(); ++i) out[i] = f(av[i]);
    auto result = make_result<T>(a.shape(), std::move(out), op, {&a}, nullptr);
    if (result.requires_grad()) {
        std::weak_ptr<TensorNode<T>> self = result.node();
        result.node()->backward = [a, self, df](const Buffer<T>& g) {
            auto me = self.lock();
            auto& ga = *a.node();
            ga.ensure_grad();
            const auto& av = a.vec();
            for (std::size_t i = 0; i < g.size(); ++i) ga.grad[i] += g[i] * df(av[i], me->data[i]);
        };
    }
    return result;
}

}  // namespace detail

// ---------------------------------------------------------------- element-wise

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::binary<T>(a, b, "add", [](T x, T y) { return x + y; }, [](T, T) { return T(1); }, [](T, T) { return T(1); });
}
template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::binary<T>(a, b, "sub", [](T x, T y) { return x - y; }, [](T, T) { return T(1); }, [](T, T) { return T(-1); });
}
template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::binary<T>(a, b, "mul", [](T x, T y) { return x * y; }, [](T, T y) { return y; }, [](T x, T) { return x; });
}
template <class T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::binary<T>(
        a, b, "div", [](T x, T y) { return x / y; }, [](T, T y) { return T(1) / y; }, [](T x, T y) { return -x / (y * y); });
}

template <class T>
Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) { return add(a, b); }
template <class T>
Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) { return sub(a, b); }
template <class T>
Tensor<T> operator*(const Tensor<T>& a, const Tensor<T>& b) { return mul(a, b); }
template <class T>
Tensor<T> operator/(const Tensor<T>& a, const Tensor<T>& b) { return div(a, b); }

template <class T>
Tensor<T> scale(const Tensor<T>& a, T s) {
    return detail::unary<T>(a, "scale", [s](T x) { return x * s; }, [s](T, T) { return s; });
}
template <class T>
Tensor<T> add_scalar(const Tensor<T>& a, T s) {
    return detail::unary<T>(a, "add_scalar", [s](T x) { return x + s; }, [](T, T) { return T(1); });
}
template <class T>
Tensor<T> operator*(const Tensor<T>& a, T s) { return scale(a, s); }
template <class T>
Tensor<T> operator*(T s, const Tensor<T>& a) { return scale(a, s); }
template <class T>
Tensor<T> operator-(const Tensor<T>& a) { return scale(a, T(-1)); }

template <class T>
Tensor<T> square(const Tensor<T>& a) {
    return detail::unary<T>(a, "square", [](T x) { return x * x; }, [](T x, T) { return T(2) * x; });
}
template <class T>
Tensor<T> exp(const Tensor<T>& a) {
    return detail::unary<T>(a, "exp", [](T x) { return std::exp(x); }, [](T, T y) { return y; });
}
template <class T>
Tensor<T> log(const Tensor<T>& a) {
    return detail::unary<T>(a, "log", [](T x) { return std::log(x); }, [](T x, T) { return T(1) / x; });
}
template <class T>
Tensor<T> sqrt(const Tensor<T>& a) {
    return detail::unary<T>(a, "sqrt", [](T x) { return std::sqrt(x); }, [](T, T y) { return T(0.5) / y; });
}
template <class T>
Tensor<T> tanh(const Tensor<T>& a) {
    return detail::unary<T>(a, "tanh", [](T x) { return std::tanh(x); }, [](T, T y) { return T(1) - y * y; });
}
template <class T>
Tensor<T> silu(const Tensor<T>& a) {
    return detail::unary<T>(
        a, "silu", [](T x) { return x / (T(1) + std::exp(-x)); },
        [](T x, T) {
            T s = T(1) / (T(1) + std::exp(-x));
            return s * (T(1) + x * (T(1) - s));
        });
}
/// Exact (erf) GELU.
template <class T>
Tensor<T> gelu(const Tensor<T>& a) {
    constexpr T inv_sqrt2 = T(0.70710678118654752440);
    constexpr T inv_sqrt2pi = T(0.39894228040143267794);
    return detail::unary<T>(
        a, "gelu", [](T x) { return T(0.5) * x * (T(1) + std::erf(x * inv_sqrt2)); },
        [](T x, T) { return T(0.5) * (T(1) + std::erf(x * inv_sqrt2)) + x * inv_sqrt2pi * std::exp(T(-0.5) * x * x); });
}
/// Clamp with zero gradient outside [lo, hi].
template <class T>
Tensor<T> clamp(const Tensor<T>& a, T lo, T hi) {
    return detail::unary<T>(
        a, "clamp", [lo, hi](T x) { return std::clamp(x, lo, hi); }, [lo, hi](T x, T) { return (x >= lo && x <= hi) ? T(1) : T(0); });
}

// ----------------------------------------------------------------- reductions

template <class T>
Tensor<T> sum(const Tensor<T>& a) {
    T s = 0;
    for (T v : a.vec()) s += v;
    return detail::make_result<T>(Shape{}, Buffer<T>{s}, "sum", {&a}, [a](const Buffer<T>& g) {
        auto& ga = *a.node();
        ga.ensure_grad();
        for (auto& x : ga.grad) x += g[0];
    });
}

template <class T>
Tensor<T> mean(const Tensor<T>& a) {
    require(a.numel() > 0, "mean of empty tensor");
    return scale(sum(a), T(1) / static_cast<T>(a.numel()));
}

/// Sum over the last axis.
template <class T>
Tensor<T> sum_last(const Tensor<T>& a) {
    require(a.ndim() >= 1, "sum_last: scalar input");
    std::size_t c = a.shape().back();
    std::size_t rows = c ? a.numel() / c : 0;
    Shape out_shape(a.shape().begin(), a.shape().end() - 1);
    Buffer<T> out(rows, T(0));
    const auto& av = a.vec();
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < c; ++j) out[r] += av[r * c + j];
    return detail::make_result<T>(std::move(out_shape), std::move(out), "sum_last", {&a}, [a, c, rows](const Buffer<T>& g) {
        auto& ga = *a.node();
        ga.ensure_grad();
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < c; ++j) ga.grad[r * c + j] += g[r];
    });
}

// ---------------------------------------------------------------- linear algebra

/// (..., M, K) x (K, N) -> (..., M, N), or batched with equal leading dims.
template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    require(a.ndim() >= 2 && b.ndim() >= 2, "matmul: operands must be at least 2-D");
    std::size_t M = a.dim(a.ndim() - 2), K = a.dim(a.ndim() - 1);
    std::size_t Kb = b.dim(b.ndim() - 2), N = b.dim(b.ndim() - 1);
    if (K != Kb) throw ContractViolation("matmul: shape mismatch " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    std::size_t batch = a.numel() / (M * K == 0 ? 1 : M * K);
    bool shared = b.ndim() == 2;
    if (!shared) {
        Shape ab(a.shape().begin(), a.shape().end() - 2), bb(b.shape().begin(), b.shape().end() - 2);
        if (ab != bb) throw ContractViolation("matmul: batch mismatch " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    }
    Shape out_shape(a.shape().begin(), a.shape().end() - 2);
    out_shape.push_back(M);
    out_shape.push_back(N);
    Buffer<T> out(batch * M * N);
    for (std::size_t i = 0; i < batch; ++i) {
        detail::CMapMat<T> A(a.vec().data() + i * M * K, M, K);
        detail::CMapMat<T> B(b.vec().data() + (shared ? 0 : i * K * N), K, N);
        detail::MapMat<T>(out.data() + i * M * N, M, N).noalias() = A * B;
    }
    return detail::make_result<T>(std::move(out_shape), std::move(out), "matmul", {&a, &b},
                                  [a, b, M, K, N, batch, shared](const Buffer<T>& g) {
                                      for (std::size_t i = 0; i < batch; ++i) {
                                          detail::CMapMat<T> G(g.data() + i * M * N, M, N);
                                          if (a.requires_grad()) {
                                              a.node()->ensure_grad();
                                              detail::CMapMat<T> B(b.vec().data() + (shared ? 0 : i * K * N), K, N);
                                              detail::MapMat<T>(a.node()->grad.data() + i * M * K, M, K).noalias() += G * B.transpose();
                                          }
                                          if (b.requires_grad()) {
                                              b.node()->ensure_grad();
                                              detail::CMapMat<T> A(a.vec().data() + i * M * K, M, K);
                                              detail::MapMat<T>(b.node()->grad.data() + (shared ? 0 : i * K * N), K, N).noalias() +=
                                                  A.transpose() * G;
                                          }
                                      }
                                  });
}

/// x (..., in) * W (in, out) + bias (out), fused into one GEMM over all rows.
template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>* bias = nullptr) {
    require(w.ndim() == 2, "linear: weight must be 2-D");
    std::size_t in = w.dim(0), outc = w.dim(1);
    if (x.ndim() < 1 || x.shape().back() != in)
        throw ContractViolation("linear: input " + shape_str(x.shape()) + " vs weight " + shape_str(w.shape()));
    if (bias && (bias->ndim() != 1 || bias->dim(0) != outc)) throw ContractViolation("linear: bias shape " + shape_str(bias->shape()));
    std::size_t rows = x.numel() / in;
    Shape out_shape = x.shape();
    out_shape.back() = outc;
    Buffer<T> out(rows * outc);
    {
        detail::MapMat<T> Y(out.data(), rows, outc);
        Y.noalias() = detail::CMapMat<T>(x.vec().data(), rows, in) * detail::CMapMat<T>(w.vec().data(), in, outc);
        if (bias) Y.rowwise() += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(bias->vec().data(), outc);
    }
    Tensor<T> b = bias ? *bias : Tensor<T>();
    bool has_bias = bias != nullptr;
    return detail::make_result<T>(std::move(out_shape), std::move(out), "linear", {&x, &w, bias},
                                  [x, w, b, has_bias, rows, in, outc](const Buffer<T>& g) {
                                      detail::CMapMat<T> G(g.data(), rows, outc);
                                      if (x.requires_grad()) {
                                          x.node()->ensure_grad();
                                          detail::MapMat<T>(x.node()->grad.data(), rows, in).noalias() +=
                                              G * detail::CMapMat<T>(w.vec().data(), in, outc).transpose();
                                      }
                                      if (w.requires_grad()) {
                                          w.node()->ensure_grad();
                                          detail::MapMat<T>(w.node()->grad.data(), in, outc).noalias() +=
                                              detail::CMapMat<T>(x.vec().data(), rows, in).transpose() * G;
                                      }
                                      if (has_bias && b.requires_grad()) {
                                          b.node()->ensure_grad();
                                          Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>>(b.node()->grad.data(), outc) += G.colwise().sum();
                                      }
                                  });
}

// ------------------------------------------------------------------ convolution

namespace detail {

struct ConvGeom {
    std::size_t B, C, H, W, O, k, stride, pad, OH, OW;
};

// cols: (C*k*k, OH*OW) for one image.
template <class T>
void im2col(const T* img, const ConvGeom& g, T* cols) {
    std::size_t plane = g.OH * g.OW;
    for (std::size_t c = 0; c < g.C; ++c)
        for (std::size_t ki = 0; ki < g.k; ++ki)
            for (std::size_t kj = 0; kj < g.k; ++kj) {
                T* row = cols + ((c * g.k + ki) * g.k + kj) * plane;
                for (std::size_t oy = 0; oy < g.OH; ++oy) {
                    long iy = static_cast<long>(oy * g.stride + ki) - static_cast<long>(g.pad);
                    for (std::size_t ox = 0; ox < g.OW; ++ox) {
                        long ix = static_cast<long>(ox * g.stride + kj) - static_cast<long>(g.pad);
                        bool inside = iy >= 0 && iy < static_cast<long>(g.H) && ix >= 0 && ix < static_cast<long>(g.W);
                        row[oy * g.OW + ox] = inside ? img[(c * g.H + iy) * g.W + ix] : T(0);
                    }
                }
            }
}

template <class T>
void col2im(const T* cols, const ConvGeom& g, T* img) {
    std::size_t plane = g.OH * g.OW;
    for (std::size_t c = 0; c < g.C; ++c)
        for (std::size_t ki = 0; ki < g.k; ++ki)
            for (std::size_t kj = 0; kj < g.k; ++kj) {
                const T* row = cols + ((c * g.k + ki) * g.k + kj) * plane;
                for (std::size_t oy = 0; oy < g.OH; ++oy) {
                    long iy = static_cast<long>(oy * g.stride + ki) - static_cast<long>(g.pad);
                    if (iy < 0 || iy >= static_cast<long>(g.H)) continue;
                    for (std::size_t ox = 0; ox < g.OW; ++ox) {
                        long ix = static_cast<long>(ox * g.stride + kj) - static_cast<long>(g.pad);
                        if (ix < 0 || ix >= static_cast<long>(g.W)) continue;
                        img[(c * g.H + iy) * g.W + ix] += row[oy * g.OW + ox];
                    }
                }
            }
}

}  // namespace detail

/// 2-D convolution, x (B,C,H,W), weight (O,C,k,k), bias (O); zero padding.
template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>* bias, std::size_t stride = 1, std::size_t pad = 0) {
    require(x.ndim() == 4 && w.ndim() == 4, "conv2d: expects x (B,C,H,W) and weight (O,C,k,k)");
    require(stride >= 1, "conv2d: stride must be >= 1");
    detail::ConvGeom g{x.dim(0), x.dim(1), x.dim(2), x.dim(3), w.dim(0), w.dim(2), stride, pad, 0, 0};
    if (w.dim(1) != g.C || w.dim(3) != g.k)
        throw ContractViolation("conv2d: weight " + shape_str(w.shape()) + " incompatible with input " + shape_str(x.shape()));
    if (g.H + 2 * pad < g.k || g.W + 2 * pad < g.k) throw ContractViolation("conv2d: kernel larger than padded input");
    if (bias && (bias->ndim() != 1 || bias->dim(0) != g.O)) throw ContractViolation("conv2d: bias shape " + shape_str(bias->shape()));
    g.OH = (g.H + 2 * pad - g.k) / stride + 1;
    g.OW = (g.W + 2 * pad - g.k) / stride + 1;
    std::size_t ckk = g.C * g.k * g.k, plane = g.OH * g.OW;
    Buffer<T> out(g.B * g.O * plane);
    Buffer<T> cols(ckk * plane);
    detail::CMapMat<T> Wm(w.vec().data(), g.O, ckk);
    for (std::size_t b = 0; b < g.B; ++b) {
        detail::im2col(x.vec().data() + b * g.C * g.H * g.W, g, cols.data());
        detail::MapMat<T> Y(out.data() + b * g.O * plane, g.O, plane);
        Y.noalias() = Wm * detail::CMapMat<T>(cols.data(), ckk, plane);
        if (bias) Y.colwise() += Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>>(bias->vec().data(), g.O);
    }
    Tensor<T> bt = bias ? *bias : Tensor<T>();
    bool has_bias = bias != nullptr;
    return detail::make_result<T>(Shape{g.B, g.O, g.OH, g.OW}, std::move(out), "conv2d", {&x, &w, bias},
                                  [x, w, bt, has_bias, g](const Buffer<T>& grad) {
                                      std::size_t ckk = g.C * g.k * g.k, plane = g.OH * g.OW;
                                      Buffer<T> cols(ckk * plane);
                                      detail::CMapMat<T> Wm(w.vec().data(), g.O, ckk);
                                      if (w.requires_grad()) w.node()->ensure_grad();
                                      if (x.requires_grad()) x.node()->ensure_grad();
                                      if (has_bias && bt.requires_grad()) bt.node()->ensure_grad();
                                      for (std::size_t b = 0; b < g.B; ++b) {
                                          detail::CMapMat<T> G(grad.data() + b * g.O * plane, g.O, plane);
                                          if (w.requires_grad()) {
                                              detail::im2col(x.vec().data() + b * g.C * g.H * g.W, g, cols.data());
                                              detail::MapMat<T>(w.node()->grad.data(), g.O, ckk).noalias() +=
                                                  G * detail::CMapMat<T>(cols.data(), ckk, plane).transpose();
                                          }
                                          if (x.requires_grad()) {
                                              detail::MapMat<T>(cols.data(), ckk, plane).noalias() = Wm.transpose() * G;
                                              detail::col2im(cols.data(), g, x.node()->grad.data() + b * g.C * g.H * g.W);
                                          }
                                          if (has_bias && bt.requires_grad())
                                              Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>>(bt.node()->grad.data(), g.O) += G.rowwise().sum();
                                      }
                                  });
}

/// Nearest-neighbour 2x spatial up-sampling of (B,C,H,W).
template <class T>
Tensor<T> upsample2x(const Tensor<T>& x) {
    require(x.ndim() == 4, "upsample2x: expects (B,C,H,W)");
    std::size_t BC = x.dim(0) * x.dim(1), H = x.dim(2), W = x.dim(3);
    Buffer<T> out(BC * 4 * H * W);
    const auto& xv = x.vec();
    for (std::size_t p = 0; p < BC; ++p)
        for (std::size_t i = 0; i < 2 * H; ++i)
            for (std::size_t j = 0; j < 2 * W; ++j) out[(p * 2 * H + i) * 2 * W + j] = xv[(p * H + i / 2) * W + j / 2];
    return detail::make_result<T>(Shape{x.dim(0), x.dim(1), 2 * H, 2 * W}, std::move(out), "upsample2x", {&x},
                                  [x, BC, H, W](const Buffer<T>& g) {
                                      auto& gx = *x.node();
                                      gx.ensure_grad();
                                      for (std::size_t p = 0; p < BC; ++p)
                                          for (std::size_t i = 0; i < 2 * H; ++i)
                                              for (std::size_t j = 0; j < 2 * W; ++j)
                                                  gx.grad[(p * H + i / 2) * W + j / 2] += g[(p * 2 * H + i) * 2 * W + j];
                                  });
}

// ---------------------------------------------------------------- normalization

/// Layer normalization over the last axis; gamma/beta optional.
template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>* gamma = nullptr, const Tensor<T>* beta = nullptr, T eps = T(1e-6)) {
    require(x.ndim() >= 1, "layer_norm: scalar input");
    std::size_t c = x.shape().back();
    if (gamma && (gamma->numel() != c)) throw ContractViolation("layer_norm: gamma size mismatch");
    if (beta && (beta->numel() != c)) throw ContractViolation("layer_norm: beta size mismatch");
    std::size_t rows = c ? x.numel() / c : 0;
    Buffer<T> out(x.numel());
    auto xhat = std::make_shared<Buffer<T>>(x.numel());
    auto rstd = std::make_shared<Buffer<T>>(rows);
    const auto& xv = x.vec();
    for (std::size_t r = 0; r < rows; ++r) {
        const T* xr = xv.data() + r * c;
        T mu = 0;
        for (std::size_t j = 0; j < c; ++j) mu += xr[j];
        mu /= static_cast<T>(c);
        T var = 0;
        for (std::size_t j = 0; j < c; ++j) var += (xr[j] - mu) * (xr[j] - mu);
        var /= static_cast<T>(c);
        T rs = T(1) / std::sqrt(var + eps);
        (*rstd)[r] = rs;
        for (std::size_t j = 0; j < c; ++j) {
            T h = (xr[j] - mu) * rs;
            (*xhat)[r * c + j] = h;
            out[r * c + j] = h * (gamma ? gamma->vec()[j] : T(1)) + (beta ? beta->vec()[j] : T(0));
        }
    }
    Tensor<T> gt = gamma ? *gamma : Tensor<T>();
    Tensor<T> bt = beta ? *beta : Tensor<T>();
    bool hg = gamma != nullptr, hb = beta != nullptr;
    return detail::make_result<T>(x.shape(), std::move(out), "layer_norm", {&x, gamma, beta},
                                  [x, gt, bt, hg, hb, xhat, rstd, rows, c](const Buffer<T>& g) {
                                      if (hg && gt.requires_grad()) gt.node()->ensure_grad();
                                      if (hb && bt.requires_grad()) bt.node()->ensure_grad();
                                      if (x.requires_grad()) x.node()->ensure_grad();
                                      Buffer<T> dh(c);
                                      for (std::size_t r = 0; r < rows; ++r) {
                                          const T* gr = g.data() + r * c;
                                          const T* hr = xhat->data() + r * c;
                                          T m1 = 0, m2 = 0;
                                          for (std::size_t j = 0; j < c; ++j) {
                                              dh[j] = gr[j] * (hg ? gt.vec()[j] : T(1));
                                              m1 += dh[j];
                                              m2 += dh[j] * hr[j];
                                              if (hg && gt.requires_grad()) gt.node()->grad[j] += gr[j] * hr[j];
                                              if (hb && bt.requires_grad()) bt.node()->grad[j] += gr[j];
                                          }
                                          if (!x.requires_grad()) continue;
                                          m1 /= static_cast<T>(c);
                                          m2 /= static_cast<T>(c);
                                          T rs = (*rstd)[r];
                                          T* gx = x.node()->grad.data() + r * c;
                                          for (std::size_t j = 0; j < c; ++j) gx[j] += rs * (dh[j] - m1 - hr[j] * m2);
                                      }
                                  });
}

/// Softmax over the last axis.
template <class T>
Tensor<T> softmax(const Tensor<T>& x) {
    require(x.ndim() >= 1, "softmax: scalar input");
    std::size_t c = x.shape().back();
    std::size_t rows = c ? x.numel() / c : 0;
    Buffer<T> out(x.numel());
    const auto& xv = x.vec();
    for (std::size_t r = 0; r < rows; ++r) {
        const T* xr = xv.data() + r * c;
        T mx = *std::max_element(xr, xr + c);
        T s = 0;
        for (std::size_t j = 0; j < c; ++j) s += (out[r * c + j] = std::exp(xr[j] - mx));
        for (std::size_t j = 0; j < c; ++j) out[r * c + j] /= s;
    }
    auto result = detail::make_result<T>(x.shape(), std::move(out), "softmax", {&x}, nullptr);
    if (result.requires_grad()) {
        std::weak_ptr<TensorNode<T>> self = result.node();
        result.node()->backward = [x, self, rows, c](const Buffer<T>& g) {
            auto me = self.lock();
            auto& gx = *x.node();
            gx.ensure_grad();
            for (std::size_t r = 0; r < rows; ++r) {
                const T* y = me->data.data() + r * c;
                const T* gr = g.data() + r * c;
                T dot = 0;
                for (std::size_t j = 0; j < c; ++j) dot += gr[j] * y[j];
                for (std::size_t j = 0; j < c; ++j) gx.grad[r * c + j] += y[j] * (gr[j] - dot);
            }
        };
    }
    return result;
}

/// Full bidirectional multi-head attention softmax(Q K^T / sqrt(d)) V.
/// q (B,Lq,C), k/v (B,Lk,C); key_valid (B*Lk flags, 1 = attendable) masks
/// padding keys. Every batch row needs at least one valid key.
template <class T>
Tensor<T> attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, std::size_t heads,
                    const std::vector<std::uint8_t>* key_valid = nullptr) {
    require(q.ndim() == 3 && k.ndim() == 3 && v.ndim() == 3, "attention: expects (B,L,C) operands");
    std::size_t B = q.dim(0), Lq = q.dim(1), C = q.dim(2), Lk = k.dim(1);
    if (k.dim(0) != B || v.dim(0) != B || k.dim(2) != C || v.dim(2) != C || v.dim(1) != Lk)
        throw ContractViolation("attention: q/k/v shapes disagree");
    require(heads >= 1 && C % heads == 0, "attention: width not divisible by heads");
    if (key_valid) require(key_valid->size() == B * Lk, "attention: key mask size mismatch");
    std::size_t d = C / heads;
    T sc = T(1) / std::sqrt(static_cast<T>(d));
    auto probs = std::make_shared<Buffer<T>>(B * heads * Lq * Lk);
    Buffer<T> out(B * Lq * C);
    Eigen::Matrix<T, 1, Eigen::Dynamic> bias(Lk);
    for (std::size_t b = 0; b < B; ++b) {
        if (key_valid) {
            bool any = false;
            for (std::size_t j = 0; j < Lk; ++j) any |= (*key_valid)[b * Lk + j] != 0;
            require(any, "attention: batch row without valid keys");
            for (std::size_t j = 0; j < Lk; ++j)
                bias[j] = (*key_valid)[b * Lk + j] ? T(0) : -std::numeric_limits<T>::infinity();
        }
        for (std::size_t h = 0; h < heads; ++h) {
            detail::CStridedMap<T> Q(q.vec().data() + b * Lq * C + h * d, Lq, d, Eigen::OuterStride<>(C));
            detail::CStridedMap<T> K(k.vec().data() + b * Lk * C + h * d, Lk, d, Eigen::OuterStride<>(C));
            detail::CStridedMap<T> V(v.vec().data() + b * Lk * C + h * d, Lk, d, Eigen::OuterStride<>(C));
            detail::MapMat<T> P(probs->data() + (b * heads + h) * Lq * Lk, Lq, Lk);
            P.noalias() = (Q * K.transpose()) * sc;
            if (key_valid) P.array().rowwise() += bias.array();
            P.array().colwise() -= P.array().rowwise().maxCoeff();
            P.array() = P.array().exp();
            P.array().colwise() /= P.array().rowwise().sum();
            detail::StridedMap<T>(out.data() + b * Lq * C + h * d, Lq, d, Eigen::OuterStride<>(C)).noalias() = P * V;
        }
    }
    return detail::make_result<T>(q.shape(), std::move(out), "attention", {&q, &k, &v},
                                  [q, k, v, probs, B, Lq, Lk, C, d, heads, sc](const Buffer<T>& g) {
                                      for (auto* t : {&q, &k, &v})
                                          if (t->requires_grad()) t->node()->ensure_grad();
                                      detail::RowMat<T> dP(Lq, Lk);
                                      for (std::size_t b = 0; b < B; ++b)
                                          for (std::size_t h = 0; h < heads; ++h) {
                                              auto off_q = b * Lq * C + h * d, off_k = b * Lk * C + h * d;
                                              detail::CStridedMap<T> Q(q.vec().data() + off_q, Lq, d, Eigen::OuterStride<>(C));
                                              detail::CStridedMap<T> K(k.vec().data() + off_k, Lk, d, Eigen::OuterStride<>(C));
                                              detail::CStridedMap<T> V(v.vec().data() + off_k, Lk, d, Eigen::OuterStride<>(C));
                                              detail::CStridedMap<T> G(g.data() + off_q, Lq, d, Eigen::OuterStride<>(C));
                                              detail::CMapMat<T> P(probs->data() + (b * heads + h) * Lq * Lk, Lq, Lk);
                                              if (v.requires_grad())
                                                  detail::StridedMap<T>(v.node()->grad.data() + off_k, Lk, d, Eigen::OuterStride<>(C)).noalias() +=
                                                      P.transpose() * G;
                                              if (!q.requires_grad() && !k.requires_grad()) continue;
                                              dP.noalias() = G * V.transpose();
                                              auto rowdot = (dP.cwiseProduct(P)).rowwise().sum().eval();
                                              dP = P.cwiseProduct(dP.colwise() - rowdot) * sc;
                                              if (q.requires_grad())
                                                  detail::StridedMap<T>(q.node()->grad.data() + off_q, Lq, d, Eigen::OuterStride<>(C)).noalias() +=
                                                      dP * K;
                                              if (k.requires_grad())
                                                  detail::StridedMap<T>(k.node()->grad.data() + off_k, Lk, d, Eigen::OuterStride<>(C)).noalias() +=
                                                      dP.transpose() * Q;
                                          }
                                  });
}

/// Inverted dropout; identity when not training or p == 0.
template <class T>
Tensor<T> dropout(const Tensor<T>& x, double p, RngStream& rng, bool training) {
    require(p >= 0.0 && p < 1.0, "dropout: rate must lie in [0,1)");
    if (!training || p == 0.0) return x;
    auto keep = std::make_shared<Buffer<T>>(x.numel());
    T s = static_cast<T>(1.0 / (1.0 - p));
    for (auto& m : *keep) m = rng.uniform() >= p ? s : T(0);
    Buffer<T> out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.vec()[i] * (*keep)[i];
    return detail::make_result<T>(x.shape(), std::move(out), "dropout", {&x}, [x, keep](const Buffer<T>& g) {
        auto& gx = *x.node();
        gx.ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) gx.grad[i] += g[i] * (*keep)[i];
    });
}

// -------------------------------------------------------------- shape plumbing

template <class T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
    if (shape_numel(shape) != x.numel())
        throw ContractViolation("reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape));
    Buffer<T> out = x.vec();
    return detail::make_result<T>(std::move(shape), std::move(out), "reshape", {&x},
                                  [x](const Buffer<T>& g) { detail::add_grad<T>(x, g); });
}

/// General axis permutation; out.shape[i] = x.shape[perm[i]].
template <class T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<std::size_t>& perm) {
    std::size_t nd = x.ndim();
    require(perm.size() == nd, "permute: rank mismatch");
    Shape out_shape(nd);
    std::vector<std::size_t> in_stride(nd), src_stride(nd);
    for (std::size_t i = nd, acc = 1; i-- > 0;) {
        in_stride[i] = acc;
        acc *= x.dim(i);
    }
    std::vector<bool> used(nd, false);
    for (std::size_t i = 0; i < nd; ++i) {
        require(perm[i] < nd && !used[perm[i]], "permute: invalid permutation");
        used[perm[i]] = true;
        out_shape[i] = x.dim(perm[i]);
        src_stride[i] = in_stride[perm[i]];
    }
    std::size_t n = x.numel();
    auto map = std::make_shared<std::vector<std::size_t>>(n);
    std::vector<std::size_t> idx(nd, 0);
    for (std::size_t o = 0; o < n; ++o) {
        std::size_t s = 0;
        for (std::size_t d = 0; d < nd; ++d) s += idx[d] * src_stride[d];
        (*map)[o] = s;
        for (std::size_t d = nd; d-- > 0;) {
            if (++idx[d] < out_shape[d]) break;
            idx[d] = 0;
        }
    }
    Buffer<T> out(n);
    for (std::size_t o = 0; o < n; ++o) out[o] = x.vec()[(*map)[o]];
    return detail::make_result<T>(std::move(out_shape), std::move(out), "permute", {&x}, [x, map](const Buffer<T>& g) {
        auto& gx = *x.node();
        gx.ensure_grad();
        for (std::size_t o = 0; o < g.size(); ++o) gx.grad[(*map)[o]] += g[o];
    });
}

template <class T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis) {
    require(!parts.empty(), "concat: no inputs");
    const Shape& s0 = parts[0].shape();
    require(axis < s0.size(), "concat: axis out of range");
    std::size_t outer = 1, inner = 1, total = 0;
    for (std::size_t i = 0; i < axis; ++i) outer *= s0[i];
    for (std::size_t i = axis + 1; i < s0.size(); ++i) inner *= s0[i];
    for (auto& p : parts) {
        require(p.ndim() == s0.size(), "concat: rank mismatch");
        for (std::size_t i = 0; i < s0.size(); ++i)
            if (i != axis && p.dim(i) != s0[i]) throw ContractViolation("concat: shape mismatch " + shape_str(p.shape()));
        total += p.dim(axis);
    }
    Shape out_shape = s0;
    out_shape[axis] = total;
    Buffer<T> out(outer * total * inner);
    std::size_t off = 0;
    for (auto& p : parts) {
        std::size_t len = p.dim(axis) * inner;
        for (std::size_t o = 0; o < outer; ++o)
            std::copy_n(p.vec().data() + o * len, len, out.data() + o * total * inner + off);
        off += len;
    }
    auto result = detail::make_result<T>(std::move(out_shape), std::move(out), "concat", {}, nullptr);
    bool need = false;
    if (grad_enabled())
        for (auto& p : parts) need |= p.requires_grad();
    if (need) {
        auto node = result.node();
        node->requires_grad = true;
        for (auto& p : parts)
            if (p.requires_grad()) node->parents.push_back(p.node());
        node->backward = [parts, outer, total, inner](const Buffer<T>& g) {
            std::size_t off = 0;
            for (auto& p : parts) {
                std::size_t len = p.numel() / outer;
                if (p.requires_grad()) {
                    auto& gp = *p.node();
                    gp.ensure_grad();
                    for (std::size_t o = 0; o < outer; ++o)
                        for (std::size_t j = 0; j < len; ++j) gp.grad[o * len + j] += g[o * total * inner + off + j];
                }
                off += len;
            }
        };
    }
    return result;
}

/// x[..., start:start+len, ...] along `axis`.
template <class T>
Tensor<T> slice(const Tensor<T>& x, std::size_t axis, std::size_t start, std::size_t len) {
    require(axis < x.ndim(), "slice: axis out of range");
    require(start + len <= x.dim(axis), "slice: range exceeds extent");
    std::size_t outer = 1, inner = 1, full = x.dim(axis);
    for (std::size_t i = 0; i < axis; ++i) outer *= x.dim(i);
    for (std::size_t i = axis + 1; i < x.ndim(); ++i) inner *= x.dim(i);
    Shape out_shape = x.shape();
    out_shape[axis] = len;
    Buffer<T> out(outer * len * inner);
    for (std::size_t o = 0; o < outer; ++o)
        std::copy_n(x.vec().data() + (o * full + start) * inner, len * inner, out.data() + o * len * inner);
    return detail::make_result<T>(std::move(out_shape), std::move(out), "slice", {&x},
                                  [x, outer, inner, full, start, len](const Buffer<T>& g) {
                                      auto& gx = *x.node();
                                      gx.ensure_grad();
                                      for (std::size_t o = 0; o < outer; ++o)
                                          for (std::size_t j = 0; j < len * inner; ++j)
                                              gx.grad[(o * full + start) * inner + j] += g[o * len * inner + j];
                                  });
}

/// Rows of x viewed as (R, rest...): out[i] = x[idx[i]].
template <class T>
Tensor<T> index_rows(const Tensor<T>& x, std::vector<std::size_t> idx) {
    require(x.ndim() >= 1, "index_rows: scalar input");
    std::size_t R = x.dim(0), row = R ? x.numel() / R : 0;
    for (auto i : idx) require(i < R, "index_rows: index out of range");
    Shape out_shape = x.shape();
    out_shape[0] = idx.size();
    Buffer<T> out(idx.size() * row);
    for (std::size_t i = 0; i < idx.size(); ++i) std::copy_n(x.vec().data() + idx[i] * row, row, out.data() + i * row);
    auto shared_idx = std::make_shared<std::vector<std::size_t>>(std::move(idx));
    return detail::make_result<T>(std::move(out_shape), std::move(out), "index_rows", {&x}, [x, shared_idx, row](const Buffer<T>& g) {
        auto& gx = *x.node();
        gx.ensure_grad();
        for (std::size_t i = 0; i < shared_idx->size(); ++i)
            for (std::size_t j = 0; j < row; ++j) gx.grad[(*shared_idx)[i] * row + j] += g[i * row + j];
    });
}

/// Copy of `base` with rows idx[i] replaced by src[i]. Indices must be unique.
template <class T>
Tensor<T> scatter_rows(const Tensor<T>& base, std::vector<std::size_t> idx, const Tensor<T>& src) {
    require(base.ndim() >= 1 && src.ndim() == base.ndim(), "scatter_rows: rank mismatch");
    std::size_t R = base.dim(0), row = R ? base.numel() / R : 0;
    require(src.dim(0) == idx.size() && src.numel() == idx.size() * row, "scatter_rows: source shape mismatch");
    std::vector<std::uint8_t> hit(R, 0);
    for (auto i : idx) {
        require(i < R, "scatter_rows: index out of range");
        require(!hit[i], "scatter_rows: duplicate index");
        hit[i] = 1;
    }
    Buffer<T> out = base.vec();
    for (std::size_t i = 0; i < idx.size(); ++i) std::copy_n(src.vec().data() + i * row, row, out.data() + idx[i] * row);
    auto shared_idx = std::make_shared<std::vector<std::size_t>>(std::move(idx));
    auto shared_hit = std::make_shared<std::vector<std::uint8_t>>(std::move(hit));
    return detail::make_result<T>(base.shape(), std::move(out), "scatter_rows", {&base, &src},
                                  [base, src, shared_idx, shared_hit, row](const Buffer<T>& g) {
                                      if (base.requires_grad()) {
                                          auto& gb = *base.node();
                                          gb.ensure_grad();
                                          for (std::size_t r = 0; r < shared_hit->size(); ++r)
                                              if (!(*shared_hit)[r])
                                                  for (std::size_t j = 0; j < row; ++j) gb.grad[r * row + j] += g[r * row + j];
                                      }
                                      if (src.requires_grad()) {
                                          auto& gs = *src.node();
                                          gs.ensure_grad();
                                          for (std::size_t i = 0; i < shared_idx->size(); ++i)
                                              for (std::size_t j = 0; j < row; ++j) gs.grad[i * row + j] += g[(*shared_idx)[i] * row + j];
                                      }
                                  });
}

/// Stops gradient flow.
template <class T>
Tensor<T> detach(const Tensor<T>& x) {
    return x.detach();
}

// ------------------------------------------------------------------ composites

/// Adaptive layer norm: LN(x) * (1 + scale) + shift, shift/scale shaped like x
/// (or broadcastable to it).
template <class T>
Tensor<T> ada_layer_norm(const Tensor<T>& x, const Tensor<T>& shift, const Tensor<T>& scale_) {
    auto h = layer_norm<T>(x);
    return add(add(h, mul(h, scale_)), shift);
}

}  // namespace omnicast
