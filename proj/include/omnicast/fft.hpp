// Copyright (C) 2026 omnicast contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <fftw3.h>

#include <complex>
#include <mutex>
#include <vector>

#include "omnicast/error.hpp"

namespace omnicast {

namespace detail {
inline std::mutex& fftw_planner_mutex() {
    static std::mutex m;
    return m;
}
}  // namespace detail

/// Complex 2-D DFT of an H x W row-major array. The inverse is normalized by
/// 1/(H*W) so fft2(fft2(x), inverse) == x.
inline std::vector<std::complex<double>> fft2(std::vector<std::complex<double>> data, std::size_t H, std::size_t W,
                                              bool inverse = false) {
    require(data.size() == H * W && H > 0 && W > 0, "fft2: data size does not match H x W");
    std::vector<std::complex<double>> out(H * W);
    auto* in_ptr = reinterpret_cast<fftw_complex*>(data.data());
    auto* out_ptr = reinterpret_cast<fftw_complex*>(out.data());
    fftw_plan plan;
    {
        std::lock_guard lock(detail::fftw_planner_mutex());
        plan = fftw_plan_dft_2d(static_cast<int>(H), static_cast<int>(W), in_ptr, out_ptr, inverse ? FFTW_BACKWARD : FFTW_FORWARD,
                                FFTW_ESTIMATE);
    }
    fftw_execute(plan);
    {
        std::lock_guard lock(detail::fftw_planner_mutex());
        fftw_destroy_plan(plan);
    }
    if (inverse) {
        double s = 1.0 / static_cast<double>(H * W);
        for (auto& v : out) v *= s;
    }
    return out;
}

template <class T>
std::vector<std::complex<double>> fft2_real(const T* values, std::size_t H, std::size_t W) {
    std::vector<std::complex<double>> c(H * W);
    for (std::size_t i = 0; i < H * W; ++i) c[i] = {static_cast<double>(values[i]), 0.0};
    return fft2(std::move(c), H, W);
}

/// Signed integer frequency of DFT bin i out of n.
inline long fft_freq(std::size_t i, std::size_t n) {
    return i <= n / 2 ? static_cast<long>(i) : static_cast<long>(i) - static_cast<long>(n);
}

}  // namespace omnicast
