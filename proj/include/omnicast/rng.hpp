// Copyright (C) 2026 omnicast contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

#include "omnicast/error.hpp"

namespace omnicast {

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

inline std::uint64_t fnv1a(std::string_view s, std::uint64_t h = 0xCBF29CE484222325ULL) {
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001B3ULL;
    }
    return h;
}

/// One independent random stream. Streams are cheap to copy; a copy replays
/// the same sequence.
class RngStream {
public:
    explicit RngStream(std::uint64_t seed = 0) : seed_(seed), engine_(seed) {}

    std::uint64_t seed() const noexcept { return seed_; }

    double uniform() { return std::uniform_real_distribution<double>(0.0, 1.0)(engine_); }
    double uniform(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(engine_); }
    double normal() { return normal_(engine_); }
    std::size_t below(std::size_t n) {
        require(n > 0, "RngStream::below: empty range");
        return std::uniform_int_distribution<std::size_t>(0, n - 1)(engine_);
    }

    template <class T>
    void fill_normal(std::vector<T>& out) {
        for (auto& v : out) v = static_cast<T>(normal());
    }

    /// Fisher-Yates over the first `count` slots: the leading `count`
    /// entries become a uniform random subset in random order.
    template <class T>
    void partial_shuffle(std::vector<T>& items, std::size_t count) {
        require(count <= items.size(), "partial_shuffle: count exceeds size");
        for (std::size_t i = 0; i < count; ++i) {
            std::size_t j = i + below(items.size() - i);
            std::swap(items[i], items[j]);
        }
    }

    /// Derive a child stream; does not advance this stream.
    RngStream child(std::string_view name, std::uint64_t index = 0) const {
        return RngStream(splitmix64(splitmix64(seed_ ^ fnv1a(name)) + index));
    }

private:
    std::uint64_t seed_;
    std::mt19937_64 engine_;
    std::normal_distribution<double> normal_{0.0, 1.0};
};

/// Seedable root that hands out named, independent sub-streams
/// ("dropout/enc3", "mask", "diffusion", "member", ...).
class RootRng {
public:
    explicit RootRng(std::uint64_t seed) : seed_(seed) {}
    std::uint64_t seed() const noexcept { return seed_; }
    RngStream stream(std::string_view name, std::uint64_t index = 0) const {
        return RngStream(seed_).child(name, index);
    }

private:
    std::uint64_t seed_;
};

}  // namespace omnicast
