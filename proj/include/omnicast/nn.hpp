// Copyright (C) 2026 omnicast contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <nlohmann/json.hpp>

#include <cmath>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "omnicast/octf.hpp"
#include "omnicast/ops.hpp"

namespace omnicast::nn {

template <class T>
struct NamedParam {
    std::string name;
    Tensor<T> tensor;
};

template <class T>
using ParamList = std::vector<NamedParam<T>>;

template <class T>
std::vector<Tensor<T>> tensors_of(const ParamList<T>& params) {
    std::vector<Tensor<T>> out;
    out.reserve(params.size());
    for (auto& p : params) out.push_back(p.tensor);
    return out;
}

template <class T>
std::size_t count_values(const ParamList<T>& params) {
    std::size_t n = 0;
    for (auto& p : params) n += p.tensor.numel();
    return n;
}

template <class T>
Tensor<T> make_param(Shape shape, RngStream& rng, double bound) {
    auto t = Tensor<T>::uniform(std::move(shape), rng, -bound, bound);
    t.set_requires_grad(true);
    return t;
}

template <class T>
Tensor<T> make_param_fill(Shape shape, T value) {
    Tensor<T> t(std::move(shape), value);
    t.set_requires_grad(true);
    return t;
}

/// y = x W + b with W stored (in, out). Xavier-uniform weights, zero bias.
template <class T>
struct Linear {
    Tensor<T> weight, bias;

    Linear() = default;
    Linear(std::size_t in, std::size_t out, RngStream& rng, double gain = 1.0)
        : weight(make_param<T>({in, out}, rng, gain * std::sqrt(6.0 / static_cast<double>(in + out)))),
          bias(make_param_fill<T>({out}, T(0))) {}

    Tensor<T> operator()(const Tensor<T>& x) const { return linear(x, weight, &bias); }
    std::size_t in_features() const { return weight.dim(0); }
    std::size_t out_features() const { return weight.dim(1); }

    void zero_init() {
        std::fill(weight.vec().begin(), weight.vec().end(), T(0));
        std::fill(bias.vec().begin(), bias.vec().end(), T(0));
    }
    void collect(ParamList<T>& out, const std::string& prefix) const {
        out.push_back({prefix + ".weight", weight});
        out.push_back({prefix + ".bias", bias});
    }
};

template <class T>
struct LayerNorm {
    Tensor<T> gamma, beta;

    LayerNorm() = default;
    explicit LayerNorm(std::size_t width) : gamma(make_param_fill<T>({width}, T(1))), beta(make_param_fill<T>({width}, T(0))) {}

    Tensor<T> operator()(const Tensor<T>& x) const { return layer_norm(x, &gamma, &beta); }
    void collect(ParamList<T>& out, const std::string& prefix) const {
        out.push_back({prefix + ".gamma", gamma});
        out.push_back({prefix + ".beta", beta});
    }
};

/// k x k convolution with PyTorch-style uniform(+-1/sqrt(fan_in)) init.
template <class T>
struct Conv2d {
    Tensor<T> weight, bias;
    std::size_t stride = 1, pad = 1;

    Conv2d() = default;
    Conv2d(std::size_t in, std::size_t out, std::size_t k, std::size_t stride_, std::size_t pad_, RngStream& rng, double gain = 1.0)
        : stride(stride_), pad(pad_) {
        double bound = gain / std::sqrt(static_cast<double>(in * k * k));
        weight = make_param<T>({out, in, k, k}, rng, bound);
        bias = make_param<T>({out}, rng, bound);
    }

    Tensor<T> operator()(const Tensor<T>& x) const { return conv2d(x, weight, &bias, stride, pad); }
    std::size_t out_channels() const { return weight.dim(0); }
    void collect(ParamList<T>& out, const std::string& prefix) const {
        out.push_back({prefix + ".weight", weight});
        out.push_back({prefix + ".bias", bias});
    }
};

// ----------------------------------------------------------------- checkpoints
//
// A checkpoint is `<stem>.octf` holding every parameter concatenated into one
// 1-D f32 tensor, plus `<stem>.json` with the model config and a parameter
// table (name, shape, offset).

template <class T>
void save_checkpoint(const std::filesystem::path& stem, const ParamList<T>& params, const nlohmann::json& config) {
    std::vector<float> flat;
    flat.reserve(count_values(params));
    nlohmann::json table = nlohmann::json::array();
    for (auto& p : params) {
        table.push_back({{"name", p.name}, {"shape", p.tensor.shape()}, {"offset", flat.size()}});
        for (T v : p.tensor.data()) flat.push_back(static_cast<float>(v));
    }
    auto octf_path = std::filesystem::path(stem.string() + ".octf");
    octf::write<float>(octf_path, Shape{flat.size()}, flat);
    nlohmann::json side;
    side["config"] = config;
    side["parameters"] = table;
    side["values_file"] = octf_path.filename().string();
    side["values_hash"] = octf::file_hash(octf_path);
    octf::write_bytes(stem.string() + ".json", side.dump(2) + "\n");
}

inline nlohmann::json read_json(const std::filesystem::path& path) {
    try {
        return nlohmann::json::parse(octf::read_bytes(path));
    } catch (const nlohmann::json::exception& e) {
        throw IngestionFault(path.string(), std::string("invalid JSON: ") + e.what());
    }
}

/// Config section of a checkpoint sidecar.
inline nlohmann::json read_checkpoint_config(const std::filesystem::path& stem) { return read_json(stem.string() + ".json")["config"]; }

/// Loads values into already-constructed parameters; names and shapes must match.
template <class T>
void load_checkpoint(const std::filesystem::path& stem, ParamList<T>& params) {
    auto side = read_json(stem.string() + ".json");
    auto octf_path = std::filesystem::path(stem.string() + ".octf");
    auto bytes = octf::read_bytes(octf_path);
    if (side.contains("values_hash") && side["values_hash"].get<std::string>() != octf::content_hash(bytes))
        throw IngestionFault(octf_path.string(), "checksum mismatch");
    auto flat = octf::decode<T>(bytes, octf_path.string());
    const auto& table = side.at("parameters");
    if (table.size() != params.size()) throw IngestionFault(octf_path.string(), "parameter count mismatch");
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto& p = params[i];
        if (table[i].at("name").get<std::string>() != p.name)
            throw IngestionFault(octf_path.string(), "parameter name mismatch at " + p.name);
        if (table[i].at("shape").get<Shape>() != p.tensor.shape())
            throw IngestionFault(octf_path.string(), "parameter shape mismatch at " + p.name);
        std::size_t off = table[i].at("offset").get<std::size_t>();
        if (off + p.tensor.numel() > flat.values.size()) throw IngestionFault(octf_path.string(), "truncated parameter " + p.name);
        p.tensor.assign(std::span<const T>(flat.values.data() + off, p.tensor.numel()));
    }
}

/// Copies parameter values between two identically-structured lists.
template <class T>
void copy_values(const ParamList<T>& from, ParamList<T>& to) {
    require(from.size() == to.size(), "copy_values: structure mismatch");
    for (std::size_t i = 0; i < from.size(); ++i) to[i].tensor.assign(from[i].tensor.data());
}

template <class T>
std::vector<std::vector<T>> snapshot(const ParamList<T>& params) {
    std::vector<std::vector<T>> out;
    for (auto& p : params) out.emplace_back(p.tensor.vec().begin(), p.tensor.vec().end());
    return out;
}

template <class T>
void restore(const std::vector<std::vector<T>>& snap, ParamList<T>& params) {
    require(snap.size() == params.size(), "restore: structure mismatch");
    for (std::size_t i = 0; i < params.size(); ++i) params[i].tensor.assign(snap[i]);
}

}  // namespace omnicast::nn
