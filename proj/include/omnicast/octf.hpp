// Copyright (C) 2026 omnicast contributors
// SPDX-License-Identifier: Apache-2.0

// OCTF tensor container: "OCTF", u32 version, u8 dtype (0=f32, 1=f64),
// u8 ndim, ndim x u64 dims, then row-major values. All little-endian.

#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <type_traits>
#include <vector>

#include "omnicast/error.hpp"
#include "omnicast/rng.hpp"
#include "omnicast/tensor.hpp"

namespace omnicast::octf {

static_assert(std::endian::native == std::endian::little, "OCTF I/O assumes a little-endian host");

inline constexpr std::uint32_t kVersion = 1;
enum class DType : std::uint8_t { f32 = 0, f64 = 1 };

template <class T>
constexpr DType dtype_of() {
    static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>, "OCTF stores f32 or f64");
    return std::is_same_v<T, float> ? DType::f32 : DType::f64;
}

namespace detail {
template <class V>
void put(std::string& buf, V v) {
    char raw[sizeof(V)];
    std::memcpy(raw, &v, sizeof(V));
    buf.append(raw, sizeof(V));
}
template <class V>
V get(const std::string& buf, std::size_t& pos, const std::string& name) {
    if (pos + sizeof(V) > buf.size()) throw IngestionFault(name, "truncated OCTF stream");
    V v;
    std::memcpy(&v, buf.data() + pos, sizeof(V));
    pos += sizeof(V);
    return v;
}
}  // namespace detail

template <class T>
std::string encode(const Shape& shape, std::span<const T> values) {
    require(values.size() == shape_numel(shape), "octf::encode: value count does not match shape");
    require(shape.size() <= 255, "octf::encode: too many dimensions");
    std::string buf = "OCTF";
    detail::put<std::uint32_t>(buf, kVersion);
    detail::put<std::uint8_t>(buf, static_cast<std::uint8_t>(dtype_of<T>()));
    detail::put<std::uint8_t>(buf, static_cast<std::uint8_t>(shape.size()));
    for (auto d : shape) detail::put<std::uint64_t>(buf, d);
    buf.append(reinterpret_cast<const char*>(values.data()), values.size() * sizeof(T));
    return buf;
}

/// Decoded payload converted to T.
template <class T>
struct Decoded {
    Shape shape;
    std::vector<T> values;
    DType stored = DType::f32;
};

template <class T>
Decoded<T> decode(const std::string& buf, const std::string& name = "<memory>") {
    if (buf.size() < 10 || buf.compare(0, 4, "OCTF") != 0) throw IngestionFault(name, "missing OCTF magic");
    std::size_t pos = 4;
    auto version = detail::get<std::uint32_t>(buf, pos, name);
    if (version != kVersion) throw IngestionFault(name, "unsupported OCTF version " + std::to_string(version));
    auto dt = detail::get<std::uint8_t>(buf, pos, name);
    if (dt > 1) throw IngestionFault(name, "unknown OCTF dtype code " + std::to_string(dt));
    auto nd = detail::get<std::uint8_t>(buf, pos, name);
    Decoded<T> out;
    out.stored = static_cast<DType>(dt);
    for (int i = 0; i < nd; ++i) out.shape.push_back(static_cast<std::size_t>(detail::get<std::uint64_t>(buf, pos, name)));
    std::size_t n = shape_numel(out.shape);
    std::size_t width = out.stored == DType::f32 ? 4 : 8;
    if (buf.size() - pos != n * width) throw IngestionFault(name, "payload size does not match shape " + shape_str(out.shape));
    out.values.resize(n);
    if (out.stored == DType::f32) {
        std::vector<float> tmp(n);
        std::memcpy(tmp.data(), buf.data() + pos, n * 4);
        for (std::size_t i = 0; i < n; ++i) out.values[i] = static_cast<T>(tmp[i]);
    } else {
        std::vector<double> tmp(n);
        std::memcpy(tmp.data(), buf.data() + pos, n * 8);
        for (std::size_t i = 0; i < n; ++i) out.values[i] = static_cast<T>(tmp[i]);
    }
    return out;
}

inline std::string read_bytes(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IngestionFault(path.string(), "cannot open file");
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline void write_bytes(const std::filesystem::path& path, const std::string& bytes) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IngestionFault(path.string(), "cannot open file for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IngestionFault(path.string(), "write failed");
}

template <class T>
void write(const std::filesystem::path& path, const Shape& shape, std::span<const T> values) {
    write_bytes(path, encode<T>(shape, values));
}

template <class T>
void write(const std::filesystem::path& path, const Tensor<T>& t) {
    write<T>(path, t.shape(), t.data());
}

template <class T>
Decoded<T> read(const std::filesystem::path& path) {
    return decode<T>(read_bytes(path), path.string());
}

template <class T>
Tensor<T> read_tensor(const std::filesystem::path& path) {
    auto d = read<T>(path);
    return Tensor<T>(std::move(d.shape), std::move(d.values));
}

/// 64-bit FNV-1a content hash rendered as 16 hex digits.
inline std::string content_hash(const std::string& bytes) {
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << fnv1a(bytes);
    return os.str();
}

inline std::string file_hash(const std::filesystem::path& path) { return content_hash(read_bytes(path)); }

}  // namespace omnicast::octf
