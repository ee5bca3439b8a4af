#pragma once

// Flat binary checkpoints. Layout, all integers little-endian:
//
//   uint32 tensor_count
//   repeated: uint32 name_len, name bytes (UTF-8),
//             uint32 rank, uint32 extent[rank],
//             float32 payload (row-major)
//
// Values are stored as float32 regardless of the in-memory scalar type,
// so float round-trips are bit-exact.

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "kdml/tensor.hpp"

namespace kdml {

namespace detail {

inline void put_u32(std::ostream& os, uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                          static_cast<unsigned char>((v >> 8) & 0xff),
                          static_cast<unsigned char>((v >> 16) & 0xff),
                          static_cast<unsigned char>((v >> 24) & 0xff)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

inline uint32_t get_u32(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    if (!is) throw error("checkpoint: truncated file");
    return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
           (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
}

inline void put_f32(std::ostream& os, float v) {
    uint32_t bits;
    std::memcpy(&bits, &v, 4);
    put_u32(os, bits);
}

inline float get_f32(std::istream& is) {
    uint32_t bits = get_u32(is);
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
}

}  // namespace detail

template <class T>
void save_checkpoint(const std::string& path,
                     const std::vector<std::pair<std::string, TensorPtrT<T>>>& params) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw error("checkpoint: cannot open " + path + " for writing");
    detail::put_u32(os, static_cast<uint32_t>(params.size()));
    for (const auto& [name, t] : params) {
        detail::put_u32(os, static_cast<uint32_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        detail::put_u32(os, static_cast<uint32_t>(t->shape.size()));
        for (int e : t->shape) detail::put_u32(os, static_cast<uint32_t>(e));
        for (T v : t->data) detail::put_f32(os, static_cast<float>(v));
    }
    if (!os) throw error("checkpoint: write failed for " + path);
}

template <class T = float>
std::vector<std::pair<std::string, TensorPtrT<T>>> load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw error("checkpoint: cannot open " + path);
    const uint32_t count = detail::get_u32(is);
    std::vector<std::pair<std::string, TensorPtrT<T>>> out;
    out.reserve(count);
    for (uint32_t i = 0; i < count; ++i) {
        const uint32_t name_len = detail::get_u32(is);
        std::string name(name_len, '\0');
        is.read(name.data(), name_len);
        if (!is) throw error("checkpoint: truncated file");
        const uint32_t rank = detail::get_u32(is);
        Shape shape(rank);
        for (uint32_t d = 0; d < rank; ++d) shape[d] = static_cast<int>(detail::get_u32(is));
        std::vector<T> data(shape_numel(shape));
        for (auto& v : data) v = static_cast<T>(detail::get_f32(is));
        out.emplace_back(std::move(name), make_tensor<T>(shape, std::move(data), true));
    }
    return out;
}

// Restores values into an existing parameter list; every name and shape must
// match exactly.
template <class T>
void load_into(const std::string& path,
               std::vector<std::pair<std::string, TensorPtrT<T>>>& params) {
    auto loaded = load_checkpoint<T>(path);
    if (loaded.size() != params.size())
        throw contract_error("checkpoint: " + path + " holds " + std::to_string(loaded.size()) +
                             " tensors, expected " + std::to_string(params.size()));
    for (size_t i = 0; i < params.size(); ++i) {
        if (loaded[i].first != params[i].first)
            throw contract_error("checkpoint: name mismatch at index " + std::to_string(i) + ": " +
                                 loaded[i].first + " vs " + params[i].first);
        if (loaded[i].second->shape != params[i].second->shape)
            throw shape_error("checkpoint: shape mismatch for " + loaded[i].first);
        params[i].second->data = std::move(loaded[i].second->data);
    }
}

}  // namespace kdml
