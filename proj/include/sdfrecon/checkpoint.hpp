#pragma once

// Self-describing checkpoint container: a version-tagged binary file holding
// every parameter block (values + Adam moments), the optimizer step counter,
// and a JSON metadata blob for model configuration. Layout is little-endian.

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "sdfrecon/autodiff.hpp"
#include "sdfrecon/core.hpp"

namespace sdfrecon {

namespace detail {

inline constexpr char kCheckpointMagic[8] = {'S', 'D', 'F', 'R', 'C', 'K', 'P', '1'};

template <class V>
void write_pod(std::ostream& os, const V& v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(V));
}

template <class V>
V read_pod(std::istream& is, const std::string& path) {
    V v;
    is.read(reinterpret_cast<char*>(&v), sizeof(V));
    if (!is) throw DataError("checkpoint truncated: " + path);
    return v;
}

template <class T>
void write_matrix(std::ostream& os, const MatX<T>& m) {
    os.write(reinterpret_cast<const char*>(m.data()),
             static_cast<std::streamsize>(sizeof(T) * m.size()));
}

// Reads a matrix stored with element width `stored_bytes`, converting to T.
template <class T>
MatX<T> read_matrix(std::istream& is, Eigen::Index rows, Eigen::Index cols, int stored_bytes,
                    const std::string& path) {
    if (stored_bytes == static_cast<int>(sizeof(T))) {
        MatX<T> m(rows, cols);
        is.read(reinterpret_cast<char*>(m.data()),
                static_cast<std::streamsize>(sizeof(T) * m.size()));
        if (!is) throw DataError("checkpoint truncated: " + path);
        return m;
    }
    if (stored_bytes == 4) {
        MatX<float> m(rows, cols);
        is.read(reinterpret_cast<char*>(m.data()),
                static_cast<std::streamsize>(4u * m.size()));
        if (!is) throw DataError("checkpoint truncated: " + path);
        return m.template cast<T>();
    }
    if (stored_bytes == 8) {
        MatX<double> m(rows, cols);
        is.read(reinterpret_cast<char*>(m.data()),
                static_cast<std::streamsize>(8u * m.size()));
        if (!is) throw DataError("checkpoint truncated: " + path);
        return m.template cast<T>();
    }
    throw DataError("checkpoint has unsupported scalar width: " + path);
}

}  // namespace detail

template <class T>
void save_checkpoint(const std::string& path, const ParamStore<T>& params,
                     const nlohmann::json& meta) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("cannot open checkpoint for writing: " + path);
    os.write(detail::kCheckpointMagic, 8);
    detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(sizeof(T)));
    detail::write_pod<std::int64_t>(os, params.step());
    const std::string meta_str = meta.dump();
    detail::write_pod<std::uint64_t>(os, meta_str.size());
    os.write(meta_str.data(), static_cast<std::streamsize>(meta_str.size()));
    detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(params.blocks().size()));
    for (const auto& [name, b] : params.blocks()) {
        detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(b.value.rows()));
        detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(b.value.cols()));
        detail::write_pod<double>(os, static_cast<double>(b.lr_mult));
        detail::write_matrix(os, b.value);
        detail::write_matrix(os, b.m);
        detail::write_matrix(os, b.v);
    }
    if (!os) throw DataError("failed writing checkpoint: " + path);
}

// Loads blocks into a fresh ParamStore and returns the metadata JSON.
template <class T>
nlohmann::json load_checkpoint(const std::string& path, ParamStore<T>& params) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open checkpoint: " + path);
    char magic[8];
    is.read(magic, 8);
    if (!is || std::memcmp(magic, detail::kCheckpointMagic, 7) != 0)
        throw DataError("not a checkpoint file (bad magic): " + path);
    if (magic[7] != detail::kCheckpointMagic[7])
        throw DataError(std::string("unsupported checkpoint version '") + magic[7] +
                        "' in " + path);
    const auto scalar_bytes = static_cast<int>(detail::read_pod<std::uint32_t>(is, path));
    const auto step = detail::read_pod<std::int64_t>(is, path);
    const auto meta_len = detail::read_pod<std::uint64_t>(is, path);
    std::string meta_str(meta_len, '\0');
    is.read(meta_str.data(), static_cast<std::streamsize>(meta_len));
    if (!is) throw DataError("checkpoint truncated: " + path);
    nlohmann::json meta;
    try {
        meta = nlohmann::json::parse(meta_str);
    } catch (const nlohmann::json::exception& e) {
        throw DataError("checkpoint metadata is not valid JSON: " + path + ": " + e.what());
    }
    const auto nblocks = detail::read_pod<std::uint32_t>(is, path);
    for (std::uint32_t i = 0; i < nblocks; ++i) {
        const auto name_len = detail::read_pod<std::uint32_t>(is, path);
        std::string name(name_len, '\0');
        is.read(name.data(), name_len);
        const auto rows = detail::read_pod<std::uint32_t>(is, path);
        const auto cols = detail::read_pod<std::uint32_t>(is, path);
        const auto lr_mult = detail::read_pod<double>(is, path);
        ParamBlock<T>& b = params.add(name, rows, cols);
        b.lr_mult = static_cast<T>(lr_mult);
        b.value = detail::read_matrix<T>(is, rows, cols, scalar_bytes, path);
        b.m = detail::read_matrix<T>(is, rows, cols, scalar_bytes, path);
        b.v = detail::read_matrix<T>(is, rows, cols, scalar_bytes, path);
    }
    params.set_step(step);
    return meta;
}

}  // namespace sdfrecon
