#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "cgdetect/common.hpp"
#include "cgdetect/tensor.hpp"

namespace cgdetect {

// Flat binary weight container (.swnt):
//   magic "SWNT" | version u32 LE | meta_len u32 LE | meta (UTF-8 JSON)
//   then per parameter, sorted by name:
//   name_len u32 LE | name | rank u32 LE | extents u64 LE each | values f32 LE
// The sorted order makes load -> save byte-identical.
struct WeightEntry {
    std::vector<std::size_t> shape;
    std::vector<float> values;
};

struct WeightFile {
    static constexpr std::uint32_t kVersion = 1;
    std::string meta;  // UTF-8 JSON document, may be empty
    std::map<std::string, WeightEntry> entries;
};

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

inline void put_u64(std::ostream& os, std::uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    os.write(reinterpret_cast<const char*>(b), 8);
}

inline std::uint32_t get_u32(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    if (!is) throw DataError("weight file: truncated header field");
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

inline std::uint64_t get_u64(std::istream& is) {
    unsigned char b[8];
    is.read(reinterpret_cast<char*>(b), 8);
    if (!is) throw DataError("weight file: truncated extent field");
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return v;
}

inline void put_f32(std::ostream& os, float f) {
    std::uint32_t bits;
    static_assert(sizeof(bits) == sizeof(f));
    std::memcpy(&bits, &f, 4);
    put_u32(os, bits);
}

inline float get_f32(std::istream& is) {
    const std::uint32_t bits = get_u32(is);
    float f;
    std::memcpy(&f, &bits, 4);
    return f;
}

}  // namespace detail

inline void save_weights(const std::string& path, const WeightFile& wf) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("weight file: cannot open for write: " + path);
    os.write("SWNT", 4);
    detail::put_u32(os, WeightFile::kVersion);
    detail::put_u32(os, static_cast<std::uint32_t>(wf.meta.size()));
    os.write(wf.meta.data(), static_cast<std::streamsize>(wf.meta.size()));
    for (const auto& [name, entry] : wf.entries) {
        detail::put_u32(os, static_cast<std::uint32_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        detail::put_u32(os, static_cast<std::uint32_t>(entry.shape.size()));
        for (std::size_t d : entry.shape) detail::put_u64(os, d);
        for (float v : entry.values) detail::put_f32(os, v);
    }
    if (!os) throw DataError("weight file: write failed: " + path);
}

inline WeightFile load_weights(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("weight file: cannot open: " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::string(magic, 4) != "SWNT") {
        throw DataError("weight file: bad magic in " + path);
    }
    const std::uint32_t version = detail::get_u32(is);
    if (version != WeightFile::kVersion) {
        throw DataError("weight file: unsupported version " + std::to_string(version));
    }
    WeightFile wf;
    const std::uint32_t meta_len = detail::get_u32(is);
    wf.meta.resize(meta_len);
    is.read(wf.meta.data(), meta_len);
    if (!is) throw DataError("weight file: truncated metadata in " + path);

    while (is.peek() != EOF) {
        const std::uint32_t name_len = detail::get_u32(is);
        std::string name(name_len, '\0');
        is.read(name.data(), name_len);
        if (!is) throw DataError("weight file: truncated name in " + path);
        const std::uint32_t rank = detail::get_u32(is);
        WeightEntry entry;
        entry.shape.resize(rank);
        std::size_t count = 1;
        for (std::uint32_t i = 0; i < rank; ++i) {
            entry.shape[i] = static_cast<std::size_t>(detail::get_u64(is));
            count *= entry.shape[i];
        }
        entry.values.resize(count);
        for (std::size_t i = 0; i < count; ++i) entry.values[i] = detail::get_f32(is);
        if (!is) throw DataError("weight file: truncated values for '" + name + "' in " + path);
        if (!wf.entries.emplace(std::move(name), std::move(entry)).second) {
            throw DataError("weight file: duplicate parameter name in " + path);
        }
    }
    return wf;
}

template <typename T>
WeightEntry to_entry(const Tensor<T>& t) {
    WeightEntry e;
    e.shape = t.shape;
    e.values.reserve(t.numel());
    for (const T v : *t.data) e.values.push_back(static_cast<float>(v));
    return e;
}

template <typename T>
void load_into(const WeightEntry& e, Tensor<T>& t, const std::string& name) {
    if (e.shape != t.shape) {
        throw DataError("weight file: parameter '" + name + "' has shape " + shape_str(e.shape) +
                        ", expected " + shape_str(t.shape));
    }
    for (std::size_t i = 0; i < e.values.size(); ++i) {
        if (!std::isfinite(e.values[i])) {
            throw NumericError("weight file: non-finite value in parameter '" + name + "'");
        }
        (*t.data)[i] = static_cast<T>(e.values[i]);
    }
}

}  // namespace cgdetect
