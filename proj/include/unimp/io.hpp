#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "unimp/core.hpp"
#include "unimp/tensor.hpp"

namespace unimp {

constexpr uint32_t kCheckpointVersion = 1;

namespace detail {

inline void write_u32(std::ostream& out, uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    out.write(reinterpret_cast<const char*>(b), 4);
}

inline void write_u64(std::ostream& out, uint64_t v) {
    for (int i = 0; i < 8; ++i) {
        unsigned char b = static_cast<unsigned char>(v >> (8 * i));
        out.write(reinterpret_cast<const char*>(&b), 1);
    }
}

inline uint32_t read_u32(std::istream& in) {
    unsigned char b[4];
    in.read(reinterpret_cast<char*>(b), 4);
    if (!in) throw CheckpointError("truncated checkpoint");
    return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) | (static_cast<uint32_t>(b[2]) << 16) |
           (static_cast<uint32_t>(b[3]) << 24);
}

inline uint64_t read_u64(std::istream& in) {
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) {
        unsigned char b;
        in.read(reinterpret_cast<char*>(&b), 1);
        if (!in) throw CheckpointError("truncated checkpoint");
        v |= static_cast<uint64_t>(b) << (8 * i);
    }
    return v;
}

inline void write_f32(std::ostream& out, const float* data, size_t n) {
    static_assert(sizeof(float) == 4);
    out.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(n * 4));
}

}  // namespace detail

struct NamedTensorData {
    std::string name;
    Shape shape;
    std::vector<float> values;
};

// "UMPT" checkpoint: magic, version, count, then per tensor
// (name length, name, rank, u64 extents, little-endian f32 data).
inline void write_umpt(const std::filesystem::path& path, const std::vector<NamedTensorData>& tensors) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw CheckpointError("cannot write checkpoint " + path.string());
    out.write("UMPT", 4);
    detail::write_u32(out, kCheckpointVersion);
    detail::write_u32(out, static_cast<uint32_t>(tensors.size()));
    for (const auto& t : tensors) {
        detail::write_u32(out, static_cast<uint32_t>(t.name.size()));
        out.write(t.name.data(), static_cast<std::streamsize>(t.name.size()));
        detail::write_u32(out, static_cast<uint32_t>(t.shape.size()));
        for (int e : t.shape) detail::write_u64(out, static_cast<uint64_t>(e));
        detail::write_f32(out, t.values.data(), t.values.size());
    }
    if (!out) throw CheckpointError("failed writing checkpoint " + path.string());
}

inline std::vector<NamedTensorData> read_umpt(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
    char magic[4];
    in.read(magic, 4);
    if (!in || std::string(magic, 4) != "UMPT") throw CheckpointError("bad checkpoint magic in " + path.string());
    const uint32_t version = detail::read_u32(in);
    if (version != kCheckpointVersion) {
        throw CheckpointError("unknown checkpoint version " + std::to_string(version));
    }
    const uint32_t count = detail::read_u32(in);
    std::vector<NamedTensorData> tensors(count);
    for (auto& t : tensors) {
        const uint32_t name_len = detail::read_u32(in);
        t.name.resize(name_len);
        in.read(t.name.data(), name_len);
        const uint32_t rank = detail::read_u32(in);
        t.shape.resize(rank);
        long long n = 1;
        for (auto& e : t.shape) {
            e = static_cast<int>(detail::read_u64(in));
            n *= e;
        }
        t.values.resize(static_cast<size_t>(n));
        in.read(reinterpret_cast<char*>(t.values.data()), static_cast<std::streamsize>(n * 4));
        if (!in) throw CheckpointError("truncated checkpoint " + path.string());
    }
    return tensors;
}

// Flat key=value text block (config files, checkpoint metadata).
inline std::map<std::string, std::string> parse_kv_text(const std::string& text) {
    std::map<std::string, std::string> out;
    for (const auto& raw_line : split(text, '\n')) {
        const std::string line = trim(raw_line);
        if (line.empty() || line[0] == '#') continue;
        const size_t eq = line.find('=');
        if (eq == std::string::npos) throw ConfigError("malformed key=value line: " + line);
        out[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
    }
    return out;
}

inline std::string format_kv_text(const std::map<std::string, std::string>& kv) {
    std::string out;
    for (const auto& [k, v] : kv) out += k + "=" + v + "\n";
    return out;
}

}  // namespace unimp
