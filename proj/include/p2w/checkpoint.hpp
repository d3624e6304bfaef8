#pragma once

// Binary checkpoint format.
//
//   magic "P2W1"
//   repeated records:
//     u32 LE  name length          (1 .. 65535)
//     bytes   name (UTF-8)
//     u32 LE  rank                 (1 .. 8)
//     u32 LE  dim[0..rank)         (each >= 1)
//     f32     payload, row-major   (prod(dims) values)
//
// Tensors are stored float32 regardless of the in-memory scalar type; a
// float-trained model round-trips bit-exactly.  A config fingerprint rides
// along as the meta tensor "__meta.config_hash" (8 bytes, one per float).
//
// Error taxonomy: a missing file is a stale-pipeline problem
// (StaleArtifact), a wrong magic is UnsupportedFormat, and anything
// structurally wrong past the magic is CorruptCheckpoint.

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "p2w/errors.hpp"
#include "p2w/optim.hpp"

namespace p2w {

struct TensorRecord {
    std::vector<std::uint32_t> dims;
    std::vector<float> data;

    std::size_t numel() const {
        std::size_t n = 1;
        for (auto d : dims) n *= d;
        return n;
    }
};

using CheckpointMap = std::map<std::string, TensorRecord>;

namespace detail {

constexpr char kMagic[4] = {'P', '2', 'W', '1'};
constexpr std::size_t kMaxName = 65535;
constexpr std::uint32_t kMaxRank = 8;
constexpr std::size_t kMaxElems = std::size_t(1) << 28;

inline void put_u32(std::ostream& os, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16),
                          static_cast<unsigned char>(v >> 24)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

inline bool get_u32(std::istream& is, std::uint32_t& v) {
    unsigned char b[4];
    if (!is.read(reinterpret_cast<char*>(b), 4)) return false;
    v = std::uint32_t(b[0]) | (std::uint32_t(b[1]) << 8) | (std::uint32_t(b[2]) << 16) |
        (std::uint32_t(b[3]) << 24);
    return true;
}

} // namespace detail

inline void write_checkpoint(const std::string& path, const CheckpointMap& tensors) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw Error("cannot open '" + path + "' for writing");
    os.write(detail::kMagic, 4);
    for (const auto& [name, rec] : tensors) {
        if (name.empty() || name.size() > detail::kMaxName)
            throw ContractViolation("bad tensor name length for '" + name + "'");
        if (rec.dims.empty() || rec.dims.size() > detail::kMaxRank)
            throw ContractViolation("bad tensor rank for '" + name + "'");
        if (rec.numel() != rec.data.size())
            throw ContractViolation("payload size mismatch for '" + name + "'");
        detail::put_u32(os, static_cast<std::uint32_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        detail::put_u32(os, static_cast<std::uint32_t>(rec.dims.size()));
        for (auto d : rec.dims) detail::put_u32(os, d);
        os.write(reinterpret_cast<const char*>(rec.data.data()),
                 static_cast<std::streamsize>(rec.data.size() * sizeof(float)));
    }
    if (!os) throw Error("write to '" + path + "' failed");
}

inline CheckpointMap read_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw StaleArtifact("required checkpoint '" + path + "' does not exist");
    char magic[4];
    if (!is.read(magic, 4) || std::memcmp(magic, detail::kMagic, 4) != 0)
        throw UnsupportedFormat("'" + path + "' is not a P2W1 checkpoint");

    CheckpointMap out;
    while (true) {
        std::uint32_t name_len;
        if (!detail::get_u32(is, name_len)) {
            if (is.eof() && is.gcount() == 0) break; // clean end between records
            throw CorruptCheckpoint("'" + path + "' ends mid-record");
        }
        if (name_len == 0 || name_len > detail::kMaxName)
            throw CorruptCheckpoint("'" + path + "' has an invalid name length");
        std::string name(name_len, '\0');
        if (!is.read(name.data(), name_len))
            throw CorruptCheckpoint("'" + path + "' truncated inside a tensor name");

        std::uint32_t rank;
        if (!detail::get_u32(is, rank) || rank == 0 || rank > detail::kMaxRank)
            throw CorruptCheckpoint("'" + path + "' has an invalid rank for '" + name + "'");
        TensorRecord rec;
        std::size_t numel = 1;
        for (std::uint32_t r = 0; r < rank; ++r) {
            std::uint32_t d;
            if (!detail::get_u32(is, d) || d == 0)
                throw CorruptCheckpoint("'" + path + "' has an invalid dimension for '" + name +
                                        "'");
            rec.dims.push_back(d);
            numel *= d;
            if (numel > detail::kMaxElems)
                throw CorruptCheckpoint("'" + path + "' declares an oversized tensor '" + name +
                                        "'");
        }
        rec.data.resize(numel);
        if (!is.read(reinterpret_cast<char*>(rec.data.data()),
                     static_cast<std::streamsize>(numel * sizeof(float))))
            throw CorruptCheckpoint("'" + path + "' truncated inside the payload of '" + name +
                                    "'");
        if (!out.emplace(std::move(name), std::move(rec)).second)
            throw CorruptCheckpoint("'" + path + "' contains a duplicate tensor name");
    }
    return out;
}

// ---- ParamSet bridging -----------------------------------------------------

template <typename S>
CheckpointMap to_records(const ParamSet<S>& params) {
    CheckpointMap out;
    for (const auto& [name, p] : params) {
        TensorRecord rec;
        rec.dims = {static_cast<std::uint32_t>(p.rows()), static_cast<std::uint32_t>(p.cols())};
        rec.data.reserve(p.numel());
        for (S v : p.value()) rec.data.push_back(static_cast<float>(v));
        out.emplace(name, std::move(rec));
    }
    return out;
}

// Every parameter must be present with its exact shape; extra tensors other
// than meta entries are rejected as well.
template <typename S>
void load_params(ParamSet<S>& params, const CheckpointMap& records, const std::string& origin) {
    std::size_t used = 0;
    for (auto& [name, p] : params) {
        auto it = records.find(name);
        if (it == records.end())
            throw CorruptCheckpoint("'" + origin + "' lacks tensor '" + name + "'");
        const auto& rec = it->second;
        if (rec.dims.size() != 2 || rec.dims[0] != p.rows() || rec.dims[1] != p.cols())
            throw CorruptCheckpoint("'" + origin + "' has a wrong shape for '" + name + "'");
        auto& val = p.mutable_value();
        for (std::size_t i = 0; i < val.size(); ++i) val[i] = static_cast<S>(rec.data[i]);
        p.zero_grad();
        ++used;
    }
    for (const auto& [name, rec] : records)
        if (name.rfind("__meta.", 0) != 0 && !params.has(name))
            throw CorruptCheckpoint("'" + origin + "' contains an unexpected tensor '" + name +
                                    "'");
    (void)used;
}

// ---- config fingerprint meta tensor ----------------------------------------

inline void set_meta_hash(CheckpointMap& records, std::uint64_t hash) {
    TensorRecord rec;
    rec.dims = {8};
    for (int i = 0; i < 8; ++i)
        rec.data.push_back(static_cast<float>((hash >> (8 * i)) & 0xffULL));
    records["__meta.config_hash"] = std::move(rec);
}

inline std::optional<std::uint64_t> get_meta_hash(const CheckpointMap& records) {
    auto it = records.find("__meta.config_hash");
    if (it == records.end()) return std::nullopt;
    if (it->second.dims != std::vector<std::uint32_t>{8}) return std::nullopt;
    std::uint64_t hash = 0;
    for (int i = 0; i < 8; ++i)
        hash |= (static_cast<std::uint64_t>(it->second.data[i]) & 0xffULL) << (8 * i);
    return hash;
}

} // namespace p2w
