#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"
#include "uvl/model.hpp"
#include "uvl/serial.hpp"

namespace uvl {

inline constexpr char kCheckpointMagic[4] = {'U', 'V', 'L', 'C'};
inline constexpr std::uint16_t kCheckpointVersion = 1;

struct CheckpointMeta {
    ModelConfig config;
    std::uint64_t seed = 0;
    int stage = 0;            // 0 = fresh, 1/2 = last completed training stage
    std::size_t epoch = 0;    // epochs finished within that stage
    std::size_t global_step = 0;
    nlohmann::json extra = nlohmann::json::object();
};

/// Container layout: magic, version, u32 header length + JSON header, u32
/// tensor count, per tensor (u16 name length, name, u8 ndim, u64 dims, f64
/// values little-endian), trailing CRC32 of everything before it.
inline std::string encode_checkpoint(const CheckpointMeta& meta, const NamedParams& params) {
    std::string out;
    out.append(kCheckpointMagic, 4);
    put_u16(out, kCheckpointVersion);
    nlohmann::json header{{"config", config_to_json(meta.config)},
                          {"seed", meta.seed},
                          {"stage", meta.stage},
                          {"epoch", meta.epoch},
                          {"global_step", meta.global_step},
                          {"extra", meta.extra}};
    const std::string htxt = header.dump();
    put_u32(out, static_cast<std::uint32_t>(htxt.size()));
    out += htxt;
    put_u32(out, static_cast<std::uint32_t>(params.size()));
    for (const auto& [name, t] : params) {
        put_u16(out, static_cast<std::uint16_t>(name.size()));
        out += name;
        out.push_back(static_cast<char>(t.ndim()));
        for (std::size_t d : t.shape) put_u64(out, d);
        for (double v : *t.data) put_f64(out, v);
    }
    put_u32(out, crc32(out));
    return out;
}

struct LoadedCheckpoint {
    CheckpointMeta meta;
    ModelParameters params;
};

inline LoadedCheckpoint decode_checkpoint(const std::string& bytes, const std::string& origin) {
    if (bytes.size() < 4 || bytes.compare(0, 4, kCheckpointMagic, 4) != 0)
        throw IoError("'" + origin + "' is not a checkpoint (bad magic)");
    if (bytes.size() < 8) throw IoError("'" + origin + "': truncated checkpoint");
    const std::uint32_t stored_crc = crc32(bytes.data(), bytes.size() - 4);
    ByteReader tail(bytes.substr(bytes.size() - 4));
    if (tail.u32("crc") != stored_crc)
        throw IoError("'" + origin + "': checksum mismatch, file is corrupt");

    ByteReader r(bytes.substr(4, bytes.size() - 8));
    const std::uint16_t version = r.u16("version");
    if (version != kCheckpointVersion)
        throw IoError("'" + origin + "': unsupported checkpoint version " + std::to_string(version));
    const std::uint32_t hlen = r.u32("header length");
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(r.bytes(hlen, "header"));
    } catch (const nlohmann::json::exception& e) {
        throw IoError("'" + origin + "': bad checkpoint header: " + e.what());
    }

    LoadedCheckpoint lc;
    try {
        lc.meta.config = config_from_json(header.at("config"));
        lc.meta.seed = header.at("seed").get<std::uint64_t>();
        lc.meta.stage = header.at("stage").get<int>();
        lc.meta.epoch = header.at("epoch").get<std::size_t>();
        lc.meta.global_step = header.at("global_step").get<std::size_t>();
        lc.meta.extra = header.value("extra", nlohmann::json::object());
    } catch (const nlohmann::json::exception& e) {
        throw IoError("'" + origin + "': bad checkpoint header: " + e.what());
    }

    // Build the parameter skeleton, then overwrite every tensor by name.
    lc.params = ModelParameters::init(lc.meta.config, 0);
    NamedParams named = lc.params.named();
    std::map<std::string, Tensor*> by_name;
    std::map<std::string, bool> seen;
    for (auto& kv : named) {
        by_name[kv.first] = &kv.second;
        seen[kv.first] = false;
    }

    const std::uint32_t count = r.u32("tensor count");
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::uint16_t nlen = r.u16("name length");
        const std::string name = r.bytes(nlen, "tensor name");
        const std::uint8_t ndim = r.u8("rank");
        Shape shape(ndim);
        for (auto& d : shape) d = r.u64("dimension");
        auto it = by_name.find(name);
        if (it == by_name.end())
            throw IoError("'" + origin + "': unknown tensor '" + name + "' in checkpoint");
        Tensor& dst = *it->second;
        if (dst.shape != shape)
            throw IoError("'" + origin + "': tensor '" + name + "' has shape " + shape_str(shape) +
                          ", expected " + shape_str(dst.shape));
        for (double& v : *dst.data) v = r.f64("tensor value");
        seen[name] = true;
    }
    for (const auto& [name, was_seen] : seen)
        if (!was_seen) throw IoError("'" + origin + "': checkpoint is missing tensor '" + name + "'");
    return lc;
}

inline void save_checkpoint(const std::string& path, const CheckpointMeta& meta,
                            const NamedParams& params) {
    write_file_bytes(path, encode_checkpoint(meta, params));
}

inline LoadedCheckpoint load_checkpoint(const std::string& path) {
    return decode_checkpoint(read_file_bytes(path), path);
}

} // namespace uvl
