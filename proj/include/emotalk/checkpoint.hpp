#pragma once

// Byte-exact checkpoint container: "ECKP1", version, JSON config blob, then
// named f32 tensors sorted lexicographically. Load rebuilds the model from
// the embedded config and fills values by name.

#include <algorithm>
#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "emotalk/model.hpp"

namespace emotalk {

inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr char kCheckpointMagic[] = {'E', 'C', 'K', 'P', '1'};

namespace detail_ckpt {

inline void put_u16(std::string& out, std::uint16_t v) {
    out.push_back(static_cast<char>(v & 0xff));
    out.push_back(static_cast<char>((v >> 8) & 0xff));
}

inline void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_f32(std::string& out, float f) {
    put_u32(out, std::bit_cast<std::uint32_t>(f));
}

struct Reader {
    const std::string& buf;
    std::size_t pos = 0;

    void need(std::size_t n) const {
        if (pos + n > buf.size())
            throw CheckpointError(CheckpointError::Kind::truncated, "checkpoint truncated");
    }
    std::uint8_t u8() {
        need(1);
        return static_cast<std::uint8_t>(buf[pos++]);
    }
    std::uint16_t u16() {
        need(2);
        std::uint16_t v = 0;
        for (int i = 0; i < 2; ++i) v |= static_cast<std::uint16_t>(static_cast<std::uint8_t>(buf[pos++])) << (8 * i);
        return v;
    }
    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<std::uint8_t>(buf[pos++])) << (8 * i);
        return v;
    }
    float f32() { return std::bit_cast<float>(u32()); }
    std::string bytes(std::size_t n) {
        need(n);
        std::string s = buf.substr(pos, n);
        pos += n;
        return s;
    }
};

} // namespace detail_ckpt

// Serializes arbitrary named tensors; sorts by name so output is canonical.
inline std::string serialize_checkpoint(NamedParams params, const std::string& config_json) {
    std::sort(params.begin(), params.end(),
              [](const auto& a, const auto& b) { return a.first < b.first; });
    for (std::size_t i = 1; i < params.size(); ++i)
        if (params[i].first == params[i - 1].first)
            throw CheckpointError(CheckpointError::Kind::tensor_mismatch,
                                  "duplicate tensor name \"" + params[i].first + "\"");

    std::string out;
    out.append(kCheckpointMagic, sizeof kCheckpointMagic);
    detail_ckpt::put_u32(out, kCheckpointVersion);
    detail_ckpt::put_u32(out, static_cast<std::uint32_t>(config_json.size()));
    out.append(config_json);
    detail_ckpt::put_u32(out, static_cast<std::uint32_t>(params.size()));
    for (const auto& [name, t] : params) {
        if (name.size() > 0xffff)
            throw CheckpointError(CheckpointError::Kind::tensor_mismatch, "tensor name too long");
        detail_ckpt::put_u16(out, static_cast<std::uint16_t>(name.size()));
        out.append(name);
        out.push_back(static_cast<char>(t.rank()));
        for (auto d : t.shape()) detail_ckpt::put_u32(out, static_cast<std::uint32_t>(d));
        for (float f : t.values()) detail_ckpt::put_f32(out, f);
    }
    return out;
}

struct RawTensor {
    std::string name;
    Shape shape;
    std::vector<float> values;
};

struct RawCheckpoint {
    std::uint32_t version = 0;
    std::string config_json;
    std::vector<RawTensor> tensors; // in file order
};

inline RawCheckpoint parse_checkpoint(const std::string& bytes) {
    detail_ckpt::Reader r{bytes};
    const std::string magic = r.bytes(sizeof kCheckpointMagic);
    if (magic != std::string(kCheckpointMagic, sizeof kCheckpointMagic))
        throw CheckpointError(CheckpointError::Kind::bad_magic, "not a checkpoint file (bad magic)");
    RawCheckpoint ck;
    ck.version = r.u32();
    if (ck.version != kCheckpointVersion)
        throw CheckpointError(CheckpointError::Kind::bad_version,
                              "unsupported checkpoint version " + std::to_string(ck.version));
    ck.config_json = r.bytes(r.u32());
    const std::uint32_t count = r.u32();
    ck.tensors.reserve(count);
    for (std::uint32_t i = 0; i < count; ++i) {
        RawTensor t;
        t.name = r.bytes(r.u16());
        const int rank = r.u8();
        std::int64_t n = 1;
        for (int d = 0; d < rank; ++d) {
            t.shape.push_back(static_cast<std::int64_t>(r.u32()));
            n *= t.shape.back();
        }
        t.values.resize(static_cast<std::size_t>(n));
        for (auto& f : t.values) f = r.f32();
        ck.tensors.push_back(std::move(t));
    }
    if (r.pos != bytes.size())
        throw CheckpointError(CheckpointError::Kind::tensor_mismatch,
                              "trailing bytes after last tensor");
    return ck;
}

// The config blob records the model configuration plus which training stage
// produced the file (0 = freshly initialized, never trained).
inline std::string checkpoint_config_json(const ModelConfig& cfg, int stage) {
    nlohmann::json j;
    j["model"] = cfg.to_json();
    j["stage"] = stage;
    return j.dump();
}

inline void save_checkpoint(const Model& model, int stage, const std::filesystem::path& path) {
    const std::string bytes =
        serialize_checkpoint(model.named_params(), checkpoint_config_json(model.cfg, stage));
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open checkpoint for writing: " + path.string());
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw IoError("short write to checkpoint: " + path.string());
}

struct LoadedCheckpoint {
    Model model;
    int stage = 0;
};

inline LoadedCheckpoint from_raw_checkpoint(const RawCheckpoint& raw) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(raw.config_json);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("checkpoint config blob is not valid JSON: ") + e.what());
    }
    if (!j.is_object() || !j.contains("model") || !j.contains("stage") || j.size() != 2 ||
        !j["stage"].is_number_integer())
        throw ConfigError("checkpoint config blob must hold exactly {\"model\",\"stage\"}");

    LoadedCheckpoint out{Model::init(ModelConfig::from_json(j["model"]), 0), j["stage"].get<int>()};

    NamedParams params = out.model.named_params();
    if (raw.tensors.size() != params.size())
        throw CheckpointError(CheckpointError::Kind::tensor_mismatch,
                              "checkpoint holds " + std::to_string(raw.tensors.size()) +
                                  " tensors, model expects " + std::to_string(params.size()));
    std::set<std::string> seen;
    for (const auto& t : raw.tensors) {
        if (!seen.insert(t.name).second)
            throw CheckpointError(CheckpointError::Kind::tensor_mismatch,
                                  "duplicate tensor \"" + t.name + "\" in checkpoint");
        auto it = std::find_if(params.begin(), params.end(),
                               [&](const auto& p) { return p.first == t.name; });
        if (it == params.end())
            throw CheckpointError(CheckpointError::Kind::tensor_mismatch,
                                  "checkpoint tensor \"" + t.name + "\" unknown to the model");
        if (it->second.shape() != t.shape)
            throw CheckpointError(CheckpointError::Kind::tensor_mismatch,
                                  "shape mismatch for \"" + t.name + "\": file " + shape_str(t.shape) +
                                      " vs model " + shape_str(it->second.shape()));
        std::copy(t.values.begin(), t.values.end(), it->second.data());
    }
    return out;
}

inline LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open checkpoint: " + path.string());
    std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return from_raw_checkpoint(parse_checkpoint(bytes));
}

} // namespace emotalk
