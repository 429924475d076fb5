#pragma once

#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "uaseg/nn/layers.hpp"

namespace uaseg {

// ---------------------------------------------------------------------------
// Checkpoint container: a fixed magic, a JSON header (model kind, config,
// metadata, tensor directory) and raw little-endian float32 tensor data in
// directory order. Loading validates name and shape agreement.
// ---------------------------------------------------------------------------

inline constexpr char kCheckpointMagic[8] = {'U', 'A', 'S', 'E', 'G', 'C', 'K', '1'};

struct Checkpoint {
    std::string kind;  // "backbone" | "segmentation" | "meta"
    nlohmann::ordered_json config;
    nlohmann::ordered_json metadata;
    std::vector<std::string> order;
    std::map<std::string, Tensor<float>> tensors;

    void add(const std::string& name, const Tensor<float>& t) {
        order.push_back(name);
        tensors.emplace(name, t);
    }
};

inline Checkpoint snapshot_tensors(const nn::ParamSet<float>& refs, const std::string& kind,
                                   nlohmann::ordered_json config,
                                   nlohmann::ordered_json metadata = {}) {
    Checkpoint ck;
    ck.kind = kind;
    ck.config = std::move(config);
    ck.metadata = std::move(metadata);
    for (const auto& r : refs) ck.add(r.name, *r.value);
    return ck;
}

inline void write_checkpoint(const std::string& path, const Checkpoint& ck) {
    nlohmann::ordered_json header;
    header["format_version"] = 1;
    header["byte_order"] = "little";
    header["kind"] = ck.kind;
    header["config"] = ck.config;
    header["metadata"] = ck.metadata;
    header["tensors"] = nlohmann::ordered_json::array();
    for (const auto& name : ck.order) {
        const auto& t = ck.tensors.at(name);
        header["tensors"].push_back(
            {{"name", name}, {"shape", {t.n(), t.c(), t.h(), t.w()}}});
    }
    const std::string hs = header.dump();

    std::filesystem::path p(path);
    if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot write checkpoint: " + path);
    os.write(kCheckpointMagic, sizeof(kCheckpointMagic));
    const std::uint64_t hlen = hs.size();
    os.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
    os.write(hs.data(), static_cast<std::streamsize>(hs.size()));
    for (const auto& name : ck.order) {
        const auto& t = ck.tensors.at(name);
        os.write(reinterpret_cast<const char*>(t.ptr()),
                 static_cast<std::streamsize>(t.size() * sizeof(float)));
    }
    if (!os) throw IoError("short write on checkpoint: " + path);
}

inline Checkpoint read_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot read checkpoint: " + path);
    char magic[8];
    is.read(magic, sizeof(magic));
    if (!is || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0)
        throw CheckpointError("not a checkpoint file: " + path);
    std::uint64_t hlen = 0;
    is.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
    std::string hs(hlen, '\0');
    is.read(hs.data(), static_cast<std::streamsize>(hlen));
    if (!is) throw CheckpointError("truncated checkpoint header: " + path);
    nlohmann::ordered_json header = nlohmann::ordered_json::parse(hs);
    if (header.at("format_version").get<int>() != 1)
        throw CheckpointError("unsupported checkpoint version in " + path);

    Checkpoint ck;
    ck.kind = header.at("kind").get<std::string>();
    ck.config = header.at("config");
    ck.metadata = header.at("metadata");
    for (const auto& e : header.at("tensors")) {
        const std::string name = e.at("name").get<std::string>();
        const auto shape = e.at("shape").get<std::vector<int>>();
        Tensor<float> t(shape[0], shape[1], shape[2], shape[3]);
        is.read(reinterpret_cast<char*>(t.ptr()),
                static_cast<std::streamsize>(t.size() * sizeof(float)));
        if (!is) throw CheckpointError("truncated tensor data for '" + name + "' in " + path);
        ck.add(name, t);
    }
    return ck;
}

// Copy checkpoint tensors into live model references. Every referenced tensor
// must be present with a matching shape; the error names the first offender.
inline void apply_checkpoint(const Checkpoint& ck, const nn::ParamSet<float>& refs) {
    for (const auto& r : refs) {
        auto it = ck.tensors.find(r.name);
        if (it == ck.tensors.end())
            throw CheckpointError("checkpoint is missing tensor '" + r.name + "'");
        if (it->second.shape() != r.value->shape())
            throw CheckpointError("shape mismatch for tensor '" + r.name + "': checkpoint " +
                                  it->second.shape_str() + " vs model " + r.value->shape_str());
        *r.value = it->second;
    }
    if (ck.tensors.size() != refs.size())
        for (const auto& [name, _] : ck.tensors) {
            bool found = false;
            for (const auto& r : refs)
                if (r.name == name) {
                    found = true;
                    break;
                }
            if (!found) throw CheckpointError("checkpoint tensor '" + name + "' has no destination");
        }
}

// Copy only the subset of refs whose names exist in the checkpoint (used to
// load a backbone into the encoder of a full model). Every checkpoint tensor
// must be consumed.
inline int apply_checkpoint_subset(const Checkpoint& ck, const nn::ParamSet<float>& refs) {
    int applied = 0;
    for (const auto& r : refs) {
        auto it = ck.tensors.find(r.name);
        if (it == ck.tensors.end()) continue;
        if (it->second.shape() != r.value->shape())
            throw CheckpointError("shape mismatch for tensor '" + r.name + "': checkpoint " +
                                  it->second.shape_str() + " vs model " + r.value->shape_str());
        *r.value = it->second;
        ++applied;
    }
    if (applied != static_cast<int>(ck.tensors.size()))
        throw CheckpointError("checkpoint holds tensors with no destination in this model");
    return applied;
}

// Order-stable content checksum over parameters and buffers.
inline std::uint64_t tensors_checksum(const nn::ParamSet<float>& refs) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& r : refs) {
        h = fnv1a64(r.name.data(), r.name.size(), h);
        h = fnv1a64(r.value->ptr(), r.value->size() * sizeof(float), h);
    }
    return h;
}

}  // namespace uaseg
