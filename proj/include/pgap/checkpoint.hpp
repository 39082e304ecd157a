#pragma once

// Checkpoint layout (all integers little-endian):
//
//   offset 0   8 bytes   magic "PGAPCKPT"
//   offset 8   uint32    format version (1)
//   offset 12  uint64    header length H in bytes
//   offset 20  H bytes   UTF-8 JSON header
//   offset 20+H          float64 parameter blocks in declaration order,
//                        each block row-major with the shape listed in the
//                        header's "parameters" array
//
// The JSON header carries the model config, seed, epoch, metric history and
// any extra metadata the trainer attaches.

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>

#include <nlohmann/json.hpp>

#include "pgap/dataio.hpp"
#include "pgap/error.hpp"
#include "pgap/model.hpp"

namespace pgap {

inline nlohmann::json to_json(const ModelConfig& c) {
    return {{"local_dim", c.local_dim},
            {"descriptor_dim", c.descriptor_dim},
            {"pointnet_widths", c.pointnet_widths},
            {"slc_hidden", c.slc_hidden},
            {"num_segments", c.num_segments},
            {"aggregation", to_string(c.aggregation)}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.local_dim = j.at("local_dim").get<std::size_t>();
    c.descriptor_dim = j.at("descriptor_dim").get<std::size_t>();
    c.pointnet_widths = j.at("pointnet_widths").get<std::vector<std::size_t>>();
    c.slc_hidden = j.at("slc_hidden").get<std::vector<std::size_t>>();
    c.num_segments = j.at("num_segments").get<std::size_t>();
    c.aggregation = parse_aggregation(j.at("aggregation").get<std::string>());
    c.validate();
    return c;
}

struct Checkpoint {
    PointNetPGAP model;
    std::uint64_t seed = 0;
    int epoch = 0;
    nlohmann::json history = nlohmann::json::array();
    nlohmann::json metadata = nlohmann::json::object();
};

inline constexpr char kCheckpointMagic[8] = {'P', 'G', 'A', 'P', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

inline void save_checkpoint(const fs::path& path, const Checkpoint& ckpt) {
    nlohmann::json header;
    header["format"] = "pgap-checkpoint";
    header["version"] = kCheckpointVersion;
    header["config"] = to_json(ckpt.model.config());
    header["seed"] = ckpt.seed;
    header["epoch"] = ckpt.epoch;
    header["history"] = ckpt.history;
    header["metadata"] = ckpt.metadata;
    nlohmann::json params = nlohmann::json::array();
    for (const auto* p : ckpt.model.parameters()) params.push_back({{"name", p->name()}, {"shape", p->value().shape()}});
    header["parameters"] = params;
    const std::string h = header.dump();

    std::ofstream out(path, std::ios::binary);
    if (!out) throw LoadError("cannot write checkpoint " + path.string());
    out.write(kCheckpointMagic, 8);
    const std::uint32_t version = kCheckpointVersion;
    out.write(reinterpret_cast<const char*>(&version), sizeof version);
    const std::uint64_t len = h.size();
    out.write(reinterpret_cast<const char*>(&len), sizeof len);
    out.write(h.data(), static_cast<std::streamsize>(h.size()));
    for (const auto* p : ckpt.model.parameters()) {
        const auto data = p->value().data();
        out.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size_bytes()));
    }
    if (!out) throw LoadError("failed while writing checkpoint " + path.string());
}

inline Checkpoint load_checkpoint(const fs::path& path) {
    if (!fs::exists(path)) throw LoadError("checkpoint not found: " + path.string());
    const std::string bytes = detail::read_file(path);
    if (bytes.size() < 20 || std::memcmp(bytes.data(), kCheckpointMagic, 8) != 0) {
        throw ParseError(path.filename().string() + ": not a checkpoint file", 0);
    }
    std::uint32_t version = 0;
    std::memcpy(&version, bytes.data() + 8, sizeof version);
    if (version != kCheckpointVersion) {
        throw ParseError("unsupported checkpoint version " + std::to_string(version), 8);
    }
    std::uint64_t len = 0;
    std::memcpy(&len, bytes.data() + 12, sizeof len);
    if (20 + len > bytes.size()) throw ParseError("checkpoint header truncated", 12);
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(bytes.substr(20, len));
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("checkpoint header: ") + e.what(), 20);
    }

    Checkpoint ckpt;
    try {
        ckpt.model = PointNetPGAP::init(model_config_from_json(header.at("config")), 0);
        ckpt.seed = header.at("seed").get<std::uint64_t>();
        ckpt.epoch = header.at("epoch").get<int>();
        ckpt.history = header.value("history", nlohmann::json::array());
        ckpt.metadata = header.value("metadata", nlohmann::json::object());
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("checkpoint header: ") + e.what(), 20);
    }
    const auto& listed = header.at("parameters");
    auto params = ckpt.model.parameters();
    if (listed.size() != params.size()) throw ParseError("checkpoint parameter list does not match the config", 20);
    std::size_t offset = 20 + len;
    for (std::size_t i = 0; i < params.size(); ++i) {
        const auto shape = listed[i].at("shape").get<Shape>();
        if (shape != params[i]->value().shape() || listed[i].at("name").get<std::string>() != params[i]->name()) {
            throw ParseError("checkpoint parameter '" + params[i]->name() + "' has an unexpected shape", 20);
        }
        auto data = params[i]->value().data();
        if (offset + data.size_bytes() > bytes.size()) throw ParseError("checkpoint parameters truncated", offset);
        std::memcpy(data.data(), bytes.data() + offset, data.size_bytes());
        offset += data.size_bytes();
    }
    if (offset != bytes.size()) throw ParseError("trailing bytes after checkpoint parameters", offset);
    return ckpt;
}

} // namespace pgap
