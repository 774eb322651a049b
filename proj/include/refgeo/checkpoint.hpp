#pragma once

// Binary model checkpoint:
//   magic "RGEOCKPT" | u32 version | u64 header length | JSON header |
//   raw little-endian float64 payload, tensors in named_parameters() order.
// The header carries the config and each tensor's name and shape, so a
// checkpoint round-trips bit-exactly.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>

#include "json.hpp"
#include "refgeo/model.hpp"

namespace refgeo {

inline constexpr char kCheckpointMagic[8] = {'R', 'G', 'E', 'O', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

static_assert(std::endian::native == std::endian::little, "checkpoint format assumes a little-endian host");

inline nlohmann::json config_to_json(const ModelConfig& c) {
    return {{"vocab_size", c.vocab_size}, {"d_model", c.d_model},         {"n_layers", c.n_layers},
            {"n_heads", c.n_heads},       {"d_mlp", c.d_mlp},             {"max_seq_len", c.max_seq_len},
            {"seed", c.seed}};
}

inline ModelConfig config_from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.vocab_size = j.at("vocab_size").get<int>();
    c.d_model = j.at("d_model").get<int>();
    c.n_layers = j.at("n_layers").get<int>();
    c.n_heads = j.at("n_heads").get<int>();
    c.d_mlp = j.at("d_mlp").get<int>();
    c.max_seq_len = j.at("max_seq_len").get<int>();
    c.seed = j.value("seed", std::uint64_t{0});
    return c;
}

inline void save_checkpoint(const ToyModel& model, const std::string& path) {
    nlohmann::json header;
    header["config"] = config_to_json(model.config());
    header["tensors"] = nlohmann::json::array();
    for (const auto& [name, t] : model.named_parameters()) {
        header["tensors"].push_back({{"name", name}, {"shape", t->shape()}});
    }
    const std::string h = header.dump();
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("checkpoint: cannot open '" + path + "' for writing");
    os.write(kCheckpointMagic, sizeof(kCheckpointMagic));
    const std::uint32_t version = kCheckpointVersion;
    os.write(reinterpret_cast<const char*>(&version), sizeof(version));
    const std::uint64_t hlen = h.size();
    os.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
    os.write(h.data(), static_cast<std::streamsize>(h.size()));
    for (const auto& [name, t] : model.named_parameters()) {
        os.write(reinterpret_cast<const char*>(t->data().data()),
                 static_cast<std::streamsize>(t->numel() * sizeof(double)));
    }
    if (!os) throw std::runtime_error("checkpoint: write to '" + path + "' failed");
}

inline ToyModel load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("checkpoint: cannot open '" + path + "'");
    char magic[8];
    is.read(magic, sizeof(magic));
    if (!is || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0) {
        throw std::runtime_error("checkpoint: '" + path + "' is not a model checkpoint");
    }
    std::uint32_t version = 0;
    is.read(reinterpret_cast<char*>(&version), sizeof(version));
    if (version != kCheckpointVersion) {
        throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));
    }
    std::uint64_t hlen = 0;
    is.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
    std::string h(hlen, '\0');
    is.read(h.data(), static_cast<std::streamsize>(hlen));
    const auto header = nlohmann::json::parse(h);
    ToyModel model = ToyModel::init(config_from_json(header.at("config")));
    auto params = model.named_parameters();
    const auto& entries = header.at("tensors");
    if (entries.size() != params.size()) throw std::runtime_error("checkpoint: tensor count mismatch");
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto& [name, t] = params[i];
        if (entries[i].at("name").get<std::string>() != name ||
            entries[i].at("shape").get<Shape>() != t->shape()) {
            throw std::runtime_error("checkpoint: layout mismatch at tensor '" + name + "'");
        }
        auto& buf = t->mutable_data();
        is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(double)));
        if (!is) throw std::runtime_error("checkpoint: truncated payload at tensor '" + name + "'");
    }
    return model;
}

}  // namespace refgeo
