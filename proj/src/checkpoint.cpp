// SPDX-License-Identifier: Apache-2.0

#include "fedmoe/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

static_assert(std::endian::native == std::endian::little,
              "checkpoint payload is little-endian");

namespace fedmoe {

using nlohmann::json;

namespace {

constexpr char kMagic[4] = {'D', 'F', 'C', 'K'};
constexpr uint32_t kVersion = 1;

void put_u32(std::vector<uint8_t>& out, uint32_t v) {
    const size_t n = out.size();
    out.resize(n + 4);
    std::memcpy(out.data() + n, &v, 4);
}

void put_bytes(std::vector<uint8_t>& out, const void* data, size_t len) {
    const size_t n = out.size();
    out.resize(n + len);
    std::memcpy(out.data() + n, data, len);
}

std::string manifest_json(const std::vector<NamedTensor>& params) {
    json m = json::array();
    for (const auto& [name, t] : params) {
        m.push_back(json::array({name, t.shape()}));
    }
    return m.dump();
}

std::vector<uint8_t> assemble(const std::string& config_json,
                              const std::vector<NamedTensor>& params) {
    std::vector<uint8_t> out;
    put_bytes(out, kMagic, 4);
    put_u32(out, kVersion);
    put_u32(out, static_cast<uint32_t>(config_json.size()));
    put_bytes(out, config_json.data(), config_json.size());
    const std::string manifest = manifest_json(params);
    put_u32(out, static_cast<uint32_t>(manifest.size()));
    put_bytes(out, manifest.data(), manifest.size());
    for (const auto& [name, t] : params) {
        put_bytes(out, t.data().data(), t.data().size() * sizeof(double));
    }
    return out;
}

struct Parsed {
    json config;
    json manifest;
    const uint8_t* payload = nullptr;
    size_t payload_len = 0;
};

Parsed parse(std::span<const uint8_t> bytes) {
    if (bytes.size() < 12 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
        throw std::runtime_error("not a checkpoint container");
    }
    size_t off = 4;
    auto take_u32 = [&]() {
        if (off + 4 > bytes.size()) throw std::runtime_error("truncated checkpoint header");
        uint32_t v;
        std::memcpy(&v, bytes.data() + off, 4);
        off += 4;
        return v;
    };
    const uint32_t version = take_u32();
    if (version != kVersion) throw std::runtime_error("unsupported checkpoint version");
    const uint32_t cfg_len = take_u32();
    if (off + cfg_len > bytes.size()) throw std::runtime_error("truncated checkpoint config");
    const std::string cfg_text(reinterpret_cast<const char*>(bytes.data() + off), cfg_len);
    off += cfg_len;
    const uint32_t man_len = take_u32();
    if (off + man_len > bytes.size()) throw std::runtime_error("truncated checkpoint manifest");
    const std::string man_text(reinterpret_cast<const char*>(bytes.data() + off), man_len);
    off += man_len;
    Parsed p;
    p.config = json::parse(cfg_text);
    p.manifest = json::parse(man_text);
    p.payload = bytes.data() + off;
    p.payload_len = bytes.size() - off;
    return p;
}

// fills model tensors from the payload, enforcing manifest/shape agreement
void fill_params(const Parsed& p, std::vector<NamedTensor> params) {
    if (p.manifest.size() != params.size()) {
        throw std::runtime_error("checkpoint manifest entry count mismatch");
    }
    size_t off = 0;
    for (size_t i = 0; i < params.size(); ++i) {
        const auto& entry = p.manifest[i];
        const std::string name = entry.at(0).get<std::string>();
        const Shape shape = entry.at(1).get<Shape>();
        if (name != params[i].name || shape != params[i].tensor.shape()) {
            throw std::runtime_error("checkpoint weight '" + name +
                                     "' does not match the config-derived shape");
        }
        const size_t n = params[i].tensor.data().size() * sizeof(double);
        if (off + n > p.payload_len) throw std::runtime_error("truncated checkpoint payload");
        std::memcpy(params[i].tensor.data().data(), p.payload + off, n);
        off += n;
    }
    if (off != p.payload_len) throw std::runtime_error("trailing bytes in checkpoint payload");
}

}  // namespace

std::vector<uint8_t> save_checkpoint(const DenseLm& model) {
    json cfg;
    cfg["kind"] = "dense";
    cfg["lm"] = json::parse(model.config().to_json());
    return assemble(cfg.dump(), model.named_params());
}

std::vector<uint8_t> save_checkpoint(const MoeLm& model) {
    json cfg;
    cfg["kind"] = "moe";
    cfg["moe"] = json::parse(model.config().to_json());
    return assemble(cfg.dump(), model.named_params());
}

ModelKind checkpoint_kind(std::span<const uint8_t> bytes) {
    const Parsed p = parse(bytes);
    const std::string kind = p.config.at("kind").get<std::string>();
    if (kind == "dense") return ModelKind::dense;
    if (kind == "moe") return ModelKind::moe;
    throw std::runtime_error("unknown checkpoint kind: " + kind);
}

DenseLm load_dense_checkpoint(std::span<const uint8_t> bytes) {
    const Parsed p = parse(bytes);
    if (p.config.at("kind").get<std::string>() != "dense") {
        throw std::runtime_error("checkpoint is not a dense model");
    }
    const LmConfig cfg = LmConfig::from_json(p.config.at("lm").dump());
    DenseLm model = DenseLm::zeros(cfg);
    fill_params(p, model.named_params());
    return model;
}

MoeLm load_moe_checkpoint(std::span<const uint8_t> bytes) {
    const Parsed p = parse(bytes);
    if (p.config.at("kind").get<std::string>() != "moe") {
        throw std::runtime_error("checkpoint is not a gated-expert model");
    }
    const MoeConfig cfg = MoeConfig::from_json(p.config.at("moe").dump());
    MoeLm model(cfg, 0);
    fill_params(p, model.named_params());
    return model;
}

int64_t dense_checkpoint_bytes(const LmConfig& config) {
    json cfg;
    cfg["kind"] = "dense";
    cfg["lm"] = json::parse(config.to_json());
    const std::string cfg_text = cfg.dump();
    // manifest built from a weightless skeleton of the same config
    DenseLm skeleton = DenseLm::zeros(config);
    const std::string manifest = manifest_json(skeleton.named_params());
    return 4 + 4 + 4 + static_cast<int64_t>(cfg_text.size()) + 4 +
           static_cast<int64_t>(manifest.size()) + 8 * skeleton.param_count();
}

void write_file(const std::filesystem::path& path, std::span<const uint8_t> bytes) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open for write: " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), bytes.size());
    if (!out) throw std::runtime_error("short write: " + path.string());
}

std::vector<uint8_t> read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary | std::ios::ate);
    if (!in) throw std::runtime_error("cannot open for read: " + path.string());
    const std::streamsize n = in.tellg();
    in.seekg(0);
    std::vector<uint8_t> bytes(static_cast<size_t>(n));
    in.read(reinterpret_cast<char*>(bytes.data()), n);
    if (!in) throw std::runtime_error("short read: " + path.string());
    return bytes;
}

}  // namespace fedmoe
