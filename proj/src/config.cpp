// SPDX-License-Identifier: Apache-2.0

#include "fedmoe/config.hpp"

#include <stdexcept>

#include <json.hpp>

namespace fedmoe {

using nlohmann::json;

void LmConfig::validate() const {
    if (vocab_size < 2) throw std::invalid_argument("config: vocab_size must be >= 2");
    if (n_layers < 1) throw std::invalid_argument("config: n_layers must be >= 1");
    if (n_heads < 1 || d_model % n_heads != 0) {
        throw std::invalid_argument("config: d_model must be divisible by n_heads");
    }
    if (d_ffn < 1 || max_seq_len < 2) throw std::invalid_argument("config: bad d_ffn/max_seq_len");
}

std::string LmConfig::to_json() const {
    json j;
    j["arch_family"] = arch_family;
    j["d_ffn"] = d_ffn;
    j["d_model"] = d_model;
    j["max_seq_len"] = max_seq_len;
    j["n_heads"] = n_heads;
    j["n_layers"] = n_layers;
    j["tied_output"] = tied_output;
    j["vocab_size"] = vocab_size;
    return j.dump();
}

LmConfig LmConfig::from_json(const std::string& text) {
    const json j = json::parse(text);
    LmConfig c;
    c.arch_family = j.at("arch_family").get<std::string>();
    c.d_ffn = j.at("d_ffn").get<int64_t>();
    c.d_model = j.at("d_model").get<int64_t>();
    c.max_seq_len = j.at("max_seq_len").get<int64_t>();
    c.n_heads = j.at("n_heads").get<int64_t>();
    c.n_layers = j.at("n_layers").get<int64_t>();
    c.tied_output = j.at("tied_output").get<bool>();
    c.vocab_size = j.at("vocab_size").get<int64_t>();
    c.validate();
    return c;
}

LmConfig arch_config(const std::string& family, int64_t vocab_size, int64_t max_seq_len,
                     bool tied_output) {
    LmConfig c;
    c.arch_family = family;
    c.vocab_size = vocab_size;
    c.max_seq_len = max_seq_len;
    c.tied_output = tied_output;
    if (family == "tinyA") {
        c.n_layers = 2; c.d_model = 32; c.n_heads = 4; c.d_ffn = 128;
    } else if (family == "tinyB") {
        c.n_layers = 3; c.d_model = 48; c.n_heads = 4; c.d_ffn = 192;
    } else if (family == "tinyC") {
        c.n_layers = 4; c.d_model = 64; c.n_heads = 4; c.d_ffn = 256;
    } else if (family == "base") {
        c.n_layers = 4; c.d_model = 64; c.n_heads = 4; c.d_ffn = 256;
    } else {
        throw std::invalid_argument("unknown arch family: " + family);
    }
    c.validate();
    return c;
}

const std::vector<std::string>& device_arch_families() {
    static const std::vector<std::string> families = {"tinyA", "tinyB", "tinyC"};
    return families;
}

void MoeConfig::validate() const {
    backbone.validate();
    if (n_experts < 1) throw std::invalid_argument("config: n_experts must be >= 1");
    if (top_k < 1 || top_k > n_experts) {
        throw std::invalid_argument("config: top_k must satisfy 1 <= k <= K");
    }
}

std::string MoeConfig::to_json() const {
    json j;
    j["backbone"] = json::parse(backbone.to_json());
    j["n_experts"] = n_experts;
    j["top_k"] = top_k;
    return j.dump();
}

MoeConfig MoeConfig::from_json(const std::string& text) {
    const json j = json::parse(text);
    MoeConfig c;
    c.backbone = LmConfig::from_json(j.at("backbone").dump());
    c.n_experts = j.at("n_experts").get<int64_t>();
    c.top_k = j.at("top_k").get<int64_t>();
    c.validate();
    return c;
}

}  // namespace fedmoe
