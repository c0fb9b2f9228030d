// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace fedmoe {

// Architecture of one decoder-only LM. Heterogeneity across devices comes from
// the built-in families below; vocab and context length are shared system-wide.
struct LmConfig {
    std::string arch_family = "tinyA";
    int64_t vocab_size = 64;
    int64_t d_model = 32;
    int64_t n_layers = 2;
    int64_t n_heads = 4;
    int64_t d_ffn = 128;
    int64_t max_seq_len = 32;
    bool tied_output = false;

    void validate() const;
    std::string to_json() const;  // canonical: sorted keys, no whitespace
    static LmConfig from_json(const std::string& text);
    bool operator==(const LmConfig&) const = default;
};

// Built-in families. Devices draw from tinyA/tinyB/tinyC; "base" is the
// backbone every distillation student starts from and the MoE inherits.
LmConfig arch_config(const std::string& family, int64_t vocab_size, int64_t max_seq_len,
                     bool tied_output = false);
const std::vector<std::string>& device_arch_families();

struct MoeConfig {
    LmConfig backbone;
    int64_t n_experts = 3;  // K
    int64_t top_k = 2;      // k, 1 <= k < K (k == K allowed for diagnostics)

    void validate() const;
    std::string to_json() const;
    static MoeConfig from_json(const std::string& text);
    bool operator==(const MoeConfig&) const = default;
};

}  // namespace fedmoe
