// SPDX-License-Identifier: Apache-2.0
//
// Phase III: merge the K distilled base models into one gated-expert model,
// then tune everything except the expert FFNs.

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fedmoe/corpus.hpp"
#include "fedmoe/model.hpp"

namespace fedmoe {

struct TensorProvenance {
    std::string tensor;                // name inside the merged model
    std::string rule;                  // "expert_inherit" | "mean_of_bases" | "fresh_gate"
    std::vector<std::string> sources;  // e.g. "base_2:layers.0.ffn.w_in"
    std::string sha256;                // set for frozen expert tensors
};

struct MergeReport {
    std::vector<TensorProvenance> entries;  // exactly one entry per model tensor
};

// Expert i of every layer inherits base i's FFN tensors bit-exactly; the
// remaining tensors are the elementwise mean over bases (running mean in
// ascending base index); gate weights are fresh seeded normals (std 0.02).
MoeLm merge_bases(const std::vector<DenseLm>& bases, int64_t top_k, uint64_t gate_seed,
                  MergeReport* report = nullptr);

struct TuneResult {
    std::vector<double> epoch_loss;
    int64_t trainable_params = 0;
    int64_t frozen_params = 0;
};

// Cross-entropy tuning of embedding/attention/norm/gate/output tensors with
// every expert FFN frozen; expert checksums are verified afterwards and any
// mismatch aborts.
TuneResult tune_global(MoeLm& model, const Corpus& public_corpus, const TrainOptions& opt);

struct RoutingStats {
    int64_t n_experts = 0;
    int64_t k = 0;
    int64_t tokens = 0;
    std::vector<double> expert_pct;                   // activation frequency, percent
    std::vector<std::vector<double>> domain_expert_pct;  // [domain][expert]
};

// Activation frequencies over per-domain corpora (aggregated across layers).
RoutingStats routing_stats(const MoeLm& model, const std::vector<Corpus>& domain_corpora,
                           int64_t window, int64_t batch_size = 16);

}  // namespace fedmoe
