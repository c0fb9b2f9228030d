// SPDX-License-Identifier: Apache-2.0
//
// Deterministic synthetic multi-domain corpora. Each knowledge domain is a
// first-order Markov chain whose high-probability tokens form a subset
// disjoint from the other domains, so domain membership is recoverable from
// unigram statistics while staying learnable for tiny LMs.

#pragma once

#include <cstdint>
#include <vector>

#include "fedmoe/corpus.hpp"

namespace fedmoe {

struct DomainSpec {
    int32_t id = 0;
    std::vector<int32_t> preferred;   // the domain's high-probability token subset
    std::vector<double> transitions;  // V x V row-major; rows sum to 1
};

struct DataGenOptions {
    int64_t vocab_size = 64;
    int64_t n_domains = 3;
    int64_t devices_per_domain = 4;
    int64_t tokens_per_device = 6144;  // mean; shard sizes are drawn unevenly
    int64_t public_tokens = 12288;
    int64_t test_tokens_per_domain = 2048;
    double separation = 0.9;  // probability mass kept inside the domain subset
    int64_t max_seq_len = 32;
    int64_t embedding_dim = 32;
    double min_shard_fraction = 0.5;  // lower clamp on the uneven size split
    // when > 0, each device draws this fraction of its window-sized blocks
    // from the other domains instead of its dominant one
    double mixture_fraction = 0.0;
    uint64_t seed = 1;
};

struct DeviceData {
    int32_t device_id = 0;
    int32_t domain_id = 0;
    std::vector<double> mixture_weights;  // per-domain sampling weights, sum 1
    Corpus shard;
    std::vector<double> embedding;  // unit-norm, embedding_dim entries
};

struct DataBundle {
    DataGenOptions options;
    std::vector<DomainSpec> domains;
    std::vector<DeviceData> devices;
    Corpus public_corpus;              // uniform mixture over all domains
    std::vector<Corpus> domain_tests;  // held-out, one per domain
    Corpus mixed_test;                 // window-aligned interleave of the tests
    std::vector<int32_t> mixed_test_domain_of_window;
};

DomainSpec build_domain(int32_t id, int64_t vocab_size, int64_t n_domains, double separation,
                        uint64_t seed);
Corpus sample_stream(const DomainSpec& domain, int64_t vocab_size, int64_t n_tokens,
                     uint64_t seed);

DataBundle gen_corpora(const DataGenOptions& options);

// Unit-norm embedding of a shard: a fixed seeded random projection (rows
// mean-centered, so the uniform component of the histogram drops out) applied
// to the token-unigram frequency histogram, then L2-normalized.
std::vector<double> compute_embedding(const Corpus& shard, int64_t dim, uint64_t projection_seed);

double cosine(const std::vector<double>& a, const std::vector<double>& b);

}  // namespace fedmoe
