// SPDX-License-Identifier: Apache-2.0
//
// Phase I: group devices into knowledge domains from their data embeddings and
// build one weight-averaged proxy teacher per cluster.

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fedmoe/model.hpp"

namespace fedmoe {

// Pairwise cosine similarities; symmetric with unit diagonal.
struct SimilarityMatrix {
    int64_t n = 0;
    std::vector<double> values;  // n x n row-major

    double at(int64_t i, int64_t j) const { return values[i * n + j]; }
};

SimilarityMatrix similarity_matrix(const std::vector<std::vector<double>>& embeddings);

struct KmeansResult {
    std::vector<int32_t> assignment;             // per point, cluster id
    std::vector<std::vector<double>> centroids;  // k centroids
    int64_t iterations = 0;
};

// k-means++ init, Euclidean metric on unit-norm embeddings, at most 300
// iterations or centroid shift < 1e-9. Empty clusters are repaired by moving
// the farthest member (ties: lowest id) out of the largest cluster.
KmeansResult kmeans_domains(const std::vector<std::vector<double>>& embeddings, int64_t k,
                            uint64_t seed);

struct ClusterReport {
    int32_t cluster_id = 0;
    std::vector<int32_t> members;   // device ids
    std::string dominant_family;
    std::vector<int32_t> excluded;  // members whose arch differs from dominant
    double intra_mean_cosine = 1.0;
};

struct ProxyMember {
    int32_t device_id = 0;
    std::string family;
    int64_t train_tokens = 0;
    const DenseLm* model = nullptr;
};

struct ProxyResult {
    DenseLm proxy;
    ClusterReport report;
};

// Weight-averages the cluster members of the dominant architecture family.
// Dominance: member count, then aggregate training tokens, then lexicographic
// family tag. Members of other families are excluded and reported. With
// size_weighted, members are weighted by training tokens instead of equally.
ProxyResult build_proxy(int32_t cluster_id, const std::vector<ProxyMember>& members,
                        const std::vector<std::vector<double>>& embeddings,
                        bool size_weighted = false);

}  // namespace fedmoe
