// SPDX-License-Identifier: Apache-2.0

#include "fedmoe/clustering.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <stdexcept>

#include "fedmoe/datagen.hpp"
#include "fedmoe/rng.hpp"

namespace fedmoe {

namespace {

double sq_dist(const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        const double d = a[i] - b[i];
        s += d * d;
    }
    return s;
}

}  // namespace

SimilarityMatrix similarity_matrix(const std::vector<std::vector<double>>& embeddings) {
    const int64_t n = static_cast<int64_t>(embeddings.size());
    if (n == 0) throw std::invalid_argument("similarity_matrix: no embeddings");
    SimilarityMatrix m;
    m.n = n;
    m.values.assign(n * n, 0.0);
    for (int64_t i = 0; i < n; ++i) {
        for (int64_t j = 0; j < n; ++j) {
            m.values[i * n + j] = cosine(embeddings[i], embeddings[j]);
        }
    }
    return m;
}

KmeansResult kmeans_domains(const std::vector<std::vector<double>>& embeddings, int64_t k,
                            uint64_t seed) {
    const int64_t n = static_cast<int64_t>(embeddings.size());
    if (n < k) throw std::invalid_argument("kmeans: fewer points than clusters");
    if (k < 1) throw std::invalid_argument("kmeans: k must be >= 1");
    const size_t dim = embeddings[0].size();
    for (const auto& e : embeddings) {
        if (e.size() != dim) throw std::invalid_argument("kmeans: inconsistent dimensions");
    }
    Rng rng(seed);

    // k-means++ seeding
    std::vector<std::vector<double>> centroids;
    centroids.push_back(embeddings[rng.uniform_int(n)]);
    std::vector<double> d2(n);
    while (static_cast<int64_t>(centroids.size()) < k) {
        double total = 0.0;
        for (int64_t i = 0; i < n; ++i) {
            double best = std::numeric_limits<double>::max();
            for (const auto& c : centroids) best = std::min(best, sq_dist(embeddings[i], c));
            d2[i] = best;
            total += best;
        }
        int64_t pick = 0;
        if (total <= 0.0) {
            pick = rng.uniform_int(n);  // all points coincide with a centroid
        } else {
            const double u = rng.uniform() * total;
            double acc = 0.0;
            pick = n - 1;
            for (int64_t i = 0; i < n; ++i) {
                acc += d2[i];
                if (u < acc) {
                    pick = i;
                    break;
                }
            }
        }
        centroids.push_back(embeddings[pick]);
    }

    KmeansResult res;
    res.assignment.assign(n, 0);
    constexpr int64_t kMaxIters = 300;
    constexpr double kShiftTol = 1e-9;
    for (int64_t iter = 0; iter < kMaxIters; ++iter) {
        res.iterations = iter + 1;
        // assign (ties toward the lower cluster index)
        for (int64_t i = 0; i < n; ++i) {
            double best = std::numeric_limits<double>::max();
            int32_t arg = 0;
            for (int64_t c = 0; c < k; ++c) {
                const double d = sq_dist(embeddings[i], centroids[c]);
                if (d < best) {
                    best = d;
                    arg = static_cast<int32_t>(c);
                }
            }
            res.assignment[i] = arg;
        }
        // repair empty clusters: move the farthest member out of the largest cluster
        for (int64_t c = 0; c < k; ++c) {
            if (std::count(res.assignment.begin(), res.assignment.end(), c) > 0) continue;
            int64_t largest = 0, max_count = -1;
            for (int64_t c2 = 0; c2 < k; ++c2) {
                const int64_t count = std::count(res.assignment.begin(), res.assignment.end(),
                                                 static_cast<int32_t>(c2));
                if (count > max_count) {
                    max_count = count;
                    largest = c2;
                }
            }
            int64_t farthest = -1;
            double far_d = -1.0;
            for (int64_t i = 0; i < n; ++i) {
                if (res.assignment[i] != largest) continue;
                const double d = sq_dist(embeddings[i], centroids[largest]);
                if (d > far_d) {  // strict: ties keep the lowest id
                    far_d = d;
                    farthest = i;
                }
            }
            res.assignment[farthest] = static_cast<int32_t>(c);
        }
        // recompute centroids
        double shift = 0.0;
        for (int64_t c = 0; c < k; ++c) {
            std::vector<double> mean(dim, 0.0);
            int64_t count = 0;
            for (int64_t i = 0; i < n; ++i) {
                if (res.assignment[i] != c) continue;
                for (size_t j = 0; j < dim; ++j) mean[j] += embeddings[i][j];
                ++count;
            }
            for (size_t j = 0; j < dim; ++j) mean[j] /= static_cast<double>(count);
            shift += sq_dist(mean, centroids[c]);
            centroids[c] = std::move(mean);
        }
        if (std::sqrt(shift) < kShiftTol) break;
    }
    res.centroids = std::move(centroids);
    return res;
}

ProxyResult build_proxy(int32_t cluster_id, const std::vector<ProxyMember>& members,
                        const std::vector<std::vector<double>>& embeddings, bool size_weighted) {
    if (members.empty()) throw std::invalid_argument("build_proxy: empty cluster");

    // dominance chain: member count -> aggregate training tokens -> tag order
    std::map<std::string, std::pair<int64_t, int64_t>> tally;  // family -> (count, tokens)
    for (const auto& m : members) {
        auto& t = tally[m.family];
        t.first += 1;
        t.second += m.train_tokens;
    }
    std::string dominant;
    for (const auto& [family, t] : tally) {
        if (dominant.empty()) {
            dominant = family;
            continue;
        }
        const auto& best = tally[dominant];
        if (t.first > best.first ||
            (t.first == best.first && t.second > best.second) ||
            (t.first == best.first && t.second == best.second && family < dominant)) {
            dominant = family;
        }
    }

    ProxyResult out;
    out.report.cluster_id = cluster_id;
    out.report.dominant_family = dominant;
    std::vector<const ProxyMember*> included;
    for (const auto& m : members) {
        out.report.members.push_back(m.device_id);
        if (m.family == dominant) {
            included.push_back(&m);
        } else {
            out.report.excluded.push_back(m.device_id);
        }
    }

    // intra-cluster mean cosine over member pairs (1.0 for singletons)
    if (members.size() > 1 && !embeddings.empty()) {
        double acc = 0.0;
        int64_t pairs = 0;
        for (size_t i = 0; i < members.size(); ++i) {
            for (size_t j = i + 1; j < members.size(); ++j) {
                acc += cosine(embeddings[members[i].device_id], embeddings[members[j].device_id]);
                ++pairs;
            }
        }
        out.report.intra_mean_cosine = acc / static_cast<double>(pairs);
    }

    // Running elementwise mean in ascending device-id order. The incremental
    // form m += (x - m) * w/W is exact when all inputs coincide, which makes
    // single-family clusters of identical models reproduce a member bit-for-bit.
    std::sort(included.begin(), included.end(),
              [](const ProxyMember* a, const ProxyMember* b) { return a->device_id < b->device_id; });
    out.proxy = included[0]->model->clone();
    auto proxy_params = out.proxy.named_params();
    double weight_so_far =
        size_weighted ? static_cast<double>(included[0]->train_tokens) : 1.0;
    for (size_t k = 1; k < included.size(); ++k) {
        const ProxyMember* m = included[k];
        const double w = size_weighted ? static_cast<double>(m->train_tokens) : 1.0;
        weight_so_far += w;
        const auto member_params = m->model->named_params();
        for (size_t p = 0; p < proxy_params.size(); ++p) {
            auto& dst = proxy_params[p].tensor.data();
            const auto& src = member_params[p].tensor.data();
            if (src.size() != dst.size()) {
                throw std::runtime_error("build_proxy: member weight shapes disagree");
            }
            for (size_t i = 0; i < dst.size(); ++i) {
                dst[i] += (src[i] - dst[i]) * w / weight_so_far;
            }
        }
    }
    return out;
}

}  // namespace fedmoe
