// SPDX-License-Identifier: Apache-2.0

#include "fedmoe/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "fedmoe/rng.hpp"

namespace fedmoe {

namespace {

// cumulative-probability sampling of one row
int32_t sample_row(const double* row, int64_t v, Rng& rng) {
    const double u = rng.uniform();
    double acc = 0.0;
    for (int64_t j = 0; j < v; ++j) {
        acc += row[j];
        if (u < acc) return static_cast<int32_t>(j);
    }
    return static_cast<int32_t>(v - 1);
}

}  // namespace

DomainSpec build_domain(int32_t id, int64_t vocab_size, int64_t n_domains, double separation,
                        uint64_t seed) {
    if (separation <= 0.0 || separation >= 1.0) {
        throw std::invalid_argument("separation must be in (0,1)");
    }
    // disjoint near-even token subsets from a seeded global permutation
    Rng perm_rng(derive_seed(seed, "domain_subsets"));
    std::vector<int32_t> perm(vocab_size);
    std::iota(perm.begin(), perm.end(), 0);
    for (int64_t i = vocab_size - 1; i > 0; --i) {
        std::swap(perm[i], perm[perm_rng.uniform_int(i + 1)]);
    }
    const int64_t lo = id * vocab_size / n_domains;
    const int64_t hi = (id + 1) * vocab_size / n_domains;
    DomainSpec spec;
    spec.id = id;
    spec.preferred.assign(perm.begin() + lo, perm.begin() + hi);
    std::sort(spec.preferred.begin(), spec.preferred.end());

    const int64_t s = static_cast<int64_t>(spec.preferred.size());
    spec.transitions.assign(vocab_size * vocab_size, 0.0);
    const double tail = (1.0 - separation) / static_cast<double>(vocab_size);
    for (int64_t t = 0; t < vocab_size; ++t) {
        double* row = spec.transitions.data() + t * vocab_size;
        for (int64_t j = 0; j < vocab_size; ++j) row[j] = tail;
        // in-subset structure keyed on the current token: two favored
        // successors plus a uniform remainder, so the chain is genuinely
        // first-order and learnable
        const int64_t pos_in = std::distance(
            spec.preferred.begin(),
            std::lower_bound(spec.preferred.begin(), spec.preferred.end(), static_cast<int32_t>(t)));
        const int64_t base = (pos_in < s && spec.preferred[pos_in] == static_cast<int32_t>(t))
                                 ? pos_in
                                 : t % s;
        row[spec.preferred[(base + 1) % s]] += separation * 0.6;
        row[spec.preferred[(base + 2) % s]] += separation * 0.3;
        for (int64_t j = 0; j < s; ++j) row[spec.preferred[j]] += separation * 0.1 / s;
        // exact normalization
        double sum = 0.0;
        for (int64_t j = 0; j < vocab_size; ++j) sum += row[j];
        for (int64_t j = 0; j < vocab_size; ++j) row[j] /= sum;
    }
    return spec;
}

Corpus sample_stream(const DomainSpec& domain, int64_t vocab_size, int64_t n_tokens,
                     uint64_t seed) {
    Rng rng(seed);
    Corpus c;
    c.vocab_size = vocab_size;
    c.tokens.reserve(n_tokens);
    int32_t cur = domain.preferred[rng.uniform_int(domain.preferred.size())];
    c.tokens.push_back(cur);
    for (int64_t i = 1; i < n_tokens; ++i) {
        cur = sample_row(domain.transitions.data() + cur * vocab_size, vocab_size, rng);
        c.tokens.push_back(cur);
    }
    return c;
}

DataBundle gen_corpora(const DataGenOptions& opt) {
    if (opt.n_domains < 1) throw std::invalid_argument("need at least one domain");
    if (opt.tokens_per_device < opt.max_seq_len + 1) {
        throw std::invalid_argument("tokens_per_device must be at least max_seq_len + 1");
    }
    DataBundle bundle;
    bundle.options = opt;
    for (int64_t d = 0; d < opt.n_domains; ++d) {
        bundle.domains.push_back(build_domain(static_cast<int32_t>(d), opt.vocab_size,
                                              opt.n_domains, opt.separation, opt.seed));
    }

    // uneven per-device shard sizes: exponential weights normalized within the
    // domain, clamped below, then scaled to the domain's token budget
    Rng size_rng(derive_seed(opt.seed, "shard_sizes"));
    const uint64_t proj_seed = derive_seed(opt.seed, "embedding_projection");
    int32_t device_id = 0;
    for (int64_t d = 0; d < opt.n_domains; ++d) {
        std::vector<double> w(opt.devices_per_domain);
        double wsum = 0.0;
        for (auto& x : w) {
            x = std::max(opt.min_shard_fraction, -std::log(1.0 - size_rng.uniform()));
            wsum += x;
        }
        const int64_t domain_budget = opt.tokens_per_device * opt.devices_per_domain;
        for (int64_t i = 0; i < opt.devices_per_domain; ++i) {
            DeviceData dev;
            dev.device_id = device_id;
            dev.domain_id = static_cast<int32_t>(d);
            dev.mixture_weights.assign(opt.n_domains, 0.0);
            dev.mixture_weights[d] = 1.0;
            int64_t n_tokens = static_cast<int64_t>(domain_budget * w[i] / wsum);
            n_tokens = std::max(n_tokens, opt.max_seq_len + 1);
            const uint64_t shard_seed = derive_seed(opt.seed, "device_shard", device_id);
            if (opt.mixture_fraction <= 0.0 || opt.n_domains == 1) {
                dev.shard = sample_stream(bundle.domains[d], opt.vocab_size, n_tokens, shard_seed);
            } else {
                // window-aligned blocks, each drawn from one domain so that
                // training windows stay domain-coherent
                for (int64_t dd = 0; dd < opt.n_domains; ++dd) {
                    dev.mixture_weights[dd] =
                        dd == d ? 1.0 - opt.mixture_fraction
                                : opt.mixture_fraction / static_cast<double>(opt.n_domains - 1);
                }
                Rng mix_rng(derive_seed(shard_seed, "mixture"));
                dev.shard.vocab_size = opt.vocab_size;
                int64_t block_index = 0;
                while (dev.shard.size() < n_tokens) {
                    double u = mix_rng.uniform();
                    int64_t pick = opt.n_domains - 1;
                    double acc = 0.0;
                    for (int64_t dd = 0; dd < opt.n_domains; ++dd) {
                        acc += dev.mixture_weights[dd];
                        if (u < acc) {
                            pick = dd;
                            break;
                        }
                    }
                    const Corpus block =
                        sample_stream(bundle.domains[pick], opt.vocab_size, opt.max_seq_len,
                                      derive_seed(shard_seed, "block", block_index++));
                    dev.shard.tokens.insert(dev.shard.tokens.end(), block.tokens.begin(),
                                            block.tokens.end());
                }
                dev.shard.tokens.resize(n_tokens);
            }
            dev.embedding = compute_embedding(dev.shard, opt.embedding_dim, proj_seed);
            bundle.devices.push_back(std::move(dev));
            ++device_id;
        }
    }

    // public corpus: uniform mixture, window-aligned blocks round-robin over domains
    {
        const int64_t block = opt.max_seq_len;
        const int64_t per_domain = opt.public_tokens / opt.n_domains;
        std::vector<Corpus> streams;
        for (int64_t d = 0; d < opt.n_domains; ++d) {
            streams.push_back(sample_stream(bundle.domains[d], opt.vocab_size, per_domain,
                                            derive_seed(opt.seed, "public", d)));
        }
        bundle.public_corpus.vocab_size = opt.vocab_size;
        for (int64_t off = 0; off + block <= per_domain; off += block) {
            for (int64_t d = 0; d < opt.n_domains; ++d) {
                bundle.public_corpus.tokens.insert(bundle.public_corpus.tokens.end(),
                                                   streams[d].tokens.begin() + off,
                                                   streams[d].tokens.begin() + off + block);
            }
        }
    }

    // held-out tests, disjoint seed streams
    for (int64_t d = 0; d < opt.n_domains; ++d) {
        bundle.domain_tests.push_back(sample_stream(bundle.domains[d], opt.vocab_size,
                                                    opt.test_tokens_per_domain,
                                                    derive_seed(opt.seed, "test", d)));
    }
    {
        const int64_t block = opt.max_seq_len;
        bundle.mixed_test.vocab_size = opt.vocab_size;
        for (int64_t off = 0; off + block <= opt.test_tokens_per_domain; off += block) {
            for (int64_t d = 0; d < opt.n_domains; ++d) {
                bundle.mixed_test.tokens.insert(bundle.mixed_test.tokens.end(),
                                                bundle.domain_tests[d].tokens.begin() + off,
                                                bundle.domain_tests[d].tokens.begin() + off + block);
                bundle.mixed_test_domain_of_window.push_back(static_cast<int32_t>(d));
            }
        }
    }
    return bundle;
}

std::vector<double> compute_embedding(const Corpus& shard, int64_t dim, uint64_t projection_seed) {
    if (shard.empty()) throw std::invalid_argument("cannot embed an empty shard");
    const int64_t v = shard.vocab_size;
    std::vector<double> hist(v, 0.0);
    for (int32_t t : shard.tokens) hist[t] += 1.0;
    for (double& x : hist) x /= static_cast<double>(shard.size());

    // fixed global projection; rows are mean-centered so that, for histograms
    // (which sum to 1), projection is insensitive to the shared uniform mass
    Rng rng(projection_seed);
    std::vector<double> out(dim, 0.0);
    for (int64_t r = 0; r < dim; ++r) {
        std::vector<double> row(v);
        double mean = 0.0;
        for (int64_t j = 0; j < v; ++j) {
            row[j] = rng.normal();
            mean += row[j];
        }
        mean /= static_cast<double>(v);
        double acc = 0.0;
        for (int64_t j = 0; j < v; ++j) acc += (row[j] - mean) * hist[j];
        out[r] = acc;
    }
    double norm = 0.0;
    for (double x : out) norm += x * x;
    norm = std::sqrt(norm);
    if (norm == 0.0) throw std::runtime_error("degenerate shard embedding");
    for (double& x : out) x /= norm;
    return out;
}

double cosine(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size() || a.empty()) throw std::invalid_argument("cosine: dim mismatch");
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    if (na == 0.0 || nb == 0.0) throw std::invalid_argument("cosine: zero-norm vector");
    return dot / (std::sqrt(na) * std::sqrt(nb));
}

}  // namespace fedmoe
