// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <map>
#include <set>

#include "fedmoe/checkpoint.hpp"
#include "fedmoe/clustering.hpp"
#include "fedmoe/datagen.hpp"
#include "fedmoe/rng.hpp"

using namespace fedmoe;

namespace {

std::vector<double> unit(std::vector<double> v) {
    double n = 0.0;
    for (double x : v) n += x * x;
    n = std::sqrt(n);
    for (double& x : v) x /= n;
    return v;
}

LmConfig tiny_cfg() {
    LmConfig c;
    c.arch_family = "tinyA";
    c.vocab_size = 16;
    c.d_model = 8;
    c.n_layers = 2;
    c.n_heads = 2;
    c.d_ffn = 16;
    c.max_seq_len = 8;
    return c;
}

}  // namespace

TEST_CASE("similarity matrix basics") {
    const std::vector<std::vector<double>> e = {
        unit({1.0, 0.0}), unit({1.0, 1.0}), unit({0.0, 1.0})};
    const SimilarityMatrix m = similarity_matrix(e);
    CHECK(m.at(0, 0) == doctest::Approx(1.0).epsilon(1e-9));
    CHECK(m.at(1, 1) == doctest::Approx(1.0).epsilon(1e-9));
    CHECK(m.at(0, 2) == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(m.at(0, 1) == doctest::Approx(0.7071067811865476).epsilon(1e-9));  // hand arithmetic
    for (int64_t i = 0; i < m.n; ++i) {
        for (int64_t j = 0; j < m.n; ++j) {
            CHECK(m.at(i, j) == m.at(j, i));
            CHECK(m.at(i, j) >= -1.0 - 1e-12);
            CHECK(m.at(i, j) <= 1.0 + 1e-12);
        }
    }
    CHECK_THROWS(similarity_matrix({{0.0, 0.0}, {1.0, 0.0}}));
}

TEST_CASE("similarity matrix is permutation-equivariant") {
    Rng rng(2);
    std::vector<std::vector<double>> e;
    for (int i = 0; i < 5; ++i) {
        std::vector<double> v(4);
        for (double& x : v) x = rng.normal();
        e.push_back(unit(v));
    }
    const SimilarityMatrix m = similarity_matrix(e);
    std::vector<size_t> perm{3, 0, 4, 1, 2};
    std::vector<std::vector<double>> pe;
    for (size_t p : perm) pe.push_back(e[p]);
    const SimilarityMatrix pm = similarity_matrix(pe);
    for (size_t i = 0; i < perm.size(); ++i) {
        for (size_t j = 0; j < perm.size(); ++j) {
            CHECK(pm.at(i, j) == doctest::Approx(m.at(perm[i], perm[j])).epsilon(1e-15));
        }
    }
}

TEST_CASE("kmeans: mutually distant points become singletons") {
    const std::vector<std::vector<double>> e = {
        unit({1.0, 0.0, 0.0}), unit({0.0, 1.0, 0.0}), unit({0.0, 0.0, 1.0})};
    const KmeansResult r = kmeans_domains(e, 3, 7);
    std::set<int32_t> labels(r.assignment.begin(), r.assignment.end());
    CHECK(labels.size() == 3);
}

TEST_CASE("kmeans: identical points trigger the degenerate repair rule") {
    const std::vector<std::vector<double>> e(4, unit({1.0, 1.0}));
    const KmeansResult r = kmeans_domains(e, 2, 3);
    // one cluster keeps three members, the repaired one exactly one
    std::map<int32_t, int64_t> counts;
    for (int32_t a : r.assignment) ++counts[a];
    REQUIRE(counts.size() == 2);
    std::set<int64_t> sizes;
    for (auto& [label, n] : counts) sizes.insert(n);
    CHECK(sizes == std::set<int64_t>{1, 3});
    // all-identical points: the farthest member tie resolves to device 0
    CHECK(r.assignment[0] != r.assignment[1]);
    CHECK(r.assignment[1] == r.assignment[2]);
    CHECK(r.assignment[2] == r.assignment[3]);
}

TEST_CASE("kmeans is deterministic and rotation-invariant on the fixture") {
    DataGenOptions opt;
    opt.seed = 4242;
    const DataBundle bundle = gen_corpora(opt);
    std::vector<std::vector<double>> e;
    for (const auto& d : bundle.devices) e.push_back(d.embedding);

    const KmeansResult a = kmeans_domains(e, 3, 99);
    const KmeansResult b = kmeans_domains(e, 3, 99);
    CHECK(a.assignment == b.assignment);

    // ground-truth recovery: clusters coincide with generating domains
    std::map<int32_t, std::set<int32_t>> by_label;
    for (size_t i = 0; i < e.size(); ++i) {
        by_label[a.assignment[i]].insert(bundle.devices[i].domain_id);
    }
    for (auto& [label, domains] : by_label) CHECK(domains.size() == 1);

    // Givens rotation in coordinates (0, 7): Euclidean kmeans sees the same geometry
    std::vector<std::vector<double>> rot = e;
    const double c = std::cos(0.7), s = std::sin(0.7);
    for (auto& v : rot) {
        const double x = v[0], y = v[7];
        v[0] = c * x - s * y;
        v[7] = s * x + c * y;
    }
    const KmeansResult r = kmeans_domains(rot, 3, 99);
    std::map<int32_t, int32_t> relabel;
    for (size_t i = 0; i < e.size(); ++i) {
        auto it = relabel.find(a.assignment[i]);
        if (it == relabel.end()) {
            relabel[a.assignment[i]] = r.assignment[i];
        } else {
            CHECK(it->second == r.assignment[i]);
        }
    }
    CHECK_THROWS(kmeans_domains({unit({1.0, 0.0})}, 2, 1));  // N < K
}

TEST_CASE("proxy: identical members reproduce a member bit-exactly") {
    const LmConfig cfg = tiny_cfg();
    DenseLm m(cfg, 31);
    DenseLm m2 = m.clone();
    DenseLm m3 = m.clone();
    const std::vector<ProxyMember> members = {
        {0, "tinyA", 100, &m}, {1, "tinyA", 100, &m2}, {2, "tinyA", 100, &m3}};
    const ProxyResult r = build_proxy(0, members, {});
    CHECK(save_checkpoint(r.proxy) == save_checkpoint(m));
    CHECK(r.report.dominant_family == "tinyA");
    CHECK(r.report.excluded.empty());
    CHECK(r.report.intra_mean_cosine == 1.0);
}

TEST_CASE("proxy: opposite weights cancel to zero") {
    const LmConfig cfg = tiny_cfg();
    DenseLm a(cfg, 8);
    DenseLm b = a.clone();
    for (auto& [name, t] : b.named_params()) {
        Tensor h = t;
        for (double& x : h.data()) x = -x;
    }
    const std::vector<ProxyMember> members = {{0, "tinyA", 1, &a}, {1, "tinyA", 1, &b}};
    const ProxyResult r = build_proxy(1, members, {});
    for (const auto& [name, t] : r.proxy.named_params()) {
        for (double x : t.data()) CHECK(x == 0.0);
    }
}

TEST_CASE("proxy mean matches an independent accumulation pass") {
    const LmConfig cfg = tiny_cfg();
    DenseLm m0(cfg, 1), m1(cfg, 2), m2(cfg, 3);
    const std::vector<ProxyMember> members = {
        {0, "tinyA", 10, &m0}, {1, "tinyA", 20, &m1}, {2, "tinyA", 30, &m2}};
    const ProxyResult r = build_proxy(2, members, {});
    const auto p0 = m0.named_params(), p1 = m1.named_params(), p2 = m2.named_params();
    const auto pr = r.proxy.named_params();
    for (size_t p = 0; p < pr.size(); ++p) {
        for (size_t i = 0; i < pr[p].tensor.data().size(); ++i) {
            // same running-mean order, recomputed independently
            double mean = p0[p].tensor.data()[i];
            mean += (p1[p].tensor.data()[i] - mean) / 2.0;
            mean += (p2[p].tensor.data()[i] - mean) / 3.0;
            CHECK(pr[p].tensor.data()[i] == mean);  // 0 ulps
        }
    }
}

TEST_CASE("proxy dominance chain and exclusions") {
    const LmConfig a_cfg = arch_config("tinyA", 16, 8);
    const LmConfig b_cfg = arch_config("tinyB", 16, 8);
    DenseLm a0(a_cfg, 1), a1(a_cfg, 2), b0(b_cfg, 3);
    // majority by count
    {
        const std::vector<ProxyMember> members = {
            {0, "tinyA", 10, &a0}, {1, "tinyA", 10, &a1}, {2, "tinyB", 999, &b0}};
        const ProxyResult r = build_proxy(0, members, {});
        CHECK(r.report.dominant_family == "tinyA");
        CHECK(r.report.excluded == std::vector<int32_t>{2});
        CHECK(r.proxy.config().arch_family == "tinyA");
        CHECK(r.proxy.param_count() == a0.param_count());
    }
    // count tie: aggregate training tokens decide
    {
        const std::vector<ProxyMember> members = {{0, "tinyA", 10, &a0}, {1, "tinyB", 20, &b0}};
        const ProxyResult r = build_proxy(0, members, {});
        CHECK(r.report.dominant_family == "tinyB");
        CHECK(r.report.excluded == std::vector<int32_t>{0});
    }
    // full tie: lexicographic family tag
    {
        const std::vector<ProxyMember> members = {{0, "tinyB", 10, &b0}, {1, "tinyA", 10, &a0}};
        const ProxyResult r = build_proxy(0, members, {});
        CHECK(r.report.dominant_family == "tinyA");
    }
    // singleton returns a copy
    {
        const std::vector<ProxyMember> members = {{5, "tinyB", 10, &b0}};
        const ProxyResult r = build_proxy(3, members, {});
        CHECK(save_checkpoint(r.proxy) == save_checkpoint(b0));
    }
}

TEST_CASE("size-weighted proxy option") {
    const LmConfig cfg = tiny_cfg();
    DenseLm a(cfg, 4), b(cfg, 5);
    const std::vector<ProxyMember> members = {{0, "tinyA", 100, &a}, {1, "tinyA", 300, &b}};
    const ProxyResult r = build_proxy(0, members, {}, /*size_weighted=*/true);
    const auto pa = a.named_params(), pb = b.named_params(), pr = r.proxy.named_params();
    for (size_t p = 0; p < pr.size(); ++p) {
        for (size_t i = 0; i < pr[p].tensor.data().size(); ++i) {
            const double expect =
                0.25 * pa[p].tensor.data()[i] + 0.75 * pb[p].tensor.data()[i];
            CHECK(pr[p].tensor.data()[i] == doctest::Approx(expect).epsilon(1e-12));
        }
    }
}
