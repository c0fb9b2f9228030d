// SPDX-License-Identifier: Apache-2.0
//
// Acceptance suite: every exit criterion, run at its stated tolerance, one
// pass/fail line each. Exits nonzero if any criterion fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "fedmoe/checkpoint.hpp"
#include "fedmoe/clustering.hpp"
#include "fedmoe/datagen.hpp"
#include "fedmoe/distill.hpp"
#include "fedmoe/fusion.hpp"
#include "fedmoe/model.hpp"
#include "fedmoe/pipeline.hpp"
#include "fedmoe/rng.hpp"
#include "fedmoe/sha256.hpp"
#include "fedmoe/tensor.hpp"

using namespace fedmoe;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

int g_failures = 0;
std::vector<std::string> g_notes;

void require(bool ok, const std::string& what) {
    if (!ok) {
        ++g_failures;
        g_notes.push_back(what);
        throw std::runtime_error(what);
    }
}

void criterion(int index, const std::string& label, const std::function<void()>& body) {
    const auto t0 = std::chrono::steady_clock::now();
    bool ok = true;
    std::string detail;
    try {
        body();
    } catch (const std::exception& e) {
        ok = false;
        detail = e.what();
    }
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::printf("[%s] criterion %d: %s (%.1fs)%s%s\n", ok ? "PASS" : "FAIL", index, label.c_str(),
                secs, detail.empty() ? "" : " -- ", detail.c_str());
    std::fflush(stdout);
    if (!ok && detail.empty()) ++g_failures;
    else if (!ok && g_notes.empty()) ++g_failures;  // exception not raised via require
}

Tensor rand_tensor(Shape shape, Rng& rng, double scl = 1.0) {
    Tensor t = Tensor::zeros(std::move(shape));
    for (double& x : t.data()) x = rng.normal() * scl;
    return t;
}

int64_t g_fd_trials = 0;

// central finite differences vs the tape, rel err < 1e-4
template <class F>
void fd_check(std::vector<Tensor> leaves, F make_loss) {
    ++g_fd_trials;
    for (auto& l : leaves) l.set_requires_grad(true);
    std::vector<std::vector<double>> analytic;
    {
        Graph tape;
        Tensor loss = make_loss();
        tape.backward(loss);
        for (auto& l : leaves) {
            analytic.push_back(l.has_grad() ? l.grad() : std::vector<double>(l.numel(), 0.0));
        }
        tape.zero_all_grads();
    }
    for (size_t li = 0; li < leaves.size(); ++li) {
        auto& data = leaves[li].data();
        for (size_t i = 0; i < data.size(); ++i) {
            const double orig = data[i];
            const double h = 1e-6 * std::max(1.0, std::abs(orig));
            data[i] = orig + h;
            const double up = make_loss().item();
            data[i] = orig - h;
            const double down = make_loss().item();
            data[i] = orig;
            const double fd = (up - down) / (2.0 * h);
            const double a = analytic[li][i];
            require(std::abs(a - fd) <= 1e-4 * std::max({1.0, std::abs(a), std::abs(fd)}),
                    "gradient mismatch: analytic " + std::to_string(a) + " vs fd " +
                        std::to_string(fd));
        }
    }
}

fs::path fresh_dir(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / "fedmoe_acceptance" / name;
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw std::runtime_error("missing file: " + p.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

LmConfig small_cfg(int64_t v, int64_t d, int64_t layers, int64_t heads, int64_t ffn, int64_t t) {
    LmConfig c;
    c.arch_family = "custom";
    c.vocab_size = v;
    c.d_model = d;
    c.n_layers = layers;
    c.n_heads = heads;
    c.d_ffn = ffn;
    c.max_seq_len = t;
    return c;
}

// the pinned desk-scale fixture: N = 12 devices over 3 domains, K = 3 experts
PipelineConfig fixture_config() {
    PipelineConfig cfg;  // defaults are the fixture
    cfg.master_seed = 4242;
    return cfg;
}

}  // namespace

// ---- criterion bodies -------------------------------------------------------

static void run_gradient_suite() {
    Rng rng(20260808);
    const int seeds_per_case = 8;
    for (int trial = 0; trial < seeds_per_case; ++trial) {
        Tensor a = rand_tensor({2, 3, 4}, rng);
        Tensor b = rand_tensor({2, 3, 4}, rng);
        Tensor bias = rand_tensor({4}, rng);
        Tensor w23 = rand_tensor({2, 3}, rng);
        fd_check({a, bias}, [&]() { return mean_all(add(a, bias)); });
        fd_check({a, b}, [&]() { return mean_all(mul(a, b)); });
        fd_check({a}, [&]() { return mean_all(scale(a, 1.3)); });
        fd_check({a}, [&]() { return mean_all(gelu(a)); });
        fd_check({a}, [&]() { return mean_all(permute(a, {1, 2, 0})); });
        fd_check({a}, [&]() { return mean_all(reshape(a, {6, 4})); });
        fd_check({a}, [&]() { return mean_all(slice(a, 1, 0, 2)); });
        fd_check({a}, [&]() { return mean_all(segment_mean(a, 1, 2)); });
        fd_check({a, b}, [&]() { return mse(a, b); });
        fd_check({a, b}, [&]() { return mean_all(concat({a, b}, 1)); });
        fd_check({a, w23}, [&]() { return mean_all(row_scale(a, w23)); });

        Tensor m1 = rand_tensor({3, 4}, rng);
        Tensor m2 = rand_tensor({4, 2}, rng);
        Tensor m3 = rand_tensor({2, 4, 3}, rng);
        fd_check({m1, m2}, [&]() { return mean_all(matmul(m1, m2)); });
        Tensor ba = rand_tensor({2, 3, 4}, rng);
        fd_check({ba, m2}, [&]() { return mean_all(matmul(ba, m2)); });
        fd_check({ba, m3}, [&]() { return mean_all(matmul(ba, m3)); });

        Tensor x = rand_tensor({2, 3, 5}, rng, 2.0);
        Tensor w = rand_tensor({2, 3, 5}, rng);
        fd_check({x}, [&]() { return mean_all(mul(softmax(x, -1), w)); });
        fd_check({x}, [&]() { return mean_all(mul(log_softmax(x, -1), w)); });
        std::vector<int32_t> targets;
        for (int i = 0; i < 6; ++i) targets.push_back(static_cast<int32_t>(rng.uniform_int(5)));
        fd_check({x}, [&]() { return cross_entropy_with_logits(x, targets); });
        Tensor g = rand_tensor({5}, rng);
        Tensor be = rand_tensor({5}, rng);
        fd_check({x, g, be}, [&]() { return mean_all(mul(layer_norm(x, g, be), w)); });

        Tensor table = rand_tensor({6, 3}, rng);
        std::vector<int32_t> ids{0, 2, 5, 2, 1, 1};
        fd_check({table}, [&]() { return mean_all(embedding_lookup(table, ids, {2, 3})); });
    }

    // composite: stage features -> aligner blend -> feature-matching loss
    const StagePlan plan = plan_stages(2, 3, 2);
    for (int trial = 0; trial < seeds_per_case; ++trial) {
        AlignerConfig ac;
        ac.total_queries = 4;
        ac.width = 8;
        ac.heads = 2;
        FeatureAligner aligner(ac, plan, 10, 6, 1000 + trial);
        std::vector<Tensor> feats = {rand_tensor({1, 5, 10}, rng), rand_tensor({1, 5, 10}, rng)};
        std::vector<Tensor> teacher = {rand_tensor({1, 4, 6}, rng), rand_tensor({1, 4, 6}, rng)};
        for (Tensor& f : feats) f.set_requires_grad(true);
        std::vector<Tensor> leaves = aligner.params();
        leaves.insert(leaves.end(), feats.begin(), feats.end());
        fd_check(leaves, [&]() {
            return feature_match_loss(pool_stage_features(teacher, 2), aligner.forward(feats));
        });
    }
    require(g_fd_trials >= 100, "expected at least 100 randomized gradient trials");
}

static void run_perplexity_identity() {
    Rng rng(99);
    const LmConfig cfg = small_cfg(9, 8, 2, 2, 16, 8);
    for (int pair = 0; pair < 50; ++pair) {
        DenseLm model(cfg, 1000 + pair);
        Corpus corpus;
        corpus.vocab_size = 9;
        for (int i = 0; i < 30 * 8; ++i) {
            corpus.tokens.push_back(static_cast<int32_t>(rng.uniform_int(9)));
        }
        const EvalMetrics em = evaluate_lm(model, corpus, 8);
        const TokenBatch all = gather_windows(corpus, window_starts(corpus, 8), 8);
        const double loss = lm_loss_ce(model.forward(all).logits, all).item();
        require(std::abs(em.ppl - std::exp(loss)) <= 1e-9 * std::exp(loss),
                "perplexity != exp(loss_ce)");
    }
    DenseLm uniform = DenseLm::zeros(cfg);
    Corpus corpus;
    corpus.vocab_size = 9;
    for (int i = 0; i < 400; ++i) corpus.tokens.push_back(i % 9);
    const double ppl = evaluate_lm(uniform, corpus, 8).ppl;
    require(std::abs(ppl - 9.0) <= 1e-9, "uniform model perplexity != V");
}

static void run_moe_reductions() {
    // (a) identical experts + k = K reproduces the dense model within 1e-10
    const LmConfig cfg = small_cfg(7, 8, 2, 2, 16, 10);
    DenseLm dense(cfg, 606);
    MoeConfig mc;
    mc.backbone = cfg;
    mc.n_experts = 3;
    mc.top_k = 3;
    MoeLm moe(mc, 607);
    std::map<std::string, Tensor> dn;
    for (auto& [name, t] : dense.named_params()) dn[name] = t;
    for (auto& [name, t] : moe.named_params()) {
        Tensor h = t;
        const size_t pos = name.find(".experts.");
        if (pos != std::string::npos) {
            const size_t end = name.find('.', pos + 9);
            h.data() = dn.at(name.substr(0, pos) + ".ffn" + name.substr(end)).data();
        } else if (name.find(".gate") == std::string::npos) {
            h.data() = dn.at(name).data();
        }
    }
    Rng rng(3);
    TokenBatch batch;
    batch.batch = 4;
    batch.seq_len = 10;
    for (int i = 0; i < 40; ++i) batch.ids.push_back(static_cast<int32_t>(rng.uniform_int(7)));
    const Tensor yd = dense.forward(batch).logits;
    const Tensor ym = moe.forward(batch).logits;
    for (int64_t i = 0; i < yd.numel(); ++i) {
        require(std::abs(yd.data()[i] - ym.data()[i]) <= 1e-10,
                "k=K identical experts deviates from dense output");
    }

    // (b) block output vs exhaustive brute-force oracle on 1000 random tokens
    const int64_t d = 8, ffn = 12, n_exp = 4, k = 2, tokens = 1000;
    MoeConfig mc2;
    mc2.backbone = small_cfg(7, d, 1, 2, ffn, 8);
    mc2.n_experts = n_exp;
    mc2.top_k = k;
    MoeLm moe2(mc2, 99);
    const auto& layer = moe2.layers[0];
    Tensor x = rand_tensor({1, tokens, d}, rng);
    const Tensor y = moe_ffn_forward(layer, x, k);
    for (int64_t tok = 0; tok < tokens; ++tok) {
        const double* xv = x.data().data() + tok * d;
        std::vector<double> gate(n_exp, 0.0);
        for (int64_t i = 0; i < d; ++i) {
            for (int64_t e = 0; e < n_exp; ++e) gate[e] += xv[i] * layer.gate.data()[i * n_exp + e];
        }
        const double mx = *std::max_element(gate.begin(), gate.end());
        double denom = 0.0;
        for (double& gv : gate) {
            gv = std::exp(gv - mx);
            denom += gv;
        }
        for (double& gv : gate) gv /= denom;
        std::vector<int64_t> order(n_exp);
        for (int64_t e = 0; e < n_exp; ++e) order[e] = e;
        std::stable_sort(order.begin(), order.end(),
                         [&](int64_t a, int64_t b) { return gate[a] > gate[b]; });
        std::vector<double> expect(d, 0.0);
        for (int64_t rank = 0; rank < k; ++rank) {
            const int64_t e = order[rank];
            std::vector<double> mid(ffn, 0.0);
            for (int64_t i = 0; i < d; ++i) {
                for (int64_t j = 0; j < ffn; ++j) {
                    mid[j] += xv[i] * layer.experts[e].w_in.data()[i * ffn + j];
                }
            }
            for (double& v : mid) v = 0.5 * v * (1.0 + std::erf(v / std::sqrt(2.0)));
            for (int64_t j = 0; j < ffn; ++j) {
                for (int64_t i = 0; i < d; ++i) {
                    expect[i] += gate[e] * mid[j] * layer.experts[e].w_out.data()[j * d + i];
                }
            }
        }
        for (int64_t i = 0; i < d; ++i) {
            require(std::abs(y.data()[tok * d + i] - expect[i]) <= 1e-12,
                    "top-k block deviates from the brute-force oracle");
        }
    }
}

static void run_clustering_recovery() {
    DataGenOptions opt;
    opt.seed = derive_seed(4242, "datagen");
    const DataBundle bundle = gen_corpora(opt);
    std::vector<std::vector<double>> e;
    for (const auto& dev : bundle.devices) e.push_back(dev.embedding);
    double intra = 0.0, inter = 0.0;
    int64_t n_intra = 0, n_inter = 0;
    for (size_t i = 0; i < e.size(); ++i) {
        for (size_t j = i + 1; j < e.size(); ++j) {
            const double c = cosine(e[i], e[j]);
            if (bundle.devices[i].domain_id == bundle.devices[j].domain_id) {
                intra += c;
                ++n_intra;
            } else {
                inter += c;
                ++n_inter;
            }
        }
    }
    require(intra / n_intra > 0.9, "fixture intra-domain cosine too low");
    require(inter / n_inter < 0.2, "fixture inter-domain cosine too high");

    const KmeansResult km = kmeans_domains(e, 3, derive_seed(4242, "kmeans"));
    std::map<int32_t, std::set<int32_t>> label_domains;
    std::map<int32_t, std::set<int32_t>> domain_labels;
    for (size_t i = 0; i < e.size(); ++i) {
        label_domains[km.assignment[i]].insert(bundle.devices[i].domain_id);
        domain_labels[bundle.devices[i].domain_id].insert(km.assignment[i]);
    }
    require(label_domains.size() == 3, "cluster count mismatch");
    for (auto& [label, domains] : label_domains) {
        require(domains.size() == 1, "cluster mixes ground-truth domains");
    }
    for (auto& [dom, labels] : domain_labels) {
        require(labels.size() == 1, "ground-truth domain split across clusters");
    }
}

static fs::path g_fixture_dir;
static double g_fixture_seconds = 0.0;

static void run_fixture_pipeline() {
    g_fixture_dir = fresh_dir("fixture");
    const auto t0 = std::chrono::steady_clock::now();
    run_pipeline(fixture_config(), g_fixture_dir);
    g_fixture_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

static void run_merge_freeze_bitexact() {
    // from the fixture run: every expert tensor bit-equal to its source base
    const PipelineConfig cfg = fixture_config();
    std::vector<MoeLm> snapshots;
    const MoeLm merged = load_moe_checkpoint(read_file(g_fixture_dir / "moe" / "merged.dfck"));
    const MoeLm tuned = load_moe_checkpoint(read_file(g_fixture_dir / "moe" / "tuned.dfck"));
    std::vector<DenseLm> bases;
    for (int64_t i = 0; i < cfg.n_experts; ++i) {
        bases.push_back(load_dense_checkpoint(
            read_file(g_fixture_dir / "distill" / ("base_" + std::to_string(i) + ".dfck"))));
    }
    std::vector<std::map<std::string, Tensor>> base_params(bases.size());
    for (size_t i = 0; i < bases.size(); ++i) {
        for (auto& [name, t] : bases[i].named_params()) base_params[i][name] = t;
    }
    std::map<std::string, Tensor> tuned_params;
    for (auto& [name, t] : tuned.named_params()) tuned_params[name] = t;

    int64_t checked = 0;
    for (const auto& [name, t] : merged.named_params()) {
        const size_t pos = name.find(".experts.");
        if (pos == std::string::npos) continue;
        const size_t end = name.find('.', pos + 9);
        const int64_t e = std::stoll(name.substr(pos + 9, end - pos - 9));
        const std::string dense_name = name.substr(0, pos) + ".ffn" + name.substr(end);
        require(t.data() == base_params[e].at(dense_name).data(),
                "merged expert tensor is not a bit-exact copy: " + name);
        require(Sha256::hex_of_doubles(t.data()) ==
                    Sha256::hex_of_doubles(tuned_params.at(name).data()),
                "expert tensor changed during tuning: " + name);
        ++checked;
    }
    require(checked == cfg.n_experts * 2 * arch_config(cfg.base_family, 64, 32).n_layers,
            "unexpected number of expert tensors checked");
}

static void run_cost_accounting() {
    const PipelineConfig cfg = fixture_config();
    const json ledger = json::parse(slurp(g_fixture_dir / "ledger.json"));
    int64_t model_entries = 0, model_bytes = 0;
    for (const auto& e : ledger.at("entries")) {
        require(e.at("round").get<int64_t>() == 1, "non-first-round ledger entry");
        if (e.at("kind").get<std::string>() == "model") {
            ++model_entries;
            model_bytes += e.at("bytes").get<int64_t>();
        }
    }
    require(model_entries == cfg.n_devices(), "model upload count != N");
    int64_t disk = 0;
    for (int64_t i = 0; i < cfg.n_devices(); ++i) {
        char name[32];
        std::snprintf(name, sizeof(name), "device_%02d.dfck", static_cast<int>(i));
        disk += static_cast<int64_t>(fs::file_size(g_fixture_dir / "devices" / name));
    }
    require(model_bytes == disk, "ledger bytes differ from on-disk checkpoint bytes");

    const json manifest = json::parse(slurp(g_fixture_dir / "manifest.json"));
    const int64_t baseline = manifest.at("comm").at("baseline_bytes").get<int64_t>();
    require(manifest.at("comm").at("baseline_rounds").get<int64_t>() == 10,
            "fixture baseline must use R=10");
    require(static_cast<double>(model_bytes) <= 0.4 * static_cast<double>(baseline),
            "one-shot cost is not >= 60% below the multi-round baseline");
}

static void run_distillation_efficacy() {
    const PipelineConfig cfg = fixture_config();
    const RunSummary s = load_summary(g_fixture_dir);
    const json clusters = json::parse(slurp(g_fixture_dir / "clusters.json"));
    const json data_manifest = json::parse(slurp(g_fixture_dir / "data" / "data_manifest.json"));
    const auto assignment = clusters.at("assignment").get<std::vector<int32_t>>();

    // teacher domain of student i = majority ground-truth domain of cluster i
    for (int64_t i = 0; i < cfg.n_experts; ++i) {
        std::vector<int64_t> count(cfg.n_domains, 0);
        for (size_t dev = 0; dev < assignment.size(); ++dev) {
            if (assignment[dev] == i) {
                ++count[data_manifest.at("devices")[dev].at("domain").get<int64_t>()];
            }
        }
        const int64_t dom = std::max_element(count.begin(), count.end()) - count.begin();
        const std::string domain = "domain_" + std::to_string(dom);
        const double before = s.metric("seed_base", domain).log_ppl;
        const double after = s.metric("base_" + std::to_string(i), domain).log_ppl;
        require(after <= 0.8 * before,
                "student " + std::to_string(i) + " teacher-domain log-ppl dropped only to " +
                    std::to_string(after) + " from " + std::to_string(before));
    }

    double min_proxy_mixed = 1e300;
    for (int64_t i = 0; i < cfg.n_experts; ++i) {
        min_proxy_mixed =
            std::min(min_proxy_mixed, s.metric("proxy_" + std::to_string(i), "mixed").log_ppl);
    }
    const double moe_mixed = s.metric("moe", "mixed").log_ppl;
    require(moe_mixed <= min_proxy_mixed,
            "tuned global model mixed log-ppl " + std::to_string(moe_mixed) +
                " exceeds best proxy " + std::to_string(min_proxy_mixed));
    require(g_fixture_seconds < 1800.0, "fixture pipeline exceeded the 30 minute budget");
}

static void run_ablation_harness() {
    PipelineConfig cfg = PipelineConfig::smoke();
    cfg.master_seed = 20260808;
    const fs::path out = fresh_dir("ablation");
    run_ablation(cfg, out);
    const json aj = json::parse(slurp(out / "ablation.json"));
    require(aj.at("shared_stages_identical").get<bool>(),
            "ablation arms disagree on device models / clusters / ledger");
    require(aj.contains("feature_arm_no_worse"), "directional result missing from the report");
    std::ifstream csv(out / "ablation.csv");
    std::string header;
    std::getline(csv, header);
    require(header ==
                "stage,model,domain,log_ppl_feature_arm,log_ppl_logits_arm,"
                "token_acc_feature_arm,token_acc_logits_arm",
            "paired table header mismatch");
    int rows = 0;
    for (std::string line; std::getline(csv, line);) rows += !line.empty();
    require(rows > 0, "paired comparison table is empty");
}

static void run_reproducibility() {
    PipelineConfig cfg = PipelineConfig::smoke();
    cfg.tokens_per_device = 1024;
    cfg.public_tokens = 2048;
    cfg.test_tokens_per_domain = 512;
    cfg.device_epochs = 2;
    cfg.distill_epochs = 2;
    cfg.tune_epochs = 1;
    cfg.master_seed = 31337;
    const fs::path out1 = fresh_dir("repro1");
    const fs::path out2 = fresh_dir("repro2");
    run_pipeline(cfg, out1);
    const PipelineConfig from_manifest = PipelineConfig::from_json(slurp(out1 / "manifest.json"));
    run_pipeline(from_manifest, out2);
    require(slurp(out1 / "metrics.csv") == slurp(out2 / "metrics.csv"),
            "metrics.csv differs across manifest reruns");

    const auto bytes = read_file(out1 / "moe" / "tuned.dfck");
    require(save_checkpoint(load_moe_checkpoint(bytes)) == bytes,
            "checkpoint round-trip is not bit-exact");
    const auto dbytes = read_file(out1 / "devices" / "device_00.dfck");
    require(save_checkpoint(load_dense_checkpoint(dbytes)) == dbytes,
            "dense checkpoint round-trip is not bit-exact");
}

int run_all() {
    criterion(1, "gradient suite, >=100 seeds, rel err < 1e-4, < 2 min", []() {
        const auto t0 = std::chrono::steady_clock::now();
        run_gradient_suite();
        const double secs =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        require(secs < 120.0, "gradient suite exceeded 2 minutes");
    });
    criterion(2, "perplexity identity on 50 pairs, uniform model gives V", run_perplexity_identity);
    criterion(3, "gated-block reductions: dense equivalence and brute-force oracle",
              run_moe_reductions);
    criterion(4, "clustering recovers the 3-domain fixture partition exactly",
              run_clustering_recovery);
    bool fixture_ok = true;
    try {
        run_fixture_pipeline();
    } catch (const std::exception& e) {
        fixture_ok = false;
        std::printf("[FAIL] fixture pipeline (N=12, K=3) did not complete -- %s\n", e.what());
        ++g_failures;
    }
    if (fixture_ok) {
        criterion(5, "merge inherits experts bit-exactly; tuning preserves their SHA-256",
                  run_merge_freeze_bitexact);
        criterion(6, "one-shot ledger, byte-exact cost, >=60% below the R=10 baseline",
                  run_cost_accounting);
        criterion(7, "distillation efficacy and end-to-end quality on the pinned fixture",
                  run_distillation_efficacy);
    } else {
        std::printf("[FAIL] criterion 5: skipped, fixture pipeline failed\n");
        std::printf("[FAIL] criterion 6: skipped, fixture pipeline failed\n");
        std::printf("[FAIL] criterion 7: skipped, fixture pipeline failed\n");
        g_failures += 3;
    }
    criterion(8, "ablation harness: shared stages bit-identical, paired table recorded",
              run_ablation_harness);
    criterion(9, "manifest reruns reproduce metrics byte-identically; checkpoints round-trip",
              run_reproducibility);
    return g_failures;
}

int main() {
    const int failures = run_all();
    if (failures == 0) {
        std::printf("acceptance: all criteria passed\n");
        return 0;
    }
    std::printf("acceptance: %d criterion(s) failed\n", failures);
    return 1;
}
