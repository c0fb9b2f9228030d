// SPDX-License-Identifier: Apache-2.0

#include "fedmoe/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <thread>

#include <json.hpp>

#include "fedmoe/checkpoint.hpp"
#include "fedmoe/clustering.hpp"
#include "fedmoe/datagen.hpp"
#include "fedmoe/distill.hpp"
#include "fedmoe/fusion.hpp"
#include "fedmoe/model.hpp"
#include "fedmoe/rng.hpp"

namespace fedmoe {

using nlohmann::json;
namespace fs = std::filesystem;

// ---- ledger ---------------------------------------------------------------------

std::string payload_kind_name(PayloadKind kind) {
    switch (kind) {
        case PayloadKind::model: return "model";
        case PayloadKind::embedding: return "embedding";
        case PayloadKind::config: return "config";
    }
    return "?";
}

void CommLedger::append(LedgerEntry entry) {
    if (entry.bytes <= 0) throw std::invalid_argument("ledger: bytes must be positive");
    std::lock_guard<std::mutex> lock(mu_);
    entries_.push_back(std::move(entry));
}

std::vector<LedgerEntry> CommLedger::sorted_entries() const {
    std::lock_guard<std::mutex> lock(mu_);
    std::vector<LedgerEntry> out = entries_;
    std::sort(out.begin(), out.end(), [](const LedgerEntry& a, const LedgerEntry& b) {
        if (a.round != b.round) return a.round < b.round;
        if (a.sender != b.sender) return a.sender < b.sender;
        return payload_kind_name(a.kind) < payload_kind_name(b.kind);
    });
    return out;
}

int64_t CommLedger::model_bytes() const {
    std::lock_guard<std::mutex> lock(mu_);
    int64_t total = 0;
    for (const auto& e : entries_) {
        if (e.kind == PayloadKind::model) total += e.bytes;
    }
    return total;
}

int64_t CommLedger::embedding_bytes() const {
    std::lock_guard<std::mutex> lock(mu_);
    int64_t total = 0;
    for (const auto& e : entries_) {
        if (e.kind == PayloadKind::embedding) total += e.bytes;
    }
    return total;
}

int64_t baseline_comm_cost(int64_t n_devices, int64_t local_model_bytes, int64_t rounds) {
    if (rounds < 1) throw std::invalid_argument("baseline cost model needs rounds >= 1");
    return rounds * n_devices * 2 * local_model_bytes;
}

// ---- config ---------------------------------------------------------------------

void PipelineConfig::validate() const {
    if (n_domains < 1 || devices_per_domain < 1) throw std::invalid_argument("bad device grid");
    if (n_experts < 1 || n_experts > n_devices()) {
        throw std::invalid_argument("n_experts must be in [1, n_devices]");
    }
    if (top_k < 1 || top_k > n_experts) throw std::invalid_argument("bad top_k");
    if (device_families.empty()) throw std::invalid_argument("no device families");
    if (aligner_queries % n_stages != 0) {
        throw std::invalid_argument("aligner_queries must be divisible by n_stages");
    }
}

std::string PipelineConfig::to_json() const {
    json j;
    j["aligner_heads"] = aligner_heads;
    j["aligner_queries"] = aligner_queries;
    j["aligner_width"] = aligner_width;
    j["alpha"] = alpha;
    j["base_family"] = base_family;
    j["baseline_rounds"] = baseline_rounds;
    j["batch_size"] = batch_size;
    j["beta"] = beta;
    j["device_epochs"] = device_epochs;
    j["device_families"] = device_families;
    j["device_lr"] = device_lr;
    j["devices_per_domain"] = devices_per_domain;
    j["distill_epochs"] = distill_epochs;
    j["distill_lr"] = distill_lr;
    j["embedding_dim"] = embedding_dim;
    j["literal_attention"] = literal_attention;
    j["master_seed"] = master_seed;
    j["max_seq_len"] = max_seq_len;
    j["min_shard_fraction"] = min_shard_fraction;
    j["mixture_fraction"] = mixture_fraction;
    j["n_domains"] = n_domains;
    j["n_experts"] = n_experts;
    j["n_stages"] = n_stages;
    j["public_tokens"] = public_tokens;
    j["seed_base_epochs"] = seed_base_epochs;
    j["seed_base_lr"] = seed_base_lr;
    j["separation"] = separation;
    j["tau"] = tau;
    j["test_tokens_per_domain"] = test_tokens_per_domain;
    j["threads"] = threads;
    j["tied_output"] = tied_output;
    j["tokens_per_device"] = tokens_per_device;
    j["top_k"] = top_k;
    j["tune_epochs"] = tune_epochs;
    j["tune_lr"] = tune_lr;
    j["vocab_size"] = vocab_size;
    j["weighted_proxy"] = weighted_proxy;
    return j.dump(2);
}

PipelineConfig PipelineConfig::from_json(const std::string& text) {
    json j = json::parse(text);
    if (j.contains("config")) j = j["config"];  // accept a run manifest
    PipelineConfig c;
    c.aligner_heads = j.value("aligner_heads", c.aligner_heads);
    c.aligner_queries = j.value("aligner_queries", c.aligner_queries);
    c.aligner_width = j.value("aligner_width", c.aligner_width);
    c.alpha = j.value("alpha", c.alpha);
    c.base_family = j.value("base_family", c.base_family);
    c.baseline_rounds = j.value("baseline_rounds", c.baseline_rounds);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.beta = j.value("beta", c.beta);
    c.device_epochs = j.value("device_epochs", c.device_epochs);
    c.device_families = j.value("device_families", c.device_families);
    c.device_lr = j.value("device_lr", c.device_lr);
    c.devices_per_domain = j.value("devices_per_domain", c.devices_per_domain);
    c.distill_epochs = j.value("distill_epochs", c.distill_epochs);
    c.distill_lr = j.value("distill_lr", c.distill_lr);
    c.embedding_dim = j.value("embedding_dim", c.embedding_dim);
    c.literal_attention = j.value("literal_attention", c.literal_attention);
    c.master_seed = j.value("master_seed", c.master_seed);
    c.max_seq_len = j.value("max_seq_len", c.max_seq_len);
    c.min_shard_fraction = j.value("min_shard_fraction", c.min_shard_fraction);
    c.mixture_fraction = j.value("mixture_fraction", c.mixture_fraction);
    c.n_domains = j.value("n_domains", c.n_domains);
    c.n_experts = j.value("n_experts", c.n_experts);
    c.n_stages = j.value("n_stages", c.n_stages);
    c.public_tokens = j.value("public_tokens", c.public_tokens);
    c.seed_base_epochs = j.value("seed_base_epochs", c.seed_base_epochs);
    c.seed_base_lr = j.value("seed_base_lr", c.seed_base_lr);
    c.separation = j.value("separation", c.separation);
    c.tau = j.value("tau", c.tau);
    c.test_tokens_per_domain = j.value("test_tokens_per_domain", c.test_tokens_per_domain);
    c.threads = j.value("threads", c.threads);
    c.tied_output = j.value("tied_output", c.tied_output);
    c.tokens_per_device = j.value("tokens_per_device", c.tokens_per_device);
    c.top_k = j.value("top_k", c.top_k);
    c.tune_epochs = j.value("tune_epochs", c.tune_epochs);
    c.tune_lr = j.value("tune_lr", c.tune_lr);
    c.vocab_size = j.value("vocab_size", c.vocab_size);
    c.weighted_proxy = j.value("weighted_proxy", c.weighted_proxy);
    c.validate();
    return c;
}

PipelineConfig PipelineConfig::smoke() {
    PipelineConfig c;
    c.n_domains = 2;
    c.devices_per_domain = 2;
    c.n_experts = 2;
    c.top_k = 1;
    c.tokens_per_device = 2048;
    c.public_tokens = 4096;
    c.test_tokens_per_domain = 1024;
    c.device_epochs = 4;
    c.seed_base_epochs = 1;
    c.distill_epochs = 3;
    c.tune_epochs = 2;
    return c;
}

// ---- shared helpers ----------------------------------------------------------------

namespace {

void parallel_for(int64_t n, int64_t threads, const std::function<void(int64_t)>& fn) {
    if (threads <= 0) {
        threads = static_cast<int64_t>(std::thread::hardware_concurrency());
        if (threads < 1) threads = 1;
    }
    threads = std::min(threads, n);
    if (threads <= 1) {
        for (int64_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<int64_t> next{0};
    std::exception_ptr first_error;
    std::mutex err_mu;
    std::vector<std::thread> pool;
    for (int64_t t = 0; t < threads; ++t) {
        pool.emplace_back([&]() {
            for (;;) {
                const int64_t i = next.fetch_add(1);
                if (i >= n) return;
                try {
                    fn(i);
                } catch (...) {
                    std::lock_guard<std::mutex> lock(err_mu);
                    if (!first_error) first_error = std::current_exception();
                }
            }
        });
    }
    for (auto& th : pool) th.join();
    if (first_error) std::rethrow_exception(first_error);
}

std::string two_digits(int64_t i) {
    char buf[24];
    std::snprintf(buf, sizeof(buf), "%02lld", static_cast<long long>(i));
    return buf;
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open for write: " + path.string());
    out << text;
    if (!out) throw std::runtime_error("short write: " + path.string());
}

std::string read_text(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open for read: " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::string fmt_double(double v, int digits = 10) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.*f", digits, v);
    return buf;
}

struct DeviceMeta {
    int32_t id = 0;
    int32_t domain = 0;
    std::string family;
    std::string shard_path;
    int64_t tokens = 0;
    std::vector<double> embedding;
};

struct DataManifest {
    int64_t vocab_size = 0;
    int64_t n_domains = 0;
    std::vector<DeviceMeta> devices;
    std::string public_path;
    std::vector<std::string> test_paths;
    std::string mixed_test_path;
};

void write_data_manifest(const fs::path& path, const DataManifest& m) {
    json j;
    j["vocab_size"] = m.vocab_size;
    j["n_domains"] = m.n_domains;
    j["public"] = m.public_path;
    j["tests"] = m.test_paths;
    j["mixed_test"] = m.mixed_test_path;
    j["devices"] = json::array();
    for (const auto& d : m.devices) {
        json dj;
        dj["id"] = d.id;
        dj["domain"] = d.domain;
        dj["arch_family"] = d.family;
        dj["shard"] = d.shard_path;
        dj["tokens"] = d.tokens;
        dj["embedding"] = d.embedding;
        j["devices"].push_back(dj);
    }
    write_text(path, j.dump(2));
}

DataManifest read_data_manifest(const fs::path& path) {
    const json j = json::parse(read_text(path));
    DataManifest m;
    m.vocab_size = j.at("vocab_size").get<int64_t>();
    m.n_domains = j.at("n_domains").get<int64_t>();
    m.public_path = j.at("public").get<std::string>();
    m.test_paths = j.at("tests").get<std::vector<std::string>>();
    m.mixed_test_path = j.at("mixed_test").get<std::string>();
    for (const auto& dj : j.at("devices")) {
        DeviceMeta d;
        d.id = dj.at("id").get<int32_t>();
        d.domain = dj.at("domain").get<int32_t>();
        d.family = dj.at("arch_family").get<std::string>();
        d.shard_path = dj.at("shard").get<std::string>();
        d.tokens = dj.at("tokens").get<int64_t>();
        d.embedding = dj.at("embedding").get<std::vector<double>>();
        m.devices.push_back(std::move(d));
    }
    return m;
}

std::string device_name(int64_t id) { return "device_" + two_digits(id); }

DenseLm load_dense_from(const fs::path& path) {
    return load_dense_checkpoint(read_file(path));
}

TrainOptions make_train_options(int64_t epochs, double lr, uint64_t seed, int64_t batch_size,
                                int64_t window) {
    TrainOptions o;
    o.epochs = epochs;
    o.lr = lr;
    o.seed = seed;
    o.batch_size = batch_size;
    o.window = window;
    return o;
}

std::vector<int32_t> read_cluster_assignment(const fs::path& out_dir) {
    const json j = json::parse(read_text(out_dir / "clusters.json"));
    return j.at("assignment").get<std::vector<int32_t>>();
}

}  // namespace

// ---- stage 1: data -----------------------------------------------------------------

void stage_gen_data(const PipelineConfig& cfg, const fs::path& out_dir) {
    cfg.validate();
    fs::create_directories(out_dir / "data");
    DataGenOptions opt;
    opt.vocab_size = cfg.vocab_size;
    opt.n_domains = cfg.n_domains;
    opt.devices_per_domain = cfg.devices_per_domain;
    opt.tokens_per_device = cfg.tokens_per_device;
    opt.public_tokens = cfg.public_tokens;
    opt.test_tokens_per_domain = cfg.test_tokens_per_domain;
    opt.separation = cfg.separation;
    opt.max_seq_len = cfg.max_seq_len;
    opt.embedding_dim = cfg.embedding_dim;
    opt.min_shard_fraction = cfg.min_shard_fraction;
    opt.mixture_fraction = cfg.mixture_fraction;
    opt.seed = derive_seed(cfg.master_seed, "datagen");
    const DataBundle bundle = gen_corpora(opt);

    Rng arch_rng(derive_seed(cfg.master_seed, "arch_assign"));
    DataManifest manifest;
    manifest.vocab_size = cfg.vocab_size;
    manifest.n_domains = cfg.n_domains;
    for (const DeviceData& dev : bundle.devices) {
        DeviceMeta meta;
        meta.id = dev.device_id;
        meta.domain = dev.domain_id;
        meta.family = cfg.device_families[arch_rng.uniform_int(cfg.device_families.size())];
        meta.shard_path = "data/" + device_name(dev.device_id) + ".dftk";
        meta.tokens = dev.shard.size();
        meta.embedding = dev.embedding;
        write_corpus(out_dir / meta.shard_path, dev.shard);
        manifest.devices.push_back(std::move(meta));
    }
    manifest.public_path = "data/public.dftk";
    write_corpus(out_dir / manifest.public_path, bundle.public_corpus);
    for (int64_t d = 0; d < cfg.n_domains; ++d) {
        const std::string p = "data/test_domain_" + std::to_string(d) + ".dftk";
        write_corpus(out_dir / p, bundle.domain_tests[d]);
        manifest.test_paths.push_back(p);
    }
    manifest.mixed_test_path = "data/mixed_test.dftk";
    write_corpus(out_dir / manifest.mixed_test_path, bundle.mixed_test);
    write_data_manifest(out_dir / "data" / "data_manifest.json", manifest);
}

// ---- stage 2: on-device training + one-shot upload ------------------------------------

void stage_train_devices(const PipelineConfig& cfg, const fs::path& out_dir) {
    const DataManifest manifest = read_data_manifest(out_dir / "data" / "data_manifest.json");
    fs::create_directories(out_dir / "devices");
    const int64_t n = static_cast<int64_t>(manifest.devices.size());
    CommLedger ledger;

    parallel_for(n, cfg.threads, [&](int64_t i) {
        const DeviceMeta& meta = manifest.devices[i];
        const Corpus shard = read_corpus(out_dir / meta.shard_path);
        LmConfig lm_cfg =
            arch_config(meta.family, cfg.vocab_size, cfg.max_seq_len, cfg.tied_output);
        DenseLm model(lm_cfg, derive_seed(cfg.master_seed, "device_init", meta.id));
        const auto curve = train_local(
            model, shard,
            make_train_options(cfg.device_epochs, cfg.device_lr,
                               derive_seed(cfg.master_seed, "device_train", meta.id),
                               cfg.batch_size, cfg.max_seq_len));
        const auto bytes = save_checkpoint(model);
        write_file(out_dir / "devices" / (device_name(meta.id) + ".dfck"), bytes);
        std::string csv = "epoch,loss\n";
        for (size_t e = 0; e < curve.size(); ++e) {
            csv += std::to_string(e) + "," + fmt_double(curve[e]) + "\n";
        }
        write_text(out_dir / "devices" / (device_name(meta.id) + "_curve.csv"), csv);

        // one-shot upload: the trained model plus the data embedding, round 1
        ledger.append({device_name(meta.id), "server", PayloadKind::model,
                       static_cast<int64_t>(bytes.size()), 1});
        ledger.append({device_name(meta.id), "server", PayloadKind::embedding,
                       static_cast<int64_t>(meta.embedding.size() * sizeof(double)), 1});
    });

    json lj;
    lj["entries"] = json::array();
    for (const auto& e : ledger.sorted_entries()) {
        json ej;
        ej["sender"] = e.sender;
        ej["receiver"] = e.receiver;
        ej["kind"] = payload_kind_name(e.kind);
        ej["bytes"] = e.bytes;
        ej["round"] = e.round;
        lj["entries"].push_back(ej);
    }
    lj["model_bytes"] = ledger.model_bytes();
    lj["embedding_bytes"] = ledger.embedding_bytes();
    write_text(out_dir / "ledger.json", lj.dump(2));
}

// ---- stage 3: clustering + proxies ---------------------------------------------------

void stage_cluster(const PipelineConfig& cfg, const fs::path& out_dir) {
    const DataManifest manifest = read_data_manifest(out_dir / "data" / "data_manifest.json");
    fs::create_directories(out_dir / "proxies");
    std::vector<std::vector<double>> embeddings;
    for (const auto& d : manifest.devices) embeddings.push_back(d.embedding);

    const SimilarityMatrix sim = similarity_matrix(embeddings);
    const KmeansResult km =
        kmeans_domains(embeddings, cfg.n_experts, derive_seed(cfg.master_seed, "kmeans"));

    std::vector<DenseLm> models;
    models.reserve(manifest.devices.size());
    for (const auto& d : manifest.devices) {
        models.push_back(load_dense_from(out_dir / "devices" / (device_name(d.id) + ".dfck")));
    }

    json cj;
    cj["assignment"] = km.assignment;
    cj["similarity"] = sim.values;
    cj["clusters"] = json::array();
    for (int64_t c = 0; c < cfg.n_experts; ++c) {
        std::vector<ProxyMember> members;
        for (size_t i = 0; i < manifest.devices.size(); ++i) {
            if (km.assignment[i] != c) continue;
            members.push_back({manifest.devices[i].id, manifest.devices[i].family,
                               manifest.devices[i].tokens, &models[i]});
        }
        ProxyResult res = build_proxy(static_cast<int32_t>(c), members, embeddings,
                                      cfg.weighted_proxy);
        write_file(out_dir / "proxies" / ("proxy_" + std::to_string(c) + ".dfck"),
                   save_checkpoint(res.proxy));
        json rj;
        rj["cluster_id"] = res.report.cluster_id;
        rj["members"] = res.report.members;
        rj["dominant_family"] = res.report.dominant_family;
        rj["excluded"] = res.report.excluded;
        rj["intra_mean_cosine"] = res.report.intra_mean_cosine;
        cj["clusters"].push_back(rj);
    }
    write_text(out_dir / "clusters.json", cj.dump(2));
}

// ---- stage 4: seed base + distillations ------------------------------------------------

void stage_distill(const PipelineConfig& cfg, const fs::path& out_dir) {
    const DataManifest manifest = read_data_manifest(out_dir / "data" / "data_manifest.json");
    fs::create_directories(out_dir / "distill");
    const Corpus public_corpus = read_corpus(out_dir / manifest.public_path);

    // one shared, lightly pre-trained starting point for every student
    LmConfig base_cfg = arch_config(cfg.base_family, cfg.vocab_size, cfg.max_seq_len,
                                    cfg.tied_output);
    DenseLm seed_base(base_cfg, derive_seed(cfg.master_seed, "seed_base_init"));
    if (cfg.seed_base_epochs > 0) {
        train_local(seed_base, public_corpus,
                    make_train_options(cfg.seed_base_epochs, cfg.seed_base_lr,
                                       derive_seed(cfg.master_seed, "seed_base_train"),
                                       cfg.batch_size, cfg.max_seq_len));
    }
    write_file(out_dir / "distill" / "seed_base.dfck", save_checkpoint(seed_base));

    json dm;
    dm["students"] = json::array();
    std::vector<json> student_entries(cfg.n_experts);
    parallel_for(cfg.n_experts, cfg.threads, [&](int64_t i) {
        const DenseLm teacher =
            load_dense_from(out_dir / "proxies" / ("proxy_" + std::to_string(i) + ".dfck"));
        DistillConfig dc;
        dc.alpha = cfg.alpha;
        dc.beta = cfg.beta;
        dc.tau = cfg.tau;
        dc.n_stages = cfg.n_stages;
        dc.aligner.total_queries = cfg.aligner_queries;
        dc.aligner.width = cfg.aligner_width;
        dc.aligner.heads = cfg.aligner_heads;
        dc.aligner.literal_attention = cfg.literal_attention;
        dc.train = make_train_options(cfg.distill_epochs, cfg.distill_lr,
                                      derive_seed(cfg.master_seed, "distill", i),
                                      cfg.batch_size, cfg.max_seq_len);
        DistillResult res = distill(teacher, seed_base, public_corpus, dc);
        write_file(out_dir / "distill" / ("base_" + std::to_string(i) + ".dfck"),
                   save_checkpoint(res.student));
        std::string csv = "epoch,l_ce,l_fm,l_kl,l_kd\n";
        for (size_t e = 0; e < res.curve.size(); ++e) {
            const auto& p = res.curve[e];
            csv += std::to_string(e) + "," + fmt_double(p.ce) + "," + fmt_double(p.fm) + "," +
                   fmt_double(p.kl) + "," + fmt_double(p.total) + "\n";
        }
        write_text(out_dir / "distill" / ("curve_" + std::to_string(i) + ".csv"), csv);
        json sj;
        sj["student"] = i;
        sj["teacher_family"] = teacher.config().arch_family;
        sj["alpha"] = dc.alpha;
        sj["beta"] = dc.beta;
        sj["tau"] = dc.tau;
        sj["n_stages"] = dc.n_stages;
        sj["aligner_queries"] = dc.aligner.total_queries;
        sj["aligner_width"] = dc.aligner.width;
        sj["aligner_heads"] = dc.aligner.heads;
        sj["literal_attention"] = dc.aligner.literal_attention;
        sj["epochs"] = dc.train.epochs;
        sj["lr"] = dc.train.lr;
        sj["seed"] = dc.train.seed;
        sj["teacher_stage_end"] = res.plan.teacher_stage_end;
        sj["student_stage_end"] = res.plan.student_stage_end;
        student_entries[i] = sj;
    });
    for (auto& sj : student_entries) dm["students"].push_back(sj);
    write_text(out_dir / "distill" / "distill_manifest.json", dm.dump(2));
}

// ---- stage 5/6: merge + tune -----------------------------------------------------------

void stage_merge(const PipelineConfig& cfg, const fs::path& out_dir) {
    fs::create_directories(out_dir / "moe");
    std::vector<DenseLm> bases;
    for (int64_t i = 0; i < cfg.n_experts; ++i) {
        bases.push_back(load_dense_from(out_dir / "distill" / ("base_" + std::to_string(i) + ".dfck")));
    }
    MergeReport report;
    MoeLm moe = merge_bases(bases, cfg.top_k, derive_seed(cfg.master_seed, "gate"), &report);
    write_file(out_dir / "moe" / "merged.dfck", save_checkpoint(moe));
    json rj;
    rj["entries"] = json::array();
    for (const auto& e : report.entries) {
        json ej;
        ej["tensor"] = e.tensor;
        ej["rule"] = e.rule;
        ej["sources"] = e.sources;
        if (!e.sha256.empty()) ej["sha256"] = e.sha256;
        rj["entries"].push_back(ej);
    }
    write_text(out_dir / "moe" / "merge_report.json", rj.dump(2));
}

void stage_tune(const PipelineConfig& cfg, const fs::path& out_dir) {
    const DataManifest manifest = read_data_manifest(out_dir / "data" / "data_manifest.json");
    const Corpus public_corpus = read_corpus(out_dir / manifest.public_path);
    MoeLm moe = load_moe_checkpoint(read_file(out_dir / "moe" / "merged.dfck"));
    const TuneResult res =
        tune_global(moe, public_corpus,
                    make_train_options(cfg.tune_epochs, cfg.tune_lr,
                                       derive_seed(cfg.master_seed, "tune"), cfg.batch_size,
                                       cfg.max_seq_len));
    write_file(out_dir / "moe" / "tuned.dfck", save_checkpoint(moe));
    std::string csv = "epoch,loss\n";
    for (size_t e = 0; e < res.epoch_loss.size(); ++e) {
        csv += std::to_string(e) + "," + fmt_double(res.epoch_loss[e]) + "\n";
    }
    write_text(out_dir / "moe" / "tune_curve.csv", csv);
    json tj;
    tj["trainable_params"] = res.trainable_params;
    tj["frozen_params"] = res.frozen_params;
    tj["trainable_fraction"] =
        static_cast<double>(res.trainable_params) /
        static_cast<double>(res.trainable_params + res.frozen_params);
    tj["experts_verified"] = true;  // tune_global throws otherwise
    write_text(out_dir / "moe" / "tune_report.json", tj.dump(2));
}

// ---- stage 7: evaluation ----------------------------------------------------------------

namespace {

std::string metrics_csv_row(const MetricRow& r) {
    return r.stage + "," + r.model + "," + r.domain + "," + fmt_double(r.log_ppl) + "," +
           fmt_double(r.token_acc, 6) + "\n";
}

template <class Lm>
void eval_into(std::vector<MetricRow>& rows, const std::string& stage, const std::string& name,
               const Lm& model, const std::vector<Corpus>& domain_tests, const Corpus& mixed,
               int64_t window, int64_t batch) {
    for (size_t d = 0; d < domain_tests.size(); ++d) {
        const EvalMetrics m = evaluate_lm(model, domain_tests[d], window, batch);
        rows.push_back({stage, name, "domain_" + std::to_string(d), m.log_ppl, m.token_acc});
    }
    const EvalMetrics m = evaluate_lm(model, mixed, window, batch);
    rows.push_back({stage, name, "mixed", m.log_ppl, m.token_acc});
}

}  // namespace

void stage_evaluate(const PipelineConfig& cfg, const fs::path& out_dir) {
    const DataManifest manifest = read_data_manifest(out_dir / "data" / "data_manifest.json");
    std::vector<Corpus> domain_tests;
    for (const auto& p : manifest.test_paths) domain_tests.push_back(read_corpus(out_dir / p));
    const Corpus mixed = read_corpus(out_dir / manifest.mixed_test_path);
    const int64_t window = cfg.max_seq_len;

    std::vector<MetricRow> rows;
    const DenseLm seed_base = load_dense_from(out_dir / "distill" / "seed_base.dfck");
    eval_into(rows, "seed_base", "seed_base", seed_base, domain_tests, mixed, window,
              cfg.batch_size);
    for (int64_t i = 0; i < cfg.n_experts; ++i) {
        const DenseLm proxy =
            load_dense_from(out_dir / "proxies" / ("proxy_" + std::to_string(i) + ".dfck"));
        eval_into(rows, "proxy", "proxy_" + std::to_string(i), proxy, domain_tests, mixed, window,
                  cfg.batch_size);
    }
    for (int64_t i = 0; i < cfg.n_experts; ++i) {
        const DenseLm base =
            load_dense_from(out_dir / "distill" / ("base_" + std::to_string(i) + ".dfck"));
        eval_into(rows, "base", "base_" + std::to_string(i), base, domain_tests, mixed, window,
                  cfg.batch_size);
    }
    const MoeLm moe = load_moe_checkpoint(read_file(out_dir / "moe" / "tuned.dfck"));
    eval_into(rows, "moe", "moe", moe, domain_tests, mixed, window, cfg.batch_size);

    std::string csv = "stage,model,domain,log_ppl,token_acc\n";
    json mj = json::array();
    for (const auto& r : rows) {
        csv += metrics_csv_row(r);
        json rj;
        rj["stage"] = r.stage;
        rj["model"] = r.model;
        rj["domain"] = r.domain;
        rj["log_ppl"] = r.log_ppl;
        rj["token_acc"] = r.token_acc;
        mj.push_back(rj);
    }
    write_text(out_dir / "metrics.csv", csv);
    write_text(out_dir / "metrics.json", mj.dump(2));

    // routing diagnostics: which expert fires for which domain
    const RoutingStats stats = routing_stats(moe, domain_tests, window, cfg.batch_size);
    const std::vector<int32_t> assignment = read_cluster_assignment(out_dir);
    // majority domain per cluster
    std::vector<int32_t> cluster_domain(cfg.n_experts, -1);
    for (int64_t c = 0; c < cfg.n_experts; ++c) {
        std::vector<int64_t> count(cfg.n_domains, 0);
        for (size_t i = 0; i < assignment.size(); ++i) {
            if (assignment[i] == c) ++count[manifest.devices[i].domain];
        }
        cluster_domain[c] = static_cast<int32_t>(
            std::max_element(count.begin(), count.end()) - count.begin());
    }
    int64_t matches = 0;
    json per_domain = json::array();
    for (int64_t d = 0; d < cfg.n_domains; ++d) {
        const auto& pct = stats.domain_expert_pct[d];
        const int64_t top_expert =
            std::max_element(pct.begin(), pct.end()) - pct.begin();
        const bool match = cluster_domain[top_expert] == d;
        matches += match;
        json dj;
        dj["domain"] = d;
        dj["top_expert"] = top_expert;
        dj["expert_pct"] = pct;
        dj["expert_cluster_majority_domain"] = cluster_domain[top_expert];
        dj["match"] = match;
        per_domain.push_back(dj);
    }
    json sj;
    sj["n_experts"] = stats.n_experts;
    sj["k"] = stats.k;
    sj["tokens"] = stats.tokens;
    sj["expert_pct"] = stats.expert_pct;
    sj["cluster_majority_domain"] = cluster_domain;
    sj["per_domain"] = per_domain;
    sj["domain_expert_matches"] = matches;
    sj["n_domains"] = cfg.n_domains;
    write_text(out_dir / "routing.json", sj.dump(2));
}

// ---- run-all / manifest / ablation ---------------------------------------------------------

RunSummary run_pipeline(const PipelineConfig& cfg, const fs::path& out_dir) {
    cfg.validate();
    fs::create_directories(out_dir);
    write_text(out_dir / "config.json", cfg.to_json());

    using Stage = std::pair<const char*, void (*)(const PipelineConfig&, const fs::path&)>;
    const Stage stages[] = {
        {"gen_data", stage_gen_data},   {"train_devices", stage_train_devices},
        {"cluster", stage_cluster},     {"distill", stage_distill},
        {"merge", stage_merge},         {"tune", stage_tune},
        {"evaluate", stage_evaluate},
    };
    json timing;
    for (const auto& [name, fn] : stages) {
        const auto t0 = std::chrono::steady_clock::now();
        try {
            fn(cfg, out_dir);
        } catch (const std::exception& e) {
            throw std::runtime_error("stage " + std::string(name) + " failed: " + e.what());
        }
        const auto t1 = std::chrono::steady_clock::now();
        timing[name] = std::chrono::duration<double>(t1 - t0).count();
    }

    // communication accounting
    const json ledger = json::parse(read_text(out_dir / "ledger.json"));
    const int64_t model_bytes = ledger.at("model_bytes").get<int64_t>();
    const int64_t embedding_bytes = ledger.at("embedding_bytes").get<int64_t>();
    const LmConfig base_cfg =
        arch_config(cfg.base_family, cfg.vocab_size, cfg.max_seq_len, cfg.tied_output);
    // baseline local model: the pruned variant keeping the backbone plus one
    // expert per layer, which is exactly a dense model of the backbone config
    const int64_t baseline_local = dense_checkpoint_bytes(base_cfg);
    const int64_t baseline_total =
        baseline_comm_cost(cfg.n_devices(), baseline_local, cfg.baseline_rounds);

    json manifest;
    manifest["config"] = json::parse(cfg.to_json());
    manifest["n_devices"] = cfg.n_devices();
    manifest["comm"] = {
        {"model_bytes", model_bytes},
        {"embedding_bytes", embedding_bytes},
        {"baseline_local_model_bytes", baseline_local},
        {"baseline_rounds", cfg.baseline_rounds},
        {"baseline_bytes", baseline_total},
        {"one_shot_reduction_pct",
         100.0 * (1.0 - static_cast<double>(model_bytes) / static_cast<double>(baseline_total))},
    };
    {
        json arch = json::array();
        const DataManifest dm = read_data_manifest(out_dir / "data" / "data_manifest.json");
        for (const auto& d : dm.devices) arch.push_back(d.family);
        manifest["arch_assignment"] = arch;
    }
    manifest["stage_seconds"] = timing;
    manifest["metrics_csv"] = "metrics.csv";
    manifest["container_versions"] = {{"checkpoint", 1}, {"corpus", 1}};
    write_text(out_dir / "manifest.json", manifest.dump(2));
    return load_summary(out_dir);
}

const MetricRow& RunSummary::metric(const std::string& model, const std::string& domain) const {
    for (const auto& r : metrics) {
        if (r.model == model && r.domain == domain) return r;
    }
    throw std::out_of_range("no metric row for " + model + "/" + domain);
}

RunSummary load_summary(const fs::path& out_dir) {
    RunSummary s;
    s.out_dir = out_dir;
    const json manifest = json::parse(read_text(out_dir / "manifest.json"));
    s.model_upload_bytes = manifest.at("comm").at("model_bytes").get<int64_t>();
    s.embedding_upload_bytes = manifest.at("comm").at("embedding_bytes").get<int64_t>();
    s.baseline_bytes = manifest.at("comm").at("baseline_bytes").get<int64_t>();
    std::ifstream in(out_dir / "metrics.csv");
    if (!in) throw std::runtime_error("missing metrics.csv");
    std::string line;
    std::getline(in, line);  // header
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        MetricRow r;
        std::istringstream ss(line);
        std::string log_ppl, acc;
        std::getline(ss, r.stage, ',');
        std::getline(ss, r.model, ',');
        std::getline(ss, r.domain, ',');
        std::getline(ss, log_ppl, ',');
        std::getline(ss, acc, ',');
        r.log_ppl = std::stod(log_ppl);
        r.token_acc = std::stod(acc);
        s.metrics.push_back(std::move(r));
    }
    return s;
}

void run_ablation(const PipelineConfig& cfg, const fs::path& out_dir) {
    PipelineConfig feature_arm = cfg;
    PipelineConfig logits_arm = cfg;
    logits_arm.alpha = 0.0;
    const RunSummary a = run_pipeline(feature_arm, out_dir / "feature_arm");
    const RunSummary b = run_pipeline(logits_arm, out_dir / "logits_only");

    // the arms must share device models, clusters, and ledgers bit-exactly
    bool shared_identical = true;
    for (int64_t i = 0; i < cfg.n_devices(); ++i) {
        const auto pa = out_dir / "feature_arm" / "devices" / (device_name(i) + ".dfck");
        const auto pb = out_dir / "logits_only" / "devices" / (device_name(i) + ".dfck");
        if (read_file(pa) != read_file(pb)) shared_identical = false;
    }
    if (read_text(out_dir / "feature_arm" / "clusters.json") !=
        read_text(out_dir / "logits_only" / "clusters.json")) {
        shared_identical = false;
    }
    if (read_text(out_dir / "feature_arm" / "ledger.json") !=
        read_text(out_dir / "logits_only" / "ledger.json")) {
        shared_identical = false;
    }

    std::string csv =
        "stage,model,domain,log_ppl_feature_arm,log_ppl_logits_arm,token_acc_feature_arm,"
        "token_acc_logits_arm\n";
    for (const auto& ra : a.metrics) {
        const MetricRow& rb = b.metric(ra.model, ra.domain);
        csv += ra.stage + "," + ra.model + "," + ra.domain + "," + fmt_double(ra.log_ppl) + "," +
               fmt_double(rb.log_ppl) + "," + fmt_double(ra.token_acc, 6) + "," +
               fmt_double(rb.token_acc, 6) + "\n";
    }
    write_text(out_dir / "ablation.csv", csv);

    const double moe_a = a.metric("moe", "mixed").log_ppl;
    const double moe_b = b.metric("moe", "mixed").log_ppl;
    json j;
    j["shared_stages_identical"] = shared_identical;
    j["moe_mixed_log_ppl_feature_arm"] = moe_a;
    j["moe_mixed_log_ppl_logits_arm"] = moe_b;
    j["feature_arm_no_worse"] = moe_a <= moe_b;
    j["alpha_feature_arm"] = cfg.alpha;
    j["alpha_logits_arm"] = 0.0;
    write_text(out_dir / "ablation.json", j.dump(2));
}

std::string report_text(const fs::path& out_dir) {
    std::ostringstream os;
    os << "run: " << out_dir.string() << "\n";
    if (fs::exists(out_dir / "manifest.json")) {
        const json manifest = json::parse(read_text(out_dir / "manifest.json"));
        os << "devices: " << manifest.at("n_devices").get<int64_t>() << ", experts: "
           << manifest.at("config").at("n_experts").get<int64_t>() << ", top_k: "
           << manifest.at("config").at("top_k").get<int64_t>() << "\n";
        const auto& comm = manifest.at("comm");
        os << "one-shot upload: " << comm.at("model_bytes").get<int64_t>() << " bytes (+"
           << comm.at("embedding_bytes").get<int64_t>() << " embedding bytes)\n";
        os << "multi-round baseline (" << comm.at("baseline_rounds").get<int64_t>()
           << " rounds): " << comm.at("baseline_bytes").get<int64_t>() << " bytes\n";
        os << "reduction vs baseline: "
           << fmt_double(comm.at("one_shot_reduction_pct").get<double>(), 2) << "%\n";
    } else if (fs::exists(out_dir / "ledger.json")) {
        const json ledger = json::parse(read_text(out_dir / "ledger.json"));
        os << "one-shot upload: " << ledger.at("model_bytes").get<int64_t>() << " bytes (+"
           << ledger.at("embedding_bytes").get<int64_t>() << " embedding bytes)\n";
    }
    if (fs::exists(out_dir / "metrics.csv")) {
        os << "\n" << read_text(out_dir / "metrics.csv");
    }
    if (fs::exists(out_dir / "routing.json")) {
        const json routing = json::parse(read_text(out_dir / "routing.json"));
        os << "\nrouting: domain->expert matches " << routing.at("domain_expert_matches")
           << " of " << routing.at("n_domains") << "\n";
    }
    return os.str();
}

}  // namespace fedmoe
