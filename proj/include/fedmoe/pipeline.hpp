// SPDX-License-Identifier: Apache-2.0
//
// End-to-end one-shot federated simulation: synthetic data, on-device
// training, single-round upload with byte accounting, clustering, the K
// distillations, merge, frozen-expert tuning, evaluation, and the ablation
// harness. Every stage reads and writes artifacts under one output directory
// so the CLI subcommands compose.

#pragma once

#include <cstdint>
#include <filesystem>
#include <mutex>
#include <string>
#include <vector>

namespace fedmoe {

enum class PayloadKind { model, embedding, config };
std::string payload_kind_name(PayloadKind kind);

struct LedgerEntry {
    std::string sender;
    std::string receiver;
    PayloadKind kind = PayloadKind::model;
    int64_t bytes = 0;
    int64_t round = 1;
};

// Append-only record of every simulated transfer. Entries are sorted by
// (round, sender, kind) before persistence so parallel append order never
// leaks into artifacts.
class CommLedger {
public:
    void append(LedgerEntry entry);
    std::vector<LedgerEntry> sorted_entries() const;
    int64_t model_bytes() const;      // total one-shot upload cost
    int64_t embedding_bytes() const;  // reported separately

private:
    mutable std::mutex mu_;
    std::vector<LedgerEntry> entries_;
};

// Multi-round baseline cost model: each round every device downloads and
// uploads a local model of local_model_bytes.
int64_t baseline_comm_cost(int64_t n_devices, int64_t local_model_bytes, int64_t rounds);

struct PipelineConfig {
    // data
    int64_t vocab_size = 64;
    int64_t max_seq_len = 32;
    int64_t n_domains = 3;
    int64_t devices_per_domain = 4;
    int64_t tokens_per_device = 6144;
    int64_t public_tokens = 12288;
    int64_t test_tokens_per_domain = 2048;
    double separation = 0.9;
    int64_t embedding_dim = 32;
    double min_shard_fraction = 0.5;
    double mixture_fraction = 0.0;
    // models
    std::vector<std::string> device_families = {"tinyA", "tinyB", "tinyC"};
    std::string base_family = "base";
    int64_t n_experts = 3;  // K: clusters == experts
    int64_t top_k = 2;
    bool tied_output = false;
    // training budgets
    int64_t device_epochs = 30;
    double device_lr = 3e-3;
    // the shared student init is deliberately under-trained: it only has to
    // give the K students mutually compatible weights, and a weak start
    // leaves the distillation gains measurable
    int64_t seed_base_epochs = 1;
    double seed_base_lr = 3e-4;
    int64_t distill_epochs = 18;
    double distill_lr = 1.5e-3;
    double alpha = 1.0;
    double beta = 1.0;
    double tau = 2.0;
    int64_t n_stages = 2;
    int64_t aligner_queries = 8;
    int64_t aligner_width = 32;
    int64_t aligner_heads = 2;
    bool literal_attention = false;
    int64_t tune_epochs = 8;
    double tune_lr = 1e-3;
    int64_t batch_size = 16;
    // accounting & run control
    int64_t baseline_rounds = 10;
    bool weighted_proxy = false;
    uint64_t master_seed = 4242;
    int64_t threads = 0;  // 0: hardware concurrency

    int64_t n_devices() const { return n_domains * devices_per_domain; }
    void validate() const;
    std::string to_json() const;
    // Accepts either a bare config object or a run manifest (uses its
    // "config" section), so reruns from a manifest reproduce the run.
    static PipelineConfig from_json(const std::string& text);
    static PipelineConfig smoke();  // N=4, K=2, small budgets

    bool operator==(const PipelineConfig&) const = default;
};

// pipeline stages; each persists its artifacts under out_dir
void stage_gen_data(const PipelineConfig& cfg, const std::filesystem::path& out_dir);
void stage_train_devices(const PipelineConfig& cfg, const std::filesystem::path& out_dir);
void stage_cluster(const PipelineConfig& cfg, const std::filesystem::path& out_dir);
void stage_distill(const PipelineConfig& cfg, const std::filesystem::path& out_dir);
void stage_merge(const PipelineConfig& cfg, const std::filesystem::path& out_dir);
void stage_tune(const PipelineConfig& cfg, const std::filesystem::path& out_dir);
void stage_evaluate(const PipelineConfig& cfg, const std::filesystem::path& out_dir);

struct MetricRow {
    std::string stage;   // seed_base | proxy | base | moe
    std::string model;   // e.g. proxy_1
    std::string domain;  // domain_0.. | mixed
    double log_ppl = 0.0;
    double token_acc = 0.0;
};

struct RunSummary {
    std::filesystem::path out_dir;
    int64_t model_upload_bytes = 0;
    int64_t embedding_upload_bytes = 0;
    int64_t baseline_bytes = 0;
    std::vector<MetricRow> metrics;

    const MetricRow& metric(const std::string& model, const std::string& domain) const;
};

// Runs every stage in order and writes manifest.json. Any stage failure is
// rethrown as "stage <name> failed: ...", leaving earlier artifacts in place.
RunSummary run_pipeline(const PipelineConfig& cfg, const std::filesystem::path& out_dir);

// Reads metrics/ledger/manifest of a finished run.
RunSummary load_summary(const std::filesystem::path& out_dir);

// Two full runs from one master seed: the configured arm and a logits-only
// arm (alpha = 0). Emits ablation.csv / ablation.json with paired metrics and
// a bit-identity check of the shared early stages.
void run_ablation(const PipelineConfig& cfg, const std::filesystem::path& out_dir);

// Human-readable summary of a finished run directory.
std::string report_text(const std::filesystem::path& out_dir);

}  // namespace fedmoe
