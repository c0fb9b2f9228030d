// SPDX-License-Identifier: Apache-2.0
//
// Decoder-only transformer language models: heterogeneous dense LMs for the
// devices plus the gated-expert variant. Pre-norm blocks, learned absolute
// position embeddings, causal attention, GELU feed-forward.

#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "fedmoe/config.hpp"
#include "fedmoe/corpus.hpp"
#include "fedmoe/tensor.hpp"

namespace fedmoe {

struct NamedTensor {
    std::string name;
    Tensor tensor;
};

struct AttnParams {
    Tensor ln_g, ln_b;  // pre-attention norm
    Tensor wq, wk, wv, wo;
};

struct FfnParams {
    Tensor w_in, w_out;
};

struct DenseLayer {
    AttnParams attn;
    Tensor ln2_g, ln2_b;  // pre-ffn norm
    FfnParams ffn;
};

struct MoeLayer {
    AttnParams attn;
    Tensor ln2_g, ln2_b;
    Tensor gate;  // d_model x K
    std::vector<FfnParams> experts;
};

struct LmOutput {
    Tensor logits;               // batch x T x V
    std::vector<Tensor> hidden;  // residual stream after each block (when captured)
};

// Per-token record of which experts fired.
struct RoutingTrace {
    int64_t n_experts = 0;
    int64_t k = 0;
    std::vector<int32_t> expert_ids;  // tokens x k, selection order
};

class DenseLm {
public:
    DenseLm() = default;
    DenseLm(const LmConfig& config, uint64_t seed);
    static DenseLm zeros(const LmConfig& config);

    const LmConfig& config() const { return cfg_; }
    LmOutput forward(const TokenBatch& batch, bool capture_hidden = false) const;

    std::vector<NamedTensor> named_params() const;  // stable, documented order
    std::vector<Tensor> params() const;
    void set_trainable(bool trainable);
    int64_t param_count() const;
    DenseLm clone() const;

    Tensor tok_emb, pos_emb;
    std::vector<DenseLayer> layers;
    Tensor final_g, final_b;
    Tensor out_proj;  // undefined when tied_output

private:
    LmConfig cfg_;
};

class MoeLm {
public:
    MoeLm() = default;
    MoeLm(const MoeConfig& config, uint64_t seed);

    const MoeConfig& config() const { return cfg_; }
    LmOutput forward(const TokenBatch& batch, bool capture_hidden = false,
                     RoutingTrace* trace = nullptr) const;

    std::vector<NamedTensor> named_params() const;
    std::vector<Tensor> params() const;
    // Parameters outside the expert FFNs (embedding, attention, norms, gate, output).
    std::vector<NamedTensor> shared_params() const;
    std::vector<NamedTensor> expert_params() const;
    void set_trainable(bool trainable);
    int64_t param_count() const;
    MoeLm clone() const;

    Tensor tok_emb, pos_emb;
    std::vector<MoeLayer> layers;
    Tensor final_g, final_b;
    Tensor out_proj;

private:
    MoeConfig cfg_;
};

// Top-k gated combination for one block's expert stage: p = softmax(gate(x))
// over all K experts, y = sum_{i in top_k} p_i * expert_i(x). Weights are the
// raw p_i (no renormalization over the selected subset); ties break toward the
// lower expert index.
Tensor moe_ffn_forward(const MoeLayer& layer, const Tensor& x_normed, int64_t top_k,
                       RoutingTrace* trace = nullptr);

// Mean of -log P(x_t | x_<t) over predicted positions 1..T-1 of every row.
Tensor lm_loss_ce(const Tensor& logits, const TokenBatch& batch);

struct EvalMetrics {
    double log_ppl = 0.0;      // mean token-level negative log-likelihood
    double ppl = 0.0;          // exp(log_ppl)
    double token_acc = 0.0;    // percent of greedy next-token matches
    int64_t positions = 0;
};

// Teacher-forced evaluation over the whole corpus (non-overlapping windows).
template <class Lm>
EvalMetrics evaluate_lm(const Lm& model, const Corpus& corpus, int64_t window,
                        int64_t batch_size = 16);

double perplexity(const DenseLm& model, const Corpus& corpus, int64_t window);
double token_accuracy(const DenseLm& model, const Corpus& corpus, int64_t window);

struct TrainOptions {
    int64_t epochs = 1;
    double lr = 1e-3;
    uint64_t seed = 1;
    int64_t batch_size = 16;
    int64_t window = 32;
};

// Generic Adam training loop over shuffled windows. `loss_fn` is invoked under
// an active tape and must return the scalar loss for one batch. Deterministic
// given seed. Throws if the loss goes non-finite.
std::vector<double> run_training(
    std::vector<Tensor> params, const Corpus& corpus, const TrainOptions& opt,
    const std::function<Tensor(const TokenBatch&)>& loss_fn,
    const std::function<void(int64_t, double)>& on_epoch = nullptr);

// On-device training: next-token cross-entropy on the local shard.
std::vector<double> train_local(DenseLm& model, const Corpus& corpus, const TrainOptions& opt);

// internal: shared eval walk used by the template below
EvalMetrics evaluate_logits_walk(
    const std::function<Tensor(const TokenBatch&)>& forward_logits, const Corpus& corpus,
    int64_t window, int64_t batch_size);

template <class Lm>
EvalMetrics evaluate_lm(const Lm& model, const Corpus& corpus, int64_t window,
                        int64_t batch_size) {
    return evaluate_logits_walk(
        [&](const TokenBatch& b) { return model.forward(b).logits; }, corpus, window, batch_size);
}

}  // namespace fedmoe
