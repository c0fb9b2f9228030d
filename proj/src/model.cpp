// SPDX-License-Identifier: Apache-2.0

#include "fedmoe/model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "fedmoe/optim.hpp"
#include "fedmoe/rng.hpp"

namespace fedmoe {

namespace {

constexpr double kInitStd = 0.02;
constexpr double kMaskValue = -1e9;

Tensor causal_mask(int64_t t) {
    Tensor m = Tensor::zeros({t, t});
    auto& v = m.data();
    for (int64_t i = 0; i < t; ++i) {
        for (int64_t j = i + 1; j < t; ++j) v[i * t + j] = kMaskValue;
    }
    return m;
}

void validate_batch(const TokenBatch& batch, const LmConfig& cfg) {
    if (batch.batch < 1 || batch.seq_len < 1) throw std::invalid_argument("empty batch");
    if (batch.seq_len > cfg.max_seq_len) {
        throw std::invalid_argument("batch seq_len exceeds max_seq_len");
    }
    for (int32_t id : batch.ids) {
        if (id < 0 || id >= cfg.vocab_size) {
            throw std::out_of_range("token id out of range: " + std::to_string(id));
        }
    }
}

AttnParams init_attn(int64_t d, Rng& rng) {
    AttnParams p;
    p.ln_g = Tensor::full({d}, 1.0, true);
    p.ln_b = Tensor::zeros({d}, true);
    p.wq = Tensor::randn({d, d}, rng, kInitStd, true);
    p.wk = Tensor::randn({d, d}, rng, kInitStd, true);
    p.wv = Tensor::randn({d, d}, rng, kInitStd, true);
    p.wo = Tensor::randn({d, d}, rng, kInitStd, true);
    return p;
}

AttnParams zero_attn(int64_t d) {
    AttnParams p;
    p.ln_g = Tensor::zeros({d}, true);
    p.ln_b = Tensor::zeros({d}, true);
    p.wq = Tensor::zeros({d, d}, true);
    p.wk = Tensor::zeros({d, d}, true);
    p.wv = Tensor::zeros({d, d}, true);
    p.wo = Tensor::zeros({d, d}, true);
    return p;
}

// causal multi-head self-attention on the pre-normed residual stream
Tensor attn_forward(const Tensor& h, const AttnParams& p, int64_t n_heads, const Tensor& mask) {
    const int64_t b = h.dim(0), t = h.dim(1), d = h.dim(2);
    const int64_t hd = d / n_heads;
    Tensor x = layer_norm(h, p.ln_g, p.ln_b);
    auto heads = [&](const Tensor& w) {
        Tensor y = matmul(x, w);                       // B x T x d
        y = reshape(y, {b, t, n_heads, hd});
        return permute(y, {0, 2, 1, 3});               // B x H x T x hd
    };
    Tensor q = heads(p.wq);
    Tensor k = heads(p.wk);
    Tensor v = heads(p.wv);
    Tensor scores = scale(matmul(q, transpose(k)), 1.0 / std::sqrt(static_cast<double>(hd)));
    scores = add(scores, mask);                        // mask broadcasts over B x H
    Tensor attn = softmax(scores, -1);
    Tensor ctx = matmul(attn, v);                      // B x H x T x hd
    ctx = reshape(permute(ctx, {0, 2, 1, 3}), {b, t, d});
    return matmul(ctx, p.wo);
}

Tensor ffn_forward(const Tensor& x, const FfnParams& f) {
    return matmul(gelu(matmul(x, f.w_in)), f.w_out);
}

Tensor copy_like(const Tensor& t) {
    Tensor c = t.clone();
    c.set_requires_grad(t.requires_grad());
    return c;
}

void append_attn_params(std::vector<NamedTensor>& out, const std::string& prefix,
                        const AttnParams& p) {
    out.push_back({prefix + ".ln_g", p.ln_g});
    out.push_back({prefix + ".ln_b", p.ln_b});
    out.push_back({prefix + ".wq", p.wq});
    out.push_back({prefix + ".wk", p.wk});
    out.push_back({prefix + ".wv", p.wv});
    out.push_back({prefix + ".wo", p.wo});
}

}  // namespace

// ---- DenseLm ------------------------------------------------------------------

DenseLm::DenseLm(const LmConfig& config, uint64_t seed) : cfg_(config) {
    cfg_.validate();
    Rng rng(seed);
    const int64_t d = cfg_.d_model;
    tok_emb = Tensor::randn({cfg_.vocab_size, d}, rng, kInitStd, true);
    pos_emb = Tensor::randn({cfg_.max_seq_len, d}, rng, kInitStd, true);
    layers.resize(cfg_.n_layers);
    for (auto& l : layers) {
        l.attn = init_attn(d, rng);
        l.ln2_g = Tensor::full({d}, 1.0, true);
        l.ln2_b = Tensor::zeros({d}, true);
        l.ffn.w_in = Tensor::randn({d, cfg_.d_ffn}, rng, kInitStd, true);
        l.ffn.w_out = Tensor::randn({cfg_.d_ffn, d}, rng, kInitStd, true);
    }
    final_g = Tensor::full({d}, 1.0, true);
    final_b = Tensor::zeros({d}, true);
    if (!cfg_.tied_output) out_proj = Tensor::randn({d, cfg_.vocab_size}, rng, kInitStd, true);
}

DenseLm DenseLm::zeros(const LmConfig& config) {
    DenseLm m;
    m.cfg_ = config;
    m.cfg_.validate();
    const int64_t d = config.d_model;
    m.tok_emb = Tensor::zeros({config.vocab_size, d}, true);
    m.pos_emb = Tensor::zeros({config.max_seq_len, d}, true);
    m.layers.resize(config.n_layers);
    for (auto& l : m.layers) {
        l.attn = zero_attn(d);
        l.ln2_g = Tensor::zeros({d}, true);
        l.ln2_b = Tensor::zeros({d}, true);
        l.ffn.w_in = Tensor::zeros({d, config.d_ffn}, true);
        l.ffn.w_out = Tensor::zeros({config.d_ffn, d}, true);
    }
    m.final_g = Tensor::zeros({d}, true);
    m.final_b = Tensor::zeros({d}, true);
    if (!config.tied_output) m.out_proj = Tensor::zeros({d, config.vocab_size}, true);
    return m;
}

LmOutput DenseLm::forward(const TokenBatch& batch, bool capture_hidden) const {
    validate_batch(batch, cfg_);
    const int64_t t = batch.seq_len;
    Tensor pos = slice(pos_emb, 0, 0, t);
    Tensor h = add(embedding_lookup(tok_emb, batch.ids, {batch.batch, t}), pos);
    Tensor mask = causal_mask(t);
    LmOutput out;
    for (const auto& l : layers) {
        h = add(h, attn_forward(h, l.attn, cfg_.n_heads, mask));
        h = add(h, ffn_forward(layer_norm(h, l.ln2_g, l.ln2_b), l.ffn));
        if (capture_hidden) out.hidden.push_back(h);
    }
    Tensor hf = layer_norm(h, final_g, final_b);
    out.logits = cfg_.tied_output ? matmul(hf, transpose(tok_emb)) : matmul(hf, out_proj);
    return out;
}

std::vector<NamedTensor> DenseLm::named_params() const {
    std::vector<NamedTensor> out;
    out.push_back({"tok_emb", tok_emb});
    out.push_back({"pos_emb", pos_emb});
    for (size_t i = 0; i < layers.size(); ++i) {
        const std::string p = "layers." + std::to_string(i);
        append_attn_params(out, p + ".attn", layers[i].attn);
        out.push_back({p + ".ln2_g", layers[i].ln2_g});
        out.push_back({p + ".ln2_b", layers[i].ln2_b});
        out.push_back({p + ".ffn.w_in", layers[i].ffn.w_in});
        out.push_back({p + ".ffn.w_out", layers[i].ffn.w_out});
    }
    out.push_back({"final_g", final_g});
    out.push_back({"final_b", final_b});
    if (!cfg_.tied_output) out.push_back({"out_proj", out_proj});
    return out;
}

std::vector<Tensor> DenseLm::params() const {
    std::vector<Tensor> out;
    for (auto& [name, t] : named_params()) out.push_back(t);
    return out;
}

void DenseLm::set_trainable(bool trainable) {
    for (auto& [name, t] : named_params()) {
        Tensor handle = t;
        handle.set_requires_grad(trainable);
    }
}

int64_t DenseLm::param_count() const {
    int64_t n = 0;
    for (const auto& [name, t] : named_params()) n += t.numel();
    return n;
}

DenseLm DenseLm::clone() const {
    DenseLm m;
    m.cfg_ = cfg_;
    m.tok_emb = copy_like(tok_emb);
    m.pos_emb = copy_like(pos_emb);
    m.layers.resize(layers.size());
    for (size_t i = 0; i < layers.size(); ++i) {
        const auto& s = layers[i];
        auto& d = m.layers[i];
        d.attn.ln_g = copy_like(s.attn.ln_g);
        d.attn.ln_b = copy_like(s.attn.ln_b);
        d.attn.wq = copy_like(s.attn.wq);
        d.attn.wk = copy_like(s.attn.wk);
        d.attn.wv = copy_like(s.attn.wv);
        d.attn.wo = copy_like(s.attn.wo);
        d.ln2_g = copy_like(s.ln2_g);
        d.ln2_b = copy_like(s.ln2_b);
        d.ffn.w_in = copy_like(s.ffn.w_in);
        d.ffn.w_out = copy_like(s.ffn.w_out);
    }
    m.final_g = copy_like(final_g);
    m.final_b = copy_like(final_b);
    if (out_proj.defined()) m.out_proj = copy_like(out_proj);
    return m;
}

// ---- MoeLm --------------------------------------------------------------------

MoeLm::MoeLm(const MoeConfig& config, uint64_t seed) : cfg_(config) {
    cfg_.validate();
    Rng rng(seed);
    const LmConfig& b = cfg_.backbone;
    const int64_t d = b.d_model;
    tok_emb = Tensor::randn({b.vocab_size, d}, rng, kInitStd, true);
    pos_emb = Tensor::randn({b.max_seq_len, d}, rng, kInitStd, true);
    layers.resize(b.n_layers);
    for (auto& l : layers) {
        l.attn = init_attn(d, rng);
        l.ln2_g = Tensor::full({d}, 1.0, true);
        l.ln2_b = Tensor::zeros({d}, true);
        l.gate = Tensor::randn({d, cfg_.n_experts}, rng, kInitStd, true);
        l.experts.resize(cfg_.n_experts);
        for (auto& e : l.experts) {
            e.w_in = Tensor::randn({d, b.d_ffn}, rng, kInitStd, true);
            e.w_out = Tensor::randn({b.d_ffn, d}, rng, kInitStd, true);
        }
    }
    final_g = Tensor::full({d}, 1.0, true);
    final_b = Tensor::zeros({d}, true);
    if (!b.tied_output) out_proj = Tensor::randn({d, b.vocab_size}, rng, kInitStd, true);
}

Tensor moe_ffn_forward(const MoeLayer& layer, const Tensor& x_normed, int64_t top_k,
                       RoutingTrace* trace) {
    const int64_t b = x_normed.dim(0), t = x_normed.dim(1);
    const int64_t n_experts = layer.gate.dim(1);
    if (top_k < 1 || top_k > n_experts) throw std::invalid_argument("top_k out of range");
    Tensor p = softmax(matmul(x_normed, layer.gate), -1);  // B x T x K

    // choose top-k experts per token from the raw probabilities
    const int64_t tokens = b * t;
    const auto& pv = p.data();
    std::vector<std::vector<double>> mask(n_experts, std::vector<double>(tokens, 0.0));
    std::vector<int64_t> order(n_experts);
    for (int64_t tok = 0; tok < tokens; ++tok) {
        std::iota(order.begin(), order.end(), 0);
        std::stable_sort(order.begin(), order.end(), [&](int64_t a, int64_t c) {
            return pv[tok * n_experts + a] > pv[tok * n_experts + c];
        });
        for (int64_t j = 0; j < top_k; ++j) {
            mask[order[j]][tok] = 1.0;
            if (trace) trace->expert_ids.push_back(static_cast<int32_t>(order[j]));
        }
    }
    if (trace) {
        trace->n_experts = n_experts;
        trace->k = top_k;
    }

    Tensor y;
    for (int64_t i = 0; i < n_experts; ++i) {
        Tensor pi = reshape(slice(p, 2, i, 1), {b, t});
        Tensor wi = mul(pi, Tensor::from_data({b, t}, mask[i]));
        Tensor yi = row_scale(ffn_forward(x_normed, layer.experts[i]), wi);
        y = y.defined() ? add(y, yi) : yi;
    }
    return y;
}

LmOutput MoeLm::forward(const TokenBatch& batch, bool capture_hidden, RoutingTrace* trace) const {
    const LmConfig& bc = cfg_.backbone;
    validate_batch(batch, bc);
    const int64_t t = batch.seq_len;
    Tensor pos = slice(pos_emb, 0, 0, t);
    Tensor h = add(embedding_lookup(tok_emb, batch.ids, {batch.batch, t}), pos);
    Tensor mask = causal_mask(t);
    LmOutput out;
    for (const auto& l : layers) {
        h = add(h, attn_forward(h, l.attn, bc.n_heads, mask));
        Tensor x2 = layer_norm(h, l.ln2_g, l.ln2_b);
        h = add(h, moe_ffn_forward(l, x2, cfg_.top_k, trace));
        if (capture_hidden) out.hidden.push_back(h);
    }
    Tensor hf = layer_norm(h, final_g, final_b);
    out.logits = bc.tied_output ? matmul(hf, transpose(tok_emb)) : matmul(hf, out_proj);
    return out;
}

std::vector<NamedTensor> MoeLm::named_params() const {
    std::vector<NamedTensor> out;
    out.push_back({"tok_emb", tok_emb});
    out.push_back({"pos_emb", pos_emb});
    for (size_t i = 0; i < layers.size(); ++i) {
        const std::string p = "layers." + std::to_string(i);
        append_attn_params(out, p + ".attn", layers[i].attn);
        out.push_back({p + ".ln2_g", layers[i].ln2_g});
        out.push_back({p + ".ln2_b", layers[i].ln2_b});
        out.push_back({p + ".gate", layers[i].gate});
        for (size_t e = 0; e < layers[i].experts.size(); ++e) {
            const std::string ep = p + ".experts." + std::to_string(e);
            out.push_back({ep + ".w_in", layers[i].experts[e].w_in});
            out.push_back({ep + ".w_out", layers[i].experts[e].w_out});
        }
    }
    out.push_back({"final_g", final_g});
    out.push_back({"final_b", final_b});
    if (!cfg_.backbone.tied_output) out.push_back({"out_proj", out_proj});
    return out;
}

std::vector<Tensor> MoeLm::params() const {
    std::vector<Tensor> out;
    for (auto& [name, t] : named_params()) out.push_back(t);
    return out;
}

std::vector<NamedTensor> MoeLm::shared_params() const {
    std::vector<NamedTensor> out;
    for (auto& nt : named_params()) {
        if (nt.name.find(".experts.") == std::string::npos) out.push_back(nt);
    }
    return out;
}

std::vector<NamedTensor> MoeLm::expert_params() const {
    std::vector<NamedTensor> out;
    for (auto& nt : named_params()) {
        if (nt.name.find(".experts.") != std::string::npos) out.push_back(nt);
    }
    return out;
}

void MoeLm::set_trainable(bool trainable) {
    for (auto& [name, t] : named_params()) {
        Tensor handle = t;
        handle.set_requires_grad(trainable);
    }
}

int64_t MoeLm::param_count() const {
    int64_t n = 0;
    for (const auto& [name, t] : named_params()) n += t.numel();
    return n;
}

MoeLm MoeLm::clone() const {
    MoeLm m;
    m.cfg_ = cfg_;
    m.tok_emb = copy_like(tok_emb);
    m.pos_emb = copy_like(pos_emb);
    m.layers.resize(layers.size());
    for (size_t i = 0; i < layers.size(); ++i) {
        const auto& s = layers[i];
        auto& d = m.layers[i];
        d.attn.ln_g = copy_like(s.attn.ln_g);
        d.attn.ln_b = copy_like(s.attn.ln_b);
        d.attn.wq = copy_like(s.attn.wq);
        d.attn.wk = copy_like(s.attn.wk);
        d.attn.wv = copy_like(s.attn.wv);
        d.attn.wo = copy_like(s.attn.wo);
        d.ln2_g = copy_like(s.ln2_g);
        d.ln2_b = copy_like(s.ln2_b);
        d.gate = copy_like(s.gate);
        d.experts.resize(s.experts.size());
        for (size_t e = 0; e < s.experts.size(); ++e) {
            d.experts[e].w_in = copy_like(s.experts[e].w_in);
            d.experts[e].w_out = copy_like(s.experts[e].w_out);
        }
    }
    m.final_g = copy_like(final_g);
    m.final_b = copy_like(final_b);
    if (out_proj.defined()) m.out_proj = copy_like(out_proj);
    return m;
}

// ---- losses & evaluation --------------------------------------------------------

Tensor lm_loss_ce(const Tensor& logits, const TokenBatch& batch) {
    if (batch.seq_len < 2) throw std::invalid_argument("loss needs seq_len >= 2");
    if (logits.dim(0) != batch.batch || logits.dim(1) != batch.seq_len) {
        throw std::invalid_argument("logits/batch shape mismatch");
    }
    const int64_t t = batch.seq_len;
    Tensor predicted = slice(logits, 1, 0, t - 1);  // positions predicting 1..T-1
    std::vector<int32_t> targets;
    targets.reserve(batch.batch * (t - 1));
    for (int64_t b = 0; b < batch.batch; ++b) {
        for (int64_t i = 1; i < t; ++i) targets.push_back(batch.ids[b * t + i]);
    }
    return cross_entropy_with_logits(predicted, targets);
}

EvalMetrics evaluate_logits_walk(const std::function<Tensor(const TokenBatch&)>& forward_logits,
                                 const Corpus& corpus, int64_t window, int64_t batch_size) {
    if (corpus.empty()) throw std::invalid_argument("empty corpus");
    const auto batches = make_batches(corpus, window, batch_size);
    if (batches.empty()) throw std::invalid_argument("corpus shorter than one window");
    EvalMetrics m;
    double nll = 0.0;
    int64_t correct = 0;
    for (const auto& batch : batches) {
        Tensor logits = forward_logits(batch);
        const auto& lv = logits.data();
        const int64_t t = batch.seq_len, v = logits.dim(2);
        for (int64_t b = 0; b < batch.batch; ++b) {
            for (int64_t pos = 0; pos + 1 < t; ++pos) {
                const double* row = lv.data() + (b * t + pos) * v;
                const int32_t target = batch.ids[b * t + pos + 1];
                double mx = row[0];
                int64_t arg = 0;
                for (int64_t j = 1; j < v; ++j) {
                    if (row[j] > mx) {
                        mx = row[j];
                        arg = j;
                    }
                }
                double sum = 0.0;
                for (int64_t j = 0; j < v; ++j) sum += std::exp(row[j] - mx);
                nll += mx + std::log(sum) - row[target];
                correct += (arg == target);
                ++m.positions;
            }
        }
    }
    m.log_ppl = nll / static_cast<double>(m.positions);
    m.ppl = std::exp(m.log_ppl);
    m.token_acc = 100.0 * static_cast<double>(correct) / static_cast<double>(m.positions);
    return m;
}

double perplexity(const DenseLm& model, const Corpus& corpus, int64_t window) {
    return evaluate_lm(model, corpus, window).ppl;
}

double token_accuracy(const DenseLm& model, const Corpus& corpus, int64_t window) {
    return evaluate_lm(model, corpus, window).token_acc;
}

// ---- training -------------------------------------------------------------------

std::vector<double> run_training(std::vector<Tensor> params, const Corpus& corpus,
                                 const TrainOptions& opt,
                                 const std::function<Tensor(const TokenBatch&)>& loss_fn,
                                 const std::function<void(int64_t, double)>& on_epoch) {
    if (corpus.empty()) throw std::invalid_argument("empty training corpus");
    const std::vector<int64_t> starts = window_starts(corpus, opt.window);
    if (starts.empty()) throw std::invalid_argument("training corpus shorter than one window");
    Adam adam(params, opt.lr);
    Rng shuffle_rng(derive_seed(opt.seed, "shuffle"));
    std::vector<double> curve;
    std::vector<int64_t> order = starts;
    for (int64_t epoch = 0; epoch < opt.epochs; ++epoch) {
        for (int64_t i = static_cast<int64_t>(order.size()) - 1; i > 0; --i) {
            std::swap(order[i], order[shuffle_rng.uniform_int(i + 1)]);
        }
        double total = 0.0;
        int64_t steps = 0;
        for (size_t off = 0; off < order.size(); off += opt.batch_size) {
            const size_t n = std::min(static_cast<size_t>(opt.batch_size), order.size() - off);
            TokenBatch batch = gather_windows(corpus, std::span(order).subspan(off, n), opt.window);
            double loss_val = 0.0;
            {
                Graph tape;
                Tensor loss = loss_fn(batch);
                loss_val = loss.item();
                tape.backward(loss);
            }
            if (!std::isfinite(loss_val)) {
                throw std::runtime_error("training diverged: non-finite loss at epoch " +
                                         std::to_string(epoch));
            }
            adam.step();
            adam.zero_grad();
            total += loss_val;
            ++steps;
        }
        curve.push_back(total / static_cast<double>(steps));
        if (on_epoch) on_epoch(epoch, curve.back());
    }
    return curve;
}

std::vector<double> train_local(DenseLm& model, const Corpus& corpus, const TrainOptions& opt) {
    if (corpus.vocab_size != model.config().vocab_size) {
        throw std::invalid_argument("corpus vocabulary does not match model");
    }
    return run_training(
        model.params(), corpus, opt,
        [&](const TokenBatch& b) { return lm_loss_ce(model.forward(b).logits, b); });
}

}  // namespace fedmoe
