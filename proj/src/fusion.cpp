// SPDX-License-Identifier: Apache-2.0

#include "fedmoe/fusion.hpp"

#include <map>
#include <stdexcept>

#include "fedmoe/rng.hpp"
#include "fedmoe/sha256.hpp"

namespace fedmoe {

MoeLm merge_bases(const std::vector<DenseLm>& bases, int64_t top_k, uint64_t gate_seed,
                  MergeReport* report) {
    if (bases.empty()) throw std::invalid_argument("merge: no base models");
    const LmConfig backbone = bases[0].config();
    for (const DenseLm& b : bases) {
        if (!(b.config() == backbone)) {
            throw std::invalid_argument("merge: base models disagree on the backbone config");
        }
    }
    MoeConfig cfg;
    cfg.backbone = backbone;
    cfg.n_experts = static_cast<int64_t>(bases.size());
    cfg.top_k = top_k;
    cfg.validate();

    MoeLm moe(cfg, /*seed=*/0);
    Rng gate_rng(gate_seed);

    // name -> tensor per base, in the dense naming scheme
    std::vector<std::map<std::string, Tensor>> base_params(bases.size());
    for (size_t i = 0; i < bases.size(); ++i) {
        for (const auto& [name, t] : bases[i].named_params()) base_params[i][name] = t;
    }

    for (auto& [name, tensor] : moe.named_params()) {
        Tensor dst = tensor;
        TensorProvenance prov;
        prov.tensor = name;
        const size_t expert_pos = name.find(".experts.");
        if (expert_pos != std::string::npos) {
            // layers.<l>.experts.<e>.w_in -> base e's layers.<l>.ffn.w_in
            const size_t idx_start = expert_pos + 9;
            const size_t idx_end = name.find('.', idx_start);
            const int64_t e = std::stoll(name.substr(idx_start, idx_end - idx_start));
            const std::string dense_name =
                name.substr(0, expert_pos) + ".ffn" + name.substr(idx_end);
            const Tensor src = base_params.at(e).at(dense_name);
            dst.data() = src.data();  // bit-exact inherit
            prov.rule = "expert_inherit";
            prov.sources = {"base_" + std::to_string(e) + ":" + dense_name};
            prov.sha256 = Sha256::hex_of_doubles(dst.data());
        } else if (name.find(".gate") != std::string::npos) {
            for (double& x : dst.data()) x = gate_rng.normal() * 0.02;
            prov.rule = "fresh_gate";
        } else {
            // running mean m += (x - m)/(i+1) over bases in ascending index order
            auto& out = dst.data();
            out = base_params[0].at(name).data();
            for (size_t i = 1; i < bases.size(); ++i) {
                const auto& src = base_params[i].at(name).data();
                const double denom = static_cast<double>(i + 1);
                for (size_t j = 0; j < out.size(); ++j) out[j] += (src[j] - out[j]) / denom;
            }
            prov.rule = "mean_of_bases";
            for (size_t i = 0; i < bases.size(); ++i) {
                prov.sources.push_back("base_" + std::to_string(i) + ":" + name);
            }
        }
        if (report) report->entries.push_back(std::move(prov));
    }
    return moe;
}

TuneResult tune_global(MoeLm& model, const Corpus& public_corpus, const TrainOptions& opt) {
    if (public_corpus.empty()) throw std::invalid_argument("tune: empty public corpus");

    // freeze experts, fingerprint them
    std::vector<std::string> before;
    for (auto& [name, t] : model.expert_params()) {
        Tensor handle = t;
        handle.set_requires_grad(false);
        before.push_back(Sha256::hex_of_doubles(t.data()));
    }
    std::vector<Tensor> trainable;
    TuneResult res;
    for (auto& [name, t] : model.shared_params()) {
        Tensor handle = t;
        handle.set_requires_grad(true);
        trainable.push_back(handle);
        res.trainable_params += t.numel();
    }
    for (const auto& [name, t] : model.expert_params()) res.frozen_params += t.numel();

    res.epoch_loss = run_training(
        trainable, public_corpus, opt,
        [&](const TokenBatch& b) { return lm_loss_ce(model.forward(b).logits, b); });

    const auto experts = model.expert_params();
    for (size_t i = 0; i < experts.size(); ++i) {
        if (Sha256::hex_of_doubles(experts[i].tensor.data()) != before[i]) {
            throw std::runtime_error("tune: frozen expert tensor changed: " + experts[i].name);
        }
    }
    return res;
}

RoutingStats routing_stats(const MoeLm& model, const std::vector<Corpus>& domain_corpora,
                           int64_t window, int64_t batch_size) {
    RoutingStats stats;
    stats.n_experts = model.config().n_experts;
    stats.k = model.config().top_k;
    std::vector<int64_t> overall(stats.n_experts, 0);
    int64_t overall_slots = 0;
    for (const Corpus& corpus : domain_corpora) {
        std::vector<int64_t> counts(stats.n_experts, 0);
        int64_t slots = 0;
        for (const TokenBatch& batch : make_batches(corpus, window, batch_size)) {
            RoutingTrace trace;
            (void)model.forward(batch, false, &trace);
            for (int32_t e : trace.expert_ids) {
                ++counts[e];
                ++overall[e];
            }
            slots += static_cast<int64_t>(trace.expert_ids.size());
            overall_slots += static_cast<int64_t>(trace.expert_ids.size());
            stats.tokens += batch.batch * batch.seq_len;
        }
        std::vector<double> pct(stats.n_experts, 0.0);
        for (int64_t e = 0; e < stats.n_experts; ++e) {
            // percent of tokens that activated expert e (each token fires k slots)
            pct[e] = 100.0 * static_cast<double>(counts[e]) /
                     (static_cast<double>(slots) / static_cast<double>(stats.k));
        }
        stats.domain_expert_pct.push_back(std::move(pct));
    }
    stats.expert_pct.assign(stats.n_experts, 0.0);
    for (int64_t e = 0; e < stats.n_experts; ++e) {
        stats.expert_pct[e] = 100.0 * static_cast<double>(overall[e]) /
                              (static_cast<double>(overall_slots) / static_cast<double>(stats.k));
    }
    return stats;
}

}  // namespace fedmoe
