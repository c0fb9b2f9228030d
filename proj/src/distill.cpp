// SPDX-License-Identifier: Apache-2.0

#include "fedmoe/distill.hpp"

#include <cmath>
#include <stdexcept>

#include "fedmoe/rng.hpp"

namespace fedmoe {

namespace {

constexpr double kInitStd = 0.02;

// hidden states at the stage boundaries defined by stage_end (1-based layers)
std::vector<Tensor> stage_features(const LmOutput& out, const std::vector<int64_t>& stage_end) {
    std::vector<Tensor> feats;
    feats.reserve(stage_end.size());
    for (int64_t end : stage_end) feats.push_back(out.hidden.at(end - 1));
    return feats;
}

}  // namespace

StagePlan plan_stages(int64_t teacher_layers, int64_t student_layers, int64_t n_stages) {
    if (n_stages < 1 || n_stages > std::min(teacher_layers, student_layers)) {
        throw std::invalid_argument("stage count must satisfy 1 <= J <= min(layer counts)");
    }
    auto ends = [n_stages](int64_t layers) {
        // sizes floor(L/J), the last L mod J stages take one extra layer
        std::vector<int64_t> out;
        const int64_t base = layers / n_stages;
        const int64_t extra = layers % n_stages;
        int64_t end = 0;
        for (int64_t j = 0; j < n_stages; ++j) {
            end += base + (j >= n_stages - extra ? 1 : 0);
            out.push_back(end);
        }
        return out;
    };
    StagePlan plan;
    plan.n_stages = n_stages;
    plan.teacher_stage_end = ends(teacher_layers);
    plan.student_stage_end = ends(student_layers);
    return plan;
}

FeatureAligner::FeatureAligner(const AlignerConfig& config, const StagePlan& plan,
                               int64_t student_width, int64_t teacher_width, uint64_t seed)
    : cfg_(config), n_stages_(plan.n_stages) {
    if (cfg_.total_queries % n_stages_ != 0) {
        throw std::invalid_argument("total_queries must be divisible by the stage count");
    }
    const int64_t heads = cfg_.literal_attention ? 1 : cfg_.heads;
    if (cfg_.width % heads != 0) {
        throw std::invalid_argument("aligner width must be divisible by heads");
    }
    Rng rng(seed);
    for (int64_t j = 0; j < n_stages_; ++j) {
        in_proj.push_back(Tensor::randn({student_width, cfg_.width}, rng, kInitStd, true));
    }
    wq = Tensor::randn({cfg_.width, cfg_.width}, rng, kInitStd, true);
    wk = Tensor::randn({cfg_.width, cfg_.width}, rng, kInitStd, true);
    wv = Tensor::randn({cfg_.width, cfg_.width}, rng, kInitStd, true);
    for (int64_t j = 0; j < n_stages_; ++j) {
        out_proj.push_back(Tensor::randn({cfg_.width, teacher_width}, rng, kInitStd, true));
    }
}

std::vector<Tensor> FeatureAligner::forward(const std::vector<Tensor>& feats) const {
    if (static_cast<int64_t>(feats.size()) != n_stages_) {
        throw std::invalid_argument("aligner expects one feature per stage");
    }
    const int64_t q_per_stage = queries_per_stage();
    const int64_t b = feats[0].dim(0);
    for (const Tensor& f : feats) {
        if (f.dim(1) < q_per_stage) {
            throw std::invalid_argument("sequence shorter than queries per stage");
        }
    }

    // patchify: pool each stage along the sequence axis, project to the shared width
    std::vector<Tensor> projected;
    projected.reserve(n_stages_);
    for (int64_t j = 0; j < n_stages_; ++j) {
        Tensor pooled = segment_mean(feats[j], 1, q_per_stage);  // B x q x student_width
        projected.push_back(matmul(pooled, in_proj[j]));         // B x q x width
    }
    Tensor f = concat(projected, 1);  // B x P_q x width

    // self-attention blend across all stage positions
    const int64_t heads = cfg_.literal_attention ? 1 : cfg_.heads;
    const int64_t hd = cfg_.width / heads;
    const int64_t pq = cfg_.total_queries;
    const double scl =
        cfg_.literal_attention ? 1.0 / std::sqrt(static_cast<double>(cfg_.width))
                               : 1.0 / std::sqrt(static_cast<double>(hd));
    auto split_heads = [&](const Tensor& w) {
        Tensor y = matmul(f, w);
        y = reshape(y, {b, pq, heads, hd});
        return permute(y, {0, 2, 1, 3});  // B x H x P_q x hd
    };
    Tensor q = split_heads(wq);
    Tensor k = split_heads(wk);
    Tensor v = split_heads(wv);
    Tensor attn = softmax(scale(matmul(q, transpose(k)), scl), -1);
    Tensor blended = matmul(attn, v);  // B x H x P_q x hd
    blended = reshape(permute(blended, {0, 2, 1, 3}), {b, pq, cfg_.width});

    // split back into stages, project each to the teacher width
    std::vector<Tensor> out;
    out.reserve(n_stages_);
    for (int64_t j = 0; j < n_stages_; ++j) {
        Tensor part = slice(blended, 1, j * q_per_stage, q_per_stage);
        out.push_back(matmul(part, out_proj[j]));
    }
    return out;
}

std::vector<Tensor> FeatureAligner::params() const {
    std::vector<Tensor> out = in_proj;
    out.push_back(wq);
    out.push_back(wk);
    out.push_back(wv);
    out.insert(out.end(), out_proj.begin(), out_proj.end());
    return out;
}

std::vector<Tensor> pool_stage_features(const std::vector<Tensor>& stage_features,
                                        int64_t positions) {
    std::vector<Tensor> out;
    out.reserve(stage_features.size());
    for (const Tensor& f : stage_features) out.push_back(segment_mean(f, 1, positions));
    return out;
}

Tensor feature_match_loss(const std::vector<Tensor>& teacher_stages,
                          const std::vector<Tensor>& blended_stages) {
    if (teacher_stages.size() != blended_stages.size() || teacher_stages.empty()) {
        throw std::invalid_argument("feature_match_loss: stage count mismatch");
    }
    Tensor total;
    for (size_t j = 0; j < teacher_stages.size(); ++j) {
        Tensor term = mse(teacher_stages[j], blended_stages[j]);
        total = total.defined() ? add(total, term) : term;
    }
    return total;
}

Tensor kd_kl_loss(const Tensor& teacher_logits, const Tensor& student_logits, double tau) {
    if (teacher_logits.shape() != student_logits.shape()) {
        throw std::invalid_argument("kd_kl_loss: logits shape mismatch");
    }
    if (tau <= 0.0) throw std::invalid_argument("kd_kl_loss: tau must be positive");
    const int64_t v = teacher_logits.shape().back();
    const int64_t positions = teacher_logits.numel() / v;

    // teacher term: constants p = softmax(t/tau) and sum_v p*log(p)
    Tensor p = softmax(scale(teacher_logits.clone(), 1.0 / tau), -1);  // detached
    double plogp = 0.0;
    for (int64_t pos = 0; pos < positions; ++pos) {
        for (int64_t j = 0; j < v; ++j) {
            const double pv = p.data()[pos * v + j];
            plogp += pv * std::log(pv);
        }
    }
    plogp /= static_cast<double>(positions);

    // cross term: -mean_pos sum_v p * log_softmax(student/tau)
    Tensor logq = log_softmax(scale(student_logits, 1.0 / tau), -1);
    Tensor cross = scale(mean_all(mul(logq, p)), -static_cast<double>(v));
    // KL = sum p log p - sum p log q, per position, times tau^2
    return scale(add(cross, Tensor::scalar(plogp)), tau * tau);
}

Tensor kd_loss(const TokenBatch& batch, const DenseLm& teacher, const DenseLm& student,
               const FeatureAligner& aligner, const StagePlan& plan, const DistillConfig& config,
               KdLossParts* parts) {
    // The teacher runs under a throwaway tape and its outputs are copied, so
    // no gradient can reach teacher parameters no matter how the caller set
    // them up.
    LmOutput t_out;
    {
        Graph scratch;
        t_out = teacher.forward(batch, /*capture_hidden=*/true);
    }
    t_out.logits = t_out.logits.clone();
    for (Tensor& h : t_out.hidden) h = h.clone();

    LmOutput s_out = student.forward(batch, /*capture_hidden=*/true);

    Tensor ce = lm_loss_ce(s_out.logits, batch);
    Tensor total = ce;
    if (parts) {
        parts->ce = ce.item();
        parts->fm = 0.0;
        parts->kl = 0.0;
    }

    if (config.alpha != 0.0 || parts) {
        const auto teacher_pooled = pool_stage_features(
            stage_features(t_out, plan.teacher_stage_end), aligner.queries_per_stage());
        if (config.alpha != 0.0) {
            Tensor fm = feature_match_loss(
                teacher_pooled, aligner.forward(stage_features(s_out, plan.student_stage_end)));
            if (parts) parts->fm = fm.item();
            total = add(total, scale(fm, config.alpha));
        } else {
            // value for the log only; a scratch tape keeps it off the live graph
            Graph scratch;
            Tensor fm = feature_match_loss(
                teacher_pooled, aligner.forward(stage_features(s_out, plan.student_stage_end)));
            parts->fm = fm.item();
        }
    }

    if (config.beta != 0.0) {
        Tensor kl = kd_kl_loss(t_out.logits, s_out.logits, config.tau);
        if (parts) parts->kl = kl.item();
        total = add(total, scale(kl, config.beta));
    } else if (parts) {
        Graph scratch;
        Tensor kl = kd_kl_loss(t_out.logits, s_out.logits, config.tau);
        parts->kl = kl.item();
    }

    if (parts) parts->total = total.item();
    return total;
}

DistillResult distill(const DenseLm& teacher, const DenseLm& student_init,
                      const Corpus& public_corpus, const DistillConfig& config) {
    DistillResult res;
    res.student = student_init.clone();
    res.plan = plan_stages(teacher.config().n_layers, res.student.config().n_layers,
                           config.n_stages);
    FeatureAligner aligner(config.aligner, res.plan, res.student.config().d_model,
                           teacher.config().d_model, derive_seed(config.train.seed, "aligner"));

    std::vector<Tensor> params = res.student.params();
    const auto aligner_params = aligner.params();
    params.insert(params.end(), aligner_params.begin(), aligner_params.end());

    KdLossParts epoch_acc;
    int64_t steps = 0;
    auto loss_fn = [&](const TokenBatch& batch) {
        KdLossParts parts;
        Tensor loss = kd_loss(batch, teacher, res.student, aligner, res.plan, config, &parts);
        epoch_acc.ce += parts.ce;
        epoch_acc.fm += parts.fm;
        epoch_acc.kl += parts.kl;
        epoch_acc.total += parts.total;
        ++steps;
        return loss;
    };
    auto on_epoch = [&](int64_t, double) {
        KdLossParts mean;
        mean.ce = epoch_acc.ce / steps;
        mean.fm = epoch_acc.fm / steps;
        mean.kl = epoch_acc.kl / steps;
        mean.total = epoch_acc.total / steps;
        res.curve.push_back(mean);
        epoch_acc = {};
        steps = 0;
    };
    run_training(params, public_corpus, config.train, loss_fn, on_epoch);
    return res;
}

}  // namespace fedmoe
