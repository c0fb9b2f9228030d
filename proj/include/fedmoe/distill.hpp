// SPDX-License-Identifier: Apache-2.0
//
// Phase II: cross-architecture distillation from a proxy teacher into a
// backbone student. Teacher and student are split into J representation
// stages; a trainable attention module blends the student's multi-stage
// features into teacher-shaped views so features can be matched directly even
// when the two architectures disagree in depth and width. The aligner is a
// training-time device only and is discarded afterwards.

#pragma once

#include <cstdint>
#include <vector>

#include "fedmoe/model.hpp"

namespace fedmoe {

// Contiguous even split of each model's layers into n_stages stages; remainder
// layers go to the later stages. stage_end[j] is the 1-based index of the last
// layer of stage j, so the stage feature is the hidden state after that layer.
struct StagePlan {
    int64_t n_stages = 0;
    std::vector<int64_t> teacher_stage_end;
    std::vector<int64_t> student_stage_end;
};

StagePlan plan_stages(int64_t teacher_layers, int64_t student_layers, int64_t n_stages);

struct AlignerConfig {
    int64_t total_queries = 8;  // query positions across all stages; divisible by n_stages
    int64_t width = 32;         // attention channel dimension
    int64_t heads = 2;
    // Literal variant: single head scaled by 1/sqrt(width) instead of the
    // per-head 1/sqrt(width/heads).
    bool literal_attention = false;
};

class FeatureAligner {
public:
    FeatureAligner() = default;
    FeatureAligner(const AlignerConfig& config, const StagePlan& plan, int64_t student_width,
                   int64_t teacher_width, uint64_t seed);

    // stage_features: J tensors of shape (B, T, student_width) with T >= P_q/J.
    // Returns J tensors of shape (B, P_q/J, teacher_width): pooled + projected
    // per stage, concatenated, blended by self-attention, split back and
    // projected to the teacher's feature width.
    std::vector<Tensor> forward(const std::vector<Tensor>& stage_features) const;

    std::vector<Tensor> params() const;
    const AlignerConfig& config() const { return cfg_; }
    int64_t queries_per_stage() const { return cfg_.total_queries / n_stages_; }

    std::vector<Tensor> in_proj;   // per stage: student_width x width
    Tensor wq, wk, wv;             // width x width
    std::vector<Tensor> out_proj;  // per stage: width x teacher_width

private:
    AlignerConfig cfg_;
    int64_t n_stages_ = 0;
};

// Pools each teacher stage feature (B, T, W) to (B, positions, W) on the same
// segment grid the aligner uses.
std::vector<Tensor> pool_stage_features(const std::vector<Tensor>& stage_features,
                                        int64_t positions);

// Sum over stages of the mean-squared error between teacher and blended
// student stage features.
Tensor feature_match_loss(const std::vector<Tensor>& teacher_stages,
                          const std::vector<Tensor>& blended_stages);

// Mean over positions of KL(softmax(teacher/tau) || softmax(student/tau)),
// scaled by tau^2. The teacher side carries no gradient.
Tensor kd_kl_loss(const Tensor& teacher_logits, const Tensor& student_logits, double tau);

struct DistillConfig {
    double alpha = 1.0;  // feature-matching weight
    double beta = 1.0;   // logit-distillation weight
    double tau = 2.0;    // distillation temperature
    int64_t n_stages = 2;
    AlignerConfig aligner;
    TrainOptions train;  // epochs = T^d
};

struct KdLossParts {
    double ce = 0.0;
    double fm = 0.0;
    double kl = 0.0;
    double total = 0.0;
};

// Composite loss for one batch: CE + alpha*FM + beta*KL. Terms with an exactly
// zero weight are kept out of the graph entirely (their values are still
// reported). The teacher runs detached.
Tensor kd_loss(const TokenBatch& batch, const DenseLm& teacher, const DenseLm& student,
               const FeatureAligner& aligner, const StagePlan& plan, const DistillConfig& config,
               KdLossParts* parts = nullptr);

struct DistillResult {
    DenseLm student;
    std::vector<KdLossParts> curve;  // one entry per epoch (means over steps)
    StagePlan plan;
};

// Trains a copy of student_init (and a fresh aligner) against the frozen
// teacher on the public corpus. Deterministic given config.train.seed.
DistillResult distill(const DenseLm& teacher, const DenseLm& student_init,
                      const Corpus& public_corpus, const DistillConfig& config);

}  // namespace fedmoe
