#pragma once

#include <string>
#include <vector>

#include "oscar/backbone/backbone.hpp"
#include "oscar/synthdata/synthdata.hpp"

namespace oscar {

// Weights and constants of the cross-modal alignment objective.
struct DistillWeights {
    Real lambda_kd = 1.0;
    Real lambda_attn = 1.0;
    Real temperature = 4.0;
    Real alpha_min = 1.0;
    Real alpha_max = 100.0;
    Real lambda_inv = 25.0;
    Real mu_var = 25.0;
    Real nu_cov = 1.0;
    std::vector<std::size_t> class_counts;  // positive count N_c per class
    std::size_t total = 0;                  // sample count N

    void validate() const;  // throws ConfigError
};

// clip((N - N_c)/N_c, alpha_min, alpha_max); N_c = 0 falls back to alpha_max
// with a warning on stderr (class absent from the training split).
Real class_weight(std::size_t c, const DistillWeights& w);

// Multi-label weighted BCE, positive terms scaled by class_weight. Batched:
// logits (B,C), labels (B,C) binary; mean over the batch of
// -(1/C)·sum_c [w_c·y·log σ(z) + (1-y)·log(1-σ(z))], stabilized via softplus.
Var task_loss(const Var& logits, const Tensor& labels, const DistillWeights& w);

// Soft-target distillation at temperature T: binary cross-entropy between
// σ(z_T/T) (constant) and σ(z_S/T), averaged over classes and batch.
Var logit_loss(const Var& z_S, const Var& z_T, Real temperature);

// Mean over aligned layers of KL(A_T ‖ A_S) between CLS→patch attention rows,
// with a 1e-8 floor inside the logs; teacher rows are treated as constants.
Var attn_loss(const FeatureBundle& student, const FeatureBundle& teacher,
              const std::vector<std::size_t>& layers);

// Mean over aligned layers of the squared distance between CLS tokens.
Var cls_loss(const FeatureBundle& student, const FeatureBundle& teacher,
             const std::vector<std::size_t>& layers);

// Invariance / variance / covariance regularization between embedding batches
// (B,d); the teacher branch contributes value but no gradient.
Var vicreg_loss(const Var& z_S, const Var& z_T, const DistillWeights& w);

struct LossTerms {
    Var total;
    Real task = 0, logit = 0, attn = 0, cls = 0, vicreg = 0;
};

// L_task + λ_kd·L_logit + λ_attn·(L_attn + L_cls) + L_VicReg, with the VICReg
// term computed on the deepest aligned layer's CLS tokens.
LossTerms total_student_loss(const FeatureBundle& student, const FeatureBundle& teacher,
                             const Tensor& labels, const DistillWeights& w,
                             const std::vector<std::size_t>& layers);

struct ClassificationMetrics {
    Real ap_macro = 0, ap_micro = 0, f1_macro = 0, f1_micro = 0;
};

// Average precision by rank-based precision-recall integration; F1 at 0.5.
// Classes with zero positives are excluded from macro AP (and noted on stderr).
ClassificationMetrics classification_metrics(const Tensor& probs, const Tensor& labels);

// Decoded in-memory dataset: every scene's preprocessed pair plus labels.
struct LoadedDataset {
    DatasetIndex idx;
    std::vector<PreprocessedPair> train, test;
    std::size_t num_classes = 0;
};
LoadedDataset load_all(const std::string& dir, bool verify = false);

// (B,3,H,W) stacks for a list of pairs; labels as (B,C) multi-hot.
Tensor stack_optical(const std::vector<const PreprocessedPair*>& pairs);
Tensor stack_sar(const std::vector<const PreprocessedPair*>& pairs);
Tensor stack_labels(const std::vector<const PreprocessedPair*>& pairs, std::size_t C);

// Positive-count statistics of a training split.
void fill_class_counts(const std::vector<PreprocessedPair>& pairs, std::size_t C,
                       DistillWeights& w);

struct TrainConfig {
    EncoderConfig encoder;
    std::size_t epochs = 8;
    std::size_t batch_size = 8;
    Real lr = 1e-3;
    std::size_t warmup_steps = 100;
    bool cosine = true;       // decay to zero over the full run
    bool augment = true;
    std::uint64_t seed = 1;
    std::string out_dir;      // checkpoint directory (required)
    std::string log_path;     // JSON-lines training log; empty = no log
};

struct TrainReport {
    Real best_val_ap_micro = 0;
    Real final_val_ap_micro = 0;
    std::size_t steps = 0;
    Real final_loss = 0;
    Real attn_kl_initial = 0;  // distillation only
    Real attn_kl_final = 0;
    std::string checkpoint_dir;
};

// Supervised fine-tuning of the optical teacher with task_loss only; persists
// the best-validation checkpoint. Non-finite loss aborts with NumericError.
TrainReport train_teacher(const LoadedDataset& data, const TrainConfig& cfg);

// Trains the SAR student against a frozen teacher with total_student_loss.
TrainReport distill_student(const LoadedDataset& data, const std::string& teacher_dir,
                            const DistillWeights& weights, const TrainConfig& cfg);

// Mean attention KL between a student and teacher over given pairs (eval mode).
Real mean_attention_kl(const Encoder& student, const Encoder& teacher,
                       const std::vector<PreprocessedPair>& pairs,
                       std::size_t batch_size = 8);

// Micro/macro metrics of an encoder on pairs, feeding SAR or optical inputs.
ClassificationMetrics eval_encoder(const Encoder& enc,
                                   const std::vector<PreprocessedPair>& pairs,
                                   bool use_sar, std::size_t batch_size = 8);

}  // namespace oscar
