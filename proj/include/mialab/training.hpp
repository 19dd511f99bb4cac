#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mialab/analysis.hpp"
#include "mialab/corpus.hpp"
#include "mialab/model.hpp"

namespace mialab {

enum class Optimizer { adam, sgd };

const char* optimizer_name(Optimizer o);
Optimizer optimizer_from_name(const std::string& s);

struct TrainConfig {
    int epochs = 30;
    int batch_size = 8;
    double learning_rate = 3e-4;
    uint64_t seed = 0;
    Optimizer optimizer = Optimizer::adam;
    std::optional<double> grad_clip = 1.0;  // global L2 norm

    void validate() const;
};

enum class DataSelection { full, nonvulnerable };

const char* data_selection_name(DataSelection d);
DataSelection data_selection_from_name(const std::string& s);

// Mixed-supervision objective: cross-entropy on ground truth plus
// lambda * KL(teacher || student), with the teacher's rows held constant.
struct DistillConfig {
    double lambda = 1.0;
    DataSelection data_selection = DataSelection::full;
    std::optional<Partition> partition;  // required for nonvulnerable selection
    TrainConfig train;

    void validate() const;
};

// ---- value-level losses (64-bit) ----

// mean over positions of -log p(target); rows are log-probabilities
double ce_loss(const TensorD& logprob_rows, std::span<const int> targets);

// mean over rows of sum_z p(z) (ln p(z) - ln q(z)); rows are probabilities.
// A zero q where p > 0 is an error, not infinity.
double kl_divergence(const TensorD& p_rows, const TensorD& q_rows);

// ce_loss + lambda * KL(teacher || student); student rows are log-probs,
// teacher rows probabilities.
double distill_loss_value(const TensorD& student_logprob_rows, const TensorD& teacher_prob_rows,
                          std::span<const int> targets, double lambda);

// ---- graph builders ----

template <typename T>
typename Graph<T>::NodeId ce_loss_node(Graph<T>& g, typename Graph<T>::NodeId logprob_rows,
                                       const std::vector<int>& targets) {
    if (targets.empty()) throw ValidationError("ce_loss: empty target set");
    return g.scale(g.mean(g.take_per_row(logprob_rows, targets)), -1.0);
}

// mean-over-rows KL(pT || pS) with pT constant. Expanding the divergence
// leaves a constant teacher entropy term plus -mean(sum(pT * log pS)).
template <typename T>
typename Graph<T>::NodeId kl_to_teacher_node(Graph<T>& g, typename Graph<T>::NodeId student_logprob_rows,
                                             const Tensor<T>& teacher_prob_rows) {
    const auto& s = g.value(student_logprob_rows);
    if (s.shape != teacher_prob_rows.shape)
        throw ValidationError("kl_to_teacher: teacher/student row shape mismatch");
    const int64_t n_rows = teacher_prob_rows.shape[0];
    double teacher_entropy_term = 0.0;  // (1/n) sum p ln p, accumulated in 64-bit
    for (T pv : teacher_prob_rows.data) {
        const double p = static_cast<double>(pv);
        if (p > 0.0) teacher_entropy_term += p * std::log(p);
    }
    teacher_entropy_term /= static_cast<double>(n_rows);

    auto cross = g.sum(g.mul(g.constant(teacher_prob_rows), student_logprob_rows));
    return g.add_scalar(g.scale(cross, -1.0 / static_cast<double>(n_rows)), teacher_entropy_term);
}

template <typename T>
typename Graph<T>::NodeId distill_loss_node(Graph<T>& g, typename Graph<T>::NodeId student_logprob_rows,
                                            const Tensor<T>& teacher_prob_rows,
                                            const std::vector<int>& targets, double lambda) {
    auto ce = ce_loss_node(g, student_logprob_rows, targets);
    if (lambda == 0.0) return ce;
    auto kl = kl_to_teacher_node(g, student_logprob_rows, teacher_prob_rows);
    return g.add(ce, g.scale(kl, lambda));
}

// ---- trainers ----

struct EpochStats {
    double mean_seq_loss = 0.0;  // objective value, sequence-averaged
    double perplexity = 0.0;     // token-weighted, from the CE component
};

struct TrainStats {
    std::vector<EpochStats> epochs;
    // per epoch, per batch: the sequence ids trained on (audit trail)
    std::vector<std::vector<std::vector<std::string>>> batch_ids;
    double wall_ms = 0.0;
};

// Ground-truth-only training (the teacher objective).
TrainStats fit_lm(ModelF& model, const std::vector<TokenSeq>& seqs, const TrainConfig& cfg);

// Mixed-supervision distillation on the given sequences; the teacher is
// frozen and its rows are recomputed per batch.
TrainStats fit_distilled(ModelF& student, const ModelF& teacher, const std::vector<TokenSeq>& seqs,
                         double lambda, const TrainConfig& cfg);

// ---- corpus-level operations ----

struct TrainRun {
    ModelF model;
    TrainStats stats;
    std::vector<std::string> selected_ids;
};

TrainRun train_teacher(const Corpus& corpus, const ModelConfig& mc, const TrainConfig& tc);

TrainRun distill_student(const ModelF& teacher, const ModelConfig& student_cfg, const DistillConfig& dc,
                         const Corpus& corpus);

}  // namespace mialab
