#include "mialab/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <unordered_set>

#include "mialab/rng.hpp"

namespace mialab {

const char* optimizer_name(Optimizer o) { return o == Optimizer::adam ? "adam" : "sgd"; }

Optimizer optimizer_from_name(const std::string& s) {
    if (s == "adam") return Optimizer::adam;
    if (s == "sgd") return Optimizer::sgd;
    throw ValidationError("unknown optimizer: " + s);
}

const char* data_selection_name(DataSelection d) {
    return d == DataSelection::full ? "full" : "nonvulnerable";
}

DataSelection data_selection_from_name(const std::string& s) {
    if (s == "full") return DataSelection::full;
    if (s == "nonvulnerable") return DataSelection::nonvulnerable;
    throw ValidationError("unknown data selection: " + s);
}

void TrainConfig::validate() const {
    if (epochs < 1) throw ValidationError("train config: epochs must be >= 1");
    if (batch_size < 1) throw ValidationError("train config: batch_size must be >= 1");
    if (!(learning_rate > 0.0)) throw ValidationError("train config: learning_rate must be > 0");
    if (grad_clip && !(*grad_clip > 0.0)) throw ValidationError("train config: grad_clip must be > 0");
}

void DistillConfig::validate() const {
    if (lambda < 0.0) throw ValidationError("distill config: lambda must be >= 0");
    if (data_selection == DataSelection::nonvulnerable && !partition)
        throw ValidationError("distill config: nonvulnerable selection requires a partition");
    train.validate();
}

// ---- value-level losses ----

double ce_loss(const TensorD& logprob_rows, std::span<const int> targets) {
    if (targets.empty()) throw ValidationError("ce_loss: empty target set");
    if (logprob_rows.ndim() != 2 || logprob_rows.shape[0] != static_cast<int64_t>(targets.size()))
        throw ValidationError("ce_loss: one target per row required");
    double s = 0.0;
    for (size_t i = 0; i < targets.size(); ++i) {
        const int t = targets[i];
        if (t < 0 || t >= logprob_rows.shape[1]) throw ValidationError("ce_loss: target out of range");
        s -= logprob_rows.at(static_cast<int64_t>(i), t);
    }
    return s / static_cast<double>(targets.size());
}

double kl_divergence(const TensorD& p_rows, const TensorD& q_rows) {
    if (p_rows.shape != q_rows.shape || p_rows.ndim() != 2)
        throw ValidationError("kl_divergence: rows must be 2D and same shape");
    const int64_t n = p_rows.shape[0], v = p_rows.shape[1];
    double total = 0.0;
    for (int64_t i = 0; i < n; ++i) {
        for (int64_t z = 0; z < v; ++z) {
            const double p = p_rows.at(i, z);
            if (p <= 0.0) continue;
            const double q = q_rows.at(i, z);
            if (q <= 0.0)
                throw ValidationError("kl_divergence: q is zero where p > 0 (divergence infinite)");
            total += p * (std::log(p) - std::log(q));
        }
    }
    return total / static_cast<double>(n);
}

double distill_loss_value(const TensorD& student_logprob_rows, const TensorD& teacher_prob_rows,
                          std::span<const int> targets, double lambda) {
    if (lambda < 0.0) throw ValidationError("distill loss: lambda must be >= 0");
    const double ce = ce_loss(student_logprob_rows, targets);
    if (lambda == 0.0) return ce;
    TensorD student_probs = student_logprob_rows;
    for (auto& v : student_probs.data) v = std::exp(v);
    return ce + lambda * kl_divergence(teacher_prob_rows, student_probs);
}

// ---- trainers ----

namespace {

struct OptimizerState {
    std::vector<std::vector<double>> m, v;
    int64_t step = 0;

    explicit OptimizerState(const std::vector<TensorF*>& params) {
        for (auto* p : params) {
            m.emplace_back(p->data.size(), 0.0);
            v.emplace_back(p->data.size(), 0.0);
        }
    }
};

constexpr double kAdamBeta1 = 0.9;
constexpr double kAdamBeta2 = 0.999;
constexpr double kAdamEps = 1e-8;

void apply_update(std::vector<TensorF*>& params, std::vector<TensorF>& grads, OptimizerState& st,
                  const TrainConfig& cfg) {
    if (cfg.grad_clip) {
        double sq = 0.0;
        for (const auto& g : grads)
            for (float v : g.data) sq += static_cast<double>(v) * static_cast<double>(v);
        const double norm = std::sqrt(sq);
        if (norm > *cfg.grad_clip) {
            const double s = *cfg.grad_clip / norm;
            for (auto& g : grads)
                for (float& v : g.data) v = static_cast<float>(v * s);
        }
    }

    st.step += 1;
    if (cfg.optimizer == Optimizer::sgd) {
        for (size_t i = 0; i < params.size(); ++i)
            for (size_t j = 0; j < params[i]->data.size(); ++j)
                params[i]->data[j] -= static_cast<float>(cfg.learning_rate * grads[i].data[j]);
        return;
    }

    const double bc1 = 1.0 - std::pow(kAdamBeta1, static_cast<double>(st.step));
    const double bc2 = 1.0 - std::pow(kAdamBeta2, static_cast<double>(st.step));
    for (size_t i = 0; i < params.size(); ++i) {
        auto& m = st.m[i];
        auto& v = st.v[i];
        auto& p = params[i]->data;
        const auto& g = grads[i].data;
        for (size_t j = 0; j < p.size(); ++j) {
            const double gj = g[j];
            m[j] = kAdamBeta1 * m[j] + (1.0 - kAdamBeta1) * gj;
            v[j] = kAdamBeta2 * v[j] + (1.0 - kAdamBeta2) * gj * gj;
            const double mhat = m[j] / bc1;
            const double vhat = v[j] / bc2;
            p[j] -= static_cast<float>(cfg.learning_rate * mhat / (std::sqrt(vhat) + kAdamEps));
        }
    }
}

// Teacher probability rows for the scored positions of one sequence.
TensorF teacher_prob_rows(const ModelF& teacher, std::span<const int> tokens) {
    GraphF g;
    auto logits = teacher.build_logits(g, tokens, /*trainable=*/false);
    auto probs = g.softmax(logits, 1);
    const TensorF& all = g.value(probs);
    const int64_t n = static_cast<int64_t>(tokens.size()) - 1;
    TensorF out = TensorF::zeros({n, all.shape[1]});
    std::copy(all.data.begin(), all.data.begin() + static_cast<long>(n * all.shape[1]), out.data.begin());
    return out;
}

TrainStats run_training(ModelF& model, const ModelF* teacher, double lambda,
                        const std::vector<TokenSeq>& seqs, const TrainConfig& cfg) {
    cfg.validate();
    if (seqs.empty()) throw ValidationError("training: empty sequence set");
    for (const auto& s : seqs)
        if (s.tokens.size() < 2) throw ValidationError("training: sequence too short: " + s.source_id);

    const auto t0 = std::chrono::steady_clock::now();
    auto params = model.parameters();
    OptimizerState opt(params);

    TrainStats stats;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::vector<size_t> order(seqs.size());
        for (size_t i = 0; i < order.size(); ++i) order[i] = i;
        Rng rng(mix_seed(cfg.seed, "epoch-" + std::to_string(epoch)));
        rng.shuffle(order);

        double loss_sum = 0.0;
        double nll_sum = 0.0;
        int64_t token_count = 0;
        std::vector<std::vector<std::string>> epoch_batches;

        for (size_t b0 = 0; b0 < order.size(); b0 += static_cast<size_t>(cfg.batch_size)) {
            const size_t b1 = std::min(order.size(), b0 + static_cast<size_t>(cfg.batch_size));
            const double inv_batch = 1.0 / static_cast<double>(b1 - b0);

            std::vector<TensorF> grad_acc;
            grad_acc.reserve(params.size());
            for (auto* p : params) grad_acc.push_back(TensorF::zeros(p->shape));

            std::vector<std::string> batch_ids;
            for (size_t bi = b0; bi < b1; ++bi) {
                const TokenSeq& seq = seqs[order[bi]];
                batch_ids.push_back(seq.source_id);
                const int len = static_cast<int>(seq.tokens.size());
                std::vector<int> targets(seq.tokens.begin() + 1, seq.tokens.end());

                GraphF g;
                std::vector<GraphF::NodeId> pids;
                auto logits = model.build_logits(g, seq.tokens, /*trainable=*/true, &pids);
                auto logprobs = g.log_softmax(logits, 1);
                auto scored = g.slice_rows(logprobs, 0, len - 1);

                auto ce = ce_loss_node(g, scored, targets);
                GraphF::NodeId loss = ce;
                if (teacher && lambda > 0.0) {
                    auto kl = kl_to_teacher_node(g, scored, teacher_prob_rows(*teacher, seq.tokens));
                    loss = g.add(ce, g.scale(kl, lambda));
                }

                const double loss_v = g.value(loss).data[0];
                if (!std::isfinite(loss_v))
                    throw RuntimeFailure("training diverged (non-finite loss) at epoch " +
                                         std::to_string(epoch) + ", sequence " + seq.source_id);
                loss_sum += loss_v;
                nll_sum += static_cast<double>(g.value(ce).data[0]) * static_cast<double>(len - 1);
                token_count += len - 1;

                g.backward(loss);
                for (size_t i = 0; i < params.size(); ++i) {
                    const TensorF& gi = g.grad(pids[i]);
                    for (size_t j = 0; j < gi.data.size(); ++j)
                        grad_acc[i].data[j] += static_cast<float>(gi.data[j] * inv_batch);
                }
            }

            apply_update(params, grad_acc, opt, cfg);
            epoch_batches.push_back(std::move(batch_ids));
        }

        EpochStats es;
        es.mean_seq_loss = loss_sum / static_cast<double>(seqs.size());
        es.perplexity = std::exp(nll_sum / static_cast<double>(token_count));
        stats.epochs.push_back(es);
        stats.batch_ids.push_back(std::move(epoch_batches));
    }

    stats.wall_ms =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    return stats;
}

}  // namespace

TrainStats fit_lm(ModelF& model, const std::vector<TokenSeq>& seqs, const TrainConfig& cfg) {
    return run_training(model, nullptr, 0.0, seqs, cfg);
}

TrainStats fit_distilled(ModelF& student, const ModelF& teacher, const std::vector<TokenSeq>& seqs,
                         double lambda, const TrainConfig& cfg) {
    if (lambda < 0.0) throw ValidationError("distillation: lambda must be >= 0");
    if (teacher.config().vocab != student.config().vocab ||
        teacher.config().max_seq < student.config().max_seq)
        throw ValidationError("distillation: teacher/student tokenizer contract mismatch");
    return run_training(student, &teacher, lambda, seqs, cfg);
}

TrainRun train_teacher(const Corpus& corpus, const ModelConfig& mc, const TrainConfig& tc) {
    mc.validate();
    tc.validate();
    const auto members = corpus.members();
    if (members.empty()) throw ValidationError("train_teacher: corpus has no member documents");

    std::vector<TokenSeq> seqs;
    std::vector<std::string> ids;
    for (const auto* d : members) {
        seqs.push_back(tokenize(*d, mc.max_seq));
        ids.push_back(d->id);
    }

    TrainRun run{ModelF(mc), {}, std::move(ids)};
    run.model.init_parameters();
    run.stats = fit_lm(run.model, seqs, tc);
    return run;
}

TrainRun distill_student(const ModelF& teacher, const ModelConfig& student_cfg, const DistillConfig& dc,
                         const Corpus& corpus) {
    student_cfg.validate();
    dc.validate();
    const auto members = corpus.members();
    if (members.empty()) throw ValidationError("distill_student: corpus has no member documents");

    std::vector<const Document*> selected;
    if (dc.data_selection == DataSelection::full) {
        selected.assign(members.begin(), members.end());
    } else {
        std::vector<std::string> member_ids;
        for (const auto* d : members) member_ids.push_back(d->id);
        dc.partition->validate_against(member_ids);
        std::unordered_set<std::string> keep(dc.partition->nonvulnerable_ids.begin(),
                                             dc.partition->nonvulnerable_ids.end());
        for (const auto* d : members)
            if (keep.count(d->id)) selected.push_back(d);
        if (selected.empty())
            throw ValidationError(
                "distill_student: selected subset is empty (partition marks every member vulnerable)");
    }

    std::vector<TokenSeq> seqs;
    std::vector<std::string> ids;
    for (const auto* d : selected) {
        seqs.push_back(tokenize(*d, student_cfg.max_seq));
        ids.push_back(d->id);
    }

    TrainRun run{ModelF(student_cfg), {}, std::move(ids)};
    run.model.init_parameters();
    run.stats = fit_distilled(run.model, teacher, seqs, dc.lambda, dc.train);
    return run;
}

}  // namespace mialab
