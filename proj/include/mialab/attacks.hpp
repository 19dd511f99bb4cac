#pragma once

#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mialab/corpus.hpp"
#include "mialab/model.hpp"

namespace mialab {

enum class AttackMethod { recall, loss, zlib, mink, minkpp, ref };

const char* attack_method_name(AttackMethod m);
AttackMethod attack_method_from_name(const std::string& s);

enum class Orientation { higher_is_member, lower_is_member };

const char* orientation_name(Orientation o);
Orientation orientation_from_name(const std::string& s);
inline Orientation flipped(Orientation o) {
    return o == Orientation::higher_is_member ? Orientation::lower_is_member
                                              : Orientation::higher_is_member;
}

struct AttackConfig {
    AttackMethod method = AttackMethod::loss;
    std::optional<double> k;           // Min-K family: fraction in (0, 1]
    std::optional<int> prefix_docs;    // ReCaLL: non-member prefix length in documents
    std::optional<std::string> ref_model;  // reference-model checkpoint path

    void validate() const;
};

struct AttackScore {
    std::string example_id;
    AttackMethod method = AttackMethod::loss;
    double raw = 0.0;  // invariant: finite
    Orientation orientation = Orientation::higher_is_member;
};

struct MiaMetrics {
    double tpr = 0.0;
    double tnr = 0.0;
    double accuracy = 0.0;  // (tpr + tnr) / 2 exactly
};

struct CalibratedAttack {
    AttackConfig config;
    double tau = 0.0;  // may be +-infinity (interval sentinels)
    Orientation orientation = Orientation::higher_is_member;
    std::string calibration_note;
    MiaMetrics calibration_metrics;

    bool predicts_member(double raw) const {
        return orientation == Orientation::higher_is_member ? raw > tau : raw < tau;
    }
};

// ---- score math; pure 64-bit functions over per-token log-probabilities ----

double mean_of(std::span<const double> v);

// raw = mean token log-prob (= minus the mean NLL); higher is member
double score_loss_raw(std::span<const double> target_logprobs);

// mean of the n = max(1, ceil(k*T)) smallest log-probs. k = 1 reproduces
// score_loss_raw bit-for-bit.
double score_mink_raw(std::span<const double> target_logprobs, double k);

// Per-position z-score of the realized token's log-prob against the row's
// vocabulary mean/stddev of log-probs, then Min-K aggregation. Positions with
// sigma < 1e-12 (exact one-hot rows) contribute 0 and are counted.
struct MinkppScore {
    double raw = 0.0;
    int degenerate_positions = 0;
};
MinkppScore score_minkpp_raw(const SequenceLogProbs& lp, double k);

// raw = -(total NLL in nats) / compressed byte length
double score_zlib_raw(double total_nll_nats, size_t compressed_len);

// byte length of the text under zlib DEFLATE at maximum compression
size_t deflate_compressed_size(std::string_view text);

// raw = LL_conditional / LL_unconditional (means of token log-probs)
double score_recall_raw(double ll_conditional, double ll_unconditional);

// raw = mean log-prob under target minus mean log-prob under reference
double score_ref_raw(double ll_target, double ll_reference);

// ---- model-level scoring ----

struct PreparedDoc {
    std::string id;
    bool is_member = false;
    std::string text;
    std::vector<int> tokens;
};

PreparedDoc prepare_doc(const Document& d, int max_len);

AttackScore score_loss(const PreparedDoc& doc, const SequenceLogProbs& lp);
AttackScore score_zlib(const PreparedDoc& doc, const SequenceLogProbs& lp);
AttackScore score_mink(const PreparedDoc& doc, const SequenceLogProbs& lp, double k);
AttackScore score_minkpp(const PreparedDoc& doc, const SequenceLogProbs& lp, double k);
AttackScore score_ref(const PreparedDoc& doc, const SequenceLogProbs& target_lp,
                      const SequenceLogProbs& ref_lp);

// Prefix assembly for ReCaLL: concatenate pool documents (separated by
// newlines), keep the last `budget` bytes so the context nearest the target
// survives truncation. budget must be >= 1.
std::vector<int> build_recall_prefix(const std::vector<const Document*>& pool, int prefix_docs,
                                     int budget);

// Scores the target with and without the prefixed context. The prefix
// positions are context only (not scored).
AttackScore score_recall(const ModelD& model, const PreparedDoc& doc, const SequenceLogProbs& plain_lp,
                         std::span<const int> prefix_tokens);

// ---- calibration and metrics ----

MiaMetrics mia_metrics(const std::vector<int>& member_decisions,
                       const std::vector<int>& nonmember_decisions);

// ROC threshold selection. Candidate thresholds are midpoints between
// consecutive distinct raw scores plus +-infinity sentinels, tried under both
// orientations. Policy, in order: maximize accuracy; minimize
// |#predicted-member - #predicted-nonmember|; prefer the canonical (input)
// orientation; prefer smaller tau.
CalibratedAttack calibrate_threshold(const std::vector<AttackScore>& scores,
                                     const std::vector<bool>& is_member);

// ---- hyperparameter cross-validation ----

struct CvOutcome {
    double best_value = 0.0;
    std::vector<std::pair<double, double>> grid_mean_accuracy;  // (value, mean held-out A)
};

// For each grid value, scores_for(value) must return one raw score per
// labeled example. Stratified k-fold: calibrate on the training folds,
// evaluate accuracy on the held-out fold. Ties pick the smallest grid value.
CvOutcome cv_tune(const std::vector<double>& grid,
                  const std::function<std::vector<double>(double)>& scores_for,
                  const std::vector<bool>& labels, Orientation canonical, int folds, uint64_t seed);

std::vector<double> default_mink_grid();    // 0.05, 0.10, ..., 1.00
std::vector<int> default_prefix_grid();     // 1 .. 12

// ---- score table io ----

struct ScoreRow {
    std::string example_id;
    AttackMethod method;
    double raw;
    Orientation orientation;
    bool is_member;
};

void write_scores_csv(const std::string& path, const std::vector<AttackScore>& scores,
                      const std::vector<bool>& is_member);
std::vector<ScoreRow> read_scores_csv(const std::string& path);

std::string calibration_to_json(const CalibratedAttack& c);
CalibratedAttack calibration_from_json(const std::string& s);

}  // namespace mialab
