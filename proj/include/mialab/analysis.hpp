#pragma once

#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mialab/attacks.hpp"

namespace mialab {

// Member set split by the calibrated attack's decisions against the teacher:
// vulnerable = flagged as member, nonvulnerable = the rest. Union is the full
// member set, intersection empty.
struct Partition {
    std::string attack_method;
    std::vector<std::string> vulnerable_ids;
    std::vector<std::string> nonvulnerable_ids;

    void validate_against(std::span<const std::string> member_ids) const;
    bool is_vulnerable(const std::string& id) const;
};

Partition partition_members(const CalibratedAttack& attack,
                            const std::vector<AttackScore>& member_scores);

void save_partition(const Partition& p, const std::string& path);
Partition load_partition(const std::string& path);

// Teacher-vs-ground-truth alignment for one stratum: mean (over sequences) of
// the per-position probability assigned to the realized next token, and the
// matching per-token divergence from the one-hot target, which reduces to
// -ln p(y) per position.
struct AlignmentStats {
    double mean_gt_prob = 0.0;
    double mean_kl_to_gt = 0.0;
    int n_sequences = 0;
};

struct AlignmentReport {
    std::optional<AlignmentStats> vulnerable;
    std::optional<AlignmentStats> nonvulnerable;
};

AlignmentReport alignment_diagnostics(const ModelD& teacher, const std::vector<PreparedDoc>& member_docs,
                                      const Partition& partition);

// exp of the token-weighted mean NLL across all scored tokens of all sequences
double perplexity(const ModelD& model, const std::vector<PreparedDoc>& docs);

// Exact one-sided binomial tail at p = 1/2: P(X >= successes | n fair coins).
// Direct binomial coefficients up to n = 60, log-domain beyond.
struct SignTestResult {
    int n_nonties = 0;
    int n_successes = 0;
    double p_value = 1.0;
};

SignTestResult sign_test(int n_nonties, int n_successes);

double binomial_pmf_half(int n, int k);  // C(n,k) / 2^n

// Mean over positions i of (1 - variant[i] / baseline[i]). Positive means the
// variant reduced attack accuracy; negative means it increased it.
double relative_reduction(std::span<const double> baseline, std::span<const double> variant);

// Per-attack comparison of two accuracy grids; lower accuracy wins (privacy).
struct PairComparison {
    struct Cell {
        std::string attack;
        double first = 0.0, second = 0.0;
        int winner = 0;  // -1 first lower, +1 second lower, 0 tie
    };
    std::vector<Cell> cells;
    int first_lower = 0;
    int second_lower = 0;
    int ties = 0;
};

PairComparison compare_pair(const std::vector<std::pair<std::string, double>>& first,
                            const std::vector<std::pair<std::string, double>>& second);

// Accuracy restricted to a single-class subset: the fraction of decisions
// that are correct for that class.
double subset_accuracy(const std::vector<int>& decisions, bool subset_is_member);

// ---- report tables ----

struct TableData {
    std::string title;
    std::string row_header;
    std::vector<std::string> col_names;
    std::vector<std::pair<std::string, std::vector<double>>> rows;
};

void write_table_csv(const TableData& t, const std::string& path);
std::string table_markdown(const TableData& t, int precision = 3);

// ---- reference-statistics self-check ----
// Feeds the bundled accuracy grids from the reference evaluation through
// relative_reduction, sign_test and compare_pair and checks the reported
// aggregate statistics. Pure table math; no models or network involved.

struct SelfCheckLine {
    std::string name;
    bool pass = false;
    double got = 0.0;
    double want = 0.0;
    double tol = 0.0;
    std::string note;
};

std::vector<SelfCheckLine> reference_statistics_selfcheck();

}  // namespace mialab
