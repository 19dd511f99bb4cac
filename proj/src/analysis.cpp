#include "mialab/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>
#include <unordered_set>

#include <nlohmann/json.hpp>

namespace mialab {

using nlohmann::json;

void Partition::validate_against(std::span<const std::string> member_ids) const {
    std::unordered_set<std::string> v(vulnerable_ids.begin(), vulnerable_ids.end());
    std::unordered_set<std::string> nv(nonvulnerable_ids.begin(), nonvulnerable_ids.end());
    if (v.size() != vulnerable_ids.size() || nv.size() != nonvulnerable_ids.size())
        throw ValidationError("partition: duplicate ids within a stratum");
    for (const auto& id : nv)
        if (v.count(id)) throw ValidationError("partition: id in both strata: " + id);
    if (v.size() + nv.size() != member_ids.size())
        throw ValidationError("partition: strata do not cover the member set");
    for (const auto& id : member_ids)
        if (!v.count(id) && !nv.count(id))
            throw ValidationError("partition: member id missing from both strata: " + id);
}

bool Partition::is_vulnerable(const std::string& id) const {
    return std::find(vulnerable_ids.begin(), vulnerable_ids.end(), id) != vulnerable_ids.end();
}

Partition partition_members(const CalibratedAttack& attack,
                            const std::vector<AttackScore>& member_scores) {
    Partition p;
    p.attack_method = attack_method_name(attack.config.method);
    for (const auto& s : member_scores) {
        if (attack.predicts_member(s.raw))
            p.vulnerable_ids.push_back(s.example_id);
        else
            p.nonvulnerable_ids.push_back(s.example_id);
    }
    std::sort(p.vulnerable_ids.begin(), p.vulnerable_ids.end());
    std::sort(p.nonvulnerable_ids.begin(), p.nonvulnerable_ids.end());
    return p;
}

void save_partition(const Partition& p, const std::string& path) {
    json j;
    j["attack"] = p.attack_method;
    j["vulnerable_ids"] = p.vulnerable_ids;
    j["nonvulnerable_ids"] = p.nonvulnerable_ids;
    write_file(path, j.dump(2) + "\n");
}

Partition load_partition(const std::string& path) {
    json j;
    try {
        j = json::parse(read_file(path));
    } catch (const json::exception& e) {
        throw ValidationError("partition parse error: " + std::string(e.what()));
    }
    Partition p;
    p.attack_method = j.at("attack").get<std::string>();
    p.vulnerable_ids = j.at("vulnerable_ids").get<std::vector<std::string>>();
    p.nonvulnerable_ids = j.at("nonvulnerable_ids").get<std::vector<std::string>>();
    return p;
}

AlignmentReport alignment_diagnostics(const ModelD& teacher, const std::vector<PreparedDoc>& member_docs,
                                      const Partition& partition) {
    struct Acc {
        double prob_sum = 0.0, kl_sum = 0.0;
        int n = 0;
    } acc_v, acc_nv;

    std::unordered_set<std::string> v(partition.vulnerable_ids.begin(), partition.vulnerable_ids.end());
    std::unordered_set<std::string> nv(partition.nonvulnerable_ids.begin(),
                                       partition.nonvulnerable_ids.end());

    for (const auto& doc : member_docs) {
        const bool in_v = v.count(doc.id) > 0;
        if (!in_v && !nv.count(doc.id))
            throw ValidationError("alignment: document not covered by partition: " + doc.id);
        const auto lp = forward_logprobs(teacher, doc.tokens);
        double prob = 0.0, kl = 0.0;
        for (double l : lp.target_logprob) {
            prob += std::exp(l);
            kl += -l;  // KL(one-hot || p) collapses to -ln p(y) per position
        }
        const double n = static_cast<double>(lp.n_scored());
        Acc& a = in_v ? acc_v : acc_nv;
        a.prob_sum += prob / n;
        a.kl_sum += kl / n;
        a.n += 1;
    }

    auto finish = [](const Acc& a) -> std::optional<AlignmentStats> {
        if (a.n == 0) return std::nullopt;
        return AlignmentStats{a.prob_sum / a.n, a.kl_sum / a.n, a.n};
    };
    return AlignmentReport{finish(acc_v), finish(acc_nv)};
}

double perplexity(const ModelD& model, const std::vector<PreparedDoc>& docs) {
    if (docs.empty()) throw ValidationError("perplexity: empty sequence set");
    double nll = 0.0;
    int64_t tokens = 0;
    for (const auto& doc : docs) {
        const auto lp = forward_logprobs(model, doc.tokens);
        nll += lp.total_nll();
        tokens += lp.n_scored();
    }
    return std::exp(nll / static_cast<double>(tokens));
}

double binomial_pmf_half(int n, int k) {
    if (n < 0 || k < 0 || k > n) throw ValidationError("binomial_pmf_half: bad arguments");
    if (n <= 60) {
        // multiplicative C(n,k); exact within double rounding at these sizes
        double c = 1.0;
        for (int i = 1; i <= k; ++i) c = c * static_cast<double>(n - k + i) / static_cast<double>(i);
        return c * std::pow(0.5, n);
    }
    const double lc = std::lgamma(n + 1.0) - std::lgamma(k + 1.0) - std::lgamma(n - k + 1.0);
    return std::exp(lc - static_cast<double>(n) * std::log(2.0));
}

SignTestResult sign_test(int n_nonties, int n_successes) {
    if (n_nonties < 1) throw ValidationError("sign_test: need at least one non-tied pair");
    if (n_successes < 0 || n_successes > n_nonties)
        throw ValidationError("sign_test: successes out of range");
    double p = 0.0;
    for (int i = n_successes; i <= n_nonties; ++i) p += binomial_pmf_half(n_nonties, i);
    return SignTestResult{n_nonties, n_successes, std::min(1.0, p)};
}

double relative_reduction(std::span<const double> baseline, std::span<const double> variant) {
    if (baseline.size() != variant.size() || baseline.empty())
        throw ValidationError("relative_reduction: vectors must be non-empty and equal length");
    double s = 0.0;
    for (size_t i = 0; i < baseline.size(); ++i) {
        if (baseline[i] <= 0.0) throw ValidationError("relative_reduction: baseline entries must be > 0");
        s += 1.0 - variant[i] / baseline[i];
    }
    return s / static_cast<double>(baseline.size());
}

PairComparison compare_pair(const std::vector<std::pair<std::string, double>>& first,
                            const std::vector<std::pair<std::string, double>>& second) {
    if (first.size() != second.size()) throw ValidationError("compare_pair: attack set mismatch");
    auto a = first, b = second;
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    PairComparison out;
    for (size_t i = 0; i < a.size(); ++i) {
        if (a[i].first != b[i].first) throw ValidationError("compare_pair: attack set mismatch");
        PairComparison::Cell c;
        c.attack = a[i].first;
        c.first = a[i].second;
        c.second = b[i].second;
        if (c.first < c.second) {
            c.winner = -1;
            out.first_lower += 1;
        } else if (c.second < c.first) {
            c.winner = 1;
            out.second_lower += 1;
        } else {
            c.winner = 0;
            out.ties += 1;
        }
        out.cells.push_back(std::move(c));
    }
    return out;
}

double subset_accuracy(const std::vector<int>& decisions, bool subset_is_member) {
    if (decisions.empty()) throw ValidationError("subset_accuracy: empty subset");
    int correct = 0;
    for (int d : decisions) correct += subset_is_member ? (d != 0) : (d == 0);
    return static_cast<double>(correct) / static_cast<double>(decisions.size());
}

// ---- report tables ----

void write_table_csv(const TableData& t, const std::string& path) {
    std::ostringstream out;
    out << t.row_header;
    for (const auto& c : t.col_names) out << ',' << c;
    out << '\n';
    char buf[64];
    for (const auto& [name, vals] : t.rows) {
        out << name;
        for (double v : vals) {
            std::snprintf(buf, sizeof(buf), "%.6f", v);
            out << ',' << buf;
        }
        out << '\n';
    }
    write_file(path, out.str());
}

std::string table_markdown(const TableData& t, int precision) {
    std::ostringstream out;
    if (!t.title.empty()) out << "**" << t.title << "**\n\n";
    out << "| " << t.row_header << " |";
    for (const auto& c : t.col_names) out << ' ' << c << " |";
    out << "\n|---|";
    for (size_t i = 0; i < t.col_names.size(); ++i) out << "---|";
    out << '\n';
    char buf[64];
    for (const auto& [name, vals] : t.rows) {
        out << "| " << name << " |";
        for (double v : vals) {
            std::snprintf(buf, sizeof(buf), "%.*f", precision, v);
            out << ' ' << buf << " |";
        }
        out << '\n';
    }
    return out.str();
}

// ---- reference-statistics self-check ----
// Accuracy grids transcribed from the reference evaluation this harness
// mirrors. Column order everywhere: recall, loss, zlib, mink, minkpp, ref.

namespace {

constexpr int kAttacks = 6;
const char* const kAttackCols[kAttacks] = {"recall", "loss", "zlib", "mink", "minkpp", "ref"};

// aggregate accuracy, teacher/student per pair
struct PairRow {
    const char* name;
    double teacher[kAttacks];
    double student[kAttacks];
};

const PairRow kAggregatePairs[6] = {
    {"pythia/distilpythia",
     {0.555, 0.442, 0.613, 0.316, 0.501, 0.648},
     {0.565, 0.444, 0.635, 0.414, 0.501, 0.579}},
    {"gemma27b/gemma2b",
     {0.667, 0.494, 0.556, 0.543, 0.537, 0.494},
     {0.667, 0.525, 0.481, 0.556, 0.451, 0.420}},
    {"gemma27b/gemma2b-distilled",
     {0.667, 0.494, 0.556, 0.543, 0.537, 0.494},
     {0.494, 0.537, 0.556, 0.580, 0.432, 0.426}},
    {"gemma27b/gemma9b",
     {0.667, 0.494, 0.556, 0.543, 0.537, 0.494},
     {0.704, 0.475, 0.531, 0.543, 0.481, 0.426}},
    {"llama8b/llama1b",
     {0.702, 0.303, 0.552, 0.300, 0.311, 0.441},
     {0.682, 0.311, 0.532, 0.309, 0.335, 0.349}},
    {"llama8b/llama3b",
     {0.702, 0.303, 0.552, 0.300, 0.311, 0.441},
     {0.806, 0.314, 0.538, 0.311, 0.205, 0.381}},
};

const PairRow kMemberSpecificPairs[6] = {
    {"pythia/distilpythia",
     {0.658, 0.631, 0.234, 0.444, 0.993, 0.620},
     {0.673, 0.630, 0.290, 0.683, 0.993, 0.636}},
    {"gemma27b/gemma2b",
     {0.615, 0.606, 0.156, 0.761, 0.688, 0.780},
     {0.670, 0.661, 0.037, 0.495, 0.404, 0.376}},
    {"gemma27b/gemma2b-distilled",
     {0.615, 0.606, 0.156, 0.761, 0.688, 0.780},
     {0.532, 0.716, 0.101, 0.376, 0.771, 0.358}},
    {"gemma27b/gemma9b",
     {0.615, 0.606, 0.156, 0.761, 0.688, 0.780},
     {0.459, 0.505, 0.165, 0.633, 0.450, 0.339}},
    {"llama8b/llama1b",
     {0.968, 0.451, 0.497, 0.447, 0.486, 0.563},
     {0.937, 0.513, 0.567, 0.508, 0.604, 0.563}},
    {"llama8b/llama3b",
     {0.968, 0.451, 0.497, 0.447, 0.486, 0.563},
     {0.974, 0.510, 0.515, 0.502, 0.320, 0.563}},
};

// data-selection study: non-vulnerable-only vs full-data student, stratified
const double kSelVulnNonvul[kAttacks] = {0.250, 0.205, 0.114, 0.364, 0.318, 0.114};
const double kSelVulnFull[kAttacks] = {1.000, 1.000, 0.977, 0.818, 0.864, 1.000};
const double kSelMemberNonvul[kAttacks] = {0.593, 0.556, 0.432, 0.630, 0.593, 0.519};
const double kSelMemberFull[kAttacks] = {1.000, 0.975, 0.556, 0.827, 0.889, 1.000};

// architecture study: member- and nonmember-side accuracy per variant
const double kArchMemberNone[kAttacks] = {1.000, 1.000, 0.802, 1.000, 0.951, 1.000};
const double kArchMemberBottleneck[kAttacks] = {0.802, 0.951, 0.667, 0.926, 0.901, 0.975};
const double kArchMemberNonorm[kAttacks] = {0.988, 1.000, 0.728, 0.926, 0.852, 1.000};
const double kArchMemberAll[kAttacks] = {1.000, 1.000, 0.667, 0.938, 0.914, 1.000};
const double kArchNonmemberNone[kAttacks] = {0.963, 0.988, 1.000, 0.926, 0.963, 1.000};
const double kArchNonmemberBottleneck[kAttacks] = {0.926, 0.975, 1.000, 0.951, 0.926, 1.000};
const double kArchNonmemberNonorm[kAttacks] = {1.000, 0.988, 1.000, 0.988, 0.988, 1.000};
const double kArchNonmemberAll[kAttacks] = {1.000, 0.988, 1.000, 0.963, 0.914, 1.000};

std::vector<std::pair<std::string, double>> named_row(const double (&vals)[kAttacks]) {
    std::vector<std::pair<std::string, double>> out;
    for (int i = 0; i < kAttacks; ++i) out.emplace_back(kAttackCols[i], vals[i]);
    return out;
}

SelfCheckLine check_value(std::string name, double got, double want, double tol, std::string note = "") {
    SelfCheckLine line;
    line.name = std::move(name);
    line.got = got;
    line.want = want;
    line.tol = tol;
    line.pass = std::abs(got - want) <= tol;
    line.note = std::move(note);
    return line;
}

}  // namespace

std::vector<SelfCheckLine> reference_statistics_selfcheck() {
    std::vector<SelfCheckLine> lines;
    const double pp = 0.0005;  // +-0.05 percentage points

    auto rr = [](const double (&b)[kAttacks], const double (&v)[kAttacks]) {
        return relative_reduction(std::span<const double>(b, kAttacks),
                                  std::span<const double>(v, kAttacks));
    };

    lines.push_back(check_value("reduction/selection/vulnerable", rr(kSelVulnFull, kSelVulnNonvul), 0.7502, pp));
    lines.push_back(check_value("reduction/selection/member", rr(kSelMemberFull, kSelMemberNonvul), 0.3520, pp));
    lines.push_back(check_value("reduction/architecture/member/bottleneck",
                                rr(kArchMemberNone, kArchMemberBottleneck), 0.0945, pp));
    lines.push_back(check_value("reduction/architecture/member/nonorm",
                                rr(kArchMemberNone, kArchMemberNonorm), 0.0471, pp));
    lines.push_back(check_value("reduction/architecture/member/all",
                                rr(kArchMemberNone, kArchMemberAll), 0.0449, pp));
    lines.push_back(check_value("reduction/architecture/nonmember/bottleneck",
                                rr(kArchNonmemberNone, kArchNonmemberBottleneck), 0.0105, pp));
    lines.push_back(check_value("reduction/architecture/nonmember/nonorm",
                                rr(kArchNonmemberNone, kArchNonmemberNonorm), -0.0219, pp));
    lines.push_back(check_value("reduction/architecture/nonmember/all",
                                rr(kArchNonmemberNone, kArchNonmemberAll), -0.0046, pp));

    // aggregate grid: teacher lower 15 / student lower 17 / ties 4,
    // sign test on teacher-higher count: n = 32, successes = 17 -> p = 0.430
    int t_lower = 0, s_lower = 0, ties = 0;
    for (const auto& pair : kAggregatePairs) {
        const auto cmp = compare_pair(named_row(pair.teacher), named_row(pair.student));
        t_lower += cmp.first_lower;
        s_lower += cmp.second_lower;
        ties += cmp.ties;
    }
    lines.push_back(check_value("counts/aggregate/teacher_lower", t_lower, 15, 0));
    lines.push_back(check_value("counts/aggregate/student_lower", s_lower, 17, 0));
    lines.push_back(check_value("counts/aggregate/ties", ties, 4, 0));
    const auto st = sign_test(t_lower + s_lower, s_lower);  // successes: teacher accuracy higher
    lines.push_back(check_value("signtest/aggregate/p", st.p_value, 0.430, 0.001));

    // member-specific grid: the displayed values give 17/16/3; the reference
    // evaluation reports 18/16/2 with one pair tying only after rounding.
    t_lower = s_lower = ties = 0;
    for (const auto& pair : kMemberSpecificPairs) {
        const auto cmp = compare_pair(named_row(pair.teacher), named_row(pair.student));
        t_lower += cmp.first_lower;
        s_lower += cmp.second_lower;
        ties += cmp.ties;
    }
    lines.push_back(check_value("counts/member_specific/teacher_lower", t_lower, 17, 0,
                                "reported 18; one cell ties at displayed precision"));
    lines.push_back(check_value("counts/member_specific/student_lower", s_lower, 16, 0));
    lines.push_back(check_value("counts/member_specific/ties", ties, 3, 0,
                                "reported 2; one cell ties at displayed precision"));
    // reported p-value 0.432 corresponds to n = 34 with 18 successes
    lines.push_back(check_value("signtest/member_specific/p_reported_convention",
                                sign_test(34, 18).p_value, 0.432, 0.001,
                                "success-count convention surfaced, not silently matched"));

    return lines;
}

}  // namespace mialab
