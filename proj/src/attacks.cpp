#include "mialab/attacks.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <limits>
#include <sstream>

#include <zlib.h>
#include <nlohmann/json.hpp>

#include "mialab/rng.hpp"

namespace mialab {

using nlohmann::json;

const char* attack_method_name(AttackMethod m) {
    switch (m) {
        case AttackMethod::recall: return "recall";
        case AttackMethod::loss: return "loss";
        case AttackMethod::zlib: return "zlib";
        case AttackMethod::mink: return "mink";
        case AttackMethod::minkpp: return "minkpp";
        case AttackMethod::ref: return "ref";
    }
    return "?";
}

AttackMethod attack_method_from_name(const std::string& s) {
    if (s == "recall") return AttackMethod::recall;
    if (s == "loss") return AttackMethod::loss;
    if (s == "zlib") return AttackMethod::zlib;
    if (s == "mink") return AttackMethod::mink;
    if (s == "minkpp") return AttackMethod::minkpp;
    if (s == "ref") return AttackMethod::ref;
    throw ValidationError("unknown attack method: " + s);
}

const char* orientation_name(Orientation o) {
    return o == Orientation::higher_is_member ? "higher_is_member" : "lower_is_member";
}

Orientation orientation_from_name(const std::string& s) {
    if (s == "higher_is_member") return Orientation::higher_is_member;
    if (s == "lower_is_member") return Orientation::lower_is_member;
    throw ValidationError("unknown orientation: " + s);
}

void AttackConfig::validate() const {
    switch (method) {
        case AttackMethod::mink:
        case AttackMethod::minkpp:
            if (!k || *k <= 0.0 || *k > 1.0)
                throw ValidationError("attack config: mink/minkpp requires k in (0, 1]");
            break;
        case AttackMethod::recall:
            if (!prefix_docs || *prefix_docs < 1)
                throw ValidationError("attack config: recall requires prefix_docs >= 1");
            break;
        case AttackMethod::ref:
            if (!ref_model) throw ValidationError("attack config: ref requires a reference model");
            break;
        default:
            break;
    }
}

// ---- score math ----

double mean_of(std::span<const double> v) {
    if (v.empty()) throw ValidationError("mean of empty span");
    double s = 0.0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
}

double score_loss_raw(std::span<const double> target_logprobs) { return mean_of(target_logprobs); }

double score_mink_raw(std::span<const double> target_logprobs, double k) {
    if (k <= 0.0 || k > 1.0) throw ValidationError("mink: k must be in (0, 1]");
    const size_t t = target_logprobs.size();
    if (t == 0) throw ValidationError("mink: no scored tokens");
    const size_t n = std::max<size_t>(1, static_cast<size_t>(std::ceil(k * static_cast<double>(t))));
    if (n >= t) return score_loss_raw(target_logprobs);  // full set: identical to the loss score
    std::vector<double> sorted(target_logprobs.begin(), target_logprobs.end());
    std::nth_element(sorted.begin(), sorted.begin() + static_cast<long>(n), sorted.end());
    double s = 0.0;
    for (size_t i = 0; i < n; ++i) s += sorted[i];
    return s / static_cast<double>(n);
}

MinkppScore score_minkpp_raw(const SequenceLogProbs& lp, double k) {
    if (k <= 0.0 || k > 1.0) throw ValidationError("minkpp: k must be in (0, 1]");
    const int t = lp.n_scored();
    if (t == 0) throw ValidationError("minkpp: no scored tokens");

    MinkppScore out;
    std::vector<double> z(static_cast<size_t>(t));
    for (int r = 0; r < t; ++r) {
        double mu = 0.0, m2 = 0.0;
        for (int v = 0; v < lp.vocab; ++v) {
            const double l = lp.rows.at(r, v);
            const double p = std::exp(l);
            mu += p * l;
            m2 += p * l * l;
        }
        const double var = std::max(0.0, m2 - mu * mu);
        const double sigma = std::sqrt(var);
        if (sigma < 1e-12) {
            // exact one-hot row: no calibration signal at this position
            z[static_cast<size_t>(r)] = 0.0;
            out.degenerate_positions += 1;
        } else {
            z[static_cast<size_t>(r)] = (lp.target_logprob[static_cast<size_t>(r)] - mu) / sigma;
        }
    }
    out.raw = score_mink_raw(z, k);
    return out;
}

double score_zlib_raw(double total_nll_nats, size_t compressed_len) {
    if (compressed_len == 0) throw ValidationError("zlib: zero compressed length");
    return -total_nll_nats / static_cast<double>(compressed_len);
}

size_t deflate_compressed_size(std::string_view text) {
    if (text.empty()) throw ValidationError("zlib: empty text");
    uLongf bound = compressBound(static_cast<uLong>(text.size()));
    std::vector<unsigned char> buf(bound);
    int rc = compress2(buf.data(), &bound, reinterpret_cast<const Bytef*>(text.data()),
                       static_cast<uLong>(text.size()), Z_BEST_COMPRESSION);
    if (rc != Z_OK) throw RuntimeFailure("zlib compress2 failed: " + std::to_string(rc));
    return static_cast<size_t>(bound);
}

double score_recall_raw(double ll_conditional, double ll_unconditional) {
    if (ll_unconditional == 0.0) throw RuntimeFailure("recall: zero unconditional log-likelihood");
    return ll_conditional / ll_unconditional;
}

double score_ref_raw(double ll_target, double ll_reference) { return ll_target - ll_reference; }

// ---- model-level scoring ----

PreparedDoc prepare_doc(const Document& d, int max_len) {
    PreparedDoc p;
    p.id = d.id;
    p.is_member = d.membership == Membership::member;
    p.text = d.text;
    p.tokens = tokenize(d, max_len).tokens;
    return p;
}

namespace {

AttackScore make_score(const PreparedDoc& doc, AttackMethod m, double raw) {
    if (!std::isfinite(raw)) throw RuntimeFailure(std::string("non-finite attack score for ") + doc.id);
    return AttackScore{doc.id, m, raw, Orientation::higher_is_member};
}

}  // namespace

AttackScore score_loss(const PreparedDoc& doc, const SequenceLogProbs& lp) {
    return make_score(doc, AttackMethod::loss, score_loss_raw(lp.target_logprob));
}

AttackScore score_zlib(const PreparedDoc& doc, const SequenceLogProbs& lp) {
    const size_t c = deflate_compressed_size(doc.text);
    return make_score(doc, AttackMethod::zlib, score_zlib_raw(lp.total_nll(), c));
}

AttackScore score_mink(const PreparedDoc& doc, const SequenceLogProbs& lp, double k) {
    return make_score(doc, AttackMethod::mink, score_mink_raw(lp.target_logprob, k));
}

AttackScore score_minkpp(const PreparedDoc& doc, const SequenceLogProbs& lp, double k) {
    return make_score(doc, AttackMethod::minkpp, score_minkpp_raw(lp, k).raw);
}

AttackScore score_ref(const PreparedDoc& doc, const SequenceLogProbs& target_lp,
                      const SequenceLogProbs& ref_lp) {
    return make_score(doc, AttackMethod::ref,
                      score_ref_raw(target_lp.mean_logprob(), ref_lp.mean_logprob()));
}

std::vector<int> build_recall_prefix(const std::vector<const Document*>& pool, int prefix_docs,
                                     int budget) {
    if (prefix_docs < 1) throw ValidationError("recall: prefix_docs must be >= 1");
    if (static_cast<size_t>(prefix_docs) > pool.size())
        throw ValidationError("recall: prefix pool has only " + std::to_string(pool.size()) + " documents");
    if (budget < 1) throw ValidationError("recall: no room for prefix within max_seq");

    std::string joined;
    for (int i = 0; i < prefix_docs; ++i) {
        if (!joined.empty()) joined += "\n\n";
        joined += pool[static_cast<size_t>(i)]->text;
    }
    // keep the tail: context adjacent to the target survives truncation
    if (static_cast<int>(joined.size()) > budget)
        joined = joined.substr(joined.size() - static_cast<size_t>(budget));
    std::vector<int> tokens;
    tokens.reserve(joined.size());
    for (unsigned char c : joined) tokens.push_back(c);
    return tokens;
}

AttackScore score_recall(const ModelD& model, const PreparedDoc& doc, const SequenceLogProbs& plain_lp,
                         std::span<const int> prefix_tokens) {
    if (prefix_tokens.empty()) throw ValidationError("recall: empty prefix");
    const int total = static_cast<int>(prefix_tokens.size() + doc.tokens.size());
    if (total > model.config().max_seq)
        throw ValidationError("recall: prefix + sequence exceeds max_seq after truncation policy");

    std::vector<int> full(prefix_tokens.begin(), prefix_tokens.end());
    full.insert(full.end(), doc.tokens.begin(), doc.tokens.end());
    const auto cond = forward_logprobs(model, full, static_cast<int>(prefix_tokens.size()));

    const double raw = score_recall_raw(cond.mean_logprob(), plain_lp.mean_logprob());
    return make_score(doc, AttackMethod::recall, raw);
}

// ---- calibration and metrics ----

MiaMetrics mia_metrics(const std::vector<int>& member_decisions,
                       const std::vector<int>& nonmember_decisions) {
    if (member_decisions.empty() || nonmember_decisions.empty())
        throw ValidationError("mia_metrics: both classes must be non-empty");
    int tp = 0, tn = 0;
    for (int d : member_decisions) tp += d != 0;
    for (int d : nonmember_decisions) tn += d == 0;
    MiaMetrics m;
    m.tpr = static_cast<double>(tp) / static_cast<double>(member_decisions.size());
    m.tnr = static_cast<double>(tn) / static_cast<double>(nonmember_decisions.size());
    m.accuracy = (m.tpr + m.tnr) / 2.0;
    return m;
}

namespace {

struct Candidate {
    double tau;
    Orientation orientation;
    MiaMetrics metrics;
    int64_t balance_gap;
    bool canonical;
};

// policy order: accuracy desc, balance gap asc, canonical orientation first, tau asc
bool better(const Candidate& a, const Candidate& b) {
    if (a.metrics.accuracy != b.metrics.accuracy) return a.metrics.accuracy > b.metrics.accuracy;
    if (a.balance_gap != b.balance_gap) return a.balance_gap < b.balance_gap;
    if (a.canonical != b.canonical) return a.canonical;
    return a.tau < b.tau;
}

}  // namespace

CalibratedAttack calibrate_threshold(const std::vector<AttackScore>& scores,
                                     const std::vector<bool>& is_member) {
    if (scores.size() != is_member.size())
        throw ValidationError("calibrate: scores/labels size mismatch");
    if (scores.empty()) throw ValidationError("calibrate: empty score table");
    bool any_m = false, any_n = false;
    for (bool b : is_member) (b ? any_m : any_n) = true;
    if (!any_m || !any_n) throw ValidationError("calibrate: needs scores from both classes");

    const Orientation canonical = scores[0].orientation;

    std::vector<double> distinct;
    distinct.reserve(scores.size());
    for (const auto& s : scores) {
        if (!std::isfinite(s.raw)) throw ValidationError("calibrate: non-finite raw score");
        distinct.push_back(s.raw);
    }
    std::sort(distinct.begin(), distinct.end());
    distinct.erase(std::unique(distinct.begin(), distinct.end()), distinct.end());

    std::vector<double> taus;
    taus.push_back(-std::numeric_limits<double>::infinity());
    for (size_t i = 0; i + 1 < distinct.size(); ++i) taus.push_back((distinct[i] + distinct[i + 1]) / 2.0);
    taus.push_back(std::numeric_limits<double>::infinity());

    std::optional<Candidate> best;
    for (Orientation ori : {canonical, flipped(canonical)}) {
        for (double tau : taus) {
            std::vector<int> md, nd;
            int64_t pred_member = 0;
            for (size_t i = 0; i < scores.size(); ++i) {
                const bool pm = ori == Orientation::higher_is_member ? scores[i].raw > tau
                                                                     : scores[i].raw < tau;
                pred_member += pm;
                (is_member[i] ? md : nd).push_back(pm ? 1 : 0);
            }
            Candidate c;
            c.tau = tau;
            c.orientation = ori;
            c.metrics = mia_metrics(md, nd);
            c.balance_gap = std::abs(pred_member - (static_cast<int64_t>(scores.size()) - pred_member));
            c.canonical = ori == canonical;
            if (!best || better(c, *best)) best = c;
        }
    }

    CalibratedAttack out;
    out.config.method = scores[0].method;
    out.tau = best->tau;
    out.orientation = best->orientation;
    out.calibration_metrics = best->metrics;
    out.calibration_note = std::string("calibrated on ") + std::to_string(scores.size()) +
                           " scores; orientation " +
                           (best->canonical ? "canonical" : "flipped from canonical");
    return out;
}

// ---- cross-validated tuning ----

std::vector<double> default_mink_grid() {
    std::vector<double> g;
    for (int i = 1; i <= 20; ++i) g.push_back(static_cast<double>(i) * 0.05);
    return g;
}

std::vector<int> default_prefix_grid() {
    std::vector<int> g;
    for (int i = 1; i <= 12; ++i) g.push_back(i);
    return g;
}

CvOutcome cv_tune(const std::vector<double>& grid,
                  const std::function<std::vector<double>(double)>& scores_for,
                  const std::vector<bool>& labels, Orientation canonical, int folds, uint64_t seed) {
    if (grid.empty()) throw ValidationError("cv_tune: empty grid");
    if (folds < 2) throw ValidationError("cv_tune: folds must be >= 2");

    // stratified fold assignment, seed-keyed
    std::vector<size_t> members, nonmembers;
    for (size_t i = 0; i < labels.size(); ++i) (labels[i] ? members : nonmembers).push_back(i);
    if (members.size() < static_cast<size_t>(folds) || nonmembers.size() < static_cast<size_t>(folds))
        throw ValidationError("cv_tune: each fold needs examples from both classes");
    Rng rng(mix_seed(seed, "cv-folds"));
    rng.shuffle(members);
    rng.shuffle(nonmembers);
    std::vector<int> fold_of(labels.size(), 0);
    for (size_t i = 0; i < members.size(); ++i) fold_of[members[i]] = static_cast<int>(i % folds);
    for (size_t i = 0; i < nonmembers.size(); ++i) fold_of[nonmembers[i]] = static_cast<int>(i % folds);

    CvOutcome out;
    double best_acc = -1.0;
    for (double value : grid) {
        const std::vector<double> raws = scores_for(value);
        if (raws.size() != labels.size())
            throw ValidationError("cv_tune: score function returned wrong count");

        double acc_sum = 0.0;
        for (int f = 0; f < folds; ++f) {
            std::vector<AttackScore> train;
            std::vector<bool> train_labels;
            std::vector<int> held_m, held_n;
            for (size_t i = 0; i < labels.size(); ++i) {
                if (fold_of[i] == f) continue;
                train.push_back(AttackScore{"", AttackMethod::loss, raws[i], canonical});
                train_labels.push_back(labels[i]);
            }
            const CalibratedAttack cal = calibrate_threshold(train, train_labels);
            for (size_t i = 0; i < labels.size(); ++i) {
                if (fold_of[i] != f) continue;
                const int pm = cal.predicts_member(raws[i]) ? 1 : 0;
                (labels[i] ? held_m : held_n).push_back(pm);
            }
            acc_sum += mia_metrics(held_m, held_n).accuracy;
        }
        const double mean_acc = acc_sum / static_cast<double>(folds);
        out.grid_mean_accuracy.emplace_back(value, mean_acc);
        if (mean_acc > best_acc) {  // strict: ties keep the earlier (smaller) grid value
            best_acc = mean_acc;
            out.best_value = value;
        }
    }
    return out;
}

// ---- io ----

void write_scores_csv(const std::string& path, const std::vector<AttackScore>& scores,
                      const std::vector<bool>& is_member) {
    if (scores.size() != is_member.size()) throw ValidationError("scores/labels size mismatch");
    std::ostringstream out;
    out << "example_id,method,raw,orientation,label\n";
    char buf[64];
    for (size_t i = 0; i < scores.size(); ++i) {
        std::snprintf(buf, sizeof(buf), "%.17g", scores[i].raw);
        out << scores[i].example_id << ',' << attack_method_name(scores[i].method) << ',' << buf << ','
            << orientation_name(scores[i].orientation) << ',' << (is_member[i] ? "member" : "nonmember")
            << '\n';
    }
    write_file(path, out.str());
}

std::vector<ScoreRow> read_scores_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ValidationError("cannot open score table: " + path);
    std::string line;
    if (!std::getline(in, line)) throw ValidationError("empty score table: " + path);

    std::vector<ScoreRow> rows;
    int line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        std::vector<std::string> fields;
        std::stringstream ss(line);
        std::string field;
        while (std::getline(ss, field, ',')) fields.push_back(field);
        if (fields.size() != 5)
            throw ValidationError(path + ": line " + std::to_string(line_no) + ": expected 5 fields");
        ScoreRow r;
        r.example_id = fields[0];
        r.method = attack_method_from_name(fields[1]);
        r.raw = std::stod(fields[2]);
        r.orientation = orientation_from_name(fields[3]);
        if (fields[4] == "member")
            r.is_member = true;
        else if (fields[4] == "nonmember")
            r.is_member = false;
        else
            throw ValidationError(path + ": line " + std::to_string(line_no) + ": bad label");
        rows.push_back(std::move(r));
    }
    return rows;
}

namespace {

json tau_to_json(double tau) {
    if (std::isinf(tau)) return tau > 0 ? "inf" : "-inf";
    return tau;
}

double tau_from_json(const json& j) {
    if (j.is_string()) {
        const std::string s = j.get<std::string>();
        if (s == "inf") return std::numeric_limits<double>::infinity();
        if (s == "-inf") return -std::numeric_limits<double>::infinity();
        throw ValidationError("bad tau value: " + s);
    }
    return j.get<double>();
}

}  // namespace

std::string calibration_to_json(const CalibratedAttack& c) {
    json j;
    j["method"] = attack_method_name(c.config.method);
    if (c.config.k) j["k"] = *c.config.k;
    if (c.config.prefix_docs) j["prefix_docs"] = *c.config.prefix_docs;
    if (c.config.ref_model) j["ref_model"] = *c.config.ref_model;
    j["tau"] = tau_to_json(c.tau);
    j["orientation"] = orientation_name(c.orientation);
    j["note"] = c.calibration_note;
    j["calibration_accuracy"] = c.calibration_metrics.accuracy;
    j["calibration_tpr"] = c.calibration_metrics.tpr;
    j["calibration_tnr"] = c.calibration_metrics.tnr;
    return j.dump(2);
}

CalibratedAttack calibration_from_json(const std::string& s) {
    json j;
    try {
        j = json::parse(s);
    } catch (const json::exception& e) {
        throw ValidationError("calibration parse error: " + std::string(e.what()));
    }
    CalibratedAttack c;
    c.config.method = attack_method_from_name(j.at("method").get<std::string>());
    if (j.contains("k")) c.config.k = j.at("k").get<double>();
    if (j.contains("prefix_docs")) c.config.prefix_docs = j.at("prefix_docs").get<int>();
    if (j.contains("ref_model")) c.config.ref_model = j.at("ref_model").get<std::string>();
    c.tau = tau_from_json(j.at("tau"));
    c.orientation = orientation_from_name(j.at("orientation").get<std::string>());
    c.calibration_note = j.value("note", "");
    c.calibration_metrics.accuracy = j.value("calibration_accuracy", 0.0);
    c.calibration_metrics.tpr = j.value("calibration_tpr", 0.0);
    c.calibration_metrics.tnr = j.value("calibration_tnr", 0.0);
    return c;
}

}  // namespace mialab
