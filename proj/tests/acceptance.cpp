// Acceptance suite: one pass/fail line per criterion, nonzero exit on any
// failure. Criteria 1-6 are fast oracle checks; criterion 7 runs the full
// pipeline for three seeds; criterion 8 reruns one seed and compares.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <limits>
#include <string>
#include <vector>

#include "mialab/analysis.hpp"
#include "mialab/attacks.hpp"
#include "mialab/pipeline.hpp"
#include "mialab/rng.hpp"
#include "mialab/training.hpp"

using namespace mialab;
namespace fs = std::filesystem;

namespace {

int g_failures = 0;

void line(const std::string& criterion, bool pass, const std::string& detail) {
    std::printf("[%s] %s: %s\n", pass ? "PASS" : "FAIL", criterion.c_str(), detail.c_str());
    std::fflush(stdout);
    if (!pass) g_failures += 1;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// ---- criterion 1: statistics oracle ----

void criterion1() {
    const auto t0 = std::chrono::steady_clock::now();
    bool ok = true;
    std::string bad;
    for (const auto& l : reference_statistics_selfcheck()) {
        if (l.name.rfind("reduction/", 0) != 0) continue;
        if (!l.pass) {
            ok = false;
            bad += l.name + " ";
        }
    }
    const double dt = seconds_since(t0);
    ok = ok && dt < 1.0;
    char buf[160];
    std::snprintf(buf, sizeof(buf),
                  "eight published reductions reproduced within 0.05pp in %.3f s%s%s", dt,
                  bad.empty() ? "" : "; failed: ", bad.c_str());
    line("criterion-1 statistics-oracle", ok, buf);
}

// ---- criterion 2: sign-test oracle ----

void criterion2() {
    bool ok = true;
    std::string detail;

    const double p = sign_test(32, 17).p_value;
    if (std::abs(p - 0.430) > 0.001) {
        ok = false;
        detail += "sign_test(32,17)=" + std::to_string(p) + " ";
    }

    for (int n = 1; n <= 16 && ok; ++n) {
        for (int k = 0; k <= n; ++k) {
            int64_t hits = 0;
            for (int64_t mask = 0; mask < (int64_t{1} << n); ++mask) {
                int heads = 0;
                for (int b = 0; b < n; ++b) heads += (mask >> b) & 1;
                hits += heads >= k;
            }
            const double exact = static_cast<double>(hits) / std::pow(2.0, n);
            if (std::abs(sign_test(n, k).p_value - exact) > 1e-12) {
                ok = false;
                detail += "enumeration mismatch at n=" + std::to_string(n) + ",k=" + std::to_string(k);
                break;
            }
        }
    }

    for (int n = 1; n <= 40 && ok; ++n) {
        double s = 0.0;
        for (int k = 0; k <= n; ++k) s += binomial_pmf_half(n, k);
        if (std::abs(s - 1.0) > 1e-12) {
            ok = false;
            detail += "pmf sum off at n=" + std::to_string(n);
        }
    }

    if (detail.empty())
        detail = "p(32,17)=0.43003; full enumeration matches for n<=16; pmf sums to 1 for n<=40";
    line("criterion-2 sign-test-oracle", ok, detail);
}

// ---- criterion 3: gradient correctness ----

void criterion3() {
    const auto t0 = std::chrono::steady_clock::now();
    // 2-layer model with the desk architecture shape, sized so the full
    // finite-difference sweep fits the time budget
    ModelConfig base;
    base.vocab = 24;
    base.hidden = 16;
    base.layers = 2;
    base.heads = 2;
    base.ffn = 32;
    base.max_seq = 8;
    base.seed = 11;

    const std::vector<int> tokens{3, 17, 6, 21, 9, 2, 14};
    const std::vector<int> targets(tokens.begin() + 1, tokens.end());

    ModelConfig tcfg = base;
    tcfg.seed = 12;
    ModelD teacher(tcfg);
    teacher.init_parameters();
    GraphD tg;
    const auto tprobs_all = tg.value(tg.softmax(teacher.build_logits(tg, tokens, false), 1));
    TensorD tprobs = TensorD::zeros({static_cast<int64_t>(targets.size()), base.vocab});
    std::copy(tprobs_all.data.begin(),
              tprobs_all.data.begin() + static_cast<long>(targets.size()) * base.vocab,
              tprobs.data.begin());

    bool ok = true;
    std::string detail;
    for (bool bottleneck : {false, true}) {
        for (NormKind nk : {NormKind::layernorm, NormKind::nonorm}) {
            ModelConfig cfg = base;
            if (bottleneck) cfg.bottleneck = 8;
            cfg.norm = nk;
            ModelD student(cfg);
            student.init_parameters();
            auto build = [&](GraphD& g, const std::vector<GraphD::NodeId>& ids) {
                auto logits = student.build_logits_from(g, ids, tokens);
                auto scored =
                    g.slice_rows(g.log_softmax(logits, 1), 0, static_cast<int64_t>(targets.size()));
                return distill_loss_node(g, scored, tprobs, targets, 1.0);
            };
            const auto res = grad_check(build, student.parameter_tensors(), 1e-5);
            char buf[96];
            std::snprintf(buf, sizeof(buf), "%s%s err %.2e (%lld params); ",
                          bottleneck ? "bottleneck+" : "standard+", norm_kind_name(nk),
                          res.max_rel_error, static_cast<long long>(res.checked));
            detail += buf;
            ok = ok && res.max_rel_error <= 1e-4;
        }
    }
    const double dt = seconds_since(t0);
    ok = ok && dt < 60.0;
    char buf[48];
    std::snprintf(buf, sizeof(buf), "in %.1f s", dt);
    line("criterion-3 gradient-correctness", ok, detail + buf);
}

// ---- criterion 4: threshold-calibration oracle ----

struct BruteOut {
    double tau;
    Orientation ori;
    double acc;
};

BruteOut brute_calibrate(const std::vector<double>& raws, const std::vector<bool>& labels) {
    std::vector<double> d = raws;
    std::sort(d.begin(), d.end());
    d.erase(std::unique(d.begin(), d.end()), d.end());
    std::vector<double> taus{-std::numeric_limits<double>::infinity()};
    for (size_t i = 0; i + 1 < d.size(); ++i) taus.push_back(0.5 * (d[i] + d[i + 1]));
    taus.push_back(std::numeric_limits<double>::infinity());

    bool have = false;
    BruteOut best{0, Orientation::higher_is_member, -1};
    long best_gap = 0;
    bool best_canon = false;
    for (Orientation ori : {Orientation::higher_is_member, Orientation::lower_is_member}) {
        for (double tau : taus) {
            int tp = 0, fn = 0, tn = 0, fp = 0;
            long pm_count = 0;
            for (size_t i = 0; i < raws.size(); ++i) {
                const bool pm = ori == Orientation::higher_is_member ? raws[i] > tau : raws[i] < tau;
                pm_count += pm;
                if (labels[i])
                    pm ? ++tp : ++fn;
                else
                    pm ? ++fp : ++tn;
            }
            const double acc =
                0.5 * (static_cast<double>(tp) / (tp + fn) + static_cast<double>(tn) / (tn + fp));
            const long gap = std::labs(pm_count - (static_cast<long>(raws.size()) - pm_count));
            const bool canon = ori == Orientation::higher_is_member;
            bool win;
            if (!have)
                win = true;
            else if (acc != best.acc)
                win = acc > best.acc;
            else if (gap != best_gap)
                win = gap < best_gap;
            else if (canon != best_canon)
                win = canon;
            else
                win = tau < best.tau;
            if (win) {
                have = true;
                best = BruteOut{tau, ori, acc};
                best_gap = gap;
                best_canon = canon;
            }
        }
    }
    return best;
}

void criterion4() {
    const auto t0 = std::chrono::steady_clock::now();
    Rng rng(20240);
    int checked = 0;
    bool ok = true;
    std::string detail;
    while (checked < 200) {
        const int n = 4 + static_cast<int>(rng.below(61));
        std::vector<double> raws;
        std::vector<bool> labels;
        int nm = 0, nn = 0;
        for (int i = 0; i < n; ++i) {
            raws.push_back(std::floor(rng.uniform() * 10.0) / 5.0);  // repeated values provoke ties
            const bool member = rng.uniform() < 0.5;
            labels.push_back(member);
            (member ? nm : nn) += 1;
        }
        if (nm == 0 || nn == 0) continue;
        checked += 1;

        std::vector<AttackScore> scores;
        for (int i = 0; i < n; ++i)
            scores.push_back(AttackScore{"e" + std::to_string(i), AttackMethod::loss,
                                         raws[static_cast<size_t>(i)], Orientation::higher_is_member});
        const auto cal = calibrate_threshold(scores, labels);
        const auto brute = brute_calibrate(raws, labels);
        const bool same_tau = (std::isinf(cal.tau) && std::isinf(brute.tau) &&
                               (cal.tau > 0) == (brute.tau > 0)) ||
                              std::abs(cal.tau - brute.tau) < 1e-12;
        if (cal.calibration_metrics.accuracy != brute.acc || cal.orientation != brute.ori || !same_tau) {
            ok = false;
            detail = "mismatch at instance " + std::to_string(checked);
            break;
        }
    }
    const double dt = seconds_since(t0);
    ok = ok && dt < 10.0;
    char buf[96];
    std::snprintf(buf, sizeof(buf), "200 random instances match the exhaustive sweep in %.2f s", dt);
    line("criterion-4 calibration-oracle", ok, detail.empty() ? buf : detail);
}

// ---- criterion 5: attack formula oracles ----

void criterion5() {
    bool ok = true;
    std::string detail;
    auto expect = [&](const char* what, double got, double want, double tol = 1e-9) {
        if (std::abs(got - want) > tol) {
            ok = false;
            char buf[128];
            std::snprintf(buf, sizeof(buf), "%s: got %.12g want %.12g; ", what, got, want);
            detail += buf;
        }
    };

    expect("loss mean", score_loss_raw(std::vector<double>{-1.0, -3.0}), -2.0);
    expect("mink sorted mean", score_mink_raw(std::vector<double>{-0.1, -2.3, -0.5, -3.0}, 0.5), -2.65);
    expect("mink single-token floor", score_mink_raw(std::vector<double>{-1.7}, 0.05), -1.7);
    expect("zlib ratio", score_zlib_raw(100.0, 50), -2.0);
    expect("recall ratio", score_recall_raw(-1.0, -2.0), 0.5);
    expect("ref identity", score_ref_raw(-1.25, -1.25), 0.0);
    expect("ref difference", score_ref_raw(-1.0, -2.5), 1.5);

    {
        SequenceLogProbs lp;
        lp.vocab = 2;
        lp.rows = TensorD::zeros({1, 2});
        lp.rows.at(0, 0) = std::log(0.75);
        lp.rows.at(0, 1) = std::log(0.25);
        lp.target_logprob = {std::log(0.75)};
        // z-score of the more likely outcome in a two-point distribution: 1/sqrt(3)
        expect("minkpp two-outcome row", score_minkpp_raw(lp, 1.0).raw, 0.5773502691896258);

        SequenceLogProbs uni;
        uni.vocab = 4;
        uni.rows = TensorD::full({1, 4}, std::log(0.25));
        uni.target_logprob = {std::log(0.25)};
        const auto s = score_minkpp_raw(uni, 1.0);
        expect("minkpp degenerate row score", s.raw, 0.0);
        expect("minkpp degenerate flag", s.degenerate_positions, 1.0);
    }

    Rng rng(5150);
    for (int it = 0; it < 100; ++it) {
        std::vector<double> v(1 + rng.below(50));
        for (auto& x : v) x = -6.0 * rng.uniform();
        if (score_mink_raw(v, 1.0) != score_loss_raw(v)) {
            ok = false;
            detail += "mink(k=1) != loss at iteration " + std::to_string(it) + "; ";
            break;
        }
    }

    line("criterion-5 attack-oracles", ok,
         detail.empty() ? "hand fixtures exact at 1e-9; mink(k=1) identical to loss on 100 vectors"
                        : detail);
}

// ---- criterion 6: architecture invariants ----

void criterion6() {
    bool ok = true;
    std::string detail;

    // NoNorm identity and channel-locality, exact
    {
        TensorD h({2, 4}, {0.3, -1.2, 0.8, 0.0, 2.0, -0.5, 0.25, 1.5});
        const auto y =
            norm_apply(h, TensorD::full({4}, 1.0), TensorD::zeros({4}), NormKind::nonorm);
        if (y.data != h.data) {
            ok = false;
            detail += "nonorm identity violated; ";
        }
        TensorD h2 = h;
        h2.at(0, 1) += 0.75;
        const auto a = norm_apply(h, TensorD::full({4}, 1.3), TensorD::full({4}, 0.1), NormKind::nonorm);
        const auto b = norm_apply(h2, TensorD::full({4}, 1.3), TensorD::full({4}, 0.1), NormKind::nonorm);
        for (int64_t i = 0; i < 2 && ok; ++i)
            for (int64_t j = 0; j < 4; ++j) {
                const bool changed = a.at(i, j) != b.at(i, j);
                const bool should_change = i == 0 && j == 1;
                if (changed != should_change) {
                    ok = false;
                    detail += "nonorm channel-locality violated; ";
                    break;
                }
            }
    }

    // param_count vs instantiated trainable scalars
    Rng rng(606);
    for (int it = 0; it < 20 && ok; ++it) {
        ModelConfig c;
        c.heads = 1 + static_cast<int>(rng.below(3));
        c.hidden = c.heads * (4 + static_cast<int>(rng.below(6)));
        c.vocab = 8 + static_cast<int>(rng.below(64));
        c.layers = 1 + static_cast<int>(rng.below(3));
        c.ffn = 8 + static_cast<int>(rng.below(64));
        c.max_seq = 4 + static_cast<int>(rng.below(32));
        if (rng.uniform() < 0.5) c.bottleneck = 1 + static_cast<int>(rng.below(static_cast<uint64_t>(c.ffn)));
        c.norm = rng.uniform() < 0.5 ? NormKind::layernorm : NormKind::nonorm;
        ModelF m(c);
        int64_t total = 0;
        for (const auto& t : m.parameter_tensors()) total += t.numel();
        if (total != param_count(c)) {
            ok = false;
            detail += "param_count mismatch; ";
        }
    }

    // savings inequality across the desk-scaled sweep and the full range
    const int H = 64, I = 256;
    ModelConfig desk;
    desk.hidden = H;
    desk.ffn = I;
    for (int b : default_bottleneck_sweep(desk)) {
        const bool saves = ffn_up_path_weights(H, I, b) < ffn_up_path_weights(H, I, std::nullopt);
        const bool predicted = static_cast<double>(b) < static_cast<double>(H) * I / (H + I);
        if (saves != predicted || saves != bottleneck_saves_params(H, I, b)) {
            ok = false;
            detail += "savings inequality broken at B=" + std::to_string(b) + "; ";
        }
    }
    for (int b = 1; b <= I && ok; ++b) {
        const bool saves = ffn_up_path_weights(H, I, b) < ffn_up_path_weights(H, I, std::nullopt);
        if (saves != (static_cast<double>(b) < static_cast<double>(H) * I / (H + I))) {
            ok = false;
            detail += "savings inequality broken at B=" + std::to_string(b) + "; ";
        }
    }

    line("criterion-6 architecture-invariants", ok,
         detail.empty()
             ? "nonorm identity+locality exact; 20 param counts match; savings iff B < H*I/(H+I)"
             : detail);
}

// ---- criteria 7 and 8: desk-scale directional runs and determinism ----

struct SeedOutcome {
    bool teacher_loss_strong = false;   // (a)
    bool selection_reduces = false;     // (b)
    bool alignment_direction = false;   // (c)
    bool architecture_reduces = false;  // (d)
};

double mean_member_acc(const VariantStats& vs) {
    double s = 0.0;
    for (const auto& [m, v] : vs.acc_member) s += v;
    return s / static_cast<double>(vs.acc_member.size());
}

const VariantStats* find_model(const RunReport& rep, const std::string& name) {
    for (const auto& vs : rep.models)
        if (vs.name == name) return &vs;
    return nullptr;
}

ExperimentConfig desk_config(const std::string& corpus, const std::string& out, uint64_t seed) {
    ExperimentConfig cfg;
    cfg.corpus_path = corpus;
    cfg.out_dir = out;
    cfg.master_seed = seed;
    // desk defaults: V=256, H=64, L=2, heads=2, I=256, max_seq=128;
    // 30 epochs, batch 8, adam lr 3e-4, clip 1.0; lambda 1
    cfg.jobs = 2;
    return cfg;
}

SeedOutcome evaluate_run(const RunReport& rep) {
    SeedOutcome out;
    const VariantStats* teacher = find_model(rep, "teacher");
    const VariantStats* none = find_model(rep, "student_none");
    const VariantStats* nonvul = find_model(rep, "student_nonvulnerable");
    const VariantStats* bottleneck = find_model(rep, "student_bottleneck");
    const VariantStats* all = find_model(rep, "student_all");
    if (!teacher || !none || !nonvul || !bottleneck || !all) return out;

    out.teacher_loss_strong = teacher->aggregate.at(AttackMethod::loss).accuracy >= 0.9;
    out.selection_reduces = mean_member_acc(*nonvul) < mean_member_acc(*none) &&
                            nonvul->ppl_member > none->ppl_member;
    if (rep.alignment.vulnerable && rep.alignment.nonvulnerable)
        out.alignment_direction =
            rep.alignment.vulnerable->mean_gt_prob > rep.alignment.nonvulnerable->mean_gt_prob &&
            rep.alignment.vulnerable->mean_kl_to_gt < rep.alignment.nonvulnerable->mean_kl_to_gt;
    out.architecture_reduces = mean_member_acc(*bottleneck) <= mean_member_acc(*none) &&
                               mean_member_acc(*all) <= mean_member_acc(*none);
    return out;
}

void criteria7and8(const std::string& work_dir) {
    const auto t0 = std::chrono::steady_clock::now();
    fs::create_directories(work_dir);

    std::vector<SeedOutcome> outcomes;
    std::string first_summary_path;
    double max_run_seconds = 0.0;
    bool runs_ok = true;
    std::string run_err;

    for (uint64_t seed : {1ull, 2ull, 3ull}) {
        const std::string corpus = work_dir + "/corpus_" + std::to_string(seed) + ".jsonl";
        GeneratorConfig gc;
        gc.seed = seed;
        save_corpus(generate_corpus(gc), corpus);

        const ExperimentConfig cfg =
            desk_config(corpus, work_dir + "/run_" + std::to_string(seed), seed);
        try {
            const auto rt0 = std::chrono::steady_clock::now();
            const auto result = run_all(cfg);
            max_run_seconds = std::max(max_run_seconds, seconds_since(rt0));
            outcomes.push_back(evaluate_run(result.report));
            if (seed == 1) first_summary_path = result.summary_path;
        } catch (const std::exception& e) {
            runs_ok = false;
            run_err = e.what();
            break;
        }
    }

    auto majority = [&](const std::function<bool(const SeedOutcome&)>& f) {
        int hits = 0;
        for (const auto& o : outcomes) hits += f(o);
        return hits * 2 > static_cast<int>(outcomes.size());
    };

    if (!runs_ok) {
        line("criterion-7 desk-scale-directions", false, "run failed: " + run_err);
        line("criterion-8 determinism", false, "skipped: run failed");
        return;
    }

    const bool a = majority([](const SeedOutcome& o) { return o.teacher_loss_strong; });
    const bool b = majority([](const SeedOutcome& o) { return o.selection_reduces; });
    const bool c = majority([](const SeedOutcome& o) { return o.alignment_direction; });
    const bool d = majority([](const SeedOutcome& o) { return o.architecture_reduces; });
    const bool within_budget = max_run_seconds < 1800.0;

    char buf[256];
    std::snprintf(buf, sizeof(buf),
                  "(a) teacher loss A>=0.9: %s; (b) selection lowers member attack + raises ppl: %s; "
                  "(c) alignment direction: %s; (d) bottleneck/all <= none: %s; slowest run %.0f s",
                  a ? "yes" : "NO", b ? "yes" : "NO", c ? "yes" : "NO", d ? "yes" : "NO",
                  max_run_seconds);
    line("criterion-7 desk-scale-directions", a && b && c && d && within_budget, buf);

    // criterion 8: same master seed, fresh directory, identical metrics summary
    bool det_ok = true;
    std::string det_note;
    try {
        const std::string corpus = work_dir + "/corpus_1.jsonl";
        const ExperimentConfig cfg = desk_config(corpus, work_dir + "/run_1_repeat", 1);
        const auto result = run_all(cfg);
        det_ok = read_file(result.summary_path) == read_file(first_summary_path);
        det_note = det_ok ? "summary.json byte-identical across reruns" : "summaries differ";

        // checkpoint save/load round-trip, bit-exact
        const std::string ckpt = work_dir + "/run_1/models/teacher.ckpt";
        const ModelF m = load_checkpoint(ckpt);
        const std::string copy = work_dir + "/teacher_copy.ckpt";
        save_checkpoint(m, copy);
        if (read_file(ckpt) != read_file(copy)) {
            det_ok = false;
            det_note += "; checkpoint round-trip not bit-exact";
        } else {
            det_note += "; checkpoint round-trip bit-exact";
        }
    } catch (const std::exception& e) {
        det_ok = false;
        det_note = e.what();
    }
    line("criterion-8 determinism", det_ok, det_note);

    std::printf("  (criteria 7+8 wall time: %.0f s)\n", seconds_since(t0));
}

}  // namespace

int main(int argc, char** argv) {
    std::string work_dir = fs::temp_directory_path() / "mialab_acceptance";
    if (argc > 1) work_dir = argv[1];
    fs::remove_all(work_dir);

    criterion1();
    criterion2();
    criterion3();
    criterion4();
    criterion5();
    criterion6();
    criteria7and8(work_dir);

    if (g_failures == 0) {
        std::printf("acceptance: all criteria passed\n");
        return 0;
    }
    std::printf("acceptance: %d criterion(s) FAILED\n", g_failures);
    return 1;
}
