#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <iostream>
#include <sstream>
#include <unordered_set>

#include <nlohmann/json.hpp>

#include "mialab/pipeline.hpp"

namespace mialab {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

const std::vector<AttackMethod> kAllMethods{AttackMethod::recall, AttackMethod::loss,
                                            AttackMethod::zlib,   AttackMethod::mink,
                                            AttackMethod::minkpp, AttackMethod::ref};

json tau_json(double tau) {
    if (std::isinf(tau)) return tau > 0 ? "inf" : "-inf";
    return tau;
}

}  // namespace

VariantStats variant_stats_from_bundle(const AttackBundle& bundle, const Partition* partition) {
    VariantStats vs;
    vs.name = bundle.model_name;
    vs.ppl_member = bundle.ppl_member;
    vs.ppl_nonmember = bundle.ppl_nonmember;

    std::unordered_set<std::string> vuln;
    if (partition) vuln.insert(partition->vulnerable_ids.begin(), partition->vulnerable_ids.end());

    for (const auto& [method, outcome] : bundle.methods) {
        std::vector<int> member_d, nonmember_d, vuln_d, nonvuln_d;
        for (size_t i = 0; i < outcome.scores.size(); ++i) {
            const int pm = outcome.calibrated.predicts_member(outcome.scores[i].raw) ? 1 : 0;
            if (outcome.labels[i]) {
                member_d.push_back(pm);
                if (partition) (vuln.count(outcome.scores[i].example_id) ? vuln_d : nonvuln_d).push_back(pm);
            } else {
                nonmember_d.push_back(pm);
            }
        }
        vs.attack_configs[method] = outcome.calibrated.config;
        vs.aggregate[method] = mia_metrics(member_d, nonmember_d);
        vs.acc_member[method] = subset_accuracy(member_d, true);
        vs.acc_nonmember[method] = subset_accuracy(nonmember_d, false);
        vs.acc_vulnerable[method] =
            vuln_d.empty() ? std::nullopt : std::optional<double>(subset_accuracy(vuln_d, true));
        vs.acc_nonvulnerable[method] =
            nonvuln_d.empty() ? std::nullopt : std::optional<double>(subset_accuracy(nonvuln_d, true));
    }

    if (partition && !bundle.nll.empty()) {
        auto stratum_ppl = [&](bool want_vulnerable) -> std::optional<double> {
            double nll = 0.0;
            int64_t tokens = 0;
            for (const auto& e : bundle.nll) {
                if (!e.is_member) continue;
                if ((vuln.count(e.id) > 0) != want_vulnerable) continue;
                nll += e.total_nll;
                tokens += e.tokens;
            }
            if (tokens == 0) return std::nullopt;
            return std::exp(nll / static_cast<double>(tokens));
        };
        vs.ppl_vulnerable = stratum_ppl(true);
        vs.ppl_nonvulnerable = stratum_ppl(false);
    }
    return vs;
}

RunReport build_report(const std::vector<VariantStats>& models, const Partition& partition,
                       const AlignmentReport& alignment) {
    if (models.empty()) throw ValidationError("report: no models");
    RunReport rep;
    rep.models = models;
    rep.partition = partition;
    rep.alignment = alignment;

    auto find = [&](const std::string& name) -> const VariantStats* {
        for (const auto& m : rep.models)
            if (m.name == name) return &m;
        return nullptr;
    };
    const VariantStats* teacher = find("teacher");
    const VariantStats* none = find("student_none");

    auto method_row = [](const std::map<AttackMethod, double>& field) {
        std::vector<std::pair<std::string, double>> row;
        for (const auto& [m, v] : field) row.emplace_back(attack_method_name(m), v);
        return row;
    };

    // teacher-vs-student sign tests over the attack grid
    if (teacher) {
        for (const auto& vs : rep.models) {
            if (vs.name == "teacher") continue;
            for (const char* metric : {"aggregate", "member_specific"}) {
                std::vector<std::pair<std::string, double>> trow, srow;
                if (std::string(metric) == "aggregate") {
                    for (const auto& [m, v] : teacher->aggregate)
                        trow.emplace_back(attack_method_name(m), v.accuracy);
                    for (const auto& [m, v] : vs.aggregate)
                        srow.emplace_back(attack_method_name(m), v.accuracy);
                } else {
                    trow = method_row(teacher->acc_member);
                    srow = method_row(vs.acc_member);
                }
                const auto cmp = compare_pair(trow, srow);
                RunReport::PairSignTest st;
                st.student = vs.name;
                st.metric = metric;
                st.teacher_higher = cmp.second_lower;  // student lower accuracy = teacher higher
                st.student_higher = cmp.first_lower;
                st.ties = cmp.ties;
                const int n = st.teacher_higher + st.student_higher;
                if (n > 0) st.p_value = sign_test(n, st.teacher_higher).p_value;
                rep.sign_tests.push_back(std::move(st));
            }
        }
    }

    // aggregate relative reductions against the plain-distillation baseline
    auto reduction_of = [&](const std::string& name, const VariantStats* variant,
                            const std::map<AttackMethod, double>& base_field,
                            const std::map<AttackMethod, double>& var_field) {
        RunReport::Reduction red;
        red.name = name;
        if (!variant) {
            red.note = "variant not present in this run";
            rep.reductions.push_back(std::move(red));
            return;
        }
        std::vector<double> b, v;
        for (const auto& [m, bv] : base_field) {
            auto it = var_field.find(m);
            if (it == var_field.end()) continue;
            b.push_back(bv);
            v.push_back(it->second);
        }
        try {
            red.value = relative_reduction(b, v);
        } catch (const ValidationError& e) {
            red.note = e.what();
        }
        rep.reductions.push_back(std::move(red));
    };

    auto opt_field = [](const std::map<AttackMethod, std::optional<double>>& field) {
        std::map<AttackMethod, double> out;
        for (const auto& [m, v] : field)
            if (v) out[m] = *v;
        return out;
    };

    if (none) {
        if (const VariantStats* nv = find("student_nonvulnerable")) {
            reduction_of("selection/vulnerable_subset", nv, opt_field(none->acc_vulnerable),
                         opt_field(nv->acc_vulnerable));
            reduction_of("selection/member", nv, none->acc_member, nv->acc_member);
        }
        for (const char* arch : {"bottleneck", "nonorm", "all"}) {
            const VariantStats* v = find(std::string("student_") + arch);
            if (!v) continue;
            reduction_of(std::string("architecture/member/") + arch, v, none->acc_member, v->acc_member);
            reduction_of(std::string("architecture/nonmember/") + arch, v, none->acc_nonmember,
                         v->acc_nonmember);
        }
    }
    return rep;
}

namespace {

TableData accuracy_table(const std::string& title, const std::vector<VariantStats>& models,
                         const std::function<std::optional<double>(const VariantStats&, AttackMethod)>& get) {
    TableData t;
    t.title = title;
    t.row_header = "model";
    for (auto m : kAllMethods) t.col_names.push_back(attack_method_name(m));
    for (const auto& vs : models) {
        std::vector<double> row;
        bool complete = true;
        for (auto m : kAllMethods) {
            const auto v = get(vs, m);
            if (!v) {
                complete = false;
                break;
            }
            row.push_back(*v);
        }
        if (complete) t.rows.emplace_back(vs.name, std::move(row));
    }
    return t;
}

json alignment_json(const AlignmentReport& a) {
    auto one = [](const std::optional<AlignmentStats>& s) -> json {
        if (!s) return nullptr;
        json j;
        j["mean_gt_prob"] = s->mean_gt_prob;
        j["mean_kl_to_gt"] = s->mean_kl_to_gt;
        j["n_sequences"] = s->n_sequences;
        return j;
    };
    json j;
    j["vulnerable"] = one(a.vulnerable);
    j["nonvulnerable"] = one(a.nonvulnerable);
    return j;
}

}  // namespace

void write_report_files(const RunReport& rep, const std::string& dir) {
    fs::create_directories(dir);

    auto agg = accuracy_table("Aggregate attack accuracy", rep.models,
                              [](const VariantStats& vs, AttackMethod m) -> std::optional<double> {
                                  auto it = vs.aggregate.find(m);
                                  if (it == vs.aggregate.end()) return std::nullopt;
                                  return it->second.accuracy;
                              });
    auto member = accuracy_table("Attack accuracy on members", rep.models,
                                 [](const VariantStats& vs, AttackMethod m) -> std::optional<double> {
                                     auto it = vs.acc_member.find(m);
                                     if (it == vs.acc_member.end()) return std::nullopt;
                                     return it->second;
                                 });
    auto nonmember = accuracy_table("Attack accuracy on nonmembers", rep.models,
                                    [](const VariantStats& vs, AttackMethod m) -> std::optional<double> {
                                        auto it = vs.acc_nonmember.find(m);
                                        if (it == vs.acc_nonmember.end()) return std::nullopt;
                                        return it->second;
                                    });
    auto vulnerable = accuracy_table("Attack accuracy on the vulnerable stratum", rep.models,
                                     [](const VariantStats& vs, AttackMethod m) -> std::optional<double> {
                                         auto it = vs.acc_vulnerable.find(m);
                                         if (it == vs.acc_vulnerable.end()) return std::nullopt;
                                         return it->second;
                                     });
    auto nonvulnerable =
        accuracy_table("Attack accuracy on the non-vulnerable stratum", rep.models,
                       [](const VariantStats& vs, AttackMethod m) -> std::optional<double> {
                           auto it = vs.acc_nonvulnerable.find(m);
                           if (it == vs.acc_nonvulnerable.end()) return std::nullopt;
                           return it->second;
                       });

    write_table_csv(agg, dir + "/aggregate_accuracy.csv");
    write_table_csv(member, dir + "/member_accuracy.csv");
    write_table_csv(nonmember, dir + "/nonmember_accuracy.csv");
    write_table_csv(vulnerable, dir + "/vulnerable_accuracy.csv");
    write_table_csv(nonvulnerable, dir + "/nonvulnerable_accuracy.csv");

    TableData ppl;
    ppl.title = "Perplexity by subset";
    ppl.row_header = "model";
    ppl.col_names = {"vulnerable", "nonvulnerable", "member", "nonmember"};
    for (const auto& vs : rep.models) {
        std::vector<double> row{vs.ppl_vulnerable.value_or(std::nan("")),
                                vs.ppl_nonvulnerable.value_or(std::nan("")), vs.ppl_member,
                                vs.ppl_nonmember};
        ppl.rows.emplace_back(vs.name, std::move(row));
    }
    write_table_csv(ppl, dir + "/perplexity.csv");

    // chosen hyperparameters per model (cross-validated where tuning is on)
    {
        std::ostringstream out;
        out << "model,mink_k,minkpp_k,recall_prefix\n";
        for (const auto& vs : rep.models) {
            auto field = [&](AttackMethod m, bool prefix) -> std::string {
                auto it = vs.attack_configs.find(m);
                if (it == vs.attack_configs.end()) return "-";
                if (prefix)
                    return it->second.prefix_docs ? std::to_string(*it->second.prefix_docs) : "-";
                if (!it->second.k) return "-";
                char buf[32];
                std::snprintf(buf, sizeof(buf), "%.2f", *it->second.k);
                return buf;
            };
            out << vs.name << ',' << field(AttackMethod::mink, false) << ','
                << field(AttackMethod::minkpp, false) << ',' << field(AttackMethod::recall, true)
                << '\n';
        }
        write_file(dir + "/hyperparameters.csv", out.str());
    }

    // alignment diagnostics, two-column CSV per stratum
    {
        std::ostringstream out;
        out << "stratum,n_sequences,mean_gt_prob,mean_kl_to_gt\n";
        auto line = [&](const char* name, const std::optional<AlignmentStats>& s) {
            if (!s) return;
            out << name << ',' << s->n_sequences << ',' << s->mean_gt_prob << ',' << s->mean_kl_to_gt
                << '\n';
        };
        line("vulnerable", rep.alignment.vulnerable);
        line("nonvulnerable", rep.alignment.nonvulnerable);
        write_file(dir + "/alignment.csv", out.str());
    }

    // teacher/student comparison grids with winner flags
    const VariantStats* teacher = nullptr;
    for (const auto& vs : rep.models)
        if (vs.name == "teacher") teacher = &vs;
    if (teacher) {
        for (const auto& vs : rep.models) {
            if (vs.name == "teacher") continue;
            std::ostringstream out;
            out << "attack,teacher,student,winner\n";
            for (auto m : kAllMethods) {
                auto t = teacher->aggregate.find(m);
                auto s = vs.aggregate.find(m);
                if (t == teacher->aggregate.end() || s == vs.aggregate.end()) continue;
                const char* winner = t->second.accuracy < s->second.accuracy   ? "teacher"
                                     : s->second.accuracy < t->second.accuracy ? "student"
                                                                               : "tie";
                out << attack_method_name(m) << ',' << t->second.accuracy << ',' << s->second.accuracy
                    << ',' << winner << '\n';
            }
            write_file(dir + "/comparison_" + vs.name + ".csv", out.str());
        }
    }

    // statistics.json: sign tests, reductions, alignment
    json stats;
    stats["alignment"] = alignment_json(rep.alignment);
    stats["partition"] = {{"attack", rep.partition.attack_method},
                          {"n_vulnerable", rep.partition.vulnerable_ids.size()},
                          {"n_nonvulnerable", rep.partition.nonvulnerable_ids.size()}};
    json sts = json::array();
    for (const auto& st : rep.sign_tests) {
        json j;
        j["student"] = st.student;
        j["metric"] = st.metric;
        j["teacher_higher"] = st.teacher_higher;
        j["student_higher"] = st.student_higher;
        j["ties"] = st.ties;
        if (st.p_value)
            j["p_value"] = *st.p_value;
        else
            j["p_value"] = nullptr;
        sts.push_back(std::move(j));
    }
    stats["sign_tests"] = std::move(sts);
    json reds = json::array();
    for (const auto& r : rep.reductions) {
        json j;
        j["name"] = r.name;
        if (r.value)
            j["value"] = *r.value;
        else
            j["value"] = nullptr;
        if (!r.note.empty()) j["note"] = r.note;
        reds.push_back(std::move(j));
    }
    stats["reductions"] = std::move(reds);
    write_file(dir + "/statistics.json", stats.dump(2) + "\n");

    // human-readable rollup
    std::ostringstream md;
    md << "# Attack report\n\n";
    md << table_markdown(agg) << "\n" << table_markdown(member) << "\n" << table_markdown(nonmember)
       << "\n";
    if (!vulnerable.rows.empty()) md << table_markdown(vulnerable) << "\n";
    if (!nonvulnerable.rows.empty()) md << table_markdown(nonvulnerable) << "\n";
    md << table_markdown(ppl, 2) << "\n";
    md << "**Partition** (attack: " << rep.partition.attack_method
       << "): " << rep.partition.vulnerable_ids.size() << " vulnerable / "
       << rep.partition.nonvulnerable_ids.size() << " non-vulnerable members\n\n";
    if (rep.alignment.vulnerable && rep.alignment.nonvulnerable) {
        md << "**Teacher alignment**: vulnerable stratum gt-prob "
           << rep.alignment.vulnerable->mean_gt_prob << ", kl " << rep.alignment.vulnerable->mean_kl_to_gt
           << "; non-vulnerable gt-prob " << rep.alignment.nonvulnerable->mean_gt_prob << ", kl "
           << rep.alignment.nonvulnerable->mean_kl_to_gt << "\n\n";
    }
    md << "## Sign tests (teacher vs student)\n\n";
    md << "| student | metric | teacher higher | student higher | ties | p |\n";
    md << "|---|---|---|---|---|---|\n";
    for (const auto& st : rep.sign_tests) {
        md << "| " << st.student << " | " << st.metric << " | " << st.teacher_higher << " | "
           << st.student_higher << " | " << st.ties << " | ";
        if (st.p_value)
            md << *st.p_value;
        else
            md << "-";
        md << " |\n";
    }
    md << "\n## Relative reductions vs plain distillation\n\n| comparison | reduction | note |\n|---|---|---|\n";
    for (const auto& r : rep.reductions) {
        md << "| " << r.name << " | ";
        if (r.value)
            md << *r.value;
        else
            md << "-";
        md << " | " << r.note << " |\n";
    }
    write_file(dir + "/report.md", md.str());
}

// ---- orchestration ----

namespace {

void write_run_manifest(const std::string& path, const std::string& kind, const ModelConfig& mc,
                        const TrainConfig& tc, std::optional<double> lambda,
                        const std::string& data_selection, const std::vector<std::string>& selected_ids,
                        const TrainStats& stats, const std::string& checkpoint) {
    json j;
    j["kind"] = kind;
    j["model_config"] = json::parse(mc.to_json_string());
    j["train_config"] = {{"epochs", tc.epochs},
                         {"batch_size", tc.batch_size},
                         {"learning_rate", tc.learning_rate},
                         {"seed", tc.seed},
                         {"optimizer", optimizer_name(tc.optimizer)}};
    if (tc.grad_clip) j["train_config"]["grad_clip"] = *tc.grad_clip;
    if (lambda) j["lambda"] = *lambda;
    if (!data_selection.empty()) j["data_selection"] = data_selection;
    j["selected_ids"] = selected_ids;
    json epochs = json::array();
    for (const auto& e : stats.epochs)
        epochs.push_back({{"loss", e.mean_seq_loss}, {"perplexity", e.perplexity}});
    j["epochs"] = std::move(epochs);
    j["wall_ms"] = stats.wall_ms;
    j["checkpoint"] = checkpoint;
    write_file(path, j.dump(2) + "\n");
}

struct StageLog {
    explicit StageLog(std::string name) : name_(std::move(name)) {
        std::cout << "[stage] " << name_ << "...\n" << std::flush;
        t0_ = std::chrono::steady_clock::now();
    }
    ~StageLog() {
        const double s =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0_).count();
        std::cout << "[stage] " << name_ << " done in " << s << " s\n" << std::flush;
    }
    std::string name_;
    std::chrono::steady_clock::time_point t0_;
};

json summary_attack_json(const VariantStats& vs, const AttackBundle& bundle) {
    json attacks;
    for (const auto& [method, outcome] : bundle.methods) {
        json a;
        const auto& agg = vs.aggregate.at(method);
        a["accuracy"] = agg.accuracy;
        a["tpr"] = agg.tpr;
        a["tnr"] = agg.tnr;
        a["tau"] = tau_json(outcome.calibrated.tau);
        a["orientation"] = orientation_name(outcome.calibrated.orientation);
        if (outcome.calibrated.config.k) a["k"] = *outcome.calibrated.config.k;
        if (outcome.calibrated.config.prefix_docs) a["prefix_docs"] = *outcome.calibrated.config.prefix_docs;
        a["acc_member"] = vs.acc_member.at(method);
        a["acc_nonmember"] = vs.acc_nonmember.at(method);
        if (vs.acc_vulnerable.at(method)) a["acc_vulnerable"] = *vs.acc_vulnerable.at(method);
        if (vs.acc_nonvulnerable.at(method)) a["acc_nonvulnerable"] = *vs.acc_nonvulnerable.at(method);
        attacks[attack_method_name(method)] = std::move(a);
    }
    return attacks;
}

}  // namespace

RunAllResult run_all(const ExperimentConfig& cfg) {
    cfg.validate();
    const auto& methods = cfg.attacks.methods;
    if (std::find(methods.begin(), methods.end(), cfg.attacks.partition_attack) == methods.end())
        throw ValidationError("partition attack must be among the selected methods");

    fs::create_directories(cfg.out_dir);
    fs::create_directories(cfg.out_dir + "/models");
    fs::create_directories(cfg.out_dir + "/runs");
    fs::create_directories(cfg.out_dir + "/attacks");
    write_file(cfg.out_dir + "/config.effective.json", cfg.to_json_string() + "\n");

    Corpus corpus;
    CorpusManifest manifest;
    NonmemberRoles roles;
    {
        StageLog log("prepare-data");
        corpus = load_corpus(cfg.corpus_path);
        manifest = make_manifest(corpus, cfg.master_seed);
        save_manifest(manifest, cfg.out_dir + "/manifest.json");
        roles = reserve_nonmember_roles(manifest, cfg.master_seed, cfg.attacks.prefix_pool,
                                        cfg.attacks.ref_train);
        json rj;
        rj["eval_ids"] = roles.eval_ids;
        rj["prefix_ids"] = roles.prefix_ids;
        rj["ref_train_ids"] = roles.ref_train_ids;
        write_file(cfg.out_dir + "/roles.json", rj.dump(2) + "\n");
    }

    // teacher
    ModelF teacher{ModelConfig{}};
    {
        StageLog log("train-teacher");
        ModelConfig mc = cfg.model;
        mc.seed = mix_seed(cfg.master_seed, "model/teacher");
        TrainConfig tc = cfg.train;
        tc.seed = mix_seed(cfg.master_seed, "train/teacher");
        auto run = train_teacher(corpus, mc, tc);
        teacher = std::move(run.model);
        save_checkpoint(teacher, cfg.out_dir + "/models/teacher.ckpt");
        write_run_manifest(cfg.out_dir + "/runs/teacher.run.json", "teacher", mc, tc, std::nullopt, "",
                           run.selected_ids, run.stats, "models/teacher.ckpt");
    }

    // reference model on the held-out nonmember slice
    ModelF ref{ModelConfig{}};
    {
        StageLog log("train-reference");
        ModelConfig mc = cfg.model;
        mc.seed = mix_seed(cfg.master_seed, "model/ref");
        TrainConfig tc = cfg.train;
        tc.seed = mix_seed(cfg.master_seed, "train/ref");
        std::unordered_map<std::string, const Document*> by_id;
        for (const auto& d : corpus.docs) by_id[d.id] = &d;
        std::vector<TokenSeq> seqs;
        for (const auto& id : roles.ref_train_ids) seqs.push_back(tokenize(*by_id.at(id), mc.max_seq));
        ModelF model(mc);
        model.init_parameters();
        const auto stats = fit_lm(model, seqs, tc);
        ref = std::move(model);
        save_checkpoint(ref, cfg.out_dir + "/models/ref.ckpt");
        write_run_manifest(cfg.out_dir + "/runs/ref.run.json", "reference", mc, tc, std::nullopt, "",
                           roles.ref_train_ids, stats, "models/ref.ckpt");
    }

    std::vector<std::pair<std::string, AttackBundle>> bundles;
    {
        StageLog log("attack-teacher");
        auto bundle = run_attacks(teacher, "teacher", corpus, manifest, roles, &ref, cfg.attacks,
                                  cfg.master_seed, cfg.jobs);
        write_attack_bundle(bundle, cfg.out_dir + "/attacks/teacher");
        bundles.emplace_back("teacher", std::move(bundle));
    }

    Partition partition;
    {
        StageLog log("partition");
        const auto& outcome = bundles[0].second.methods.at(cfg.attacks.partition_attack);
        std::vector<AttackScore> member_scores;
        for (size_t i = 0; i < outcome.scores.size(); ++i)
            if (outcome.labels[i]) member_scores.push_back(outcome.scores[i]);
        partition = partition_members(outcome.calibrated, member_scores);
        save_partition(partition, cfg.out_dir + "/partition.json");
        std::cout << "  vulnerable " << partition.vulnerable_ids.size() << " / non-vulnerable "
                  << partition.nonvulnerable_ids.size() << "\n";
    }

    AlignmentReport alignment;
    {
        StageLog log("alignment-diagnostics");
        std::vector<PreparedDoc> member_docs;
        for (const auto* d : corpus.members()) member_docs.push_back(prepare_doc(*d, cfg.model.max_seq));
        alignment = alignment_diagnostics(widen(teacher), member_docs, partition);
    }

    for (const auto& variant : cfg.variants) {
        StageLog log("distill-" + variant);
        ModelConfig mc = variant_model_config(cfg, variant);
        mc.seed = mix_seed(cfg.master_seed, "model/student_" + variant);
        DistillConfig dc;
        dc.lambda = cfg.lambda;
        dc.train = cfg.train;
        dc.train.seed = mix_seed(cfg.master_seed, "train/student_" + variant);
        if (variant_uses_nonvulnerable_selection(variant)) {
            dc.data_selection = DataSelection::nonvulnerable;
            dc.partition = partition;
        }
        auto run = distill_student(teacher, mc, dc, corpus);
        const std::string name = "student_" + variant;
        save_checkpoint(run.model, cfg.out_dir + "/models/" + name + ".ckpt");
        write_run_manifest(cfg.out_dir + "/runs/" + name + ".run.json", name, mc, dc.train, dc.lambda,
                           data_selection_name(dc.data_selection), run.selected_ids, run.stats,
                           "models/" + name + ".ckpt");

        auto bundle = run_attacks(run.model, name, corpus, manifest, roles, &ref, cfg.attacks,
                                  cfg.master_seed, cfg.jobs);
        write_attack_bundle(bundle, cfg.out_dir + "/attacks/" + name);
        bundles.emplace_back(name, std::move(bundle));
    }

    RunAllResult result;
    {
        StageLog log("report");
        std::vector<VariantStats> stats;
        for (const auto& [name, bundle] : bundles)
            stats.push_back(variant_stats_from_bundle(bundle, &partition));
        result.report = build_report(stats, partition, alignment);
        write_report_files(result.report, cfg.out_dir + "/report");

        json summary;
        summary["master_seed"] = cfg.master_seed;
        // hash the semantic configuration only; file locations are not inputs
        // to the experiment (corpus content is hashed separately)
        ExperimentConfig normalized = cfg;
        normalized.corpus_path = "";
        normalized.out_dir = "";
        summary["config_hash"] = hex64(fnv1a64(normalized.to_json_string()));
        summary["corpus_hash"] = hex64(fnv1a64(read_file(cfg.corpus_path)));
        summary["partition"] = {{"attack", partition.attack_method},
                                {"n_vulnerable", partition.vulnerable_ids.size()},
                                {"n_nonvulnerable", partition.nonvulnerable_ids.size()}};
        summary["alignment"] = alignment_json(alignment);
        json models;
        for (size_t i = 0; i < bundles.size(); ++i) {
            const auto& vs = result.report.models[i];
            json mj;
            mj["ppl_member"] = vs.ppl_member;
            mj["ppl_nonmember"] = vs.ppl_nonmember;
            if (vs.ppl_vulnerable) mj["ppl_vulnerable"] = *vs.ppl_vulnerable;
            if (vs.ppl_nonvulnerable) mj["ppl_nonvulnerable"] = *vs.ppl_nonvulnerable;
            mj["attacks"] = summary_attack_json(vs, bundles[i].second);
            models[bundles[i].first] = std::move(mj);
        }
        summary["models"] = std::move(models);
        json reds = json::array();
        for (const auto& r : result.report.reductions) {
            json j;
            j["name"] = r.name;
            j["value"] = r.value ? json(*r.value) : json(nullptr);
            if (!r.note.empty()) j["note"] = r.note;
            reds.push_back(std::move(j));
        }
        summary["reductions"] = std::move(reds);
        json sts = json::array();
        for (const auto& st : result.report.sign_tests) {
            json j;
            j["student"] = st.student;
            j["metric"] = st.metric;
            j["teacher_higher"] = st.teacher_higher;
            j["student_higher"] = st.student_higher;
            j["ties"] = st.ties;
            j["p_value"] = st.p_value ? json(*st.p_value) : json(nullptr);
            sts.push_back(std::move(j));
        }
        summary["sign_tests"] = std::move(sts);

        result.summary_path = cfg.out_dir + "/summary.json";
        write_file(result.summary_path, summary.dump(2) + "\n");
    }
    return result;
}

void run_bottleneck_ablation(const ExperimentConfig& cfg, const std::vector<int>& dims) {
    cfg.validate();
    if (dims.empty()) throw ValidationError("ablation: no bottleneck dimensions given");
    for (int b : dims)
        if (b < 1 || b > cfg.model.ffn) throw ValidationError("ablation: dimension out of range");

    fs::create_directories(cfg.out_dir + "/ablation");

    const Corpus corpus = load_corpus(cfg.corpus_path);
    const CorpusManifest manifest = make_manifest(corpus, cfg.master_seed);
    const NonmemberRoles roles = reserve_nonmember_roles(manifest, cfg.master_seed,
                                                         cfg.attacks.prefix_pool, cfg.attacks.ref_train);

    // reuse teacher/reference checkpoints from a prior run when present
    auto same_shape = [&](const ModelConfig& a) {
        return a.vocab == cfg.model.vocab && a.hidden == cfg.model.hidden &&
               a.layers == cfg.model.layers && a.heads == cfg.model.heads && a.ffn == cfg.model.ffn &&
               a.max_seq == cfg.model.max_seq;
    };
    ModelF teacher{ModelConfig{}};
    const std::string teacher_path = cfg.out_dir + "/models/teacher.ckpt";
    if (fs::exists(teacher_path)) {
        StageLog log("load-teacher");
        teacher = load_checkpoint(teacher_path);
        if (!same_shape(teacher.config()))
            throw ValidationError("existing teacher checkpoint does not match the configured model: " +
                                  teacher_path);
    } else {
        StageLog log("train-teacher");
        ModelConfig mc = cfg.model;
        mc.seed = mix_seed(cfg.master_seed, "model/teacher");
        TrainConfig tc = cfg.train;
        tc.seed = mix_seed(cfg.master_seed, "train/teacher");
        teacher = train_teacher(corpus, mc, tc).model;
        fs::create_directories(cfg.out_dir + "/models");
        save_checkpoint(teacher, teacher_path);
    }

    ModelF ref{ModelConfig{}};
    const std::string ref_path = cfg.out_dir + "/models/ref.ckpt";
    if (fs::exists(ref_path)) {
        StageLog log("load-reference");
        ref = load_checkpoint(ref_path);
        if (!same_shape(ref.config()))
            throw ValidationError("existing reference checkpoint does not match the configured model: " +
                                  ref_path);
    } else {
        StageLog log("train-reference");
        ModelConfig mc = cfg.model;
        mc.seed = mix_seed(cfg.master_seed, "model/ref");
        TrainConfig tc = cfg.train;
        tc.seed = mix_seed(cfg.master_seed, "train/ref");
        std::unordered_map<std::string, const Document*> by_id;
        for (const auto& d : corpus.docs) by_id[d.id] = &d;
        std::vector<TokenSeq> seqs;
        for (const auto& id : roles.ref_train_ids) seqs.push_back(tokenize(*by_id.at(id), mc.max_seq));
        ModelF model(mc);
        model.init_parameters();
        fit_lm(model, seqs, tc);
        ref = std::move(model);
        fs::create_directories(cfg.out_dir + "/models");
        save_checkpoint(ref, ref_path);
    }

    TableData member_t, nonmember_t;
    member_t.title = "Ablation: attack accuracy on members by bottleneck dimension";
    nonmember_t.title = "Ablation: attack accuracy on nonmembers by bottleneck dimension";
    member_t.row_header = nonmember_t.row_header = "B";
    for (auto m : kAllMethods) {
        member_t.col_names.push_back(attack_method_name(m));
        nonmember_t.col_names.push_back(attack_method_name(m));
    }
    std::ostringstream ppl_csv;
    ppl_csv << "B,ppl_member,up_path_weights,saves_params\n";

    for (int b : dims) {
        StageLog log("ablation-B" + std::to_string(b));
        ModelConfig mc = cfg.model;
        mc.bottleneck = b;
        mc.seed = mix_seed(cfg.master_seed, "model/ablate_" + std::to_string(b));
        DistillConfig dc;
        dc.lambda = cfg.lambda;
        dc.train = cfg.train;
        dc.train.seed = mix_seed(cfg.master_seed, "train/ablate_" + std::to_string(b));
        auto run = distill_student(teacher, mc, dc, corpus);
        auto bundle = run_attacks(run.model, "ablate_" + std::to_string(b), corpus, manifest, roles, &ref,
                                  cfg.attacks, cfg.master_seed, cfg.jobs);
        const auto vs = variant_stats_from_bundle(bundle, nullptr);

        std::vector<double> mrow, nrow;
        for (auto m : kAllMethods) {
            mrow.push_back(vs.acc_member.at(m));
            nrow.push_back(vs.acc_nonmember.at(m));
        }
        member_t.rows.emplace_back(std::to_string(b), std::move(mrow));
        nonmember_t.rows.emplace_back(std::to_string(b), std::move(nrow));
        ppl_csv << b << ',' << vs.ppl_member << ',' << ffn_up_path_weights(mc.hidden, mc.ffn, b) << ','
                << (bottleneck_saves_params(mc.hidden, mc.ffn, b) ? 1 : 0) << '\n';
    }

    write_table_csv(member_t, cfg.out_dir + "/ablation/member_accuracy.csv");
    write_table_csv(nonmember_t, cfg.out_dir + "/ablation/nonmember_accuracy.csv");
    write_file(cfg.out_dir + "/ablation/perplexity.csv", ppl_csv.str());
    write_file(cfg.out_dir + "/ablation/report.md",
               table_markdown(member_t) + "\n" + table_markdown(nonmember_t) + "\n");
}

}  // namespace mialab
