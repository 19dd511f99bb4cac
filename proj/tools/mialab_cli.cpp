// Experiment CLI: corpus generation and validation, teacher/student training,
// the six-attack scoring stage, vulnerability partitioning, report building,
// and the end-to-end runner. Exit codes: 0 ok, 2 validation error, 3 runtime
// failure.

#include <filesystem>
#include <iostream>
#include <sstream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "mialab/pipeline.hpp"

using namespace mialab;
namespace fs = std::filesystem;

namespace {

ExperimentConfig load_config_with_overrides(const std::string& config_path, const std::string& corpus,
                                            const std::string& out, std::optional<uint64_t> seed,
                                            std::optional<int> jobs) {
    ExperimentConfig cfg;
    if (!config_path.empty()) cfg = ExperimentConfig::load(config_path);
    if (!corpus.empty()) cfg.corpus_path = corpus;
    if (!out.empty()) cfg.out_dir = out;
    if (seed) cfg.master_seed = *seed;
    if (jobs) cfg.jobs = *jobs;
    return cfg;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"membership-inference lab for distilled byte-level language models"};
    app.require_subcommand(1);

    // ---- gen-corpus ----
    auto* gen = app.add_subcommand("gen-corpus", "generate a synthetic two-topic corpus");
    GeneratorConfig gen_cfg;
    std::string gen_out = "corpus.jsonl";
    gen->add_option("--out", gen_out, "output JSONL path");
    gen->add_option("--members", gen_cfg.members, "member document count");
    gen->add_option("--nonmembers", gen_cfg.nonmembers, "nonmember document count");
    gen->add_option("--topical-frac", gen_cfg.topical_member_frac,
                    "fraction of members in the repetitive topical stratum");
    gen->add_option("--target-len", gen_cfg.target_len, "approximate document length in bytes");
    gen->add_option("--seed", gen_cfg.seed, "generator seed");
    gen->callback([&] {
        const Corpus c = generate_corpus(gen_cfg);
        save_corpus(c, gen_out);
        std::cout << "wrote " << c.docs.size() << " documents to " << gen_out << "\n";
    });

    // ---- prepare-data ----
    auto* prep = app.add_subcommand("prepare-data", "validate a corpus and write its manifest");
    std::string prep_in, prep_out = ".";
    uint64_t prep_seed = 1;
    prep->add_option("--in", prep_in, "corpus JSONL path")->required();
    prep->add_option("--out", prep_out, "output directory");
    prep->add_option("--seed", prep_seed, "manifest seed");
    prep->callback([&] {
        const std::string path = prepare_data(prep_in, prep_out, prep_seed);
        std::cout << "manifest written to " << path << "\n";
    });

    // ---- train-teacher ----
    auto* tt = app.add_subcommand("train-teacher", "train the teacher on the member split");
    std::string tt_config, tt_corpus, tt_out;
    std::optional<uint64_t> tt_seed;
    std::optional<int> tt_epochs;
    tt->add_option("--config", tt_config, "experiment config JSON");
    tt->add_option("--corpus", tt_corpus, "corpus JSONL path");
    tt->add_option("--out", tt_out, "output directory");
    tt->add_option("--seed", tt_seed, "master seed override");
    tt->add_option("--epochs", tt_epochs, "training epochs override");
    tt->callback([&] {
        ExperimentConfig cfg = load_config_with_overrides(tt_config, tt_corpus, tt_out, tt_seed, {});
        if (tt_epochs) cfg.train.epochs = *tt_epochs;
        cfg.validate();
        fs::create_directories(cfg.out_dir + "/models");
        ModelConfig mc = cfg.model;
        mc.seed = mix_seed(cfg.master_seed, "model/teacher");
        TrainConfig tc = cfg.train;
        tc.seed = mix_seed(cfg.master_seed, "train/teacher");
        const Corpus corpus = load_corpus(cfg.corpus_path);
        auto run = train_teacher(corpus, mc, tc);
        save_checkpoint(run.model, cfg.out_dir + "/models/teacher.ckpt");
        std::cout << "teacher checkpoint: " << cfg.out_dir << "/models/teacher.ckpt (final ppl "
                  << run.stats.epochs.back().perplexity << ")\n";
    });

    // ---- partition ----
    auto* part = app.add_subcommand("partition",
                                    "split members into vulnerable/non-vulnerable from teacher scores");
    std::string part_runs = ".";
    std::string part_attack = "loss";
    part->add_option("--runs", part_runs, "run directory containing attacks/teacher");
    part->add_option("--attack", part_attack, "attack method driving the partition");
    part->callback([&] {
        const AttackMethod m = attack_method_from_name(part_attack);
        const std::string dir = part_runs + "/attacks/teacher";
        const auto bundle = read_attack_bundle(dir, "teacher", {m});
        const auto& outcome = bundle.methods.at(m);
        std::vector<AttackScore> member_scores;
        for (size_t i = 0; i < outcome.scores.size(); ++i)
            if (outcome.labels[i]) member_scores.push_back(outcome.scores[i]);
        const Partition p = partition_members(outcome.calibrated, member_scores);
        save_partition(p, part_runs + "/partition.json");
        std::cout << "partition: " << p.vulnerable_ids.size() << " vulnerable / "
                  << p.nonvulnerable_ids.size() << " non-vulnerable\n";
    });

    // ---- distill ----
    auto* dist = app.add_subcommand("distill", "distill one student variant from a teacher checkpoint");
    std::string d_config, d_corpus, d_out, d_variant = "none", d_teacher, d_partition;
    std::optional<uint64_t> d_seed;
    std::optional<int> d_epochs, d_bdim;
    std::optional<double> d_lambda;
    dist->add_option("--config", d_config, "experiment config JSON");
    dist->add_option("--corpus", d_corpus, "corpus JSONL path");
    dist->add_option("--out", d_out, "output directory");
    dist->add_option("--variant", d_variant, "none|nonvulnerable|bottleneck|nonorm|all");
    dist->add_option("--teacher", d_teacher, "teacher checkpoint (default <out>/models/teacher.ckpt)");
    dist->add_option("--partition", d_partition, "partition JSON (required for --variant nonvulnerable)");
    dist->add_option("--lambda", d_lambda, "distillation weight override");
    dist->add_option("--epochs", d_epochs, "training epochs override");
    dist->add_option("--bottleneck-dim", d_bdim, "bottleneck dimension override");
    dist->add_option("--seed", d_seed, "master seed override");
    dist->callback([&] {
        ExperimentConfig cfg = load_config_with_overrides(d_config, d_corpus, d_out, d_seed, {});
        if (d_lambda) cfg.lambda = *d_lambda;
        if (d_epochs) cfg.train.epochs = *d_epochs;
        if (d_bdim) cfg.bottleneck_dim = *d_bdim;
        cfg.validate();

        const std::string teacher_path =
            d_teacher.empty() ? cfg.out_dir + "/models/teacher.ckpt" : d_teacher;
        if (!fs::exists(teacher_path))
            throw ValidationError("teacher checkpoint not found: " + teacher_path);
        const ModelF teacher = load_checkpoint(teacher_path);

        ModelConfig mc = variant_model_config(cfg, d_variant);
        mc.seed = mix_seed(cfg.master_seed, "model/student_" + d_variant);
        DistillConfig dc;
        dc.lambda = cfg.lambda;
        dc.train = cfg.train;
        dc.train.seed = mix_seed(cfg.master_seed, "train/student_" + d_variant);
        if (variant_uses_nonvulnerable_selection(d_variant)) {
            const std::string ppath =
                d_partition.empty() ? cfg.out_dir + "/partition.json" : d_partition;
            if (!fs::exists(ppath))
                throw ValidationError("--variant nonvulnerable requires a partition file (" + ppath +
                                      " not found)");
            dc.data_selection = DataSelection::nonvulnerable;
            dc.partition = load_partition(ppath);
        }
        const Corpus corpus = load_corpus(cfg.corpus_path);
        auto run = distill_student(teacher, mc, dc, corpus);
        fs::create_directories(cfg.out_dir + "/models");
        const std::string out_path = cfg.out_dir + "/models/student_" + d_variant + ".ckpt";
        save_checkpoint(run.model, out_path);
        std::cout << "student checkpoint: " << out_path << " (trained on " << run.selected_ids.size()
                  << " members, bottleneck "
                  << (mc.bottleneck ? std::to_string(*mc.bottleneck) : std::string("off")) << ", norm "
                  << norm_kind_name(mc.norm) << ")\n";
    });

    // ---- attack ----
    auto* atk = app.add_subcommand("attack", "score one model with the selected attacks");
    std::string a_config, a_corpus, a_out, a_model, a_name = "model", a_methods, a_ref;
    std::optional<uint64_t> a_seed;
    std::optional<int> a_jobs, a_folds;
    bool a_tune = false, a_no_tune = false;
    atk->add_option("--config", a_config, "experiment config JSON");
    atk->add_option("--corpus", a_corpus, "corpus JSONL path");
    atk->add_option("--out", a_out, "output directory");
    atk->add_option("--model", a_model, "checkpoint to attack")->required();
    atk->add_option("--name", a_name, "model name used for the output subdirectory");
    atk->add_option("--methods", a_methods, "comma-separated methods (default: all six)");
    atk->add_option("--ref-model", a_ref, "reference checkpoint (default <out>/models/ref.ckpt)");
    atk->add_flag("--tune", a_tune, "cross-validate attack hyperparameters");
    atk->add_flag("--no-tune", a_no_tune, "disable hyperparameter tuning");
    atk->add_option("--folds", a_folds, "cross-validation folds");
    atk->add_option("--jobs", a_jobs, "parallel scoring workers");
    atk->add_option("--seed", a_seed, "master seed override");
    atk->callback([&] {
        ExperimentConfig cfg = load_config_with_overrides(a_config, a_corpus, a_out, a_seed, a_jobs);
        if (a_tune) cfg.attacks.tune = true;
        if (a_no_tune) cfg.attacks.tune = false;
        if (a_folds) cfg.attacks.folds = *a_folds;
        if (!a_methods.empty()) {
            cfg.attacks.methods.clear();
            std::stringstream ss(a_methods);
            std::string item;
            while (std::getline(ss, item, ',')) cfg.attacks.methods.push_back(attack_method_from_name(item));
        }
        cfg.validate();

        const Corpus corpus = load_corpus(cfg.corpus_path);
        const CorpusManifest manifest = make_manifest(corpus, cfg.master_seed);
        const NonmemberRoles roles = reserve_nonmember_roles(manifest, cfg.master_seed,
                                                             cfg.attacks.prefix_pool, cfg.attacks.ref_train);
        const ModelF model = load_checkpoint(a_model);

        std::optional<ModelF> ref;
        const bool needs_ref = std::find(cfg.attacks.methods.begin(), cfg.attacks.methods.end(),
                                         AttackMethod::ref) != cfg.attacks.methods.end();
        if (needs_ref) {
            const std::string rp = a_ref.empty() ? cfg.out_dir + "/models/ref.ckpt" : a_ref;
            if (!fs::exists(rp)) throw ValidationError("reference checkpoint not found: " + rp);
            ref = load_checkpoint(rp);
        }

        const auto bundle = run_attacks(model, a_name, corpus, manifest, roles,
                                        ref ? &*ref : nullptr, cfg.attacks, cfg.master_seed, cfg.jobs);
        write_attack_bundle(bundle, cfg.out_dir + "/attacks/" + a_name);
        std::cout << "score tables in " << cfg.out_dir << "/attacks/" << a_name << "\n";
        for (const auto& [m, outcome] : bundle.methods)
            std::cout << "  " << attack_method_name(m) << ": accuracy "
                      << outcome.calibrated.calibration_metrics.accuracy << "\n";
    });

    // ---- report ----
    auto* repc = app.add_subcommand("report", "assemble tables and statistics from a run directory");
    std::string r_runs = ".";
    bool r_selfcheck = false;
    repc->add_option("--runs", r_runs, "run directory (from run-all)");
    repc->add_flag("--self-check", r_selfcheck,
                   "verify the statistics pipeline against the bundled reference grids");
    repc->callback([&] {
        if (r_selfcheck) {
            bool all = true;
            for (const auto& line : reference_statistics_selfcheck()) {
                all = all && line.pass;
                std::cout << (line.pass ? "[PASS] " : "[FAIL] ") << line.name << ": got " << line.got
                          << ", want " << line.want << " (tol " << line.tol << ")"
                          << (line.note.empty() ? "" : "  -- " + line.note) << "\n";
            }
            if (!all) throw RuntimeFailure("reference statistics self-check failed");
            return;
        }
        const Partition partition = load_partition(r_runs + "/partition.json");
        std::vector<VariantStats> stats;
        std::vector<std::string> names{"teacher"};
        for (const auto& entry : fs::directory_iterator(r_runs + "/attacks")) {
            const std::string name = entry.path().filename().string();
            if (name != "teacher") names.push_back(name);
        }
        std::sort(names.begin() + 1, names.end());
        std::vector<AttackMethod> methods;
        for (const auto& entry : fs::directory_iterator(r_runs + "/attacks/teacher")) {
            const std::string f = entry.path().filename().string();
            const auto pos = f.find(".scores.csv");
            if (pos != std::string::npos) methods.push_back(attack_method_from_name(f.substr(0, pos)));
        }
        if (methods.empty()) throw ValidationError("no score tables under " + r_runs + "/attacks/teacher");
        for (const auto& name : names) {
            const auto bundle = read_attack_bundle(r_runs + "/attacks/" + name, name, methods);
            stats.push_back(variant_stats_from_bundle(bundle, &partition));
        }
        AlignmentReport alignment;  // re-derivable only with the teacher; left absent in file-only mode
        const auto report = build_report(stats, partition, alignment);
        write_report_files(report, r_runs + "/report");
        std::cout << "report written to " << r_runs << "/report\n";
    });

    // ---- run-all ----
    auto* ra = app.add_subcommand("run-all", "full pipeline: prepare, train, partition, distill, attack, report");
    std::string ra_config, ra_corpus, ra_out;
    std::optional<uint64_t> ra_seed;
    std::optional<int> ra_jobs;
    ra->add_option("--config", ra_config, "experiment config JSON");
    ra->add_option("--corpus", ra_corpus, "corpus JSONL path");
    ra->add_option("--out", ra_out, "output directory");
    ra->add_option("--seed", ra_seed, "master seed");
    ra->add_option("--jobs", ra_jobs, "parallel scoring workers");
    ra->callback([&] {
        const ExperimentConfig cfg =
            load_config_with_overrides(ra_config, ra_corpus, ra_out, ra_seed, ra_jobs);
        const auto result = run_all(cfg);
        std::cout << "summary: " << result.summary_path << "\n";
    });

    // ---- ablate-bottleneck ----
    auto* ab = app.add_subcommand("ablate-bottleneck", "sweep bottleneck dimensions");
    std::string ab_config, ab_corpus, ab_out, ab_dims;
    std::optional<uint64_t> ab_seed;
    std::optional<int> ab_jobs;
    ab->add_option("--config", ab_config, "experiment config JSON");
    ab->add_option("--corpus", ab_corpus, "corpus JSONL path");
    ab->add_option("--out", ab_out, "output directory");
    ab->add_option("--dims", ab_dims, "comma-separated dimensions (default: hidden/16..hidden)");
    ab->add_option("--seed", ab_seed, "master seed");
    ab->add_option("--jobs", ab_jobs, "parallel scoring workers");
    ab->callback([&] {
        const ExperimentConfig cfg =
            load_config_with_overrides(ab_config, ab_corpus, ab_out, ab_seed, ab_jobs);
        std::vector<int> dims;
        if (!ab_dims.empty()) {
            std::stringstream ss(ab_dims);
            std::string item;
            while (std::getline(ss, item, ',')) dims.push_back(std::stoi(item));
        } else {
            dims = default_bottleneck_sweep(cfg.model);
        }
        run_bottleneck_ablation(cfg, dims);
        std::cout << "ablation tables in " << cfg.out_dir << "/ablation\n";
    });

    try {
        app.parse(argc, argv);
        return 0;
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    } catch (const ValidationError& e) {
        std::cerr << "validation error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "runtime failure: " << e.what() << "\n";
        return 3;
    }
}
