#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "mialab/analysis.hpp"
#include "mialab/attacks.hpp"
#include "mialab/corpus.hpp"
#include "mialab/gen.hpp"
#include "mialab/training.hpp"

namespace mialab {

struct AttackSettings {
    std::vector<AttackMethod> methods{AttackMethod::recall, AttackMethod::loss, AttackMethod::zlib,
                                      AttackMethod::mink, AttackMethod::minkpp, AttackMethod::ref};
    bool tune = true;
    int folds = 5;
    std::vector<double> mink_grid = default_mink_grid();
    std::vector<int> prefix_grid = default_prefix_grid();
    double default_k = 0.2;      // used when tuning is off
    int default_prefix = 4;      // used when tuning is off
    AttackMethod partition_attack = AttackMethod::loss;
    int prefix_pool = 12;   // nonmember documents reserved as ReCaLL context
    int ref_train = 32;     // nonmember documents reserved to train the reference model

    void validate() const;
};

// One experiment: teacher, reference model, the student variant set, six
// attacks against every model, and the report.
struct ExperimentConfig {
    std::string corpus_path;
    std::string out_dir;
    uint64_t master_seed = 1;
    ModelConfig model;  // per-role seeds are derived from master_seed
    TrainConfig train;
    double lambda = 1.0;
    int bottleneck_dim = 0;  // 0 = hidden/2
    std::vector<std::string> variants{"none", "nonvulnerable", "bottleneck", "nonorm", "all"};
    AttackSettings attacks;
    int jobs = 1;

    void validate() const;
    int effective_bottleneck() const { return bottleneck_dim > 0 ? bottleneck_dim : model.hidden / 2; }
    std::string to_json_string() const;
    static ExperimentConfig from_json_string(const std::string& s);
    static ExperimentConfig load(const std::string& path);
};

// Student architecture/selection for a named variant:
// none -> plain distillation; nonvulnerable -> plain architecture on the
// non-vulnerable subset; bottleneck / nonorm / all -> architecture flags.
ModelConfig variant_model_config(const ExperimentConfig& cfg, const std::string& variant);
bool variant_uses_nonvulnerable_selection(const std::string& variant);

// ---- attack stage ----

struct MethodOutcome {
    CalibratedAttack calibrated;
    std::vector<AttackScore> scores;  // members first, then eval nonmembers (sorted ids within each)
    std::vector<bool> labels;
    std::vector<std::pair<double, double>> tuning_curve;  // (grid value, mean held-out accuracy)
};

struct ExampleNll {
    std::string id;
    bool is_member = false;
    double total_nll = 0.0;
    int tokens = 0;
};

struct AttackBundle {
    std::string model_name;
    std::map<AttackMethod, MethodOutcome> methods;
    std::vector<ExampleNll> nll;  // per evaluated example; feeds stratified perplexity
    double ppl_member = 0.0;
    double ppl_nonmember = 0.0;
};

// Runs the configured attacks against one model. Scoring is read-only over
// the model and parallelizes across examples up to `jobs`; results are
// reduced in sorted-id order so the jobs count never changes any output.
AttackBundle run_attacks(const ModelF& model, const std::string& model_name, const Corpus& corpus,
                         const CorpusManifest& manifest, const NonmemberRoles& roles,
                         const ModelF* ref_model, const AttackSettings& settings, uint64_t seed,
                         int jobs);

void write_attack_bundle(const AttackBundle& bundle, const std::string& dir);
AttackBundle read_attack_bundle(const std::string& dir, const std::string& model_name,
                                const std::vector<AttackMethod>& methods);

// ---- report stage ----

struct VariantStats {
    std::string name;
    std::map<AttackMethod, AttackConfig> attack_configs;  // tuned hyperparameters
    std::map<AttackMethod, MiaMetrics> aggregate;
    std::map<AttackMethod, double> acc_member, acc_nonmember;
    std::map<AttackMethod, std::optional<double>> acc_vulnerable, acc_nonvulnerable;
    double ppl_member = 0.0;
    double ppl_nonmember = 0.0;
    std::optional<double> ppl_vulnerable, ppl_nonvulnerable;
};

struct RunReport {
    std::vector<VariantStats> models;  // teacher first
    Partition partition;
    AlignmentReport alignment;

    struct Reduction {
        std::string name;
        std::optional<double> value;
        std::string note;
    };
    std::vector<Reduction> reductions;

    struct PairSignTest {
        std::string student;
        std::string metric;  // aggregate | member_specific
        int teacher_higher = 0, student_higher = 0, ties = 0;
        std::optional<double> p_value;  // absent when every attack ties
    };
    std::vector<PairSignTest> sign_tests;
};

VariantStats variant_stats_from_bundle(const AttackBundle& bundle, const Partition* partition);

RunReport build_report(const std::vector<VariantStats>& models, const Partition& partition,
                       const AlignmentReport& alignment);

void write_report_files(const RunReport& report, const std::string& dir);

// ---- whole-run orchestration ----

struct RunAllResult {
    std::string summary_path;
    RunReport report;
};

RunAllResult run_all(const ExperimentConfig& cfg);

// Sweep over bottleneck dimensions: hidden/16, hidden/8, hidden/4, hidden/2,
// hidden. The last point deliberately lands past the parameter-savings
// threshold.
std::vector<int> default_bottleneck_sweep(const ModelConfig& m);
void run_bottleneck_ablation(const ExperimentConfig& cfg, const std::vector<int>& dims);

// stage helpers shared by the CLI subcommands
std::string prepare_data(const std::string& corpus_path, const std::string& out_dir, uint64_t seed);

}  // namespace mialab
