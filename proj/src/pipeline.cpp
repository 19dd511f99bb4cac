#include "mialab/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <sstream>
#include <thread>
#include <unordered_map>
#include <unordered_set>

#include <nlohmann/json.hpp>

namespace mialab {

using nlohmann::json;
namespace fs = std::filesystem;

// ---- config validation and io ----

void AttackSettings::validate() const {
    if (methods.empty()) throw ValidationError("attack settings: no methods selected");
    if (folds < 2) throw ValidationError("attack settings: folds must be >= 2");
    if (mink_grid.empty() || prefix_grid.empty())
        throw ValidationError("attack settings: empty hyperparameter grid");
    for (double k : mink_grid)
        if (k <= 0.0 || k > 1.0) throw ValidationError("attack settings: mink grid values must be in (0,1]");
    for (int p : prefix_grid)
        if (p < 1) throw ValidationError("attack settings: prefix grid values must be >= 1");
    if (default_k <= 0.0 || default_k > 1.0) throw ValidationError("attack settings: bad default_k");
    if (default_prefix < 1) throw ValidationError("attack settings: bad default_prefix");
    if (prefix_pool < *std::max_element(prefix_grid.begin(), prefix_grid.end()))
        throw ValidationError("attack settings: prefix pool smaller than the largest grid value");
    if (ref_train < 1) throw ValidationError("attack settings: ref_train must be >= 1");
}

void ExperimentConfig::validate() const {
    if (corpus_path.empty()) throw ValidationError("experiment config: corpus path missing");
    if (out_dir.empty()) throw ValidationError("experiment config: out_dir missing");
    if (!fs::exists(corpus_path))
        throw ValidationError("experiment config: corpus file does not exist: " + corpus_path);
    model.validate();
    train.validate();
    if (lambda < 0.0) throw ValidationError("experiment config: lambda must be >= 0");
    if (bottleneck_dim < 0 || (bottleneck_dim > 0 && bottleneck_dim > model.ffn))
        throw ValidationError("experiment config: bottleneck_dim out of range");
    if (variants.empty()) throw ValidationError("experiment config: variant set is empty");
    for (const auto& v : variants) variant_model_config(*this, v);  // throws on unknown names
    attacks.validate();
    if (jobs < 1) throw ValidationError("experiment config: jobs must be >= 1");
}

namespace {

json train_to_json(const TrainConfig& t) {
    json j;
    j["epochs"] = t.epochs;
    j["batch_size"] = t.batch_size;
    j["learning_rate"] = t.learning_rate;
    j["seed"] = t.seed;
    j["optimizer"] = optimizer_name(t.optimizer);
    if (t.grad_clip)
        j["grad_clip"] = *t.grad_clip;
    else
        j["grad_clip"] = nullptr;
    return j;
}

TrainConfig train_from_json(const json& j) {
    TrainConfig t;
    t.epochs = j.value("epochs", t.epochs);
    t.batch_size = j.value("batch_size", t.batch_size);
    t.learning_rate = j.value("learning_rate", t.learning_rate);
    t.seed = j.value("seed", t.seed);
    if (j.contains("optimizer")) t.optimizer = optimizer_from_name(j.at("optimizer").get<std::string>());
    if (j.contains("grad_clip")) {
        if (j.at("grad_clip").is_null())
            t.grad_clip.reset();
        else
            t.grad_clip = j.at("grad_clip").get<double>();
    }
    return t;
}

json attacks_to_json(const AttackSettings& a) {
    json j;
    json ms = json::array();
    for (auto m : a.methods) ms.push_back(attack_method_name(m));
    j["methods"] = std::move(ms);
    j["tune"] = a.tune;
    j["folds"] = a.folds;
    j["mink_grid"] = a.mink_grid;
    j["prefix_grid"] = a.prefix_grid;
    j["default_k"] = a.default_k;
    j["default_prefix"] = a.default_prefix;
    j["partition_attack"] = attack_method_name(a.partition_attack);
    j["prefix_pool"] = a.prefix_pool;
    j["ref_train"] = a.ref_train;
    return j;
}

AttackSettings attacks_from_json(const json& j) {
    AttackSettings a;
    if (j.contains("methods")) {
        a.methods.clear();
        for (const auto& m : j.at("methods")) a.methods.push_back(attack_method_from_name(m));
    }
    a.tune = j.value("tune", a.tune);
    a.folds = j.value("folds", a.folds);
    if (j.contains("mink_grid")) a.mink_grid = j.at("mink_grid").get<std::vector<double>>();
    if (j.contains("prefix_grid")) a.prefix_grid = j.at("prefix_grid").get<std::vector<int>>();
    a.default_k = j.value("default_k", a.default_k);
    a.default_prefix = j.value("default_prefix", a.default_prefix);
    if (j.contains("partition_attack"))
        a.partition_attack = attack_method_from_name(j.at("partition_attack").get<std::string>());
    a.prefix_pool = j.value("prefix_pool", a.prefix_pool);
    a.ref_train = j.value("ref_train", a.ref_train);
    return a;
}

}  // namespace

std::string ExperimentConfig::to_json_string() const {
    json j;
    j["corpus"] = corpus_path;
    j["out_dir"] = out_dir;
    j["master_seed"] = master_seed;
    j["model"] = json::parse(model.to_json_string());
    j["train"] = train_to_json(train);
    j["lambda"] = lambda;
    j["bottleneck_dim"] = bottleneck_dim;
    j["variants"] = variants;
    j["attacks"] = attacks_to_json(attacks);
    j["jobs"] = jobs;
    return j.dump(2);
}

ExperimentConfig ExperimentConfig::from_json_string(const std::string& s) {
    json j;
    try {
        j = json::parse(s);
    } catch (const json::exception& e) {
        throw ValidationError("experiment config parse error: " + std::string(e.what()));
    }
    ExperimentConfig c;
    c.corpus_path = j.value("corpus", c.corpus_path);
    c.out_dir = j.value("out_dir", c.out_dir);
    c.master_seed = j.value("master_seed", c.master_seed);
    if (j.contains("model")) c.model = ModelConfig::from_json_string(j.at("model").dump());
    if (j.contains("train")) c.train = train_from_json(j.at("train"));
    c.lambda = j.value("lambda", c.lambda);
    c.bottleneck_dim = j.value("bottleneck_dim", c.bottleneck_dim);
    if (j.contains("variants")) c.variants = j.at("variants").get<std::vector<std::string>>();
    if (j.contains("attacks")) c.attacks = attacks_from_json(j.at("attacks"));
    c.jobs = j.value("jobs", c.jobs);
    return c;
}

ExperimentConfig ExperimentConfig::load(const std::string& path) {
    return from_json_string(read_file(path));
}

ModelConfig variant_model_config(const ExperimentConfig& cfg, const std::string& variant) {
    ModelConfig m = cfg.model;
    if (variant == "none" || variant == "nonvulnerable") return m;
    if (variant == "bottleneck") {
        m.bottleneck = cfg.effective_bottleneck();
        return m;
    }
    if (variant == "nonorm") {
        m.norm = NormKind::nonorm;
        return m;
    }
    if (variant == "all") {
        m.bottleneck = cfg.effective_bottleneck();
        m.norm = NormKind::nonorm;
        return m;
    }
    throw ValidationError("unknown student variant: " + variant);
}

bool variant_uses_nonvulnerable_selection(const std::string& variant) {
    return variant == "nonvulnerable";
}

// ---- attack stage ----

namespace {

template <typename F>
void parallel_for(int n, int jobs, F&& f) {
    jobs = std::max(1, std::min(jobs, n));
    if (jobs == 1) {
        for (int i = 0; i < n; ++i) f(i);
        return;
    }
    std::atomic<int> next{0};
    std::mutex err_mu;
    std::exception_ptr err;
    std::vector<std::thread> workers;
    workers.reserve(static_cast<size_t>(jobs));
    for (int t = 0; t < jobs; ++t) {
        workers.emplace_back([&] {
            try {
                for (int i; (i = next.fetch_add(1)) < n;) f(i);
            } catch (...) {
                std::lock_guard<std::mutex> lk(err_mu);
                if (!err) err = std::current_exception();
            }
        });
    }
    for (auto& w : workers) w.join();
    if (err) std::rethrow_exception(err);
}

struct ExampleSet {
    std::vector<PreparedDoc> docs;       // members (sorted ids) then eval nonmembers (sorted ids)
    std::vector<bool> labels;            // is_member
    std::vector<const Document*> prefix_pool;
    int n_members = 0;
};

ExampleSet collect_examples(const Corpus& corpus, const CorpusManifest& manifest,
                            const NonmemberRoles& roles, int max_len) {
    std::unordered_map<std::string, const Document*> by_id;
    for (const auto& d : corpus.docs) by_id[d.id] = &d;
    auto lookup = [&](const std::string& id) {
        auto it = by_id.find(id);
        if (it == by_id.end()) throw ValidationError("manifest id not present in corpus: " + id);
        return it->second;
    };

    ExampleSet set;
    std::vector<std::string> member_ids = manifest.member_ids;
    std::sort(member_ids.begin(), member_ids.end());
    for (const auto& id : member_ids) {
        set.docs.push_back(prepare_doc(*lookup(id), max_len));
        set.labels.push_back(true);
    }
    set.n_members = static_cast<int>(set.docs.size());

    std::vector<std::string> eval_ids = roles.eval_ids;  // already sorted
    for (const auto& id : eval_ids) {
        set.docs.push_back(prepare_doc(*lookup(id), max_len));
        set.labels.push_back(false);
    }
    for (const auto& id : roles.prefix_ids) set.prefix_pool.push_back(lookup(id));
    return set;
}

double ppl_from(const std::vector<SequenceLogProbs>& lps, const std::vector<bool>& labels, bool member) {
    double nll = 0.0;
    int64_t tokens = 0;
    for (size_t i = 0; i < lps.size(); ++i) {
        if (labels[i] != member) continue;
        nll += lps[i].total_nll();
        tokens += lps[i].n_scored();
    }
    if (tokens == 0) throw ValidationError("perplexity over empty subset");
    return std::exp(nll / static_cast<double>(tokens));
}

}  // namespace

AttackBundle run_attacks(const ModelF& model, const std::string& model_name, const Corpus& corpus,
                         const CorpusManifest& manifest, const NonmemberRoles& roles,
                         const ModelF* ref_model, const AttackSettings& settings, uint64_t seed,
                         int jobs) {
    settings.validate();
    const ExampleSet set = collect_examples(corpus, manifest, roles, model.config().max_seq);
    const int n = static_cast<int>(set.docs.size());
    const ModelD md = widen(model);

    // one plain forward per example; every non-recall attack reuses these rows
    std::vector<SequenceLogProbs> lps(static_cast<size_t>(n));
    parallel_for(n, jobs, [&](int i) { lps[static_cast<size_t>(i)] = forward_logprobs(md, set.docs[static_cast<size_t>(i)].tokens); });

    AttackBundle bundle;
    bundle.model_name = model_name;
    bundle.ppl_member = ppl_from(lps, set.labels, true);
    bundle.ppl_nonmember = ppl_from(lps, set.labels, false);
    for (int i = 0; i < n; ++i)
        bundle.nll.push_back(ExampleNll{set.docs[static_cast<size_t>(i)].id, set.labels[static_cast<size_t>(i)],
                                        lps[static_cast<size_t>(i)].total_nll(),
                                        lps[static_cast<size_t>(i)].n_scored()});

    // recall scores for one prefix length, cached across tuning and the final pass
    std::unordered_map<int, std::vector<double>> recall_cache;
    auto recall_scores = [&](int prefix_docs) -> const std::vector<double>& {
        auto it = recall_cache.find(prefix_docs);
        if (it != recall_cache.end()) return it->second;
        std::vector<double> out(static_cast<size_t>(n));
        parallel_for(n, jobs, [&](int i) {
            const auto& doc = set.docs[static_cast<size_t>(i)];
            const int budget = model.config().max_seq - static_cast<int>(doc.tokens.size());
            const auto prefix = build_recall_prefix(set.prefix_pool, prefix_docs, budget);
            out[static_cast<size_t>(i)] = score_recall(md, doc, lps[static_cast<size_t>(i)], prefix).raw;
        });
        return recall_cache.emplace(prefix_docs, std::move(out)).first->second;
    };

    std::optional<ModelD> ref_d;
    std::vector<SequenceLogProbs> ref_lps;
    if (std::find(settings.methods.begin(), settings.methods.end(), AttackMethod::ref) !=
        settings.methods.end()) {
        if (!ref_model) throw ValidationError("ref attack requested but no reference model provided");
        if (ref_model->config().vocab != model.config().vocab)
            throw ValidationError("reference model tokenizer mismatch");
        ref_d = widen(*ref_model);
        ref_lps.resize(static_cast<size_t>(n));
        parallel_for(n, jobs, [&](int i) {
            ref_lps[static_cast<size_t>(i)] = forward_logprobs(*ref_d, set.docs[static_cast<size_t>(i)].tokens);
        });
    }

    for (AttackMethod method : settings.methods) {
        MethodOutcome outcome;
        AttackConfig acfg;
        acfg.method = method;

        std::vector<double> raws(static_cast<size_t>(n));
        switch (method) {
            case AttackMethod::loss:
                for (int i = 0; i < n; ++i)
                    raws[static_cast<size_t>(i)] = score_loss_raw(lps[static_cast<size_t>(i)].target_logprob);
                break;
            case AttackMethod::zlib:
                for (int i = 0; i < n; ++i) {
                    const auto& doc = set.docs[static_cast<size_t>(i)];
                    raws[static_cast<size_t>(i)] = score_zlib_raw(
                        lps[static_cast<size_t>(i)].total_nll(), deflate_compressed_size(doc.text));
                }
                break;
            case AttackMethod::mink: {
                double k = settings.default_k;
                if (settings.tune) {
                    auto scores_for = [&](double kk) {
                        std::vector<double> out(static_cast<size_t>(n));
                        for (int i = 0; i < n; ++i)
                            out[static_cast<size_t>(i)] =
                                score_mink_raw(lps[static_cast<size_t>(i)].target_logprob, kk);
                        return out;
                    };
                    const auto cv = cv_tune(settings.mink_grid, scores_for, set.labels,
                                            Orientation::higher_is_member, settings.folds,
                                            mix_seed(seed, "cv/mink/" + model_name));
                    k = cv.best_value;
                    outcome.tuning_curve = cv.grid_mean_accuracy;
                }
                acfg.k = k;
                for (int i = 0; i < n; ++i)
                    raws[static_cast<size_t>(i)] =
                        score_mink_raw(lps[static_cast<size_t>(i)].target_logprob, k);
                break;
            }
            case AttackMethod::minkpp: {
                double k = settings.default_k;
                if (settings.tune) {
                    auto scores_for = [&](double kk) {
                        std::vector<double> out(static_cast<size_t>(n));
                        for (int i = 0; i < n; ++i)
                            out[static_cast<size_t>(i)] =
                                score_minkpp_raw(lps[static_cast<size_t>(i)], kk).raw;
                        return out;
                    };
                    const auto cv = cv_tune(settings.mink_grid, scores_for, set.labels,
                                            Orientation::higher_is_member, settings.folds,
                                            mix_seed(seed, "cv/minkpp/" + model_name));
                    k = cv.best_value;
                    outcome.tuning_curve = cv.grid_mean_accuracy;
                }
                acfg.k = k;
                for (int i = 0; i < n; ++i)
                    raws[static_cast<size_t>(i)] = score_minkpp_raw(lps[static_cast<size_t>(i)], k).raw;
                break;
            }
            case AttackMethod::recall: {
                int p = settings.default_prefix;
                if (settings.tune) {
                    std::vector<double> grid;
                    for (int v : settings.prefix_grid) grid.push_back(v);
                    auto scores_for = [&](double v) { return recall_scores(static_cast<int>(v)); };
                    const auto cv =
                        cv_tune(grid, scores_for, set.labels, Orientation::higher_is_member,
                                settings.folds, mix_seed(seed, "cv/recall/" + model_name));
                    p = static_cast<int>(cv.best_value);
                    outcome.tuning_curve = cv.grid_mean_accuracy;
                }
                acfg.prefix_docs = p;
                raws = recall_scores(p);
                break;
            }
            case AttackMethod::ref: {
                acfg.ref_model = "ref";
                for (int i = 0; i < n; ++i)
                    raws[static_cast<size_t>(i)] =
                        score_ref_raw(lps[static_cast<size_t>(i)].mean_logprob(),
                                      ref_lps[static_cast<size_t>(i)].mean_logprob());
                break;
            }
        }

        for (int i = 0; i < n; ++i) {
            if (!std::isfinite(raws[static_cast<size_t>(i)]))
                throw RuntimeFailure("non-finite attack score for " + set.docs[static_cast<size_t>(i)].id);
            outcome.scores.push_back(AttackScore{set.docs[static_cast<size_t>(i)].id, method,
                                                 raws[static_cast<size_t>(i)],
                                                 Orientation::higher_is_member});
        }
        outcome.labels = set.labels;
        outcome.calibrated = calibrate_threshold(outcome.scores, outcome.labels);
        outcome.calibrated.config = acfg;
        bundle.methods[method] = std::move(outcome);
    }
    return bundle;
}

void write_attack_bundle(const AttackBundle& bundle, const std::string& dir) {
    fs::create_directories(dir);
    for (const auto& [method, outcome] : bundle.methods) {
        const std::string base = dir + "/" + attack_method_name(method);
        write_scores_csv(base + ".scores.csv", outcome.scores, outcome.labels);
        write_file(base + ".calibration.json", calibration_to_json(outcome.calibrated) + "\n");
        if (!outcome.tuning_curve.empty()) {
            std::ostringstream out;
            out << "value,mean_holdout_accuracy\n";
            char buf[64];
            for (const auto& [v, a] : outcome.tuning_curve) {
                std::snprintf(buf, sizeof(buf), "%.17g,%.17g", v, a);
                out << buf << '\n';
            }
            write_file(base + ".tuning.csv", out.str());
        }
    }
    json meta;
    meta["model"] = bundle.model_name;
    meta["ppl_member"] = bundle.ppl_member;
    meta["ppl_nonmember"] = bundle.ppl_nonmember;
    write_file(dir + "/metrics.json", meta.dump(2) + "\n");

    std::ostringstream out;
    out << "example_id,label,total_nll,tokens\n";
    char buf[64];
    for (const auto& e : bundle.nll) {
        std::snprintf(buf, sizeof(buf), "%.17g", e.total_nll);
        out << e.id << ',' << (e.is_member ? "member" : "nonmember") << ',' << buf << ',' << e.tokens
            << '\n';
    }
    write_file(dir + "/nll.csv", out.str());
}

AttackBundle read_attack_bundle(const std::string& dir, const std::string& model_name,
                                const std::vector<AttackMethod>& methods) {
    AttackBundle bundle;
    bundle.model_name = model_name;
    json meta;
    try {
        meta = json::parse(read_file(dir + "/metrics.json"));
    } catch (const json::exception& e) {
        throw ValidationError("bad metrics.json in " + dir + ": " + e.what());
    }
    bundle.ppl_member = meta.at("ppl_member").get<double>();
    bundle.ppl_nonmember = meta.at("ppl_nonmember").get<double>();
    for (AttackMethod m : methods) {
        const std::string base = dir + "/" + attack_method_name(m);
        MethodOutcome outcome;
        outcome.calibrated = calibration_from_json(read_file(base + ".calibration.json"));
        for (const auto& row : read_scores_csv(base + ".scores.csv")) {
            outcome.scores.push_back(AttackScore{row.example_id, row.method, row.raw, row.orientation});
            outcome.labels.push_back(row.is_member);
        }
        bundle.methods[m] = std::move(outcome);
    }

    std::ifstream nll_in(dir + "/nll.csv");
    if (nll_in) {
        std::string line;
        std::getline(nll_in, line);  // header
        while (std::getline(nll_in, line)) {
            if (line.empty()) continue;
            std::stringstream ss(line);
            std::string id, label, nll_s, tok_s;
            std::getline(ss, id, ',');
            std::getline(ss, label, ',');
            std::getline(ss, nll_s, ',');
            std::getline(ss, tok_s, ',');
            bundle.nll.push_back(ExampleNll{id, label == "member", std::stod(nll_s), std::stoi(tok_s)});
        }
    }
    return bundle;
}

std::string prepare_data(const std::string& corpus_path, const std::string& out_dir, uint64_t seed) {
    const Corpus corpus = load_corpus(corpus_path);
    const CorpusManifest manifest = make_manifest(corpus, seed);
    fs::create_directories(out_dir);
    const std::string path = out_dir + "/manifest.json";
    save_manifest(manifest, path);
    return path;
}

std::vector<int> default_bottleneck_sweep(const ModelConfig& m) {
    // hidden/16, hidden/8, hidden/4, hidden/2, hidden
    std::vector<int> dims;
    for (int div : {16, 8, 4, 2, 1}) {
        const int b = std::max(1, m.hidden / div);
        if (dims.empty() || dims.back() != b) dims.push_back(b);
    }
    return dims;
}

}  // namespace mialab
