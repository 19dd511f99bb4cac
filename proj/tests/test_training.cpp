#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "mialab/gen.hpp"
#include "mialab/rng.hpp"
#include "mialab/training.hpp"

using namespace mialab;

namespace {

ModelConfig tiny_config(uint64_t seed = 1) {
    ModelConfig c;
    c.vocab = 256;
    c.hidden = 16;
    c.layers = 2;
    c.heads = 2;
    c.ffn = 32;
    c.max_seq = 32;
    c.seed = seed;
    return c;
}

Corpus tiny_corpus(int members, int nonmembers, uint64_t seed) {
    GeneratorConfig g;
    g.members = members;
    g.nonmembers = nonmembers;
    g.target_len = 24;
    g.seed = seed;
    return generate_corpus(g);
}

TensorD rows_from(std::vector<std::vector<double>> probs) {
    const int64_t n = static_cast<int64_t>(probs.size());
    const int64_t v = static_cast<int64_t>(probs[0].size());
    TensorD t = TensorD::zeros({n, v});
    for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < v; ++j) t.at(i, j) = probs[static_cast<size_t>(i)][static_cast<size_t>(j)];
    return t;
}

TensorD log_rows(TensorD probs) {
    for (auto& x : probs.data) x = std::log(x);
    return probs;
}

}  // namespace

TEST_CASE("ce_loss fixtures") {
    // near-one-hot prediction scores zero loss
    const auto onehot = rows_from({{1.0, 1e-300, 1e-300}});
    CHECK(ce_loss(log_rows(onehot), std::vector<int>{0}) == doctest::Approx(0.0).epsilon(1e-12));

    // uniform over 4
    const auto uni = rows_from({{0.25, 0.25, 0.25, 0.25}});
    CHECK(ce_loss(log_rows(uni), std::vector<int>{2}) == doctest::Approx(std::log(4.0)).epsilon(1e-12));

    // two positions with p(target) 0.5 and 0.25
    const auto two = rows_from({{0.5, 0.5}, {0.25, 0.75}});
    CHECK(ce_loss(log_rows(two), std::vector<int>{0, 0}) ==
          doctest::Approx((std::log(2.0) + std::log(4.0)) / 2.0).epsilon(1e-12));

    CHECK_THROWS_AS(ce_loss(TensorD::zeros({0, 4}), std::vector<int>{}), ValidationError);
}

TEST_CASE("kl_divergence fixtures and properties") {
    const auto p = rows_from({{0.5, 0.5}});
    CHECK(kl_divergence(p, p) == doctest::Approx(0.0).epsilon(1e-15));

    const auto q = rows_from({{0.75, 0.25}});
    const double expect = 0.5 * std::log(0.5 / 0.75) + 0.5 * std::log(0.5 / 0.25);
    CHECK(kl_divergence(p, q) == doctest::Approx(expect).epsilon(1e-12));
    CHECK(kl_divergence(p, q) == doctest::Approx(0.143841).epsilon(1e-5));

    // nonnegativity over random row pairs
    Rng rng(99);
    for (int it = 0; it < 100; ++it) {
        std::vector<double> a(5), b(5);
        double sa = 0, sb = 0;
        for (int i = 0; i < 5; ++i) {
            a[static_cast<size_t>(i)] = 0.05 + rng.uniform();
            b[static_cast<size_t>(i)] = 0.05 + rng.uniform();
            sa += a[static_cast<size_t>(i)];
            sb += b[static_cast<size_t>(i)];
        }
        for (int i = 0; i < 5; ++i) {
            a[static_cast<size_t>(i)] /= sa;
            b[static_cast<size_t>(i)] /= sb;
        }
        CHECK(kl_divergence(rows_from({a}), rows_from({b})) >= -1e-12);
    }

    // q zero where p > 0 is an error, not infinity
    const auto qz = rows_from({{1.0, 0.0}});
    const auto pz = rows_from({{0.5, 0.5}});
    CHECK_THROWS_AS(kl_divergence(pz, qz), ValidationError);
}

TEST_CASE("distill_loss fixtures") {
    const auto student = log_rows(rows_from({{0.5, 0.5}}));
    const auto teacher = rows_from({{0.75, 0.25}});
    const std::vector<int> target{0};

    // lambda 0 reduces to the supervised loss
    CHECK(distill_loss_value(student, teacher, target, 0.0) ==
          doctest::Approx(std::log(2.0)).epsilon(1e-12));

    // teacher equal to student: KL vanishes for any lambda
    const auto same = rows_from({{0.5, 0.5}});
    CHECK(distill_loss_value(student, same, target, 7.0) ==
          doctest::Approx(std::log(2.0)).epsilon(1e-12));

    // lambda 1: ln 2 + KL([0.75,0.25] || [0.5,0.5])
    const double kl = 0.75 * std::log(1.5) + 0.25 * std::log(0.5);
    CHECK(distill_loss_value(student, teacher, target, 1.0) ==
          doctest::Approx(std::log(2.0) + kl).epsilon(1e-12));
    CHECK(distill_loss_value(student, teacher, target, 1.0) == doctest::Approx(0.823959).epsilon(1e-5));

    // monotone nondecreasing in lambda when the KL is nonzero
    double prev = -1.0;
    for (double lam : {0.0, 0.25, 1.0, 3.0, 10.0}) {
        const double v = distill_loss_value(student, teacher, target, lam);
        CHECK(v >= prev);
        prev = v;
    }
}

TEST_CASE("graph distill loss agrees with the value-level route") {
    Rng rng(4321);
    for (int it = 0; it < 20; ++it) {
        const int n = 3, v = 6;
        TensorD slog = TensorD::zeros({n, v});
        TensorD tprob = TensorD::zeros({n, v});
        std::vector<int> targets;
        for (int i = 0; i < n; ++i) {
            double ss = 0, ts = 0;
            std::vector<double> srow(v), trow(v);
            for (int j = 0; j < v; ++j) {
                srow[static_cast<size_t>(j)] = 0.05 + rng.uniform();
                trow[static_cast<size_t>(j)] = 0.05 + rng.uniform();
                ss += srow[static_cast<size_t>(j)];
                ts += trow[static_cast<size_t>(j)];
            }
            for (int j = 0; j < v; ++j) {
                slog.at(i, j) = std::log(srow[static_cast<size_t>(j)] / ss);
                tprob.at(i, j) = trow[static_cast<size_t>(j)] / ts;
            }
            targets.push_back(static_cast<int>(rng.below(v)));
        }
        const double lambda = rng.uniform() * 2.0;
        const double direct = distill_loss_value(slog, tprob, targets, lambda);

        GraphD g;
        auto node = distill_loss_node(g, g.constant(slog), tprob, targets, lambda);
        CHECK(g.value(node).data[0] == doctest::Approx(direct).epsilon(1e-10));
    }
}

TEST_CASE("distill loss gradients match finite differences on a 2-layer model") {
    // small double model; the acceptance suite runs the full desk variants
    ModelConfig sc;
    sc.vocab = 11;
    sc.hidden = 8;
    sc.layers = 2;
    sc.heads = 2;
    sc.ffn = 12;
    sc.max_seq = 8;
    sc.seed = 3;

    ModelConfig tc = sc;
    tc.seed = 4;

    const std::vector<int> tokens{1, 4, 7, 2, 9, 5};
    const std::vector<int> targets(tokens.begin() + 1, tokens.end());

    for (bool bottleneck : {false, true}) {
        for (NormKind nk : {NormKind::layernorm, NormKind::nonorm}) {
            ModelConfig cfg = sc;
            if (bottleneck) cfg.bottleneck = 6;
            cfg.norm = nk;
            ModelD student(cfg);
            student.init_parameters();

            ModelD teacher(tc);
            teacher.init_parameters();
            GraphD tg;
            auto tnode = teacher.build_logits(tg, tokens, false);
            auto tprobs_all = tg.value(tg.softmax(tnode, 1));
            TensorD tprobs = TensorD::zeros({static_cast<int64_t>(targets.size()), 11});
            std::copy(tprobs_all.data.begin(),
                      tprobs_all.data.begin() + static_cast<long>(targets.size() * 11),
                      tprobs.data.begin());

            auto build = [&](GraphD& g, const std::vector<GraphD::NodeId>& ids) {
                auto logits = student.build_logits_from(g, ids, tokens);
                auto scored = g.slice_rows(g.log_softmax(logits, 1), 0,
                                           static_cast<int64_t>(targets.size()));
                return distill_loss_node(g, scored, tprobs, targets, 0.8);
            };
            const auto res = grad_check(build, student.parameter_tensors(), 1e-5);
            INFO("bottleneck " << bottleneck << " norm " << norm_kind_name(nk) << " err "
                               << res.max_rel_error);
            CHECK(res.max_rel_error <= 1e-4);
        }
    }
}

TEST_CASE("training reduces teacher perplexity and is seed-reproducible") {
    const Corpus corpus = tiny_corpus(12, 2, 21);
    TrainConfig tc;
    tc.epochs = 6;
    tc.batch_size = 4;
    tc.learning_rate = 3e-3;
    tc.seed = 5;

    const auto run1 = train_teacher(corpus, tiny_config(), tc);
    CHECK(run1.stats.epochs.size() == 6);
    CHECK(run1.stats.epochs.back().perplexity < run1.stats.epochs.front().perplexity);
    CHECK(run1.selected_ids.size() == 12);

    const auto run2 = train_teacher(corpus, tiny_config(), tc);
    for (size_t e = 0; e < run1.stats.epochs.size(); ++e) {
        CHECK(run1.stats.epochs[e].mean_seq_loss == run2.stats.epochs[e].mean_seq_loss);
        CHECK(run1.stats.epochs[e].perplexity == run2.stats.epochs[e].perplexity);
    }
}

TEST_CASE("epochs must be at least one") {
    TrainConfig tc;
    tc.epochs = 0;
    CHECK_THROWS_AS(tc.validate(), ValidationError);
}

TEST_CASE("distillation selects the configured subset and freezes the teacher") {
    const Corpus corpus = tiny_corpus(8, 2, 31);
    TrainConfig tc;
    tc.epochs = 2;
    tc.batch_size = 4;
    tc.seed = 6;

    const auto teacher = train_teacher(corpus, tiny_config(7), tc);
    const auto teacher_params_before = teacher.model.parameter_tensors();

    Partition part;
    part.attack_method = "loss";
    const auto members = corpus.members();
    for (size_t i = 0; i < members.size(); ++i)
        (i < 3 ? part.vulnerable_ids : part.nonvulnerable_ids).push_back(members[i]->id);

    DistillConfig dc;
    dc.lambda = 1.0;
    dc.train = tc;

    SUBCASE("full selection trains on every member") {
        dc.data_selection = DataSelection::full;
        const auto run = distill_student(teacher.model, tiny_config(8), dc, corpus);
        CHECK(run.selected_ids.size() == 8);
    }

    SUBCASE("nonvulnerable selection excludes the vulnerable stratum from every batch") {
        dc.data_selection = DataSelection::nonvulnerable;
        dc.partition = part;
        const auto run = distill_student(teacher.model, tiny_config(8), dc, corpus);
        CHECK(run.selected_ids.size() == 5);
        for (const auto& epoch : run.stats.batch_ids)
            for (const auto& batch : epoch)
                for (const auto& id : batch)
                    CHECK(std::find(part.vulnerable_ids.begin(), part.vulnerable_ids.end(), id) ==
                          part.vulnerable_ids.end());
    }

    SUBCASE("an all-vulnerable partition is an error") {
        Partition all_v;
        all_v.attack_method = "loss";
        for (const auto* d : members) all_v.vulnerable_ids.push_back(d->id);
        dc.data_selection = DataSelection::nonvulnerable;
        dc.partition = all_v;
        CHECK_THROWS_AS(distill_student(teacher.model, tiny_config(8), dc, corpus), ValidationError);
    }

    SUBCASE("nonvulnerable selection without a partition is a config error") {
        dc.data_selection = DataSelection::nonvulnerable;
        dc.partition.reset();
        CHECK_THROWS_AS(dc.validate(), ValidationError);
    }

    // teacher untouched by any of the above
    const auto& after = teacher.model.parameter_tensors();
    for (size_t i = 0; i < after.size(); ++i) CHECK(after[i].data == teacher_params_before[i].data);
}

TEST_CASE("a large lambda pulls the student toward the teacher") {
    const Corpus corpus = tiny_corpus(8, 2, 41);
    TrainConfig tc;
    tc.epochs = 8;
    tc.batch_size = 4;
    tc.learning_rate = 3e-3;
    tc.seed = 11;

    const auto teacher = train_teacher(corpus, tiny_config(12), tc);

    DistillConfig plain;
    plain.lambda = 0.0;
    plain.train = tc;
    DistillConfig heavy;
    heavy.lambda = 100.0;
    heavy.train = tc;

    const auto s_plain = distill_student(teacher.model, tiny_config(13), plain, corpus);
    const auto s_heavy = distill_student(teacher.model, tiny_config(13), heavy, corpus);

    // probe KL(teacher || student) on the member set
    const auto teacher_d = widen(teacher.model);
    auto mean_kl = [&](const ModelF& student) {
        const auto student_d = widen(student);
        double total = 0.0;
        int count = 0;
        for (const auto* d : corpus.members()) {
            const auto tok = tokenize(*d, 32);
            const auto tl = forward_logprobs(teacher_d, tok.tokens);
            const auto sl = forward_logprobs(student_d, tok.tokens);
            TensorD tp = tl.rows;
            for (auto& x : tp.data) x = std::exp(x);
            TensorD sp = sl.rows;
            for (auto& x : sp.data) x = std::exp(x);
            total += kl_divergence(tp, sp);
            count += 1;
        }
        return total / count;
    };

    CHECK(mean_kl(s_heavy.model) < mean_kl(s_plain.model));
}
