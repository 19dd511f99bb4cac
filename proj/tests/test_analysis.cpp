#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <vector>

#include "mialab/analysis.hpp"
#include "mialab/rng.hpp"

using namespace mialab;

namespace {

CalibratedAttack higher_than(double tau) {
    CalibratedAttack c;
    c.config.method = AttackMethod::loss;
    c.tau = tau;
    c.orientation = Orientation::higher_is_member;
    return c;
}

AttackScore sc(const std::string& id, double raw) {
    return AttackScore{id, AttackMethod::loss, raw, Orientation::higher_is_member};
}

ModelF uniform_model(int vocab) {
    ModelConfig c;
    c.vocab = vocab;
    c.hidden = 8;
    c.layers = 1;
    c.heads = 1;
    c.ffn = 8;
    c.max_seq = 16;
    ModelF m(c);
    m.init_parameters();
    auto& ts = m.parameter_tensors();
    const auto& names = m.parameter_names();
    for (size_t i = 0; i < names.size(); ++i)
        if (names[i] == "head.w" || names[i] == "head.b")
            std::fill(ts[i].data.begin(), ts[i].data.end(), 0.0f);
    return m;
}

PreparedDoc pd(const std::string& id, const std::string& text, bool member) {
    Document d{id, text, member ? Membership::member : Membership::nonmember};
    return prepare_doc(d, 16);
}

}  // namespace

TEST_CASE("partition splits members by the calibrated decision") {
    const std::vector<AttackScore> scores{sc("a", 0.9), sc("b", 0.1), sc("c", 0.8)};
    const auto p = partition_members(higher_than(0.5), scores);
    CHECK(p.vulnerable_ids == std::vector<std::string>{"a", "c"});
    CHECK(p.nonvulnerable_ids == std::vector<std::string>{"b"});

    const std::vector<std::string> member_ids{"a", "b", "c"};
    p.validate_against(member_ids);
}

TEST_CASE("all-negative decisions leave the vulnerable set empty") {
    const std::vector<AttackScore> scores{sc("a", 0.1), sc("b", 0.2)};
    const auto p = partition_members(higher_than(0.5), scores);
    CHECK(p.vulnerable_ids.empty());
    CHECK(p.nonvulnerable_ids.size() == 2);
}

TEST_CASE("partition sizes always add up") {
    Rng rng(64);
    for (int it = 0; it < 50; ++it) {
        const int n = 1 + static_cast<int>(rng.below(40));
        std::vector<AttackScore> scores;
        std::vector<std::string> ids;
        for (int i = 0; i < n; ++i) {
            ids.push_back("m" + std::to_string(i));
            scores.push_back(sc(ids.back(), rng.uniform()));
        }
        const auto p = partition_members(higher_than(0.5), scores);
        CHECK(p.vulnerable_ids.size() + p.nonvulnerable_ids.size() == static_cast<size_t>(n));
        p.validate_against(ids);
    }
}

TEST_CASE("partition validation rejects overlap and gaps") {
    Partition p;
    p.vulnerable_ids = {"a"};
    p.nonvulnerable_ids = {"a"};
    const std::vector<std::string> ids{"a", "b"};
    CHECK_THROWS_AS(p.validate_against(ids), ValidationError);

    Partition q;
    q.vulnerable_ids = {"a"};
    CHECK_THROWS_AS(q.validate_against(ids), ValidationError);
}

TEST_CASE("alignment under a uniform teacher matches the closed form") {
    const auto m = widen(uniform_model(4));
    const std::vector<PreparedDoc> docs{pd("v1", std::string{char(1), char(2), char(3)}, true),
                                        pd("n1", std::string{char(0), char(1), char(0)}, true)};
    Partition part;
    part.vulnerable_ids = {"v1"};
    part.nonvulnerable_ids = {"n1"};

    const auto rep = alignment_diagnostics(m, docs, part);
    REQUIRE(rep.vulnerable.has_value());
    REQUIRE(rep.nonvulnerable.has_value());
    CHECK(rep.vulnerable->mean_gt_prob == doctest::Approx(0.25).epsilon(1e-9));
    CHECK(rep.vulnerable->mean_kl_to_gt == doctest::Approx(std::log(4.0)).epsilon(1e-9));
    CHECK(rep.nonvulnerable->mean_gt_prob == doctest::Approx(0.25).epsilon(1e-9));
}

TEST_CASE("an empty stratum is reported as absent, not zero") {
    const auto m = widen(uniform_model(4));
    const std::vector<PreparedDoc> docs{pd("v1", std::string{char(1), char(2)}, true)};
    Partition part;
    part.vulnerable_ids = {"v1"};
    const auto rep = alignment_diagnostics(m, docs, part);
    CHECK(rep.vulnerable.has_value());
    CHECK(!rep.nonvulnerable.has_value());
}

TEST_CASE("single-sequence stratum satisfies the geometric-mean identity") {
    // mean KL equals -ln(geometric mean of ground-truth probabilities)
    ModelConfig c;
    c.vocab = 256;
    c.hidden = 8;
    c.layers = 1;
    c.heads = 2;
    c.ffn = 16;
    c.max_seq = 16;
    c.seed = 5;
    ModelF m(c);
    m.init_parameters();
    const auto md = widen(m);

    const auto doc = pd("x", "hello there", true);
    Partition part;
    part.vulnerable_ids = {"x"};
    const auto rep = alignment_diagnostics(md, {doc}, part);

    const auto lp = forward_logprobs(md, doc.tokens);
    double geo = 0.0;
    for (double l : lp.target_logprob) geo += l;
    geo = std::exp(geo / static_cast<double>(lp.n_scored()));
    CHECK(rep.vulnerable->mean_kl_to_gt == doctest::Approx(-std::log(geo)).epsilon(1e-9));

    // per-position identity kl_t = -ln p_t, verified against the brute-force
    // one-hot divergence over the full row
    for (int r = 0; r < lp.n_scored(); ++r) {
        const int target = doc.tokens[static_cast<size_t>(lp.first_target + r)];
        double brute = 0.0;
        for (int z = 0; z < lp.vocab; ++z)
            if (z == target) brute += 1.0 * (std::log(1.0) - lp.rows.at(r, z));
        CHECK(brute == doctest::Approx(-lp.target_logprob[static_cast<size_t>(r)]).epsilon(1e-12));
    }
}

TEST_CASE("perplexity of the uniform model is the vocabulary size") {
    const auto m = widen(uniform_model(16));
    const std::vector<PreparedDoc> docs{pd("a", std::string{char(1), char(2), char(3), char(4)}, true),
                                        pd("b", std::string{char(5), char(6), char(7)}, true)};
    CHECK(perplexity(m, docs) == doctest::Approx(16.0).epsilon(1e-6));
    CHECK_THROWS_AS(perplexity(m, {}), ValidationError);

    // order invariance
    const std::vector<PreparedDoc> swapped{docs[1], docs[0]};
    CHECK(perplexity(m, docs) == doctest::Approx(perplexity(m, swapped)).epsilon(1e-12));
}

TEST_CASE("sign test fixtures") {
    CHECK(sign_test(32, 17).p_value == doctest::Approx(0.430025).epsilon(1e-5));
    CHECK(sign_test(1, 1).p_value == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(sign_test(4, 4).p_value == doctest::Approx(0.0625).epsilon(1e-12));
    CHECK(sign_test(10, 0).p_value == doctest::Approx(1.0).epsilon(1e-12));
    CHECK_THROWS_AS(sign_test(4, 5), ValidationError);
    CHECK_THROWS_AS(sign_test(0, 0), ValidationError);
}

TEST_CASE("sign test matches full enumeration for small n") {
    for (int n = 1; n <= 12; ++n) {
        for (int k = 0; k <= n; ++k) {
            // enumerate all 2^n outcomes, count those with >= k heads
            int64_t hits = 0;
            for (int64_t mask = 0; mask < (int64_t{1} << n); ++mask) {
                int heads = 0;
                for (int b = 0; b < n; ++b) heads += (mask >> b) & 1;
                hits += heads >= k;
            }
            const double exact = static_cast<double>(hits) / std::pow(2.0, n);
            CHECK(sign_test(n, k).p_value == doctest::Approx(exact).epsilon(1e-12));
        }
    }
}

TEST_CASE("binomial pmf sums to one") {
    for (int n : {5, 17, 40}) {
        double s = 0.0;
        for (int k = 0; k <= n; ++k) s += binomial_pmf_half(n, k);
        CHECK(std::abs(s - 1.0) <= 1e-12);
    }
}

TEST_CASE("relative reduction basics") {
    const std::vector<double> v{0.5, 0.9, 1.0};
    CHECK(relative_reduction(v, v) == doctest::Approx(0.0).epsilon(1e-15));

    // per-pair positive scaling leaves the statistic unchanged (ratios only)
    const std::vector<double> base{0.8, 0.4};
    const std::vector<double> var{0.4, 0.3};
    const std::vector<double> base_scaled{1.6, 1.2};
    const std::vector<double> var_scaled{0.8, 0.9};
    CHECK(relative_reduction(base, var) ==
          doctest::Approx(relative_reduction(base_scaled, var_scaled)).epsilon(1e-12));

    const std::vector<double> zero{0.0, 1.0};
    CHECK_THROWS_AS(relative_reduction(zero, var), ValidationError);
    CHECK_THROWS_AS(relative_reduction(base, std::vector<double>{1.0}), ValidationError);
}

TEST_CASE("compare_pair counts strict winners and ties") {
    const std::vector<std::pair<std::string, double>> teacher{{"loss", 0.6}, {"zlib", 0.5}};
    const std::vector<std::pair<std::string, double>> student{{"loss", 0.5}, {"zlib", 0.5}};
    const auto cmp = compare_pair(teacher, student);
    CHECK(cmp.second_lower == 1);
    CHECK(cmp.first_lower == 0);
    CHECK(cmp.ties == 1);

    const std::vector<std::pair<std::string, double>> other{{"loss", 0.5}, {"mink", 0.5}};
    CHECK_THROWS_AS(compare_pair(teacher, other), ValidationError);
}

TEST_CASE("subset accuracy is the within-class correct fraction") {
    CHECK(subset_accuracy({1, 1, 0, 1}, true) == doctest::Approx(0.75));
    CHECK(subset_accuracy({1, 1, 0, 1}, false) == doctest::Approx(0.25));
    CHECK_THROWS_AS(subset_accuracy({}, true), ValidationError);
}

TEST_CASE("reference statistics self-check passes end to end") {
    const auto lines = reference_statistics_selfcheck();
    CHECK(lines.size() >= 14);
    for (const auto& line : lines) {
        INFO(line.name << ": got " << line.got << " want " << line.want << " tol " << line.tol);
        CHECK(line.pass);
    }
}

TEST_CASE("table rendering") {
    TableData t;
    t.title = "demo";
    t.row_header = "model";
    t.col_names = {"loss", "zlib"};
    t.rows = {{"teacher", {0.5, 0.625}}, {"student", {0.75, 0.5}}};
    const auto md = table_markdown(t);
    CHECK(md.find("| teacher | 0.500 | 0.625 |") != std::string::npos);
}
