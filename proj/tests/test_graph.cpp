#include <doctest.h>

#include <cmath>
#include <functional>
#include <vector>

#include "mialab/graph.hpp"
#include "mialab/rng.hpp"

using namespace mialab;

namespace {

TensorD random_tensor(Rng& rng, std::vector<int64_t> shape, double lo = -1.5, double hi = 1.5) {
    TensorD t = TensorD::zeros(std::move(shape));
    for (auto& v : t.data) v = lo + (hi - lo) * rng.uniform();
    return t;
}

// scalar head: weighted mean with fixed random weights so every output
// element influences the loss differently
GraphD::NodeId weighted_head(GraphD& g, GraphD::NodeId x, Rng& rng) {
    TensorD w = random_tensor(rng, g.value(x).shape, 0.3, 1.7);
    return g.mean(g.mul(x, g.constant(std::move(w))));
}

using Builder = std::function<GraphD::NodeId(GraphD&, const std::vector<GraphD::NodeId>&, Rng&)>;

void sweep_op(const char* name, const std::vector<std::vector<int64_t>>& param_shapes, Builder body,
              int instances = 20, double lo = -1.5, double hi = 1.5) {
    for (int inst = 0; inst < instances; ++inst) {
        Rng rng(mix_seed(7700 + inst, name));
        std::vector<TensorD> params;
        for (const auto& s : param_shapes) params.push_back(random_tensor(rng, s, lo, hi));
        Rng head_rng(mix_seed(9900 + inst, name));
        auto build = [&](GraphD& g, const std::vector<GraphD::NodeId>& ids) {
            Rng r = head_rng;  // identical weights across harness re-evaluations
            return body(g, ids, r);
        };
        const auto res = grad_check(build, params, 1e-5);
        INFO(name << " instance " << inst << " rel err " << res.max_rel_error);
        CHECK(res.max_rel_error <= 1e-4);
    }
}

}  // namespace

TEST_CASE("softmax of equal logits is uniform") {
    GraphD g;
    auto x = g.constant(TensorD({1, 2}, {0.0, 0.0}));
    auto y = g.softmax(x, 1);
    CHECK(g.value(y).data[0] == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(g.value(y).data[1] == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("softmax rows are nonnegative and sum to one") {
    Rng rng(42);
    for (int it = 0; it < 30; ++it) {
        GraphD g;
        auto x = g.constant(random_tensor(rng, {5, 7}, -30.0, 30.0));
        auto y = g.softmax(x, 1);
        const auto& v = g.value(y);
        for (int64_t i = 0; i < 5; ++i) {
            double s = 0.0;
            for (int64_t j = 0; j < 7; ++j) {
                CHECK(v.at(i, j) >= 0.0);
                s += v.at(i, j);
            }
            CHECK(s == doctest::Approx(1.0).epsilon(1e-6));
        }
    }
}

TEST_CASE("matmul by identity returns the input") {
    GraphD g;
    auto eye = g.constant(TensorD({2, 2}, {1, 0, 0, 1}));
    auto a = g.constant(TensorD({2, 3}, {1, 2, 3, 4, 5, 6}));
    auto y = g.matmul(eye, a);
    CHECK(g.value(y).data == std::vector<double>{1, 2, 3, 4, 5, 6});
}

TEST_CASE("gradient of mean of squares matches the finite-difference oracle") {
    // d/dx mean(x^2) = 2x/n; at x=[1,2] that is [1,2]
    GraphD g;
    auto x = g.param(TensorD({2}, {1.0, 2.0}));
    auto loss = g.mean(g.mul(x, x));
    g.backward(loss);
    CHECK(g.grad(x).data[0] == doctest::Approx(1.0).epsilon(1e-9));
    CHECK(g.grad(x).data[1] == doctest::Approx(2.0).epsilon(1e-9));

    auto res = grad_check(
        [](GraphD& gg, const std::vector<GraphD::NodeId>& ids) { return gg.mean(gg.mul(ids[0], ids[0])); },
        {TensorD({2}, {1.0, 2.0})}, 1e-5);
    CHECK(res.max_rel_error <= 1e-8);
}

TEST_CASE("grad_check accepts x*x and flags a wrong adjoint") {
    auto quad = [](GraphD& g, const std::vector<GraphD::NodeId>& ids) {
        return g.sum(g.mul(ids[0], ids[0]));
    };
    CHECK(grad_check(quad, {TensorD::scalar(3.0)}, 1e-5).max_rel_error <= 1e-8);

    // deliberately wrong derivative (2x claimed as 3x): harness must see it
    auto buggy = [](GraphD& g, const std::vector<GraphD::NodeId>& ids) {
        return g.sum(g.unary_map(
            ids[0], [](double x) { return x * x; }, [](double x) { return 3.0 * x; }));
    };
    CHECK(grad_check(buggy, {TensorD::scalar(3.0)}, 1e-5).max_rel_error > 1e-2);
}

TEST_CASE("fan-out accumulates branch gradients additively") {
    GraphD g;
    auto x = g.param(TensorD({3}, {0.5, -0.25, 1.0}));
    auto f = g.exp(x);
    auto h = g.mul(x, x);
    auto y = g.sum(g.add(f, h));  // y = sum(exp(x) + x^2)
    g.backward(y);
    for (int i = 0; i < 3; ++i) {
        const double xv = g.value(x).data[static_cast<size_t>(i)];
        CHECK(g.grad(x).data[static_cast<size_t>(i)] ==
              doctest::Approx(std::exp(xv) + 2.0 * xv).epsilon(1e-12));
    }
}

TEST_CASE("log_softmax equals log of softmax") {
    Rng rng(11);
    GraphD g;
    auto x = g.constant(random_tensor(rng, {4, 6}, -5.0, 5.0));
    auto a = g.log_softmax(x, 1);
    auto b = g.log(g.softmax(x, 1));
    for (size_t i = 0; i < g.value(a).data.size(); ++i)
        CHECK(g.value(a).data[i] == doctest::Approx(g.value(b).data[i]).epsilon(1e-9));
}

TEST_CASE("layernorm_rows centers and scales each row") {
    Rng rng(13);
    GraphD g;
    auto x = g.constant(random_tensor(rng, {3, 16}, -4.0, 4.0));
    auto y = g.layernorm_rows(x, 1e-5);
    const auto& v = g.value(y);
    for (int64_t i = 0; i < 3; ++i) {
        double mu = 0, var = 0;
        for (int64_t j = 0; j < 16; ++j) mu += v.at(i, j);
        mu /= 16.0;
        for (int64_t j = 0; j < 16; ++j) var += (v.at(i, j) - mu) * (v.at(i, j) - mu);
        var /= 16.0;
        CHECK(mu == doctest::Approx(0.0).epsilon(1e-9));
        CHECK(var == doctest::Approx(1.0).epsilon(1e-3));
    }
}

TEST_CASE("registered ops pass randomized gradient checks") {
    sweep_op("add", {{3, 4}, {3, 4}}, [](GraphD& g, const auto& ids, Rng& r) {
        return weighted_head(g, g.add(ids[0], ids[1]), r);
    });
    sweep_op("sub", {{3, 4}, {3, 4}}, [](GraphD& g, const auto& ids, Rng& r) {
        return weighted_head(g, g.sub(ids[0], ids[1]), r);
    });
    sweep_op("mul", {{3, 4}, {3, 4}}, [](GraphD& g, const auto& ids, Rng& r) {
        return weighted_head(g, g.mul(ids[0], ids[1]), r);
    });
    sweep_op("scale", {{2, 5}}, [](GraphD& g, const auto& ids, Rng& r) {
        return weighted_head(g, g.scale(ids[0], -1.7), r);
    });
    sweep_op("add_scalar", {{2, 5}}, [](GraphD& g, const auto& ids, Rng& r) {
        return weighted_head(g, g.add_scalar(ids[0], 0.37), r);
    });
    sweep_op("log", {{3, 3}}, [](GraphD& g, const auto& ids, Rng& r) {
        return weighted_head(g, g.log(ids[0]), r);
    }, 20, 0.4, 2.5);
    sweep_op("exp", {{3, 3}}, [](GraphD& g, const auto& ids, Rng& r) {
        return weighted_head(g, g.exp(ids[0]), r);
    });
    sweep_op("gelu", {{3, 5}}, [](GraphD& g, const auto& ids, Rng& r) {
        return weighted_head(g, g.gelu(ids[0]), r);
    });
    sweep_op("matmul", {{3, 4}, {4, 2}}, [](GraphD& g, const auto& ids, Rng& r) {
        return weighted_head(g, g.matmul(ids[0], ids[1]), r);
    });
    sweep_op("transpose", {{3, 4}}, [](GraphD& g, const auto& ids, Rng& r) {
        return weighted_head(g, g.transpose(ids[0]), r);
    });
    sweep_op("slice_rows", {{5, 4}}, [](GraphD& g, const auto& ids, Rng& r) {
        return weighted_head(g, g.slice_rows(ids[0], 1, 3), r);
    });
    sweep_op("slice_cols", {{4, 6}}, [](GraphD& g, const auto& ids, Rng& r) {
        return weighted_head(g, g.slice_cols(ids[0], 2, 3), r);
    });
    sweep_op("concat_cols", {{3, 2}, {3, 3}}, [](GraphD& g, const auto& ids, Rng& r) {
        return weighted_head(g, g.concat_cols({ids[0], ids[1]}), r);
    });
    sweep_op("row_add", {{4, 5}, {5}}, [](GraphD& g, const auto& ids, Rng& r) {
        return weighted_head(g, g.row_add(ids[0], ids[1]), r);
    });
    sweep_op("row_mul", {{4, 5}, {5}}, [](GraphD& g, const auto& ids, Rng& r) {
        return weighted_head(g, g.row_mul(ids[0], ids[1]), r);
    });
    sweep_op("gather_rows", {{6, 3}}, [](GraphD& g, const auto& ids, Rng& r) {
        return weighted_head(g, g.gather_rows(ids[0], {0, 2, 2, 5, 1}), r);
    });
    sweep_op("take_per_row", {{4, 5}}, [](GraphD& g, const auto& ids, Rng& r) {
        return weighted_head(g, g.take_per_row(ids[0], {4, 0, 2, 2}), r);
    });
    sweep_op("mask_fill", {{3, 3}}, [](GraphD& g, const auto& ids, Rng& r) {
        return weighted_head(g, g.mask_fill(ids[0], {0, 1, 0, 0, 0, 1, 1, 0, 0}, -5.0), r);
    });
    sweep_op("sum", {{3, 4}}, [](GraphD& g, const auto& ids, Rng&) { return g.sum(ids[0]); });
    sweep_op("mean", {{3, 4}}, [](GraphD& g, const auto& ids, Rng&) { return g.mean(ids[0]); });
    sweep_op("softmax_rows", {{3, 5}}, [](GraphD& g, const auto& ids, Rng& r) {
        return weighted_head(g, g.softmax(ids[0], 1), r);
    }, 20, -4.0, 4.0);
    sweep_op("softmax_cols", {{5, 3}}, [](GraphD& g, const auto& ids, Rng& r) {
        return weighted_head(g, g.softmax(ids[0], 0), r);
    }, 20, -4.0, 4.0);
    sweep_op("log_softmax_rows", {{3, 5}}, [](GraphD& g, const auto& ids, Rng& r) {
        return weighted_head(g, g.log_softmax(ids[0], 1), r);
    }, 20, -4.0, 4.0);
    sweep_op("log_softmax_cols", {{5, 3}}, [](GraphD& g, const auto& ids, Rng& r) {
        return weighted_head(g, g.log_softmax(ids[0], 0), r);
    }, 20, -4.0, 4.0);
    sweep_op("layernorm_rows", {{4, 8}}, [](GraphD& g, const auto& ids, Rng& r) {
        return weighted_head(g, g.layernorm_rows(ids[0], 1e-5), r);
    });
}

TEST_CASE("shape mismatches are rejected") {
    GraphD g;
    auto a = g.constant(TensorD::zeros({2, 3}));
    auto b = g.constant(TensorD::zeros({3, 2}));
    CHECK_THROWS_AS(g.add(a, b), ValidationError);
    CHECK_THROWS_AS(g.matmul(a, a), ValidationError);
    CHECK_THROWS_AS(g.row_add(a, b), ValidationError);
}

TEST_CASE("non-finite op output is an error state") {
    GraphD g;
    auto x = g.constant(TensorD({1}, {-1.0}));
    CHECK_THROWS_AS(g.log(x), RuntimeFailure);
}
