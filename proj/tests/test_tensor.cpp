#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "bdforge/common.hpp"
#include "bdforge/optim.hpp"
#include "bdforge/tape.hpp"
#include "bdforge/tensor.hpp"

using namespace bdforge;

namespace {

Tensor random_tensor(Rng& rng, const std::vector<int>& shape, double offset = 0.0) {
    Tensor t = Tensor::zeros(shape);
    for (std::size_t i = 0; i < t.size(); ++i) {
        t.data()[i] = rng.normal(0.0, 1.0) + offset;
    }
    return t;
}

constexpr double kGradEps = 1e-5;
constexpr double kGradTol = 1e-4;

}  // namespace

TEST_CASE("tensor construction validates shape against payload size") {
    CHECK_NOTHROW(Tensor({2, 3}, {1, 2, 3, 4, 5, 6}));
    CHECK_THROWS_AS(Tensor({2, 3}, {1, 2, 3}), ShapeError);
    CHECK_THROWS_AS(Tensor({0, 3}, {}), ShapeError);
    CHECK_THROWS_AS(Tensor({-1}, {1.0}), ShapeError);
}

TEST_CASE("tensor indexing is row major") {
    Tensor t({2, 3}, {0, 1, 2, 3, 4, 5});
    CHECK(t.at(0, 0) == 0.0);
    CHECK(t.at(0, 2) == 2.0);
    CHECK(t.at(1, 0) == 3.0);
    CHECK(t.at(1, 2) == 5.0);
    Tensor u = Tensor::zeros({2, 2, 2, 2});
    u.at(1, 0, 1, 0) = 7.0;
    CHECK(u.data()[10] == 7.0);
}

TEST_CASE("tensor clip bounds every element") {
    Tensor t({4}, {-2.0, 0.25, 0.75, 3.0});
    t.clip(0.0, 1.0);
    CHECK(t.at(0) == 0.0);
    CHECK(t.at(1) == 0.25);
    CHECK(t.at(2) == 0.75);
    CHECK(t.at(3) == 1.0);
}

TEST_CASE("all_finite detects NaN and infinity") {
    Tensor t({2}, {1.0, 2.0});
    CHECK(t.all_finite());
    t.at(1) = std::nan("");
    CHECK_FALSE(t.all_finite());
    t.at(1) = std::numeric_limits<double>::infinity();
    CHECK_FALSE(t.all_finite());
}

TEST_CASE("round_half_up rounds ties away from the floor") {
    CHECK(round_half_up(0.5) == 1);
    CHECK(round_half_up(1.5) == 2);
    CHECK(round_half_up(2.4) == 2);
    CHECK(round_half_up(2.6) == 3);
    CHECK(round_half_up(0.0) == 0);
}

TEST_CASE("rng streams are deterministic per seed and distinct per child") {
    Rng a(42);
    Rng b(42);
    for (int i = 0; i < 100; ++i) {
        CHECK(a.next_u64() == b.next_u64());
    }
    Rng c(42);
    Rng child0 = c.child(0);
    Rng child1 = c.child(1);
    CHECK(child0.next_u64() != child1.next_u64());
}

TEST_CASE("rng uniform_int stays in range and hits both endpoints") {
    Rng rng(5);
    bool saw_lo = false, saw_hi = false;
    for (int i = 0; i < 2000; ++i) {
        const int v = static_cast<int>(rng.uniform_int(4));
        CHECK(v >= 0);
        CHECK(v <= 3);
        saw_lo = saw_lo || v == 0;
        saw_hi = saw_hi || v == 3;
    }
    CHECK(saw_lo);
    CHECK(saw_hi);
}

TEST_CASE("shuffle is a permutation") {
    Rng rng(9);
    std::vector<int> v{0, 1, 2, 3, 4, 5, 6, 7, 8, 9};
    std::vector<int> w = v;
    rng.shuffle(w);
    std::vector<int> sorted = w;
    std::sort(sorted.begin(), sorted.end());
    CHECK(sorted == v);
}

TEST_CASE("fnv1a64 matches published reference values") {
    CHECK(fnv1a64("") == 0xcbf29ce484222325ULL);
    CHECK(fnv1a64("a") == 0xaf63dc4c8601ec8cULL);
}

TEST_CASE("base64 round trips arbitrary bytes") {
    Rng rng(77);
    for (std::size_t len : {std::size_t{0}, std::size_t{1}, std::size_t{2}, std::size_t{3},
                            std::size_t{17}, std::size_t{256}}) {
        std::vector<std::uint8_t> bytes(len);
        for (auto& b : bytes) {
            b = static_cast<std::uint8_t>(rng.uniform_int(256));
        }
        CHECK(base64_decode(base64_encode(bytes)) == bytes);
    }
    CHECK_THROWS_AS((void)base64_decode("not base64!!"), FormatError);
}

TEST_CASE("f32 little-endian packing round trips at f32 precision") {
    const std::vector<double> xs{0.0, 1.0, -2.5, 3.14159, 1e-30};
    const auto bytes = pack_f32_le(xs);
    const auto back = unpack_f32_le(bytes);
    REQUIRE(back.size() == xs.size());
    for (std::size_t i = 0; i < xs.size(); ++i) {
        CHECK(back[i] == doctest::Approx(xs[i]).epsilon(1e-6));
    }
    // A second trip through f32 is exact: the first trip already landed on an f32 value.
    CHECK(unpack_f32_le(pack_f32_le(back)) == back);
}

// ---------------------------------------------------------------------------
// Tape oracles
// ---------------------------------------------------------------------------

TEST_CASE("gradient of sum(x*x) is 2x") {
    Tape t;
    Var x = t.leaf(Tensor({3}, {1.0, -2.0, 3.0}));
    Var loss = ops::sum_all(ops::mul(x, x));
    GradMap g = t.backward(loss);
    const Tensor& dx = g.at(x.id);
    CHECK(dx.at(0) == doctest::Approx(2.0).epsilon(1e-12));
    CHECK(dx.at(1) == doctest::Approx(-4.0).epsilon(1e-12));
    CHECK(dx.at(2) == doctest::Approx(6.0).epsilon(1e-12));
}

TEST_CASE("leaves not reached by the loss get exact zero gradients") {
    Tape t;
    Var x = t.leaf(Tensor({2}, {1.0, 2.0}));
    Var unused = t.leaf(Tensor({3}, {5.0, 6.0, 7.0}));
    Var loss = ops::sum_all(x);
    GradMap g = t.backward(loss);
    const Tensor& du = g.at(unused.id);
    REQUIRE(du.shape() == std::vector<int>{3});
    for (std::size_t i = 0; i < du.size(); ++i) {
        CHECK(du.data()[i] == 0.0);
    }
}

TEST_CASE("constants block gradient flow") {
    Tape t;
    Var x = t.leaf(Tensor({2}, {1.0, 2.0}));
    Var c = t.constant(Tensor({2}, {3.0, 4.0}));
    Var loss = ops::sum_all(ops::mul(x, c));
    GradMap g = t.backward(loss);
    CHECK(g.at(x.id).at(0) == 3.0);
    CHECK(g.at(x.id).at(1) == 4.0);
    CHECK(g.size() == 1);  // only the true leaf appears
}

TEST_CASE("softmax cross-entropy on uniform logits gives the signed indicator gradient") {
    Tape t;
    Var logits = t.leaf(Tensor({1, 2}, {0.0, 0.0}));
    Var losses = ops::softmax_xent(logits, {0});
    CHECK(t.value(losses).at(0) == doctest::Approx(std::log(2.0)).epsilon(1e-12));
    Var loss = ops::mean_all(losses);
    GradMap g = t.backward(loss);
    const Tensor& dl = g.at(logits.id);
    CHECK(dl.at(0, 0) == doctest::Approx(-0.5).epsilon(1e-12));
    CHECK(dl.at(0, 1) == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("softmax rows are proper distributions and losses are non-negative") {
    Rng rng(21);
    const Tensor logits = random_tensor(rng, {8, 5});
    const Tensor probs = ops::softmax_rows(logits);
    for (int b = 0; b < 8; ++b) {
        double s = 0.0;
        for (int k = 0; k < 5; ++k) {
            CHECK(probs.at(b, k) >= 0.0);
            CHECK(probs.at(b, k) <= 1.0);
            s += probs.at(b, k);
        }
        CHECK(s == doctest::Approx(1.0).epsilon(1e-9));
    }
    Tape t;
    Var lv = t.leaf(logits);
    Var losses = ops::softmax_xent(lv, {0, 1, 2, 3, 4, 0, 1, 2});
    for (int b = 0; b < 8; ++b) {
        CHECK(t.value(losses).at(b) >= 0.0);
    }
}

TEST_CASE("backward requires a scalar loss") {
    Tape t;
    Var x = t.leaf(Tensor({2}, {1.0, 2.0}));
    Var y = ops::relu(x);
    CHECK_THROWS_AS((void)t.backward(y), ShapeError);
}

TEST_CASE("mixing tapes is rejected") {
    Tape t1;
    Tape t2;
    Var a = t1.leaf(Tensor({2}, {1.0, 2.0}));
    Var b = t2.leaf(Tensor({2}, {3.0, 4.0}));
    CHECK_THROWS_AS((void)ops::add(a, b), Error);
}

TEST_CASE("forward_primitive dispatches known names and rejects unknown ones") {
    const Tensor a({2, 2}, {1, 2, 3, 4});
    const Tensor b({2, 2}, {5, 6, 7, 8});
    const Tensor y = ops::forward_primitive("matmul", {a, b});
    CHECK(y.at(0, 0) == doctest::Approx(19.0));
    CHECK_NOTHROW((void)ops::forward_primitive("add", {a, b}));
    CHECK_NOTHROW((void)ops::forward_primitive("multiply", {a, b}));
    CHECK_NOTHROW((void)ops::forward_primitive("relu", {a}));
    CHECK_THROWS_WITH_AS((void)ops::forward_primitive("frobnicate", {a}),
                         doctest::Contains("unknown primitive"), Error);
}

TEST_CASE("backward is bit-deterministic across repeated runs") {
    Rng rng(31);
    const Tensor x0 = random_tensor(rng, {3, 6});
    const Tensor w0 = random_tensor(rng, {6, 4});
    auto run = [&]() {
        Tape t;
        Var x = t.leaf(x0);
        Var w = t.leaf(w0);
        Var h = ops::relu(ops::matmul(x, w));
        Var loss = ops::mean_all(ops::mul(h, h));
        GradMap g = t.backward(loss);
        return std::make_pair(g.at(x.id), g.at(w.id));
    };
    auto [dx1, dw1] = run();
    auto [dx2, dw2] = run();
    for (std::size_t i = 0; i < dx1.size(); ++i) {
        CHECK(dx1.data()[i] == dx2.data()[i]);
    }
    for (std::size_t i = 0; i < dw1.size(); ++i) {
        CHECK(dw1.data()[i] == dw2.data()[i]);
    }
}

// ---------------------------------------------------------------------------
// Finite-difference validation of every differentiable primitive
// ---------------------------------------------------------------------------

TEST_CASE("finite differences confirm analytic gradients for every primitive") {
    Rng rng(101);

    SUBCASE("add, same shape") {
        const Tensor p = random_tensor(rng, {3, 4});
        const Tensor other = random_tensor(rng, {3, 4});
        const double err = finite_diff_check(
            [&](Tape& t, Var x) { return ops::sum_all(ops::mul(ops::add(x, t.constant(other)), ops::add(x, t.constant(other)))); },
            p, kGradEps);
        CHECK(err <= kGradTol);
    }

    SUBCASE("add, bias broadcast, gradient to bias") {
        const Tensor bias = random_tensor(rng, {4});
        const Tensor x = random_tensor(rng, {3, 4});
        const double err = finite_diff_check(
            [&](Tape& t, Var b) {
                Var y = ops::add(t.constant(x), b);
                return ops::sum_all(ops::mul(y, y));
            },
            bias, kGradEps);
        CHECK(err <= kGradTol);
    }

    SUBCASE("mul") {
        const Tensor p = random_tensor(rng, {5});
        const Tensor other = random_tensor(rng, {5});
        const double err = finite_diff_check(
            [&](Tape& t, Var x) { return ops::sum_all(ops::mul(x, t.constant(other))); }, p,
            kGradEps);
        CHECK(err <= kGradTol);
    }

    SUBCASE("scale") {
        const Tensor p = random_tensor(rng, {6});
        const double err = finite_diff_check(
            [&](Tape&, Var x) { return ops::sum_all(ops::scale(x, -2.5)); }, p, kGradEps);
        CHECK(err <= kGradTol);
    }

    SUBCASE("matmul, left operand") {
        const Tensor p = random_tensor(rng, {3, 4});
        const Tensor b = random_tensor(rng, {4, 2});
        const double err = finite_diff_check(
            [&](Tape& t, Var x) {
                Var y = ops::matmul(x, t.constant(b));
                return ops::sum_all(ops::mul(y, y));
            },
            p, kGradEps);
        CHECK(err <= kGradTol);
    }

    SUBCASE("matmul, right operand") {
        const Tensor a = random_tensor(rng, {3, 4});
        const Tensor p = random_tensor(rng, {4, 2});
        const double err = finite_diff_check(
            [&](Tape& t, Var x) {
                Var y = ops::matmul(t.constant(a), x);
                return ops::sum_all(ops::mul(y, y));
            },
            p, kGradEps);
        CHECK(err <= kGradTol);
    }

    SUBCASE("conv2d, input") {
        const Tensor p = random_tensor(rng, {2, 5, 5, 2});
        const Tensor k = random_tensor(rng, {3, 3, 2, 3});
        const double err = finite_diff_check(
            [&](Tape& t, Var x) {
                Var y = ops::conv2d(x, t.constant(k));
                return ops::sum_all(ops::mul(y, y));
            },
            p, kGradEps);
        CHECK(err <= kGradTol);
    }

    SUBCASE("conv2d, kernel") {
        const Tensor x = random_tensor(rng, {2, 5, 5, 2});
        const Tensor p = random_tensor(rng, {3, 3, 2, 3});
        const double err = finite_diff_check(
            [&](Tape& t, Var k) {
                Var y = ops::conv2d(t.constant(x), k);
                return ops::sum_all(ops::mul(y, y));
            },
            p, kGradEps);
        CHECK(err <= kGradTol);
    }

    SUBCASE("conv1d, input") {
        const Tensor p = random_tensor(rng, {2, 9, 2});
        const Tensor k = random_tensor(rng, {3, 2, 4});
        const double err = finite_diff_check(
            [&](Tape& t, Var x) {
                Var y = ops::conv1d(x, t.constant(k));
                return ops::sum_all(ops::mul(y, y));
            },
            p, kGradEps);
        CHECK(err <= kGradTol);
    }

    SUBCASE("conv1d, kernel") {
        const Tensor x = random_tensor(rng, {2, 9, 2});
        const Tensor p = random_tensor(rng, {3, 2, 4});
        const double err = finite_diff_check(
            [&](Tape& t, Var k) {
                Var y = ops::conv1d(t.constant(x), k);
                return ops::sum_all(ops::mul(y, y));
            },
            p, kGradEps);
        CHECK(err <= kGradTol);
    }

    SUBCASE("pad2d") {
        const Tensor p = random_tensor(rng, {2, 3, 3, 2});
        const double err = finite_diff_check(
            [&](Tape&, Var x) {
                Var y = ops::pad2d(x, 1, 2, 0, 1);
                return ops::sum_all(ops::mul(y, y));
            },
            p, kGradEps);
        CHECK(err <= kGradTol);
    }

    SUBCASE("maxpool2") {
        // Values spaced far apart so the 1e-5 probe cannot flip an argmax.
        Tensor p = Tensor::zeros({1, 4, 4, 1});
        Rng local(55);
        std::vector<int> order(16);
        for (int i = 0; i < 16; ++i) {
            order[static_cast<std::size_t>(i)] = i;
        }
        local.shuffle(order);
        for (int i = 0; i < 16; ++i) {
            p.data()[static_cast<std::size_t>(i)] = order[static_cast<std::size_t>(i)] * 0.5;
        }
        const double err = finite_diff_check(
            [&](Tape&, Var x) {
                Var y = ops::maxpool2(x);
                return ops::sum_all(ops::mul(y, y));
            },
            p, kGradEps);
        CHECK(err <= kGradTol);
    }

    SUBCASE("relu away from the kink") {
        Tensor p = random_tensor(rng, {8});
        for (std::size_t i = 0; i < p.size(); ++i) {
            if (std::abs(p.data()[i]) < 0.1) {
                p.data()[i] = 0.5;
            }
        }
        const double err = finite_diff_check(
            [&](Tape&, Var x) { return ops::sum_all(ops::mul(ops::relu(x), ops::relu(x))); }, p,
            kGradEps);
        CHECK(err <= kGradTol);
    }

    SUBCASE("sigmoid") {
        const Tensor p = random_tensor(rng, {7});
        const double err = finite_diff_check(
            [&](Tape&, Var x) { return ops::sum_all(ops::sigmoid(x)); }, p, kGradEps);
        CHECK(err <= kGradTol);
    }

    SUBCASE("reshape") {
        const Tensor p = random_tensor(rng, {2, 6});
        const double err = finite_diff_check(
            [&](Tape&, Var x) {
                Var y = ops::reshape(x, {3, 4});
                return ops::sum_all(ops::mul(y, y));
            },
            p, kGradEps);
        CHECK(err <= kGradTol);
    }

    SUBCASE("embedding with repeated ids accumulates") {
        const Tensor p = random_tensor(rng, {5, 3});
        const std::vector<std::vector<int>> ids{{0, 2, 2}, {1}};
        const double err = finite_diff_check(
            [&](Tape&, Var tab) {
                Var e = ops::embedding(tab, ids);
                return ops::sum_all(ops::mul(e, e));
            },
            p, kGradEps);
        CHECK(err <= kGradTol);
    }

    SUBCASE("mean_tokens respects true lengths") {
        const Tensor p = random_tensor(rng, {2, 4, 3});
        const std::vector<int> lengths{2, 4};
        const double err = finite_diff_check(
            [&](Tape&, Var e) {
                Var m = ops::mean_tokens(e, lengths);
                return ops::sum_all(ops::mul(m, m));
            },
            p, kGradEps);
        CHECK(err <= kGradTol);
    }

    SUBCASE("mean_axis middle axis") {
        const Tensor p = random_tensor(rng, {2, 5, 3});
        const double err = finite_diff_check(
            [&](Tape&, Var x) {
                Var m = ops::mean_axis(x, 1);
                return ops::sum_all(ops::mul(m, m));
            },
            p, kGradEps);
        CHECK(err <= kGradTol);
    }

    SUBCASE("mean_all and sum_all") {
        const Tensor p = random_tensor(rng, {3, 3});
        const double err1 = finite_diff_check(
            [&](Tape&, Var x) { return ops::mean_all(ops::mul(x, x)); }, p, kGradEps);
        CHECK(err1 <= kGradTol);
        const double err2 = finite_diff_check(
            [&](Tape&, Var x) { return ops::sum_all(ops::mul(x, x)); }, p, kGradEps);
        CHECK(err2 <= kGradTol);
    }

    SUBCASE("softmax cross-entropy") {
        const Tensor p = random_tensor(rng, {4, 5});
        const std::vector<int> labels{1, 0, 4, 2};
        const double err = finite_diff_check(
            [&](Tape&, Var logits) { return ops::mean_all(ops::softmax_xent(logits, labels)); },
            p, kGradEps);
        CHECK(err <= kGradTol);
    }

    SUBCASE("mask_blend, each operand") {
        const Tensor x = random_tensor(rng, {2, 3, 3, 2});
        Tensor m = random_tensor(rng, {3, 3});
        m.clip(0.1, 0.9);
        const Tensor pat = random_tensor(rng, {3, 3, 2});

        const double ex = finite_diff_check(
            [&](Tape& t, Var v) {
                Var y = ops::mask_blend(v, t.constant(m), t.constant(pat));
                return ops::sum_all(ops::mul(y, y));
            },
            x, kGradEps);
        CHECK(ex <= kGradTol);

        const double em = finite_diff_check(
            [&](Tape& t, Var v) {
                Var y = ops::mask_blend(t.constant(x), v, t.constant(pat));
                return ops::sum_all(ops::mul(y, y));
            },
            m, kGradEps);
        CHECK(em <= kGradTol);

        const double ep = finite_diff_check(
            [&](Tape& t, Var v) {
                Var y = ops::mask_blend(t.constant(x), t.constant(m), v);
                return ops::sum_all(ops::mul(y, y));
            },
            pat, kGradEps);
        CHECK(ep <= kGradTol);
    }

    SUBCASE("composite network slice") {
        const Tensor p = random_tensor(rng, {2, 6, 6, 1});
        const Tensor k = random_tensor(rng, {3, 3, 1, 2});
        const Tensor w = random_tensor(rng, {8, 3});
        const double err = finite_diff_check(
            [&](Tape& t, Var x) {
                Var h = ops::maxpool2(ops::relu(ops::conv2d(x, t.constant(k))));
                Var f = ops::reshape(h, {2, 8});
                Var logits = ops::matmul(f, t.constant(w));
                return ops::mean_all(ops::softmax_xent(logits, {0, 2}));
            },
            p, kGradEps);
        CHECK(err <= kGradTol);
    }
}

TEST_CASE("finite_diff_check rejects out-of-range epsilon") {
    const Tensor p({2}, {1.0, 2.0});
    auto f = [](Tape&, Var x) { return ops::sum_all(x); };
    CHECK_THROWS_AS((void)finite_diff_check(f, p, 0.0), Error);
    CHECK_THROWS_AS((void)finite_diff_check(f, p, 0.5), Error);
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

TEST_CASE("sgd without momentum is a plain gradient step") {
    SgdOptimizer opt(0.05, 0.0);
    std::map<std::string, Tensor> params{{"w", Tensor::scalar(1.0)}};
    const std::map<std::string, Tensor> grads{{"w", Tensor::scalar(1.0)}};
    opt.step(params, grads);
    CHECK(params.at("w").scalar_value() == doctest::Approx(0.95).epsilon(1e-12));
}

TEST_CASE("sgd with zero gradient leaves parameters unchanged") {
    SgdOptimizer opt(0.1, 0.9);
    std::map<std::string, Tensor> params{{"w", Tensor({2}, {3.0, -4.0})}};
    const std::map<std::string, Tensor> grads{{"w", Tensor::zeros({2})}};
    opt.step(params, grads);
    opt.step(params, grads);
    CHECK(params.at("w").at(0) == 3.0);
    CHECK(params.at("w").at(1) == -4.0);
}

TEST_CASE("sgd momentum follows the hand-unrolled two-step trajectory") {
    // v1 = 1, p1 = 1 - 0.1 = 0.9 ; v2 = 0.9 + 1 = 1.9, p2 = 0.9 - 0.19 = 0.71
    SgdOptimizer opt(0.1, 0.9);
    std::map<std::string, Tensor> params{{"w", Tensor::scalar(1.0)}};
    const std::map<std::string, Tensor> grads{{"w", Tensor::scalar(1.0)}};
    opt.step(params, grads);
    CHECK(params.at("w").scalar_value() == doctest::Approx(0.9).epsilon(1e-12));
    opt.step(params, grads);
    CHECK(params.at("w").scalar_value() == doctest::Approx(0.71).epsilon(1e-12));
}

TEST_CASE("sgd validates keys, shapes, and hyperparameters") {
    CHECK_THROWS_AS(SgdOptimizer(0.0, 0.5), ConfigError);
    CHECK_THROWS_AS(SgdOptimizer(0.1, 1.0), ConfigError);
    SgdOptimizer opt(0.1, 0.5);
    std::map<std::string, Tensor> params{{"w", Tensor::zeros({2})}};
    std::map<std::string, Tensor> bad_key{{"v", Tensor::zeros({2})}};
    CHECK_THROWS_AS(opt.step(params, bad_key), Error);
    std::map<std::string, Tensor> bad_shape{{"w", Tensor::zeros({3})}};
    CHECK_THROWS_AS(opt.step(params, bad_shape), ShapeError);
    std::map<std::string, Tensor> missing{};
    CHECK_THROWS_AS(opt.step(params, missing), Error);
}
