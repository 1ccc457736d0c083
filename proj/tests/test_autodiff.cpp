#include <cmath>
#include <stdexcept>

#include "../vendor/doctest.h"
#include "argen/autodiff.hpp"
#include "argen/rng.hpp"
#include "argen/tensor.hpp"

using argen::Tensor;
namespace ad = argen::ad;

namespace {

Tensor random_tensor(std::vector<std::size_t> shape, std::uint64_t seed) {
    argen::rng::Rng rng(seed);
    Tensor t = Tensor::zeros(std::move(shape));
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.normal();
    return t;
}

}  // namespace

TEST_SUITE("autodiff") {

TEST_CASE("x^T x has exact gradient 2x") {
    Tensor x0 = random_tensor({6}, 1);
    const double err = ad::finite_difference_check(
        [](const ad::Var& x) { return ad::sum(ad::mul(x, x)); }, x0, 1e-4);
    CHECK(err < 1e-8);

    ad::Var x = ad::Var::leaf(x0, true);
    ad::Var y = ad::sum(ad::mul(x, x));
    ad::backward(y);
    for (std::size_t i = 0; i < x0.size(); ++i) {
        CHECK(x.grad()[i] == doctest::Approx(2.0 * x0[i]).epsilon(1e-12));
    }
}

TEST_CASE("per-primitive finite-difference checks stay under 1e-4") {
    const double h = 1e-5;
    SUBCASE("add/sub/scalar_mul") {
        Tensor a0 = random_tensor({3, 4}, 2), b0 = random_tensor({3, 4}, 3);
        ad::Var b = ad::Var::leaf(b0, true);
        const double err = ad::finite_difference_check(
            [&](const ad::Var& a) { return ad::sum(ad::scalar_mul(ad::sub(ad::add(a, b), b), 1.7)); }, a0, h);
        CHECK(err < 1e-4);
    }
    SUBCASE("matmul both operands") {
        Tensor a0 = random_tensor({4, 5}, 4), b0 = random_tensor({5, 3}, 5);
        ad::Var a = ad::Var::leaf(a0, true), b = ad::Var::leaf(b0, true);
        const double err = ad::finite_difference_check(
            [&]() { return ad::sum(ad::mul(ad::matmul(a, b), ad::matmul(a, b))); }, {a, b}, h);
        CHECK(err < 1e-4);
    }
    SUBCASE("softmax axis 1 and axis 0") {
        Tensor x0 = random_tensor({4, 6}, 6);
        Tensor w = random_tensor({4, 6}, 7);
        ad::Var wv = ad::Var::leaf(w);
        for (int axis : {0, 1}) {
            const double err = ad::finite_difference_check(
                [&](const ad::Var& x) { return ad::sum(ad::mul(ad::softmax(x, axis), wv)); }, x0, h);
            CHECK(err < 1e-4);
        }
    }
    SUBCASE("logsumexp") {
        Tensor x0 = random_tensor({3, 5}, 8);
        Tensor w = random_tensor({3}, 9);
        ad::Var wv = ad::Var::leaf(w);
        const double err = ad::finite_difference_check(
            [&](const ad::Var& x) { return ad::sum(ad::mul(ad::logsumexp(x, 1), wv)); }, x0, h);
        CHECK(err < 1e-4);
    }
    SUBCASE("rms_norm input and gain") {
        Tensor x0 = random_tensor({4, 8}, 10), g0 = random_tensor({8}, 11);
        ad::Var x = ad::Var::leaf(x0, true), g = ad::Var::leaf(g0, true);
        Tensor w = random_tensor({4, 8}, 12);
        ad::Var wv = ad::Var::leaf(w);
        const double err = ad::finite_difference_check(
            [&]() { return ad::sum(ad::mul(ad::rms_norm(x, g, 1e-5), wv)); }, {x, g}, h);
        CHECK(err < 1e-4);
    }
    SUBCASE("silu") {
        Tensor x0 = random_tensor({2, 7}, 13);
        const double err =
            ad::finite_difference_check([](const ad::Var& x) { return ad::sum(ad::silu(x)); }, x0, h);
        CHECK(err < 1e-4);
    }
    SUBCASE("gather/slice/concat/transpose/reshape plumbing") {
        Tensor t0 = random_tensor({5, 6}, 14);
        const double err = ad::finite_difference_check(
            [](const ad::Var& t) {
                ad::Var g = ad::gather_rows(t, {4, 0, 2, 2});
                ad::Var left = ad::slice_cols(g, 0, 3);
                ad::Var right = ad::slice_cols(g, 3, 6);
                ad::Var cat = ad::concat_cols({right, left});
                ad::Var rows = ad::slice_rows(cat, 1, 4);
                ad::Var tr = ad::transpose(rows);
                return ad::sum(ad::mul(ad::reshape(tr, {3, 6}), ad::reshape(tr, {3, 6})));
            },
            t0, h);
        CHECK(err < 1e-4);
    }
    SUBCASE("cross_entropy") {
        Tensor l0 = random_tensor({7}, 15);
        const double err = ad::finite_difference_check(
            [](const ad::Var& l) { return ad::cross_entropy(l, 3); }, l0, h);
        CHECK(err < 1e-4);
    }
    SUBCASE("masked_mean_cross_entropy") {
        Tensor l0 = random_tensor({5, 6}, 16);
        const double err = ad::finite_difference_check(
            [](const ad::Var& l) {
                return ad::masked_mean_cross_entropy(l, {1, 2, 3, 4, 5}, {0.0, 1.0, 2.0, 0.0, 1.0});
            },
            l0, h);
        CHECK(err < 1e-4);
    }
}

TEST_CASE("cross_entropy gradient is softmax minus one-hot") {
    Tensor l0 = Tensor::vec({0.5, -1.0, 2.0});
    ad::Var l = ad::Var::leaf(l0, true);
    ad::Var ce = ad::cross_entropy(l, 1);
    ad::backward(ce);
    Tensor p = argen::softmax(l0, 0);
    CHECK(std::abs(l.grad()[0] - p[0]) < 1e-12);
    CHECK(std::abs(l.grad()[1] - (p[1] - 1.0)) < 1e-12);
    CHECK(std::abs(l.grad()[2] - p[2]) < 1e-12);
}

TEST_CASE("masked mean cross entropy value and masking") {
    Tensor l0 = random_tensor({3, 4}, 17);
    ad::Var l = ad::Var::leaf(l0, true);
    ad::Var v = ad::masked_mean_cross_entropy(l, {0, 1, 2}, {1.0, 0.0, 3.0});
    const double expect = (argen::cross_entropy_from_logits(argen::reshape(argen::slice_rows(l0, 0, 1), {4}), 0) +
                           3.0 * argen::cross_entropy_from_logits(argen::reshape(argen::slice_rows(l0, 2, 3), {4}), 2)) /
                          4.0;
    CHECK(v.value()[0] == doctest::Approx(expect).epsilon(1e-13));

    ad::backward(v);
    // the zero-weight row contributes no gradient at all
    for (std::size_t c = 0; c < 4; ++c) CHECK(l.grad().at(1, c) == 0.0);

    CHECK_THROWS_AS(ad::masked_mean_cross_entropy(ad::Var::leaf(l0), {0, 1, 2}, {0.0, 0.0, 0.0}),
                    std::invalid_argument);
    CHECK_THROWS_AS(ad::masked_mean_cross_entropy(ad::Var::leaf(l0), {0, 1, 2}, {1.0, -1.0, 1.0}),
                    std::invalid_argument);
}

TEST_CASE("gradients accumulate additively across uses") {
    Tensor x0 = Tensor::vec({1.0, 2.0, 3.0});
    ad::Var x = ad::Var::leaf(x0, true);
    ad::Var f = ad::add(ad::sum(x), ad::sum(x));
    ad::backward(f);
    for (std::size_t i = 0; i < 3; ++i) CHECK(x.grad()[i] == 2.0);
}

TEST_CASE("non-trainable leaves receive no gradient") {
    ad::Var x = ad::Var::leaf(Tensor::vec({1.0, 2.0}), true);
    ad::Var c = ad::Var::leaf(Tensor::vec({3.0, 4.0}), false);
    ad::Var f = ad::sum(ad::mul(x, c));
    ad::backward(f);
    CHECK(x.has_grad());
    CHECK_FALSE(c.has_grad());
}

TEST_CASE("backward guards") {
    ad::Var x = ad::Var::leaf(Tensor::vec({1.0, 2.0}), true);
    SUBCASE("non-scalar root") { CHECK_THROWS_AS(ad::backward(ad::mul(x, x)), std::invalid_argument); }
    SUBCASE("double backward without reset") {
        ad::Var f = ad::sum(x);
        ad::backward(f);
        CHECK_THROWS_AS(ad::backward(f), std::logic_error);
        ad::reset(f);
        CHECK_FALSE(x.has_grad());
        ad::backward(f);  // allowed again after reset
        CHECK(x.grad()[0] == 1.0);
    }
    SUBCASE("cycle detection") {
        ad::Var f = ad::sum(ad::mul(x, x));
        f.node()->parents.push_back(f.node());  // forge a self-loop
        CHECK_THROWS_AS(ad::backward(f), std::logic_error);
    }
}

TEST_CASE("finite_difference_check guards") {
    Tensor x0 = Tensor::vec({1.0});
    SUBCASE("step range") {
        CHECK_THROWS_AS(
            ad::finite_difference_check([](const ad::Var& x) { return ad::sum(x); }, x0, 0.5),
            std::invalid_argument);
        CHECK_THROWS_AS(
            ad::finite_difference_check([](const ad::Var& x) { return ad::sum(x); }, x0, 0.0),
            std::invalid_argument);
    }
    SUBCASE("non-deterministic objective is rejected") {
        ad::Var x = ad::Var::leaf(x0, true);
        int calls = 0;
        CHECK_THROWS_AS(ad::finite_difference_check(
                            [&]() {
                                ++calls;
                                return ad::scalar_mul(ad::sum(x), static_cast<double>(calls));
                            },
                            {x}, 1e-4),
                        std::logic_error);
    }
}

}  // suite
