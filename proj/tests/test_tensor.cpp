#include <cmath>
#include <numbers>

#include "doctest.h"

#include "ccr/errors.hpp"
#include "ccr/gradcheck.hpp"
#include "ccr/rng.hpp"
#include "ccr/tensor.hpp"

using namespace ccr;

namespace {

Tensor random(Rng& rng, Shape shape, bool grad = true, double lo = -1.0, double hi = 1.0) {
    std::vector<double> v(shape_numel(shape));
    for (double& x : v) x = rng.uniform(lo, hi);
    return Tensor::from(std::move(shape), std::move(v), grad);
}

}  // namespace

TEST_SUITE("tensor") {

TEST_CASE("storage invariants") {
    Tensor t = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6}, true);
    CHECK(t.numel() == 6);
    CHECK(t.data().size() == 6);
    CHECK_THROWS_AS(Tensor::from({2, 2}, {1, 2, 3}), DimensionError);
    sum(t).backward();
    CHECK(t.grad().size() == t.numel());
    Tensor alias = t;
    CHECK(alias.same_storage(t));
    CHECK_FALSE(t.clone().same_storage(t));
}

TEST_CASE("matmul hand cases") {
    Tensor eye = Tensor::from({2, 2}, {1, 0, 0, 1});
    Tensor col = Tensor::from({2, 1}, {3, 4});
    Tensor r = matmul(eye, col);
    CHECK(r.shape() == Shape{2, 1});
    CHECK(r[0] == 3);
    CHECK(r[1] == 4);

    Tensor a = Tensor::from({2, 2}, {1, 2, 3, 4});
    Tensor b = Tensor::from({2, 1}, {5, 6});
    Tensor ab = matmul(a, b);
    CHECK(ab[0] == 17);
    CHECK(ab[1] == 39);

    Rng rng(3);
    Tensor z = matmul(Tensor::zeros({2, 3}), random(rng, {3, 1}, false));
    CHECK(z.shape() == Shape{2, 1});
    CHECK(z[0] == 0.0);
    CHECK(z[1] == 0.0);

    CHECK_THROWS_AS(matmul(a, Tensor::zeros({3, 1})), DimensionError);
    CHECK_THROWS_AS(matmul(Tensor::zeros({4}), b), DimensionError);
}

TEST_CASE("matmul against a triple loop") {
    Rng rng(11);
    for (int rep = 0; rep < 20; ++rep) {
        const std::size_t r = 1 + rng.below(40), s = 1 + rng.below(300), t = 1 + rng.below(70);
        Tensor a = random(rng, {r, s}, false), b = random(rng, {s, t}, false);
        Tensor c = matmul(a, b);
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < t; ++j) {
                double acc = 0.0;
                for (std::size_t p = 0; p < s; ++p) acc += a[i * s + p] * b[p * t + j];
                REQUIRE(c[i * t + j] == acc);
            }
    }
}

TEST_CASE("linear rows") {
    Rng rng(5);
    Tensor x = random(rng, {4, 6}, false), w = random(rng, {3, 6}, false), b = random(rng, {3}, false);
    Tensor y = linear(x, w, b);
    CHECK(y.shape() == Shape{4, 3});
    for (std::size_t n = 0; n < 4; ++n)
        for (std::size_t o = 0; o < 3; ++o) {
            double acc = b[o];
            for (std::size_t i = 0; i < 6; ++i) acc += x[n * 6 + i] * w[o * 6 + i];
            CHECK(y[n * 3 + o] == acc);
        }
    // a single row alone gives the same bits as inside the batch
    Tensor row = Tensor::vector({x.data().begin() + 6, x.data().begin() + 12});
    Tensor y1 = linear(row, w, b);
    CHECK(y1.shape() == Shape{3});
    for (std::size_t o = 0; o < 3; ++o) CHECK(y1[o] == y[3 + o]);
    CHECK_THROWS_AS(linear(x, Tensor::zeros({3, 5}), b), DimensionError);
}

TEST_CASE("log_softmax values") {
    Tensor a = log_softmax(Tensor::vector({0, 0}));
    CHECK(a[0] == doctest::Approx(-std::numbers::ln2).epsilon(1e-15));
    CHECK(a[1] == doctest::Approx(-std::numbers::ln2).epsilon(1e-15));
    for (double c : {-700.0, 0.0, 3.5, 1e6}) {
        Tensor b = log_softmax(Tensor::vector({c, c, c}));
        for (double v : b.data()) CHECK(v == doctest::Approx(-std::log(3.0)).epsilon(1e-15));
    }
    Tensor big = log_softmax(Tensor::vector({1000, 0}));
    // exact: −log1p(e^−1000) ≈ −5e−435 and −1000 − that
    CHECK(std::isfinite(big[0]));
    CHECK(big[0] == 0.0);
    CHECK(big[1] == -1000.0);

    Tensor rows = log_softmax(Tensor::from({2, 3}, {1, 2, 3, -1, 0, 5}));
    for (std::size_t r = 0; r < 2; ++r) {
        double total = 0.0;
        for (std::size_t i = 0; i < 3; ++i) total += std::exp(rows[r * 3 + i]);
        CHECK(total == doctest::Approx(1.0).epsilon(1e-14));
    }
    Tensor single = log_softmax(Tensor::vector({-1, 0, 5}));
    for (std::size_t i = 0; i < 3; ++i) CHECK(single[i] == rows[3 + i]);
}

TEST_CASE("log1m_exp clamps a certain prediction") {
    Tensor t = log1m_exp(Tensor::vector({0.0, -std::log(2.0), -30.0}));
    CHECK(t[0] == doctest::Approx(std::log(1e-12)).epsilon(1e-6));
    CHECK(t[1] == doctest::Approx(-std::log(2.0)).epsilon(1e-14));
    CHECK(t[2] == doctest::Approx(-std::exp(-30.0)).epsilon(1e-10));
}

TEST_CASE("backward basics") {
    Tensor x = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6}, true);
    sum(x).backward();
    for (double g : x.grad()) CHECK(g == 1.0);

    Tensor s = Tensor::scalar(3.0, true);
    mul(s, s).backward();
    CHECK(s.grad()[0] == 6.0);

    // leaf grads accumulate until cleared
    mul(s, s).backward();
    CHECK(s.grad()[0] == 12.0);
    s.zero_grad();
    CHECK(s.grad()[0] == 0.0);
}

TEST_CASE("shared subexpressions are visited once") {
    Tensor x = Tensor::scalar(2.0, true);
    Tensor y = mul(x, x);            // 4
    Tensor z = add(mul(y, y), y);    // y² + y, dz/dx = (2y + 1)·2x = 36
    z.backward();
    CHECK(x.grad()[0] == 36.0);
    CHECK_FALSE(y.has_grad());  // intermediate gradients are released
}

TEST_CASE("long chains do not recurse") {
    Tensor x = Tensor::scalar(1.0, true);
    Tensor h = x;
    for (int i = 0; i < 200000; ++i) h = add(h, x);
    h.backward();
    CHECK(x.grad()[0] == 200001.0);
}

TEST_CASE("no-grad guard records nothing") {
    Tensor x = Tensor::scalar(2.0, true);
    {
        NoGradGuard guard;
        CHECK_FALSE(grad_enabled());
        Tensor y = mul(x, x);
        CHECK(y.is_leaf());
        CHECK_FALSE(y.requires_grad());
    }
    CHECK(grad_enabled());
    CHECK_FALSE(mul(x, x).is_leaf());
}

TEST_CASE("shape errors") {
    CHECK_THROWS_AS(add(Tensor::zeros({2}), Tensor::zeros({3})), DimensionError);
    CHECK_THROWS_AS(reshape(Tensor::zeros({2, 3}), {4}), DimensionError);
    CHECK_THROWS_AS(concat({Tensor::zeros({2, 3}), Tensor::zeros({2, 2})}), DimensionError);
    CHECK_THROWS_AS(select(Tensor::zeros({2}), 2), DimensionError);
    const std::size_t bad[] = {3};
    CHECK_THROWS_AS(pick(Tensor::zeros({1, 3}), bad), DimensionError);
    CHECK_THROWS_AS(log_softmax(Tensor::zeros({1, 2, 3})), DimensionError);
}

TEST_CASE("random three-layer net matches central differences") {
    for (std::uint64_t seed : {1u, 2u, 3u}) {
        Rng rng(seed);
        Tensor x = random(rng, {5, 6}, false);
        Tensor w1 = random(rng, {8, 6}), b1 = random(rng, {8});
        Tensor w2 = random(rng, {7, 8}), b2 = random(rng, {7});
        Tensor w3 = random(rng, {3, 7}), b3 = random(rng, {3});
        const std::size_t labels[] = {0, 2, 1, 1, 0};
        auto net = [&] {
            Tensor h = relu(linear(x, w1, b1));
            h = relu(linear(h, w2, b2));
            return scale(sum(pick(log_softmax(linear(h, w3, b3)), labels)), -1.0);
        };
        for (const auto& g : finite_difference_check(
                 net, {{"w1", w1}, {"b1", b1}, {"w2", w2}, {"b2", b2}, {"w3", w3}, {"b3", b3}}))
            CHECK_MESSAGE(g.max_rel_error < 1e-4, g.name);
    }
}

TEST_CASE("every op passes the finite-difference suite") {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        const GradcheckReport r = check_op_gradients(seed);
        for (const auto& g : r.groups) CHECK_MESSAGE(g.max_rel_error < 1e-4, g.name << " seed " << seed);
    }
}

TEST_CASE("min-max rescale") {
    Tensor rows = Tensor::from({2, 4}, {2, 4, 6, 8, 5, 5, 5, 5}, true);
    Tensor out = minmax_rescale_rows(rows, 255.0, RescaleGrad::straight_through);
    CHECK(out[0] == 0.0);
    CHECK(out[1] == 85.0);
    CHECK(out[2] == 170.0);
    CHECK(out[3] == 255.0);
    for (std::size_t j = 4; j < 8; ++j) CHECK(out[j] == 0.0);

    // straight-through: d/dx_j = 255/(hi−lo) regardless of which element is the extreme
    sum(out).backward();
    for (std::size_t j = 0; j < 4; ++j) CHECK(rows.grad()[j] == doctest::Approx(255.0 / 6.0));
    for (std::size_t j = 4; j < 8; ++j) CHECK(rows.grad()[j] == 0.0);

    // exact: the row sum is invariant to shifts, and to scaling of (x−lo)
    rows.zero_grad();
    sum(minmax_rescale_rows(rows, 255.0, RescaleGrad::exact)).backward();
    double total = 0.0;
    for (std::size_t j = 0; j < 4; ++j) total += rows.grad()[j];
    CHECK(total == doctest::Approx(0.0).epsilon(1e-12));

    std::vector<RowRange> pinned{{0.0, 10.0}, {0.0, 10.0}};
    Tensor p = minmax_rescale_rows(rows, 255.0, RescaleGrad::exact, &pinned);
    CHECK(p[4] == doctest::Approx(127.5));
}

TEST_CASE("straight-through rounding") {
    Tensor x = Tensor::vector({0.5, 1.49, -0.5, 254.5}, true);
    Tensor r = round_straight_through(x);
    CHECK(r[0] == 1.0);
    CHECK(r[1] == 1.0);
    CHECK(r[2] == -1.0);
    CHECK(r[3] == 255.0);
    sum(r).backward();
    for (double g : x.grad()) CHECK(g == 1.0);
}

TEST_CASE("finite outputs for finite inputs") {
    Rng rng(9);
    for (int rep = 0; rep < 50; ++rep) {
        Tensor z = random(rng, {4, 5}, true, -800.0, 800.0);
        Tensor lp = log_softmax(z);
        Tensor l = add(sum(log1m_exp(lp)), sum(relu(z)));
        l.backward();
        for (double v : lp.data()) REQUIRE(std::isfinite(v));
        REQUIRE(std::isfinite(l.item()));
        for (double g : z.grad()) REQUIRE(std::isfinite(g));
    }
}

}  // TEST_SUITE
