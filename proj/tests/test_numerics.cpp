#include <doctest.h>

#include <cmath>
#include <limits>

#include "calib/error.hpp"
#include "calib/numerics.hpp"
#include "oracles.hpp"

using namespace calib;

TEST_CASE("softmax: small cases") {
    const auto p = softmax(LogitVector{0.0, 0.0, 0.0});
    for (double v : p.values()) CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-15));

    const auto q = softmax(LogitVector{std::log(2.0), 0.0});
    CHECK(q[0] == doctest::Approx(2.0 / 3.0).epsilon(1e-15));
    CHECK(q[1] == doctest::Approx(1.0 / 3.0).epsilon(1e-15));

    const auto big = softmax(LogitVector{1000.0, 0.0});
    CHECK(std::isfinite(big[0]));
    CHECK(big[0] == doctest::Approx(1.0));
    CHECK(big[1] < 1e-300);
}

TEST_CASE("LogitVector rejects non-finite and single-class input") {
    CHECK_THROWS_AS(LogitVector({1.0, std::numeric_limits<double>::quiet_NaN()}), InvalidInput);
    CHECK_THROWS_AS(LogitVector({1.0, std::numeric_limits<double>::infinity()}), InvalidInput);
    CHECK_THROWS_AS(LogitVector({1.0}), InvalidInput);
}

TEST_CASE("ProbVector validation") {
    CHECK_NOTHROW(ProbVector::from_values({0.25, 0.75}));
    CHECK_THROWS_AS(ProbVector::from_values({0.5, 0.6}), InvalidInput);
    CHECK_THROWS_AS(ProbVector::from_values({-0.1, 1.1}), InvalidInput);
}

TEST_CASE("log_softmax") {
    const auto a = log_softmax(LogitVector{0.0, 0.0});
    CHECK(a[0] == doctest::Approx(-std::log(2.0)).epsilon(1e-15));
    CHECK(a[1] == doctest::Approx(-std::log(2.0)).epsilon(1e-15));
    const auto b = log_softmax(LogitVector{1000.0, 0.0});
    CHECK(b[0] == doctest::Approx(0.0));
    CHECK(b[1] == doctest::Approx(-1000.0));

    oracle::Gen gen(11);
    for (int t = 0; t < 200; ++t) {
        const auto z = gen.logits(2 + gen.below(9), 5.0);
        const auto ls = log_softmax(z);
        const auto p = softmax(z);
        for (std::size_t k = 0; k < z.size(); ++k) CHECK(std::abs(std::exp(ls[k]) - p[k]) <= 1e-12);
    }
}

TEST_CASE("softmax shift invariance is exact") {
    // Logits on a 1/1024 grid and integer shifts keep z + c exact, so the
    // max-subtracted inputs coincide bit for bit.
    oracle::Gen gen(3);
    for (int t = 0; t < 300; ++t) {
        const std::size_t c = 2 + gen.below(9);
        std::vector<double> z(c), zs(c);
        const double shift = static_cast<double>(static_cast<int>(gen.below(2001)) - 1000);
        for (std::size_t k = 0; k < c; ++k) {
            z[k] = static_cast<double>(static_cast<int>(gen.below(16385)) - 8192) / 1024.0;
            zs[k] = z[k] + shift;
        }
        CHECK(softmax(LogitVector(z)) == softmax(LogitVector(zs)));
    }
}

TEST_CASE("softmax entries positive and normalized") {
    oracle::Gen gen(5);
    for (int t = 0; t < 500; ++t) {
        const auto p = softmax(gen.logits(2 + gen.below(9), 4.0));
        double s = 0.0;
        for (double v : p.values()) {
            CHECK(v > 0.0);
            s += v;
        }
        CHECK(std::abs(s - 1.0) <= 1e-12);
    }
}

TEST_CASE("one_hot") {
    const auto a = one_hot(1, 3);
    CHECK(std::vector<double>(a.values().begin(), a.values().end()) == std::vector<double>{0, 1, 0});
    const auto b = one_hot(0, 2);
    CHECK(b[0] == 1.0);
    CHECK(b[1] == 0.0);
    CHECK_THROWS_AS(one_hot(4, 4), InvalidInput);
}

TEST_CASE("argmax_tiebreak_lowest") {
    const std::vector<double> a{1, 3, 2}, b{2, 2, 1}, c{-1}, e;
    CHECK(argmax_tiebreak_lowest(a) == 1);
    CHECK(argmax_tiebreak_lowest(b) == 0);
    CHECK(argmax_tiebreak_lowest(c) == 0);
    CHECK_THROWS_AS(argmax_tiebreak_lowest(e), InvalidInput);
}

TEST_CASE("finite_diff_gradient") {
    auto quad = [](const LogitVector& z) { return 0.5 * (z[0] * z[0] + z[1] * z[1]); };
    const auto g = finite_diff_gradient(quad, LogitVector{1.0, 2.0});
    CHECK(std::abs(g[0] - 1.0) <= 1e-8);
    CHECK(std::abs(g[1] - 2.0) <= 1e-8);

    auto ce0 = [](const LogitVector& z) { return -log_softmax(z)[0]; };
    const auto h = finite_diff_gradient(ce0, LogitVector{0.0, 0.0});
    CHECK(std::abs(h[0] + 0.5) <= 1e-8);
    CHECK(std::abs(h[1] - 0.5) <= 1e-8);

    auto bad = [](const LogitVector& z) { return z[0] > 0.5 ? std::numeric_limits<double>::infinity() : 0.0; };
    CHECK_THROWS_AS(finite_diff_gradient(bad, LogitVector{0.5, 0.0}), OracleFailure);
}

TEST_CASE("FD of soft-target cross-entropy equals softmax - q") {
    oracle::Gen gen(17);
    for (int t = 0; t < 200; ++t) {
        const auto z = gen.logits(2 + gen.below(9), 3.0);
        const auto q = gen.simplex(z.size());
        auto loss = [&](const LogitVector& x) {
            const auto ls = log_softmax(x);
            double s = 0.0;
            for (std::size_t k = 0; k < q.size(); ++k) s -= q[k] * ls[k];
            return s;
        };
        const auto fd = finite_diff_gradient(loss, z);
        const auto p = softmax(z);
        std::vector<double> expect(z.size());
        for (std::size_t k = 0; k < z.size(); ++k) expect[k] = p[k] - q[k];
        CHECK(relative_gradient_error(expect, fd) <= kGradientTolerance);
    }
}
