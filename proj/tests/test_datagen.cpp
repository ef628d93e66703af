#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <set>
#include <sstream>

#include "calib/datagen.hpp"
#include "calib/error.hpp"
#include "calib/rng.hpp"
#include "oracles.hpp"

using namespace calib;

namespace {

GaussianMixtureSpec small_spec(std::uint64_t seed, double noise = 0.1) {
    GaussianMixtureSpec s = default_benchmark_spec(seed);
    s.samples_per_class = 200;
    s.label_noise = noise;
    return s;
}

}  // namespace

TEST_CASE("default benchmark spec") {
    const auto s = default_benchmark_spec();
    CHECK(s.class_count == 3);
    CHECK(s.dim == 2);
    CHECK(s.stddev == 0.9);
    CHECK(s.label_noise == 0.1);
    CHECK(s.samples_per_class == 1500);
    REQUIRE(s.means.size() == 3);
    CHECK(s.means[0][0] == doctest::Approx(1.2));
    CHECK(s.means[0][1] == doctest::Approx(0.0));
    CHECK(s.means[1][0] == doctest::Approx(1.2 * std::cos(2 * M_PI / 3)));
    CHECK(s.means[1][1] == doctest::Approx(1.2 * std::sin(2 * M_PI / 3)));
    CHECK(s.means[2][1] == doctest::Approx(1.2 * std::sin(4 * M_PI / 3)));
}

TEST_CASE("generation is deterministic per seed") {
    const auto a = gen_gaussian_mixture(small_spec(7));
    const auto b = gen_gaussian_mixture(small_spec(7));
    const auto c = gen_gaussian_mixture(small_spec(8));
    CHECK(a.features == b.features);
    CHECK(a.labels == b.labels);
    CHECK(a.features != c.features);
    CHECK(a.size() == 600);
    CHECK_NOTHROW(a.validate());
}

TEST_CASE("label noise flips the requested fraction to a different class") {
    for (std::uint64_t seed : {1u, 2u, 3u}) {
        auto spec = default_benchmark_spec(seed);
        spec.label_noise = 0.2;
        const auto noisy = gen_gaussian_mixture(spec);
        spec.label_noise = 0.0;
        const auto clean = gen_gaussian_mixture(spec);
        CHECK(clean.features == noisy.features);
        std::size_t flips = 0;
        for (std::size_t i = 0; i < clean.size(); ++i) {
            // Class-major emission: sample i was drawn from class i / 1500.
            CHECK(clean.labels[i] == i / spec.samples_per_class);
            flips += clean.labels[i] != noisy.labels[i];
        }
        const double frac = static_cast<double>(flips) / static_cast<double>(clean.size());
        CHECK(std::abs(frac - 0.2) <= 0.02);
    }
}

TEST_CASE("collapsed clusters sit on their means") {
    auto spec = small_spec(4, 0.0);
    spec.stddev = 1e-9;
    const auto d = gen_gaussian_mixture(spec);
    for (std::size_t i = 0; i < d.size(); ++i) {
        const auto row = d.row(i);
        CHECK(std::abs(row[0] - spec.means[d.labels[i]][0]) < 1e-6);
        CHECK(std::abs(row[1] - spec.means[d.labels[i]][1]) < 1e-6);
    }
}

TEST_CASE("sample moments follow the spec") {
    auto spec = default_benchmark_spec(5);
    spec.label_noise = 0.0;
    const auto d = gen_gaussian_mixture(spec);
    for (std::size_t c = 0; c < 3; ++c) {
        double mx = 0, my = 0, vx = 0;
        const std::size_t n = spec.samples_per_class;
        for (std::size_t i = c * n; i < (c + 1) * n; ++i) {
            mx += d.row(i)[0];
            my += d.row(i)[1];
        }
        mx /= n;
        my /= n;
        for (std::size_t i = c * n; i < (c + 1) * n; ++i) vx += std::pow(d.row(i)[0] - mx, 2);
        vx /= n - 1;
        CHECK(std::abs(mx - spec.means[c][0]) < 0.1);
        CHECK(std::abs(my - spec.means[c][1]) < 0.1);
        CHECK(std::abs(std::sqrt(vx) - 0.9) < 0.06);
    }
}

TEST_CASE("invalid mixture specs are rejected") {
    auto s = small_spec(0);
    s.stddev = 0.0;
    CHECK_THROWS_AS(gen_gaussian_mixture(s), InvalidInput);
    s = small_spec(0);
    s.label_noise = 1.0;
    CHECK_THROWS_AS(gen_gaussian_mixture(s), InvalidInput);
    s = small_spec(0);
    s.means.pop_back();
    CHECK_THROWS_AS(gen_gaussian_mixture(s), InvalidInput);
    s = small_spec(0);
    s.class_count = 1;
    s.means.resize(1);
    CHECK_THROWS_AS(gen_gaussian_mixture(s), InvalidInput);
}

TEST_CASE("split sizes, disjointness and stratification") {
    Dataset d;
    d.dim = 1;
    d.class_count = 2;
    for (std::size_t i = 0; i < 1000; ++i) {
        d.features.push_back(static_cast<double>(i));
        d.labels.push_back(i % 2);
    }
    const auto s = split(d, {0.8, 0.1, 0.1}, 0);
    CHECK(s.train.size() == 800);
    CHECK(s.val.size() == 100);
    CHECK(s.test.size() == 100);

    oracle::Gen gen(51);
    for (int t = 0; t < 30; ++t) {
        const auto full = gen_gaussian_mixture(small_spec(gen.below(1000), gen.uniform(0, 0.5)));
        const double a = gen.uniform(0.3, 0.8), b = gen.uniform(0.05, 0.1), c = gen.uniform(0.05, 0.1);
        const auto sp = split(full, {a, b, c}, gen.below(1000));
        CHECK_NOTHROW(sp.validate());
        std::set<std::size_t> seen;
        for (const auto* part : {&sp.train, &sp.val, &sp.test}) {
            for (std::size_t i : *part) CHECK(seen.insert(i).second);
        }
        // Per-class counts deviate by at most one from proportional.
        std::vector<double> cls(full.class_count);
        for (auto y : full.labels) ++cls[y];
        for (const auto& [part, frac] : {std::pair{&sp.train, a}, {&sp.val, b}, {&sp.test, c}}) {
            std::vector<double> got(full.class_count);
            for (std::size_t i : *part) ++got[full.labels[i]];
            for (std::size_t k = 0; k < full.class_count; ++k) CHECK(std::abs(got[k] - frac * cls[k]) <= 1.0 + 1e-9);
        }
    }
    CHECK(split(d, {0.8, 0.1, 0.1}, 3).train == split(d, {0.8, 0.1, 0.1}, 3).train);
    CHECK(split(d, {0.8, 0.1, 0.1}, 3).train != split(d, {0.8, 0.1, 0.1}, 4).train);
    CHECK_THROWS_AS(split(d, {0.8, 0.1, 0.0001}, 0), InvalidInput);
    CHECK_THROWS_AS(split(d, {0.8, 0.2, 0.1}, 0), InvalidInput);
    CHECK_THROWS_AS(split(d, {0.8, -0.1, 0.1}, 0), InvalidInput);
}

TEST_CASE("CSV load") {
    std::istringstream in("f0,f1,label\n0.5,-1.25,1\n2,3e-2,0\n");
    const auto d = load_csv(in);
    CHECK(d.dim == 2);
    CHECK(d.class_count == 2);
    CHECK(d.features == std::vector<double>{0.5, -1.25, 2.0, 0.03});
    CHECK(d.labels == std::vector<ClassIndex>{1, 0});

    std::istringstream crlf("f0,label\r\n1.5,2\r\n");
    const auto e = load_csv(crlf);
    CHECK(e.class_count == 3);
    CHECK(e.features == std::vector<double>{1.5});
}

TEST_CASE("CSV errors") {
    std::istringstream bad_header("x0,x1,label\n1,2,0\n");
    CHECK_THROWS_AS(load_csv(bad_header), SchemaError);
    std::istringstream width("f0,f1,label\n1,2,0\n1,0\n");
    CHECK_THROWS_AS(load_csv(width), SchemaError);
    std::istringstream num("f0,f1,label\n1,2,0\n1,abc,0\n");
    try {
        load_csv(num);
        FAIL("expected a parse error");
    } catch (const ParseError& e) {
        CHECK(e.line() == 3);
    }
    std::istringstream lab("f0,label\n1,-1\n");
    CHECK_THROWS_AS(load_csv(lab), ParseError);
    CHECK_THROWS_AS(load_csv(std::filesystem::path("/nonexistent/none.csv")), IoError);
}

TEST_CASE("CSV round trip") {
    const auto d = gen_gaussian_mixture(small_spec(9));
    std::stringstream buf;
    save_csv(d, buf);
    const auto back = load_csv(buf);
    CHECK(back.features == d.features);
    CHECK(back.labels == d.labels);
    CHECK(back.dim == d.dim);
    CHECK(back.class_count == d.class_count);
}

TEST_CASE("rng helpers") {
    Rng a(derive_seed(1, 0)), b(derive_seed(1, 0)), c(derive_seed(1, 1));
    CHECK(a.uniform() == b.uniform());
    CHECK(a.uniform() != c.uniform());
    Rng r(5);
    std::vector<int> hits(7);
    for (int i = 0; i < 7000; ++i) ++hits[r.below(7)];
    for (int h : hits) CHECK(std::abs(h - 1000) < 150);
    for (int i = 0; i < 1000; ++i) {
        const double u = r.uniform();
        CHECK(u >= 0.0);
        CHECK(u < 1.0);
    }
}
