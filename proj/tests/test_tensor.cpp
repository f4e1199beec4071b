#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "voxelseg/tensor.hpp"

using namespace voxelseg;

TEST_CASE("shape product must match data length") {
    CHECK_NOTHROW(Tensor<double>({2, 3}, std::vector<double>(6)));
    CHECK_THROWS_AS(Tensor<double>({2, 3}, std::vector<double>(5)), ConfigError);
    CHECK_THROWS_AS(Tensor<double>({0, 3}), ConfigError);
}

TEST_CASE("reshape preserves element count and data") {
    Tensor<double> t({2, 6});
    for (std::size_t i = 0; i < 12; ++i) t[i] = double(i);
    const Tensor<double> r = t.reshaped({3, 4});
    CHECK(r.shape() == std::vector<std::size_t>{3, 4});
    CHECK(r.data() == t.data());
    CHECK_THROWS_AS(t.reshaped({5, 2}), ConfigError);
}

TEST_CASE("gradient slot tracks data length") {
    Tensor<double> t({4});
    CHECK(!t.has_grad());
    t.set_requires_grad(true);
    CHECK(t.has_grad());
    CHECK(t.grad().size() == 4);
    t.grad()[2] = 7.0;
    t.zero_grad();
    CHECK(t.grad()[2] == 0.0);
}

TEST_CASE("rng streams are reproducible and platform-pinned") {
    Rng a(42), b(42);
    for (int i = 0; i < 100; ++i) CHECK(a.uniform() == b.uniform());
    // mt19937_64 is fully specified; freeze one draw as a canary against
    // accidental reseeding or distribution changes.
    Rng c(5489);
    CHECK(c.next_u64() == 0xc96d191cf6f6aea6ULL);
    Rng d(7);
    const double u = d.uniform();
    CHECK(u >= 0.0);
    CHECK(u < 1.0);
}

TEST_CASE("rng normal has sane moments") {
    Rng r(123);
    double sum = 0, sq = 0;
    const int n = 200000;
    for (int i = 0; i < n; ++i) {
        const double v = r.normal();
        sum += v;
        sq += v * v;
    }
    CHECK(std::abs(sum / n) < 0.01);
    CHECK(std::abs(sq / n - 1.0) < 0.02);
}

TEST_CASE("parallel_for covers every index exactly once at any thread cap") {
    for (int threads : {1, 2, 5}) {
        set_max_threads(threads);
        std::vector<int> hits(1000, 0);
        parallel_for(hits.size(), 1, [&](std::size_t b, std::size_t e) {
            for (std::size_t i = b; i < e; ++i) hits[i] += 1;
        });
        for (int h : hits) CHECK(h == 1);
    }
    set_max_threads(1);
}

TEST_CASE("tensor_cast converts element types") {
    Tensor<double> t({3}, {0.0, 1.0, 1.0});
    const auto m = tensor_cast<std::uint8_t>(t);
    CHECK(m[0] == 0);
    CHECK(m[1] == 1);
}
