#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "support/reference.hpp"
#include "voxelseg/gradcheck.hpp"
#include "voxelseg/layers.hpp"
#include "voxelseg/loss.hpp"

using namespace voxelseg;

namespace {

Tensor<std::uint8_t> random_mask(Rng& rng, std::size_t H, std::size_t W, double p = 0.4) {
    Tensor<std::uint8_t> m({H, W});
    for (auto& v : m.data()) v = rng.uniform() < p ? 1 : 0;
    return m;
}

}  // namespace

TEST_CASE("boundary of a single foreground island is the pixel plus its 4 neighbors") {
    Tensor<std::uint8_t> m({5, 5});
    m[2 * 5 + 2] = 1;
    const auto b = boundary_pixels(m);
    const std::vector<PixelCoord> expect = {{1, 2}, {2, 1}, {2, 2}, {2, 3}, {3, 2}};
    CHECK(b == expect);
}

TEST_CASE("all-zero and all-one masks have no interior boundary") {
    CHECK(boundary_pixels(Tensor<std::uint8_t>({4, 4})).empty());
    Tensor<std::uint8_t> ones({4, 4});
    for (auto& v : ones.data()) v = 1;
    CHECK(boundary_pixels(ones).empty());
    // under the band rule the rim of an all-one mask is boundary
    CHECK(boundary_pixels(ones, true).size() == 12);
}

TEST_CASE("boundary equals the double-loop scan on random masks") {
    Rng rng(7);
    for (int trial = 0; trial < 20; ++trial) {
        const Tensor<std::uint8_t> m = random_mask(rng, 16, 16);
        CHECK(boundary_pixels(m, false) == refimpl::boundary_scan(m, false));
        CHECK(boundary_pixels(m, true) == refimpl::boundary_scan(m, true));
    }
}

TEST_CASE("distance transform trivials") {
    CHECK_THROWS_AS(distance_transform({}, 4, 4), ConfigError);
    const Tensor<double> d = distance_transform({{0, 0}}, 5, 6);
    CHECK(d[0] == 0.0);
    CHECK(d[3 * 6 + 4] == doctest::Approx(5.0).epsilon(1e-15));  // 3-4-5 triangle
    CHECK(d[0 * 6 + 2] == doctest::Approx(2.0));
}

TEST_CASE("distance transform is exact against the brute-force scan") {
    Rng rng(17);
    for (int trial = 0; trial < 30; ++trial) {
        const Tensor<std::uint8_t> m = random_mask(rng, 32, 32, 0.1 + 0.5 * rng.uniform());
        auto boundary = boundary_pixels(m);
        if (boundary.empty()) continue;
        const Tensor<double> fast = squared_distance_transform(boundary, 32, 32);
        const Tensor<double> ref = refimpl::nearest_boundary_sq(boundary, 32, 32);
        // squared distances are integers: compare exactly
        for (std::size_t i = 0; i < fast.numel(); ++i) CHECK(fast[i] == ref[i]);
    }
}

TEST_CASE("weight map hits the published values") {
    // one straight vertical boundary so horizontal distance is exact
    Tensor<std::uint8_t> m({4, 64});
    for (std::size_t y = 0; y < 4; ++y)
        for (std::size_t x = 0; x < 32; ++x) m[y * 64 + x] = 1;
    LossParams p;  // w0 = 20, sigma = 30
    const WeightMap wm = weight_map(m, p);
    CHECK(wm.degenerate == false);
    // boundary pixel: w = 1 + 20 e^0 = 21
    CHECK(wm.weights[31] == doctest::Approx(21.0).epsilon(1e-12));
    const auto boundary = boundary_pixels(m);
    const Tensor<double> d = distance_transform(boundary, 4, 64);
    for (std::size_t i = 0; i < wm.weights.size(); ++i) {
        CHECK(wm.weights[i] ==
              doctest::Approx(1.0 + 20.0 * std::exp(-d[i] / 1800.0)).epsilon(1e-12));
        CHECK(wm.weights[i] >= 1.0);
        CHECK(wm.weights[i] <= 21.0);
    }
}

TEST_CASE("weight at distance 2*sigma^2 is 1 + 20/e") {
    LossParams p;
    p.sigma = 30.0;
    // build a case with a known exact distance of 1800 = 2*sigma^2: place a
    // single-column boundary and probe far along the row in a 1x2048 strip
    Tensor<std::uint8_t> m({1, 2048});
    m[0] = 1;
    m[1] = 1;  // boundary pixels at x=0 (fg with bg neighbor? x=0..1 fg)
    const auto b = boundary_pixels(m);
    REQUIRE(!b.empty());
    const WeightMap wm = weight_map(m, p);
    // boundary sits at x in {1,2}; pixel at x = 1801+1 is exactly 1800 away
    const std::size_t probe = 2 + 1800;
    const Tensor<double> d = distance_transform(b, 1, 2048);
    REQUIRE(d[probe] == doctest::Approx(1800.0));
    CHECK(wm.weights[probe] ==
          doctest::Approx(1.0 + 20.0 * std::exp(-1.0)).epsilon(1e-12));
}

TEST_CASE("weights decay monotonically with distance and peak on the boundary") {
    Rng rng(23);
    const Tensor<std::uint8_t> m = random_mask(rng, 24, 24);
    const auto b = boundary_pixels(m);
    REQUIRE(!b.empty());
    const Tensor<double> d = distance_transform(b, 24, 24);
    const WeightMap wm = weight_map(m, LossParams{});
    std::vector<std::size_t> idx(d.numel());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    std::sort(idx.begin(), idx.end(), [&](auto a, auto c) { return d[a] < d[c]; });
    for (std::size_t i = 1; i < idx.size(); ++i)
        CHECK(wm.weights[idx[i]] <= wm.weights[idx[i - 1]] + 1e-15);
    CHECK(wm.weights[std::size_t(b[0].y) * 24 + b[0].x] == doctest::Approx(21.0));
}

TEST_CASE("degenerate masks fall back to an all-ones map") {
    const WeightMap wm = weight_map(Tensor<std::uint8_t>({8, 8}), LossParams{});
    CHECK(wm.degenerate);
    for (auto w : wm.weights) CHECK(w == 1.0);
}

TEST_CASE("squared-distance variant uses d^2 in the exponent") {
    Tensor<std::uint8_t> m({1, 16});
    m[0] = 1;
    m[1] = 1;
    LossParams p;
    p.sigma = 2.0;
    p.squared_distance = true;
    const WeightMap wm = weight_map(m, p);
    // pixel at distance 3 from the boundary at x=2: exponent -9/8
    CHECK(wm.weights[5] == doctest::Approx(1.0 + 20.0 * std::exp(-9.0 / 8.0)).epsilon(1e-12));
}

TEST_CASE("perfect prediction has zero loss") {
    Tensor<double> probs({2, 2, 2});
    Tensor<std::uint8_t> target({2, 2});
    target[0] = 1;
    target[3] = 1;
    for (std::size_t i = 0; i < 4; ++i) {
        probs[4 + i] = target[i] ? 1.0 : 0.0;
        probs[i] = target[i] ? 0.0 : 1.0;
    }
    WeightMap wm{2, 2, {1, 1, 1, 1}, false};
    const auto res = weighted_cross_entropy(probs, target, wm);
    CHECK(res.loss_sum == 0.0);
}

TEST_CASE("uniform prediction over N pixels costs N ln 2ptr") {
    const std::size_t H = 6, W = 7;
    Tensor<double> probs = Tensor<double>::full({2, H, W}, 0.5);
    Tensor<std::uint8_t> target({H, W});
    WeightMap wm{H, W, std::vector<double>(H * W, 1.0), false};
    const auto res = weighted_cross_entropy(probs, target, wm);
    CHECK(res.loss_sum == doctest::Approx(double(H * W) * std::log(2.0)).epsilon(1e-12));
    CHECK(res.loss_mean == doctest::Approx(std::log(2.0)).epsilon(1e-12));
}

TEST_CASE("clamping keeps the loss finite on confident mistakes") {
    Tensor<double> probs({2, 1, 1}, {1.0, 0.0});
    Tensor<std::uint8_t> target({1, 1});
    target[0] = 1;  // true class has probability 0
    WeightMap wm{1, 1, {1.0}, false};
    const auto res = weighted_cross_entropy(probs, target, wm);
    CHECK(std::isfinite(res.loss_sum));
    CHECK(res.loss_sum == doctest::Approx(-std::log(1e-12)));
}

TEST_CASE("all-ones weight map reproduces unweighted cross-entropy bit-exactly") {
    Rng rng(31);
    Tensor<double> logits({2, 5, 5});
    for (auto& v : logits.data()) v = rng.normal();
    const Tensor<double> probs = softmax2(logits);
    Tensor<std::uint8_t> target = random_mask(rng, 5, 5);
    WeightMap ones{5, 5, std::vector<double>(25, 1.0), false};
    const auto weighted = weighted_cross_entropy(probs, target, ones);
    double plain = 0.0;
    for (std::size_t i = 0; i < 25; ++i)
        plain -= std::log(std::max(probs[target[i] * 25 + i], 1e-12));
    CHECK(weighted.loss_sum == plain);
}

TEST_CASE("fused gradient matches finite differences through the softmax") {
    Rng rng(37);
    Tensor<double> logits({2, 4, 5});
    for (auto& v : logits.data()) v = rng.normal();
    Tensor<std::uint8_t> target = random_mask(rng, 4, 5);
    WeightMap wm{4, 5, {}, false};
    wm.weights.resize(20);
    for (auto& w : wm.weights) w = 1.0 + 20.0 * rng.uniform();

    const auto res = weighted_cross_entropy(softmax2(logits), target, wm);
    auto eval = [&]() {
        return weighted_cross_entropy(softmax2(logits), target, wm).loss_sum;
    };
    for (std::size_t i = 0; i < logits.numel(); ++i) {
        const double fd = central_diff(eval, &logits.data()[i]);
        CHECK(rel_error(res.grad_logits[i], fd) <= 1e-5);
    }
}

TEST_CASE("loss is non-negative and zero only at exact predictions") {
    Rng rng(41);
    for (int trial = 0; trial < 10; ++trial) {
        Tensor<double> logits({2, 3, 3});
        for (auto& v : logits.data()) v = rng.normal() * 3;
        const Tensor<double> probs = softmax2(logits);
        const Tensor<std::uint8_t> target = random_mask(rng, 3, 3);
        const WeightMap wm = weight_map(target, LossParams{});
        const auto res = weighted_cross_entropy(probs, target, wm);
        CHECK(res.loss_sum > 0.0);  // softmax never reaches exactly 1
    }
}
