#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "support/reference.hpp"
#include "voxelseg/gradcheck.hpp"
#include "voxelseg/layers.hpp"

using namespace voxelseg;

namespace {

Tensor<double> randn(Rng& rng, std::vector<std::size_t> shape, double scale = 1.0) {
    Tensor<double> t(std::move(shape));
    for (auto& v : t.data()) v = rng.normal() * scale;
    return t;
}

}  // namespace

TEST_CASE("conv output extent formula and axis-named failures") {
    const ConvSpec spec = make_conv_spec(1, 1, {3, 3, 3}, {1, 1, 1}, {1, 1, 0});
    // 512x512x38 window with spatial pad 1 and depth pad 0
    CHECK(spec.out_extent(0, 512) == 512);
    CHECK(spec.out_extent(1, 512) == 512);
    CHECK(spec.out_extent(2, 38) == 36);
    CHECK_THROWS_WITH_AS(spec.out_extent(2, 2), doctest::Contains("axis 2"), ConfigError);
}

TEST_CASE("conv2d all-ones interior sums the 3x3 window") {
    const ConvSpec spec = make_conv_spec(1, 1, {3, 3}, {1, 1}, {1, 1});
    const Tensor<double> in = Tensor<double>::full({1, 5, 5}, 1.0);
    const Tensor<double> w = Tensor<double>::full({1, 1, 3, 3}, 1.0);
    const Tensor<double> out = conv_forward(in, spec, w, Tensor<double>({1}));
    CHECK(out.shape() == std::vector<std::size_t>{1, 5, 5});
    for (std::size_t y = 1; y < 4; ++y)
        for (std::size_t x = 1; x < 4; ++x) CHECK(out[y * 5 + x] == doctest::Approx(9.0));
    CHECK(out[0] == doctest::Approx(4.0));  // corner sees a 2x2 patch
}

TEST_CASE("conv3d matches the nested-loop reference") {
    Rng rng(101);
    const ConvSpec spec = make_conv_spec(2, 3, {3, 3, 3}, {1, 1, 1}, {1, 1, 0});
    const Tensor<double> in = randn(rng, {2, 6, 6, 5});
    const Tensor<double> w = randn(rng, {3, 2, 3, 3, 3});
    const Tensor<double> b = randn(rng, {3});
    const Tensor<double> out = conv_forward(in, spec, w, b);
    const Tensor<double> ref = refimpl::conv3d(in, w, b, 1, 1, 1, 1, 1, 0);
    REQUIRE(out.shape() == ref.shape());
    for (std::size_t i = 0; i < out.numel(); ++i)
        CHECK(out[i] == doctest::Approx(ref[i]).epsilon(1e-12));
}

TEST_CASE("conv forward equals reference across random shapes") {
    Rng rng(202);
    for (int trial = 0; trial < 25; ++trial) {
        const std::size_t ci = 1 + rng.below(3), co = 1 + rng.below(3);
        const std::size_t h = 4 + rng.below(5), w_ = 4 + rng.below(5);
        const std::size_t sy = 1 + rng.below(2), sx = 1 + rng.below(2);
        const std::size_t py = rng.below(2), px = rng.below(2);
        const ConvSpec spec = make_conv_spec(ci, co, {3, 3}, {sy, sx}, {py, px});
        const Tensor<double> in = randn(rng, {ci, h, w_});
        const Tensor<double> w = randn(rng, {co, ci, 3, 3});
        const Tensor<double> b = randn(rng, {co});
        const Tensor<double> out = conv_forward(in, spec, w, b);
        const Tensor<double> ref = refimpl::conv2d(in, w, b, long(sy), long(sx), long(py),
                                                   long(px));
        REQUIRE(out.shape() == ref.shape());
        for (std::size_t i = 0; i < out.numel(); ++i)
            CHECK(std::abs(out[i] - ref[i]) <= 1e-12 * std::max(1.0, std::abs(ref[i])));
    }
}

TEST_CASE("conv shape mismatches are configuration errors") {
    const ConvSpec spec = make_conv_spec(2, 3, {3, 3}, {1, 1}, {1, 1});
    const Tensor<double> in({1, 5, 5});  // wrong channel count
    const Tensor<double> w({3, 2, 3, 3});
    CHECK_THROWS_AS(conv_forward(in, spec, w, Tensor<double>({3})), ConfigError);
    const Tensor<double> in2({2, 5, 5});
    CHECK_THROWS_AS(conv_forward(in2, spec, Tensor<double>({3, 2, 3, 2}), Tensor<double>({3})),
                    ConfigError);
}

TEST_CASE("conv backward: zero grad_out gives zero gradients") {
    Rng rng(303);
    const ConvSpec spec = make_conv_spec(2, 2, {3, 3}, {1, 1}, {1, 1});
    const Tensor<double> in = randn(rng, {2, 4, 4});
    const Tensor<double> w = randn(rng, {2, 2, 3, 3});
    const ConvGrads<double> g = conv_backward(Tensor<double>({2, 4, 4}), in, spec, w);
    for (auto v : g.input.data()) CHECK(v == 0.0);
    for (auto v : g.weights.data()) CHECK(v == 0.0);
    for (auto v : g.bias.data()) CHECK(v == 0.0);
}

TEST_CASE("conv backward: single-pixel grad_out extracts the input patch") {
    Rng rng(304);
    const ConvSpec spec = make_conv_spec(1, 1, {3, 3}, {1, 1}, {0, 0});
    const Tensor<double> in = randn(rng, {1, 5, 5});
    const Tensor<double> w = randn(rng, {1, 1, 3, 3});
    Tensor<double> go({1, 3, 3});
    go[(0 * 3 + 1) * 3 + 2] = 1.0;  // output pixel (1,2)
    const ConvGrads<double> g = conv_backward(go, in, spec, w);
    for (std::size_t ky = 0; ky < 3; ++ky)
        for (std::size_t kx = 0; kx < 3; ++kx)
            CHECK(g.weights[ky * 3 + kx] == doctest::Approx(in[(1 + ky) * 5 + 2 + kx]));
    CHECK(g.bias[0] == doctest::Approx(1.0));
}

TEST_CASE("maxpool shapes, ties, and reference equality") {
    const Tensor<double> in({1, 4, 4, 3});
    const PoolResult<double> constant = maxpool_spatial_forward(in);
    CHECK(constant.output.shape() == std::vector<std::size_t>{1, 2, 2, 3});
    // all-equal window: argmax must be the first element in scan order
    CHECK(constant.argmax[0] == 0);

    Tensor<double> go(constant.output.shape());
    for (auto& v : go.data()) v = 1.0;
    const Tensor<double> gi = maxpool_spatial_backward(go, constant.argmax, in.shape());
    CHECK(gi[0] == 1.0);              // routed to the recorded argmax
    CHECK(gi[1 * 3 + 0] == 0.0);      // (0,1) same window, not argmax

    Rng rng(77);
    Tensor<double> r({1, 8, 8, 5});
    for (auto& v : r.data()) v = rng.normal();
    const PoolResult<double> pooled = maxpool_spatial_forward(r);
    const Tensor<double> ref = refimpl::maxpool(r);
    for (std::size_t i = 0; i < ref.numel(); ++i) CHECK(pooled.output[i] == ref[i]);

    CHECK_THROWS_AS(maxpool_spatial_forward(Tensor<double>({1, 5, 4, 3})), ConfigError);
    CHECK_THROWS_AS(maxpool_spatial_forward(Tensor<double>({1, 4, 5, 3})), ConfigError);
}

TEST_CASE("deconv2d doubles the spatial extent") {
    Rng rng(55);
    const Tensor<double> in = randn(rng, {1, 8, 8});
    const Tensor<double> w = randn(rng, {1, 1, 4, 4});
    CHECK(deconv2d_forward(in, w).shape() == std::vector<std::size_t>{1, 16, 16});
}

TEST_CASE("deconv2d stamps the kernel at the stride-2 location of a delta") {
    Tensor<double> in({1, 4, 4});
    in[(0 * 4 + 1) * 4 + 2] = 1.0;  // delta at (1,2)
    Rng rng(56);
    const Tensor<double> w = randn(rng, {1, 1, 4, 4});
    const Tensor<double> out = deconv2d_forward(in, w);
    // out[oy,ox] = w[a,b] at oy = 2*1 + a - 1, ox = 2*2 + b - 1
    for (std::size_t a = 0; a < 4; ++a)
        for (std::size_t b = 0; b < 4; ++b) {
            const long oy = 2 + long(a) - 1, ox = 4 + long(b) - 1;
            if (oy < 0 || oy >= 8 || ox < 0 || ox >= 8) continue;
            CHECK(out[std::size_t(oy) * 8 + std::size_t(ox)] ==
                  doctest::Approx(w[a * 4 + b]));
        }
}

TEST_CASE("deconv2d satisfies the adjoint identity against a stride-2 conv") {
    Rng rng(57);
    for (int trial = 0; trial < 10; ++trial) {
        const std::size_t ci = 1 + rng.below(3), co = 1 + rng.below(3);
        const std::size_t h = 3 + rng.below(4), w_ = 3 + rng.below(4);
        const Tensor<double> x = randn(rng, {ci, h, w_});
        const Tensor<double> w = randn(rng, {ci, co, 4, 4});
        const Tensor<double> y = randn(rng, {co, 2 * h, 2 * w_});

        const double lhs = refimpl::dot(deconv2d_forward(x, w), y);

        // reference stride-2 conv of y with the same kernel, laid out
        // [C_out=ci, C_in=co, 4, 4] for the reference routine
        Tensor<double> wt({ci, co, 4, 4});
        for (std::size_t a = 0; a < ci; ++a)
            for (std::size_t b = 0; b < co; ++b)
                for (std::size_t k = 0; k < 16; ++k)
                    wt[(a * co + b) * 16 + k] = w[(a * co + b) * 16 + k];
        const Tensor<double> conv_y = refimpl::conv2d(y, wt, Tensor<double>({ci}), 2, 2, 1, 1);
        const double rhs = refimpl::dot(x, conv_y);
        CHECK(lhs == doctest::Approx(rhs).epsilon(1e-10));
    }
}

TEST_CASE("batchnorm train mode standardizes each channel") {
    Rng rng(88);
    Tensor<double> in({3, 7, 5});
    for (auto& v : in.data()) v = 3.0 + 2.5 * rng.normal();
    BatchNormState<double> st = BatchNormState<double>::make(3);
    BatchNormContext<double> ctx;
    const Tensor<double> out = batchnorm_forward(in, st, Mode::train, &ctx);
    const std::size_t N = 35;
    for (std::size_t c = 0; c < 3; ++c) {
        double mean = 0, var = 0;
        for (std::size_t i = 0; i < N; ++i) mean += out[c * N + i];
        mean /= double(N);
        for (std::size_t i = 0; i < N; ++i) {
            const double d = out[c * N + i] - mean;
            var += d * d;
        }
        var /= double(N);
        CHECK(std::abs(mean) < 1e-6);
        CHECK(std::abs(var - 1.0) < 1e-4);  // epsilon shrinks variance slightly
    }
    // staged running stats move toward the batch statistics
    CHECK(ctx.new_running_mean[0] != 0.0);
}

TEST_CASE("batchnorm on standardized input is near identity") {
    Rng rng(89);
    Tensor<double> in({2, 50});
    for (auto& v : in.data()) v = rng.normal();
    // standardize manually per channel first
    for (std::size_t c = 0; c < 2; ++c) {
        double m = 0, v2 = 0;
        for (std::size_t i = 0; i < 50; ++i) m += in[c * 50 + i];
        m /= 50;
        for (std::size_t i = 0; i < 50; ++i) v2 += (in[c * 50 + i] - m) * (in[c * 50 + i] - m);
        v2 /= 50;
        for (std::size_t i = 0; i < 50; ++i) in[c * 50 + i] = (in[c * 50 + i] - m) / std::sqrt(v2);
    }
    BatchNormState<double> st = BatchNormState<double>::make(2);
    const Tensor<double> out = batchnorm_forward(in, st, Mode::train, nullptr);
    for (std::size_t i = 0; i < in.numel(); ++i)
        CHECK(out[i] == doctest::Approx(in[i]).epsilon(1e-4));
}

TEST_CASE("batchnorm infer mode uses running statistics") {
    BatchNormState<double> st = BatchNormState<double>::make(1);
    st.running_mean[0] = 2.0;
    st.running_var[0] = 4.0;
    Tensor<double> in({1, 3}, {2.0, 4.0, 0.0});
    const Tensor<double> out = batchnorm_forward(in, st, Mode::infer, nullptr);
    CHECK(out[0] == doctest::Approx(0.0));
    CHECK(out[1] == doctest::Approx(2.0 / std::sqrt(4.0 + 1e-5)).epsilon(1e-9));
    CHECK_THROWS_AS(batchnorm_forward(Tensor<double>({2, 3}), st, Mode::infer, nullptr),
                    ConfigError);
}

TEST_CASE("dropout identities and scaling") {
    Rng rng(99);
    Tensor<double> in({64});
    for (auto& v : in.data()) v = rng.normal();

    const Tensor<double> p0 = dropout(in, 0.0, Mode::train, 7);
    CHECK(p0.data() == in.data());  // bit-exact
    const Tensor<double> inf = dropout(in, 0.9, Mode::infer, 7);
    CHECK(inf.data() == in.data());
    CHECK_THROWS_AS(dropout(in, 1.0, Mode::train, 7), ConfigError);
    CHECK_THROWS_AS(dropout(in, -0.1, Mode::train, 7), ConfigError);

    const Tensor<double> d = dropout(in, 0.5, Mode::train, 7);
    for (std::size_t i = 0; i < in.numel(); ++i) {
        const bool zeroed = d[i] == 0.0;
        if (!zeroed) CHECK(d[i] == doctest::Approx(in[i] * 2.0));
    }
    // same seed regenerates the same mask (backward consistency)
    const Tensor<double> d2 = dropout(in, 0.5, Mode::train, 7);
    CHECK(d.data() == d2.data());
    const Tensor<double> g = dropout_backward(in, 0.5, Mode::train, 7);
    for (std::size_t i = 0; i < in.numel(); ++i) CHECK((d[i] == 0.0) == (g[i] == 0.0));
}

TEST_CASE("dropout survivor fraction concentrates at 1-p") {
    Tensor<double> in = Tensor<double>::full({1000000}, 1.0);
    const Tensor<double> d = dropout(in, 0.5, Mode::train, 12345);
    std::size_t kept = 0;
    for (auto v : d.data()) kept += v != 0.0;
    const double frac = double(kept) / double(in.numel());
    CHECK(frac >= 0.497);
    CHECK(frac <= 0.503);
}

TEST_CASE("softmax2 is normalized and overflow-safe") {
    Tensor<double> z({2, 1, 2});
    z[0] = 40.0;
    z[2] = 3.0;   // pixel 0: (40, -40); pixel 1: (3, 3)
    z[1] = -40.0;
    z[3] = 3.0;
    const Tensor<double> p = softmax2(z);
    CHECK(p[0] == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(p[2] == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(p[1] == doctest::Approx(0.5));
    CHECK(p[3] == doctest::Approx(0.5));

    Rng rng(111);
    Tensor<double> r({2, 8, 8});
    for (auto& v : r.data()) v = rng.normal() * 30.0;
    const Tensor<double> q = softmax2(r);
    for (std::size_t i = 0; i < 64; ++i) {
        CHECK(q[i] + q[64 + i] == doctest::Approx(1.0).epsilon(1e-12));
        CHECK(q[i] >= 0.0);
        CHECK(q[i] <= 1.0);
    }
}

TEST_CASE("relu forward trivials") {
    Tensor<double> neg = Tensor<double>::full({5}, -2.0);
    for (auto v : relu(neg).data()) CHECK(v == 0.0);
    Tensor<double> pos = Tensor<double>::full({5}, 2.0);
    CHECK(relu(pos).data() == pos.data());
}

TEST_CASE("every layer op matches finite differences (library suite)") {
    for (const auto& r : run_gradcheck_suite(20240817)) {
        INFO(r.op);
        CHECK(r.pass);
        CHECK(r.max_rel_error <= 1e-4);
    }
}

TEST_CASE("the finite-difference harness detects a broken adjoint") {
    // a deliberately wrong conv backward: gradient of the weights is scaled
    Rng rng(404);
    const ConvSpec spec = make_conv_spec(1, 2, {3, 3}, {1, 1}, {1, 1});
    Tensor<double> in = randn(rng, {1, 4, 4});
    Tensor<double> w = randn(rng, {2, 1, 3, 3});
    Tensor<double> b = randn(rng, {2});
    Tensor<double> c({2, 4, 4});
    for (auto& v : c.data()) v = rng.normal();

    ConvGrads<double> g = conv_backward(c, in, spec, w);
    for (auto& v : g.weights.data()) v *= 1.5;  // the injected fault
    auto eval = [&]() { return refimpl::dot(conv_forward(in, spec, w, b), c); };
    double worst = 0.0;
    for (std::size_t i = 0; i < w.numel(); ++i) {
        const double fd = central_diff(eval, &w.data()[i]);
        worst = std::max(worst, rel_error(g.weights[i], fd));
    }
    CHECK(worst > 1e-4);  // must be flagged
}
