#include "voxelseg/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "voxelseg/loss.hpp"

namespace voxelseg {

double central_diff(const std::function<double()>& eval, double* slot, double step) {
    const double saved = *slot;
    *slot = saved + step;
    const double up = eval();
    *slot = saved - step;
    const double down = eval();
    *slot = saved;
    return (up - down) / (2.0 * step);
}

double rel_error(double a, double b, double floor) {
    return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

namespace {

Tensor<double> random_tensor(Rng& rng, std::vector<std::size_t> shape, double scale = 1.0) {
    Tensor<double> t(std::move(shape));
    for (auto& v : t.data()) v = rng.normal() * scale;
    return t;
}

// Scalar probe: L = sum_i c_i * out_i with fixed random coefficients, so the
// probe gradient wrt out is just c.
Tensor<double> probe(Rng& rng, const std::vector<std::size_t>& shape) {
    Tensor<double> c(shape);
    for (auto& v : c.data()) v = rng.normal();
    return c;
}

double dot(const Tensor<double>& a, const Tensor<double>& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) s += a[i] * b[i];
    return s;
}

// Compares analytic against finite differences over every element of every
// listed tensor; eval() must recompute the scalar from the tensors in place.
double max_rel_over(const std::function<double()>& eval,
                    std::vector<std::pair<Tensor<double>*, const Tensor<double>*>> slots) {
    double worst = 0.0;
    for (auto& [value, analytic] : slots)
        for (std::size_t i = 0; i < value->numel(); ++i) {
            const double fd = central_diff(eval, &value->data()[i]);
            worst = std::max(worst, rel_error((*analytic)[i], fd));
        }
    return worst;
}

GradCheckReport check_conv2d(std::uint64_t seed) {
    Rng rng(seed);
    const ConvSpec spec = make_conv_spec(2, 3, {3, 3}, {1, 2}, {1, 0});
    Tensor<double> input = random_tensor(rng, {2, 5, 7});
    Tensor<double> w = random_tensor(rng, {3, 2, 3, 3}, 0.5);
    Tensor<double> b = random_tensor(rng, {3}, 0.1);
    const Tensor<double> out = conv_forward(input, spec, w, b);
    const Tensor<double> c = probe(rng, out.shape());
    const ConvGrads<double> g = conv_backward(c, input, spec, w);
    auto eval = [&]() { return dot(conv_forward(input, spec, w, b), c); };
    const double worst = max_rel_over(
        eval, {{&input, &g.input}, {&w, &g.weights}, {&b, &g.bias}});
    return {"conv2d", worst, worst <= kGradCheckTolerance};
}

GradCheckReport check_conv3d(std::uint64_t seed) {
    Rng rng(seed);
    const ConvSpec spec = make_conv_spec(2, 2, {3, 3, 3}, {1, 1, 1}, {1, 1, 0});
    Tensor<double> input = random_tensor(rng, {2, 4, 5, 4});
    Tensor<double> w = random_tensor(rng, {2, 2, 3, 3, 3}, 0.5);
    Tensor<double> b = random_tensor(rng, {2}, 0.1);
    const Tensor<double> out = conv_forward(input, spec, w, b);
    const Tensor<double> c = probe(rng, out.shape());
    const ConvGrads<double> g = conv_backward(c, input, spec, w);
    auto eval = [&]() { return dot(conv_forward(input, spec, w, b), c); };
    const double worst = max_rel_over(
        eval, {{&input, &g.input}, {&w, &g.weights}, {&b, &g.bias}});
    return {"conv3d", worst, worst <= kGradCheckTolerance};
}

GradCheckReport check_deconv2d(std::uint64_t seed) {
    Rng rng(seed);
    Tensor<double> input = random_tensor(rng, {2, 3, 4});
    Tensor<double> w = random_tensor(rng, {2, 3, 4, 4}, 0.5);
    const Tensor<double> out = deconv2d_forward(input, w);
    const Tensor<double> c = probe(rng, out.shape());
    const Deconv2dGrads<double> g = deconv2d_backward(c, input, w);
    auto eval = [&]() { return dot(deconv2d_forward(input, w), c); };
    const double worst = max_rel_over(eval, {{&input, &g.input}, {&w, &g.weights}});
    return {"deconv2d", worst, worst <= kGradCheckTolerance};
}

GradCheckReport check_maxpool(std::uint64_t seed) {
    Rng rng(seed);
    Tensor<double> input = random_tensor(rng, {2, 4, 6, 3});
    const PoolResult<double> fwd = maxpool_spatial_forward(input);
    const Tensor<double> c = probe(rng, fwd.output.shape());
    const Tensor<double> g =
        maxpool_spatial_backward(c, fwd.argmax, input.shape());
    auto eval = [&]() { return dot(maxpool_spatial_forward(input).output, c); };
    const double worst = max_rel_over(eval, {{&input, &g}});
    return {"maxpool", worst, worst <= kGradCheckTolerance};
}

GradCheckReport check_batchnorm(std::uint64_t seed) {
    Rng rng(seed);
    Tensor<double> input = random_tensor(rng, {3, 4, 5});
    BatchNormState<double> state = BatchNormState<double>::make(3);
    for (auto& v : state.gamma.data()) v = 1.0 + 0.3 * rng.normal();
    for (auto& v : state.beta.data()) v = 0.2 * rng.normal();
    BatchNormContext<double> ctx;
    const Tensor<double> out = batchnorm_forward(input, state, Mode::train, &ctx);
    const Tensor<double> c = probe(rng, out.shape());
    const BatchNormGrads<double> g = batchnorm_backward(c, ctx, state);
    auto eval = [&]() {
        BatchNormContext<double> scratch;
        return dot(batchnorm_forward(input, state, Mode::train, &scratch), c);
    };
    const double worst = max_rel_over(
        eval, {{&input, &g.input}, {&state.gamma, &g.gamma}, {&state.beta, &g.beta}});
    return {"batchnorm", worst, worst <= kGradCheckTolerance};
}

GradCheckReport check_relu(std::uint64_t seed) {
    Rng rng(seed);
    Tensor<double> input({40});
    for (auto& v : input.data()) {
        do {
            v = rng.normal();
        } while (std::abs(v) < 1e-3);  // stay away from the kink
    }
    const Tensor<double> c = probe(rng, input.shape());
    const Tensor<double> g = relu_backward(c, input);
    auto eval = [&]() { return dot(relu(input), c); };
    const double worst = max_rel_over(eval, {{&input, &g}});
    return {"relu", worst, worst <= kGradCheckTolerance};
}

GradCheckReport check_crop_concat(std::uint64_t seed) {
    Rng rng(seed);
    Tensor<double> dec = random_tensor(rng, {2, 4, 4});
    Tensor<double> enc = random_tensor(rng, {3, 6, 6});
    const Tensor<double> out = crop_concat(dec, enc);
    const Tensor<double> c = probe(rng, out.shape());
    const CropConcatGrads<double> g = crop_concat_backward(c, dec.shape(), enc.shape());
    auto eval = [&]() { return dot(crop_concat(dec, enc), c); };
    const double worst = max_rel_over(eval, {{&dec, &g.decoder}, {&enc, &g.encoder}});
    return {"crop_concat", worst, worst <= kGradCheckTolerance};
}

GradCheckReport check_depth_collapse(std::uint64_t seed) {
    Rng rng(seed);
    Tensor<double> input = random_tensor(rng, {2, 3, 3, 4});
    const Tensor<double> out = depth_collapse(input);
    const Tensor<double> c = probe(rng, out.shape());
    const Tensor<double> g = depth_collapse_backward(c, input.extent(3));
    auto eval = [&]() { return dot(depth_collapse(input), c); };
    const double worst = max_rel_over(eval, {{&input, &g}});
    return {"depth_collapse", worst, worst <= kGradCheckTolerance};
}

GradCheckReport check_weighted_ce(std::uint64_t seed) {
    Rng rng(seed);
    Tensor<double> logits = random_tensor(rng, {2, 4, 4});
    Tensor<std::uint8_t> target({4, 4});
    for (auto& v : target.data()) v = rng.uniform() < 0.5 ? 0 : 1;
    WeightMap wmap;
    wmap.height = 4;
    wmap.width = 4;
    wmap.weights.resize(16);
    for (auto& v : wmap.weights) v = 1.0 + 20.0 * rng.uniform();

    const WceResult<double> res = weighted_cross_entropy(softmax2(logits), target, wmap);
    auto eval = [&]() {
        return static_cast<double>(
            weighted_cross_entropy(softmax2(logits), target, wmap).loss_sum);
    };
    const double worst = max_rel_over(eval, {{&logits, &res.grad_logits}});
    return {"weighted_cross_entropy", worst, worst <= kGradCheckTolerance};
}

}  // namespace

std::vector<GradCheckReport> run_gradcheck_suite(std::uint64_t seed) {
    return {
        check_conv2d(Rng::mix(seed, 1)),  check_conv3d(Rng::mix(seed, 2)),
        check_deconv2d(Rng::mix(seed, 3)), check_maxpool(Rng::mix(seed, 4)),
        check_batchnorm(Rng::mix(seed, 5)), check_relu(Rng::mix(seed, 6)),
        check_crop_concat(Rng::mix(seed, 7)), check_depth_collapse(Rng::mix(seed, 8)),
        check_weighted_ce(Rng::mix(seed, 9)),
    };
}

GradCheckReport full_pipeline_gradcheck(std::uint64_t seed) {
    Rng rng(Rng::mix(seed, 0xF1));
    NetworkConfig cfg;
    cfg.input_height = 8;
    cfg.input_width = 8;
    cfg.input_depth = 5;
    cfg.stages = 1;
    cfg.convs_per_stage = 2;
    cfg.channels = {2, 4};
    cfg.dropout_p = 0.5;

    Net3D2D<double> net(cfg, Rng::mix(seed, 0xF2));
    Tensor<double> volume = random_tensor(rng, {1, 8, 8, 5});
    Tensor<std::uint8_t> target({8, 8});
    for (auto& v : target.data()) v = rng.uniform() < 0.5 ? 0 : 1;
    const WeightMap wmap = weight_map(target, LossParams{});
    const std::uint64_t mask_seed = Rng::mix(seed, 0xF3);

    auto eval = [&]() {
        const Tensor<double> probs = net.forward(volume, Mode::train, mask_seed);
        return static_cast<double>(
            weighted_cross_entropy(probs, target, wmap).loss_sum);
    };

    net.params().zero_grads();
    const Tensor<double> probs = net.forward(volume, Mode::train, mask_seed);
    const WceResult<double> wce = weighted_cross_entropy(probs, target, wmap);
    net.backward(wce.grad_logits);

    double worst = 0.0;
    for (auto& e : net.params().entries()) {
        if (!e.trainable) continue;
        for (std::size_t i = 0; i < e.value.numel(); ++i) {
            const double fd = central_diff(eval, &e.value.data()[i]);
            worst = std::max(worst, rel_error(e.value.grad()[i], fd));
        }
    }
    return {"full_pipeline", worst, worst <= kGradCheckTolerance};
}

}  // namespace voxelseg
