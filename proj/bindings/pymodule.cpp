#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "voxelseg/evalkit.hpp"
#include "voxelseg/gradcheck.hpp"
#include "voxelseg/loss.hpp"

namespace py = pybind11;
using namespace voxelseg;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;
using MaskArray = py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>;

Tensor<double> to_tensor(const Array& a) {
    std::vector<std::size_t> shape(a.ndim());
    for (py::ssize_t i = 0; i < a.ndim(); ++i) shape[std::size_t(i)] = std::size_t(a.shape(i));
    std::vector<double> data(a.data(), a.data() + a.size());
    return Tensor<double>(std::move(shape), std::move(data));
}

Tensor<std::uint8_t> to_mask(const MaskArray& a) {
    std::vector<std::size_t> shape(a.ndim());
    for (py::ssize_t i = 0; i < a.ndim(); ++i) shape[std::size_t(i)] = std::size_t(a.shape(i));
    std::vector<std::uint8_t> data(a.data(), a.data() + a.size());
    return Tensor<std::uint8_t>(std::move(shape), std::move(data));
}

template <typename T>
py::array from_tensor(const Tensor<T>& t) {
    std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
    py::array_t<T> out(shape);
    std::copy(t.data().begin(), t.data().end(), out.mutable_data());
    return out;
}

NetworkConfig config_from_kwargs(std::size_t height, std::size_t width, std::size_t depth,
                                 std::size_t stages, std::vector<std::size_t> channels,
                                 std::size_t convs_per_stage, double dropout_p) {
    NetworkConfig cfg;
    cfg.input_height = height;
    cfg.input_width = width;
    cfg.input_depth = depth;
    cfg.stages = stages;
    cfg.channels = std::move(channels);
    cfg.convs_per_stage = convs_per_stage;
    cfg.dropout_p = dropout_p;
    cfg.validate();
    return cfg;
}

CrfParams crf_from_kwargs(double w1, double w2, double theta_alpha, double theta_beta,
                          double theta_gamma, int neighborhood_radius, int band_width,
                          int iterations) {
    CrfParams p;
    p.w1 = w1;
    p.w2 = w2;
    p.theta_alpha = theta_alpha;
    p.theta_beta = theta_beta;
    p.theta_gamma = theta_gamma;
    p.neighborhood_radius = neighborhood_radius;
    p.band_width = band_width;
    p.iterations = iterations;
    p.validate();
    return p;
}

}  // namespace

PYBIND11_MODULE(_voxelseg, m) {
    m.doc() = "3D-encoder/2D-decoder CT segmentation: tensor ops, network, "
              "boundary-weighted loss, and boundary-band CRF refinement";

    py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
    py::register_exception<IoError>(m, "IoError", PyExc_IOError);

    m.def(
        "conv_forward",
        [](const Array& input, const Array& weights, const Array& bias,
           std::vector<std::size_t> stride, std::vector<std::size_t> pad) {
            const Tensor<double> in = to_tensor(input);
            const Tensor<double> w = to_tensor(weights);
            if (w.rank() < 4) throw ConfigError("weights must be [C_out,C_in,k...]");
            std::vector<std::size_t> kernel(w.shape().begin() + 2, w.shape().end());
            const ConvSpec spec =
                make_conv_spec(w.extent(1), w.extent(0), kernel, stride, pad);
            return from_tensor(conv_forward(in, spec, w, to_tensor(bias)));
        },
        py::arg("input"), py::arg("weights"), py::arg("bias"), py::arg("stride"),
        py::arg("pad"),
        "Cross-correlation over a [C_in,spatial...] input, 2 or 3 spatial axes.");

    m.def(
        "softmax2", [](const Array& logits) { return from_tensor(softmax2(to_tensor(logits))); },
        py::arg("logits"));

    m.def(
        "distance_transform",
        [](const MaskArray& mask) {
            const Tensor<std::uint8_t> m8 = to_mask(mask);
            const auto boundary = boundary_pixels(m8, false);
            return from_tensor(distance_transform(boundary, m8.extent(0), m8.extent(1)));
        },
        py::arg("mask"), "Exact Euclidean distance to the two-sided mask boundary.");

    m.def(
        "weight_map",
        [](const MaskArray& mask, double w0, double sigma, bool squared_distance) {
            LossParams p;
            p.w0 = w0;
            p.sigma = sigma;
            p.squared_distance = squared_distance;
            const WeightMap wm = weight_map(to_mask(mask), p);
            Tensor<double> t({wm.height, wm.width}, wm.weights);
            return from_tensor(t);
        },
        py::arg("mask"), py::arg("w0") = 20.0, py::arg("sigma") = 30.0,
        py::arg("squared_distance") = false,
        "Boundary-magnified loss weights: 1 + w0*exp(-d/(2*sigma^2)).");

    m.def(
        "weighted_cross_entropy",
        [](const Array& probs, const MaskArray& target, const Array& weights) {
            const Tensor<double> w = to_tensor(weights);
            WeightMap wm;
            wm.height = w.extent(0);
            wm.width = w.extent(1);
            wm.weights = w.data();
            const WceResult<double> r =
                weighted_cross_entropy(to_tensor(probs), to_mask(target), wm);
            return py::make_tuple(r.loss_sum, r.loss_mean, from_tensor(r.grad_logits));
        },
        py::arg("probs"), py::arg("target"), py::arg("weights"),
        "Returns (loss_sum, loss_mean, grad_logits).");

    m.def(
        "dice",
        [](const MaskArray& a, const MaskArray& b) { return dice(to_mask(a), to_mask(b)); },
        py::arg("a"), py::arg("b"));

    m.def("timing_normalize", &timing_normalize, py::arg("seconds"), py::arg("slices"),
          py::arg("height"), py::arg("width"));

    m.def(
        "refine",
        [](const Array& prob_fg, const Array& image, double w1, double w2, double theta_alpha,
           double theta_beta, double theta_gamma, int neighborhood_radius, int band_width,
           int iterations) {
            const Tensor<double> p1 = to_tensor(prob_fg);
            if (p1.rank() != 2) throw ConfigError("prob_fg must be a [H,W] array");
            const std::size_t H = p1.extent(0), W = p1.extent(1);
            Tensor<double> pmap({2, H, W});
            for (std::size_t i = 0; i < H * W; ++i) {
                pmap[i] = 1.0 - p1[i];
                pmap[H * W + i] = p1[i];
            }
            const CrfParams params =
                crf_from_kwargs(w1, w2, theta_alpha, theta_beta, theta_gamma,
                                neighborhood_radius, band_width, iterations);
            return from_tensor(refine(pmap, to_tensor(image), params));
        },
        py::arg("prob_fg"), py::arg("image"), py::arg("w1") = 2.0, py::arg("w2") = 0.5,
        py::arg("theta_alpha") = 0.01, py::arg("theta_beta") = 20.0,
        py::arg("theta_gamma") = 20.0, py::arg("neighborhood_radius") = 2,
        py::arg("band_width") = 5, py::arg("iterations") = 5,
        "Boundary-band mean-field CRF refinement of one slice.");

    m.def(
        "gradcheck",
        [](std::uint64_t seed) {
            py::list out;
            for (const auto& r : run_gradcheck_suite(seed))
                out.append(py::make_tuple(r.op, r.max_rel_error, r.pass));
            return out;
        },
        py::arg("seed") = 1234, "Finite-difference reports per differentiable op.");

    py::class_<Net3D2D<double>>(m, "Network")
        .def(py::init([](std::size_t height, std::size_t width, std::size_t depth,
                         std::size_t stages, std::vector<std::size_t> channels,
                         std::size_t convs_per_stage, double dropout_p, std::uint64_t seed) {
                 return Net3D2D<double>(
                     config_from_kwargs(height, width, depth, stages, std::move(channels),
                                        convs_per_stage, dropout_p),
                     seed);
             }),
             py::arg("height"), py::arg("width"), py::arg("depth"), py::arg("stages"),
             py::arg("channels"), py::arg("convs_per_stage") = 2, py::arg("dropout_p") = 0.5,
             py::arg("seed") = 0)
        .def(
            "forward",
            [](Net3D2D<double>& net, const Array& window) {
                Tensor<double> w = to_tensor(window);
                if (w.rank() == 3) {
                    std::vector<std::size_t> s{1};
                    s.insert(s.end(), w.shape().begin(), w.shape().end());
                    w = w.reshaped(s);
                }
                return from_tensor(net.forward(w, Mode::infer));
            },
            py::arg("window"),
            "Infer-mode probability map [2,H,W] for a [H,W,D] (or [1,H,W,D]) window.")
        .def("save", [](const Net3D2D<double>& net,
                        const std::string& path) { net.save_checkpoint(path); })
        .def_static(
            "load",
            [](const std::string& path) { return Net3D2D<double>::load_checkpoint(path); })
        .def_property_readonly("num_parameters", [](const Net3D2D<double>& net) {
            std::size_t n = 0;
            for (const auto& e : net.params().entries())
                if (e.trainable) n += e.value.numel();
            return n;
        });

    m.attr("__version__") = "0.1.0";
}
