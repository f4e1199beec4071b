#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "voxelseg/tensor.hpp"

namespace voxelseg {

enum class Mode { train, infer };

/// Cross-correlation geometry: one kernel/stride/padding entry per spatial
/// axis (2 or 3). Inputs are channel-first with no batch axis.
struct ConvSpec {
    std::vector<std::size_t> kernel;
    std::vector<std::size_t> stride;
    std::vector<std::size_t> pad;
    std::size_t in_channels = 0;
    std::size_t out_channels = 0;

    std::size_t spatial_rank() const { return kernel.size(); }
    // floor((in + 2*pad - k) / stride) + 1; throws ConfigError naming the
    // axis when the result would be < 1.
    std::size_t out_extent(std::size_t axis, std::size_t in_extent) const;
    void validate() const;
};

ConvSpec make_conv_spec(std::size_t in_ch, std::size_t out_ch,
                        std::vector<std::size_t> kernel,
                        std::vector<std::size_t> stride,
                        std::vector<std::size_t> pad);

// weights [C_out, C_in, k...], bias [C_out]; input [C_in, spatial...].
template <typename T>
Tensor<T> conv_forward(const Tensor<T>& input, const ConvSpec& spec,
                       const Tensor<T>& weights, const Tensor<T>& bias);

template <typename T>
struct ConvGrads {
    Tensor<T> input;
    Tensor<T> weights;
    Tensor<T> bias;
};

template <typename T>
ConvGrads<T> conv_backward(const Tensor<T>& grad_out, const Tensor<T>& saved_input,
                           const ConvSpec& spec, const Tensor<T>& weights);

// 2x2 max over H,W of a [C,H,W,D] map; depth untouched. Argmax records the
// flat input index per output element; ties go to the first element in
// row-major scan order so backward is deterministic.
template <typename T>
struct PoolResult {
    Tensor<T> output;
    std::vector<std::size_t> argmax;
};

template <typename T>
PoolResult<T> maxpool_spatial_forward(const Tensor<T>& input);

template <typename T>
Tensor<T> maxpool_spatial_backward(const Tensor<T>& grad_out,
                                   const std::vector<std::size_t>& argmax,
                                   const std::vector<std::size_t>& input_shape);

// Transposed 2D convolution, kernel 4, stride 2, padding 1: [C,H,W] ->
// [C',2H,2W]. weights [C_in, C_out, 4, 4]; exact adjoint of the matching
// stride-2 convolution, no bias.
inline constexpr std::size_t kDeconvKernel = 4;
inline constexpr std::size_t kDeconvStride = 2;
inline constexpr std::size_t kDeconvPad = 1;

template <typename T>
Tensor<T> deconv2d_forward(const Tensor<T>& input, const Tensor<T>& weights);

template <typename T>
struct Deconv2dGrads {
    Tensor<T> input;
    Tensor<T> weights;
};

template <typename T>
Deconv2dGrads<T> deconv2d_backward(const Tensor<T>& grad_out,
                                   const Tensor<T>& saved_input,
                                   const Tensor<T>& weights);

template <typename T>
struct BatchNormState {
    Tensor<T> gamma;         // [C]
    Tensor<T> beta;          // [C]
    Tensor<T> running_mean;  // [C]
    Tensor<T> running_var;   // [C]
    T momentum = T(0.1);
    T epsilon = T(1e-5);

    static BatchNormState make(std::size_t channels);
};

// Saved forward context. Running statistics are not mutated by the forward
// pass; the updated values are staged here and committed by the caller after
// the optimizer step, keeping forward a pure function.
template <typename T>
struct BatchNormContext {
    Tensor<T> x_hat;
    std::vector<T> mean, inv_std;
    std::vector<T> new_running_mean, new_running_var;
};

// Channel axis 0; statistics over all remaining axes.
template <typename T>
Tensor<T> batchnorm_forward(const Tensor<T>& input, const BatchNormState<T>& state,
                            Mode mode, BatchNormContext<T>* ctx);

template <typename T>
struct BatchNormGrads {
    Tensor<T> input;
    Tensor<T> gamma;
    Tensor<T> beta;
};

template <typename T>
BatchNormGrads<T> batchnorm_backward(const Tensor<T>& grad_out,
                                     const BatchNormContext<T>& ctx,
                                     const BatchNormState<T>& state);

// Inverted dropout: zeroes with probability p and scales survivors by
// 1/(1-p). The mask is a pure function of rng_seed, so backward regenerates
// it instead of storing it. p = 0 and infer mode are bit-exact identities.
template <typename T>
Tensor<T> dropout(const Tensor<T>& input, double p, Mode mode, std::uint64_t rng_seed);

template <typename T>
Tensor<T> dropout_backward(const Tensor<T>& grad_out, double p, Mode mode,
                           std::uint64_t rng_seed);

// Two-class per-pixel softmax over [2,H,W], stabilized by max subtraction.
template <typename T>
Tensor<T> softmax2(const Tensor<T>& logits);

template <typename T>
Tensor<T> relu(const Tensor<T>& input);

template <typename T>
Tensor<T> relu_backward(const Tensor<T>& grad_out, const Tensor<T>& saved_input);

}  // namespace voxelseg
