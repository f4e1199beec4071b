#include "voxelseg/layers.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace voxelseg {

std::size_t ConvSpec::out_extent(std::size_t axis, std::size_t in_extent) const {
    const std::size_t k = kernel.at(axis);
    const std::size_t padded = in_extent + 2 * pad.at(axis);
    if (padded < k)
        throw ConfigError("conv axis " + std::to_string(axis) + ": input extent " +
                          std::to_string(in_extent) + " + 2*pad " + std::to_string(pad[axis]) +
                          " is smaller than kernel " + std::to_string(k));
    return (padded - k) / stride.at(axis) + 1;
}

void ConvSpec::validate() const {
    const std::size_t r = kernel.size();
    if (r != 2 && r != 3)
        throw ConfigError("conv supports 2 or 3 spatial axes, got " + std::to_string(r));
    if (stride.size() != r || pad.size() != r)
        throw ConfigError("conv kernel/stride/pad must have matching ranks");
    for (std::size_t a = 0; a < r; ++a) {
        if (kernel[a] == 0) throw ConfigError("conv axis " + std::to_string(a) + ": kernel must be positive");
        if (stride[a] == 0) throw ConfigError("conv axis " + std::to_string(a) + ": stride must be positive");
    }
    if (in_channels == 0 || out_channels == 0)
        throw ConfigError("conv channel counts must be positive");
}

ConvSpec make_conv_spec(std::size_t in_ch, std::size_t out_ch,
                        std::vector<std::size_t> kernel,
                        std::vector<std::size_t> stride,
                        std::vector<std::size_t> pad) {
    ConvSpec s;
    s.in_channels = in_ch;
    s.out_channels = out_ch;
    s.kernel = std::move(kernel);
    s.stride = std::move(stride);
    s.pad = std::move(pad);
    s.validate();
    return s;
}

namespace {

void check_conv_shapes(const std::vector<std::size_t>& in_shape, const ConvSpec& spec,
                       const std::vector<std::size_t>& w_shape, std::size_t bias_len) {
    spec.validate();
    const std::size_t r = spec.spatial_rank();
    if (in_shape.size() != r + 1)
        throw ConfigError("conv input rank " + std::to_string(in_shape.size()) +
                          " does not match " + std::to_string(r) + " spatial axes + channels");
    if (in_shape[0] != spec.in_channels)
        throw ConfigError("conv input channels " + std::to_string(in_shape[0]) +
                          " != spec in_channels " + std::to_string(spec.in_channels));
    std::vector<std::size_t> expect_w{spec.out_channels, spec.in_channels};
    expect_w.insert(expect_w.end(), spec.kernel.begin(), spec.kernel.end());
    if (w_shape != expect_w)
        throw ConfigError("conv weight shape mismatch (expected [C_out,C_in,k...])");
    if (bias_len != spec.out_channels)
        throw ConfigError("conv bias length " + std::to_string(bias_len) +
                          " != out_channels " + std::to_string(spec.out_channels));
}

// Signed helpers keep the padded-coordinate arithmetic readable.
inline long sl(std::size_t v) { return static_cast<long>(v); }

}  // namespace

template <typename T>
Tensor<T> conv_forward(const Tensor<T>& input, const ConvSpec& spec,
                       const Tensor<T>& weights, const Tensor<T>& bias) {
    check_conv_shapes(input.shape(), spec, weights.shape(), bias.numel());
    const std::size_t r = spec.spatial_rank();
    const std::size_t Ci = spec.in_channels, Co = spec.out_channels;

    if (r == 2) {
        const std::size_t H = input.extent(1), W = input.extent(2);
        const std::size_t OH = spec.out_extent(0, H), OW = spec.out_extent(1, W);
        const std::size_t kH = spec.kernel[0], kW = spec.kernel[1];
        const long sy = sl(spec.stride[0]), sx = sl(spec.stride[1]);
        const long py = sl(spec.pad[0]), px = sl(spec.pad[1]);
        Tensor<T> out({Co, OH, OW});
        const T* in = input.raw();
        const T* w = weights.raw();
        T* o = out.raw();
        parallel_for(Co, 1, [&](std::size_t b0, std::size_t b1) {
            for (std::size_t co = b0; co < b1; ++co) {
                const T* wc = w + co * Ci * kH * kW;
                for (std::size_t oy = 0; oy < OH; ++oy) {
                    for (std::size_t ox = 0; ox < OW; ++ox) {
                        T acc = bias[co];
                        for (std::size_t ci = 0; ci < Ci; ++ci) {
                            const T* inc = in + ci * H * W;
                            const T* wk = wc + ci * kH * kW;
                            for (std::size_t ky = 0; ky < kH; ++ky) {
                                const long iy = sl(oy) * sy + sl(ky) - py;
                                if (iy < 0 || iy >= sl(H)) continue;
                                for (std::size_t kx = 0; kx < kW; ++kx) {
                                    const long ix = sl(ox) * sx + sl(kx) - px;
                                    if (ix < 0 || ix >= sl(W)) continue;
                                    acc += inc[iy * sl(W) + ix] * wk[ky * kW + kx];
                                }
                            }
                        }
                        o[(co * OH + oy) * OW + ox] = acc;
                    }
                }
            }
        });
        return out;
    }

    const std::size_t H = input.extent(1), W = input.extent(2), D = input.extent(3);
    const std::size_t OH = spec.out_extent(0, H), OW = spec.out_extent(1, W);
    const std::size_t OD = spec.out_extent(2, D);
    const std::size_t kH = spec.kernel[0], kW = spec.kernel[1], kD = spec.kernel[2];
    const long sy = sl(spec.stride[0]), sx = sl(spec.stride[1]), sz = sl(spec.stride[2]);
    const long py = sl(spec.pad[0]), px = sl(spec.pad[1]), pz = sl(spec.pad[2]);
    Tensor<T> out({Co, OH, OW, OD});
    const T* in = input.raw();
    const T* w = weights.raw();
    T* o = out.raw();
    parallel_for(Co, 1, [&](std::size_t b0, std::size_t b1) {
        for (std::size_t co = b0; co < b1; ++co) {
            const T* wc = w + co * Ci * kH * kW * kD;
            for (std::size_t oy = 0; oy < OH; ++oy) {
                for (std::size_t ox = 0; ox < OW; ++ox) {
                    T* orow = o + ((co * OH + oy) * OW + ox) * OD;
                    for (std::size_t oz = 0; oz < OD; ++oz) orow[oz] = bias[co];
                    for (std::size_t ci = 0; ci < Ci; ++ci) {
                        const T* inc = in + ci * H * W * D;
                        const T* wk = wc + ci * kH * kW * kD;
                        for (std::size_t ky = 0; ky < kH; ++ky) {
                            const long iy = sl(oy) * sy + sl(ky) - py;
                            if (iy < 0 || iy >= sl(H)) continue;
                            for (std::size_t kx = 0; kx < kW; ++kx) {
                                const long ix = sl(ox) * sx + sl(kx) - px;
                                if (ix < 0 || ix >= sl(W)) continue;
                                const T* irow = inc + (iy * sl(W) + ix) * sl(D);
                                const T* wrow = wk + (ky * kW + kx) * kD;
                                for (std::size_t kz = 0; kz < kD; ++kz) {
                                    const long izb = sl(kz) - pz;
                                    // oz*sz + kz - pz must land in [0, D)
                                    for (std::size_t oz = 0; oz < OD; ++oz) {
                                        const long iz = sl(oz) * sz + izb;
                                        if (iz < 0 || iz >= sl(D)) continue;
                                        orow[oz] += irow[iz] * wrow[kz];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    return out;
}

template <typename T>
ConvGrads<T> conv_backward(const Tensor<T>& grad_out, const Tensor<T>& saved_input,
                           const ConvSpec& spec, const Tensor<T>& weights) {
    check_conv_shapes(saved_input.shape(), spec, weights.shape(), spec.out_channels);
    const std::size_t r = spec.spatial_rank();
    std::vector<std::size_t> expect_out{spec.out_channels};
    for (std::size_t a = 0; a < r; ++a)
        expect_out.push_back(spec.out_extent(a, saved_input.extent(a + 1)));
    if (grad_out.shape() != expect_out)
        throw InternalError("conv_backward: grad_out shape does not match saved forward context");

    ConvGrads<T> g{Tensor<T>(saved_input.shape()), Tensor<T>(weights.shape()),
                   Tensor<T>({spec.out_channels})};
    const std::size_t Ci = spec.in_channels, Co = spec.out_channels;
    const T* go = grad_out.raw();
    const T* in = saved_input.raw();
    const T* w = weights.raw();

    if (r == 2) {
        const std::size_t H = saved_input.extent(1), W = saved_input.extent(2);
        const std::size_t OH = grad_out.extent(1), OW = grad_out.extent(2);
        const std::size_t kH = spec.kernel[0], kW = spec.kernel[1];
        const long sy = sl(spec.stride[0]), sx = sl(spec.stride[1]);
        const long py = sl(spec.pad[0]), px = sl(spec.pad[1]);

        for (std::size_t co = 0; co < Co; ++co) {
            T acc = T(0);
            const T* grow = go + co * OH * OW;
            for (std::size_t i = 0; i < OH * OW; ++i) acc += grow[i];
            g.bias[co] = acc;
        }

        T* gw = g.weights.raw();
        parallel_for(Co, 1, [&](std::size_t b0, std::size_t b1) {
            for (std::size_t co = b0; co < b1; ++co)
                for (std::size_t ci = 0; ci < Ci; ++ci)
                    for (std::size_t ky = 0; ky < kH; ++ky)
                        for (std::size_t kx = 0; kx < kW; ++kx) {
                            T acc = T(0);
                            for (std::size_t oy = 0; oy < OH; ++oy) {
                                const long iy = sl(oy) * sy + sl(ky) - py;
                                if (iy < 0 || iy >= sl(H)) continue;
                                for (std::size_t ox = 0; ox < OW; ++ox) {
                                    const long ix = sl(ox) * sx + sl(kx) - px;
                                    if (ix < 0 || ix >= sl(W)) continue;
                                    acc += go[(co * OH + oy) * OW + ox] *
                                           in[(ci * H + sl(iy)) * W + ix];
                                }
                            }
                            gw[((co * Ci + ci) * kH + ky) * kW + kx] = acc;
                        }
        });

        T* gi = g.input.raw();
        parallel_for(Ci, 1, [&](std::size_t b0, std::size_t b1) {
            for (std::size_t ci = b0; ci < b1; ++ci)
                for (std::size_t iy = 0; iy < H; ++iy)
                    for (std::size_t ix = 0; ix < W; ++ix) {
                        T acc = T(0);
                        for (std::size_t co = 0; co < Co; ++co)
                            for (std::size_t ky = 0; ky < kH; ++ky) {
                                const long num_y = sl(iy) + py - sl(ky);
                                if (num_y < 0 || num_y % sy != 0) continue;
                                const long oy = num_y / sy;
                                if (oy >= sl(OH)) continue;
                                for (std::size_t kx = 0; kx < kW; ++kx) {
                                    const long num_x = sl(ix) + px - sl(kx);
                                    if (num_x < 0 || num_x % sx != 0) continue;
                                    const long ox = num_x / sx;
                                    if (ox >= sl(OW)) continue;
                                    acc += go[(co * OH + oy) * OW + ox] *
                                           w[((co * Ci + ci) * kH + ky) * kW + kx];
                                }
                            }
                        gi[(ci * H + iy) * W + ix] = acc;
                    }
        });
        return g;
    }

    const std::size_t H = saved_input.extent(1), W = saved_input.extent(2), D = saved_input.extent(3);
    const std::size_t OH = grad_out.extent(1), OW = grad_out.extent(2), OD = grad_out.extent(3);
    const std::size_t kH = spec.kernel[0], kW = spec.kernel[1], kD = spec.kernel[2];
    const long sy = sl(spec.stride[0]), sx = sl(spec.stride[1]), sz = sl(spec.stride[2]);
    const long py = sl(spec.pad[0]), px = sl(spec.pad[1]), pz = sl(spec.pad[2]);

    for (std::size_t co = 0; co < Co; ++co) {
        T acc = T(0);
        const T* grow = go + co * OH * OW * OD;
        for (std::size_t i = 0; i < OH * OW * OD; ++i) acc += grow[i];
        g.bias[co] = acc;
    }

    T* gw = g.weights.raw();
    parallel_for(Co, 1, [&](std::size_t b0, std::size_t b1) {
        for (std::size_t co = b0; co < b1; ++co)
            for (std::size_t ci = 0; ci < Ci; ++ci)
                for (std::size_t ky = 0; ky < kH; ++ky)
                    for (std::size_t kx = 0; kx < kW; ++kx)
                        for (std::size_t kz = 0; kz < kD; ++kz) {
                            T acc = T(0);
                            for (std::size_t oy = 0; oy < OH; ++oy) {
                                const long iy = sl(oy) * sy + sl(ky) - py;
                                if (iy < 0 || iy >= sl(H)) continue;
                                for (std::size_t ox = 0; ox < OW; ++ox) {
                                    const long ix = sl(ox) * sx + sl(kx) - px;
                                    if (ix < 0 || ix >= sl(W)) continue;
                                    const T* grow = go + ((co * OH + oy) * OW + ox) * OD;
                                    const T* irow = in + ((ci * H + sl(iy)) * W + sl(ix)) * D;
                                    for (std::size_t oz = 0; oz < OD; ++oz) {
                                        const long iz = sl(oz) * sz + sl(kz) - pz;
                                        if (iz < 0 || iz >= sl(D)) continue;
                                        acc += grow[oz] * irow[iz];
                                    }
                                }
                            }
                            gw[(((co * Ci + ci) * kH + ky) * kW + kx) * kD + kz] = acc;
                        }
    });

    T* gi = g.input.raw();
    parallel_for(Ci, 1, [&](std::size_t b0, std::size_t b1) {
        for (std::size_t ci = b0; ci < b1; ++ci)
            for (std::size_t iy = 0; iy < H; ++iy)
                for (std::size_t ix = 0; ix < W; ++ix)
                    for (std::size_t iz = 0; iz < D; ++iz) {
                        T acc = T(0);
                        for (std::size_t co = 0; co < Co; ++co)
                            for (std::size_t ky = 0; ky < kH; ++ky) {
                                const long num_y = sl(iy) + py - sl(ky);
                                if (num_y < 0 || num_y % sy != 0) continue;
                                const long oy = num_y / sy;
                                if (oy >= sl(OH)) continue;
                                for (std::size_t kx = 0; kx < kW; ++kx) {
                                    const long num_x = sl(ix) + px - sl(kx);
                                    if (num_x < 0 || num_x % sx != 0) continue;
                                    const long ox = num_x / sx;
                                    if (ox >= sl(OW)) continue;
                                    for (std::size_t kz = 0; kz < kD; ++kz) {
                                        const long num_z = sl(iz) + pz - sl(kz);
                                        if (num_z < 0 || num_z % sz != 0) continue;
                                        const long oz = num_z / sz;
                                        if (oz >= sl(OD)) continue;
                                        acc += go[((co * OH + oy) * OW + ox) * OD + oz] *
                                               w[(((co * Ci + ci) * kH + ky) * kW + kx) * kD + kz];
                                    }
                                }
                            }
                        gi[((ci * H + iy) * W + ix) * D + iz] = acc;
                    }
    });
    return g;
}

template <typename T>
PoolResult<T> maxpool_spatial_forward(const Tensor<T>& input) {
    if (input.rank() != 4)
        throw ConfigError("maxpool expects a [C,H,W,D] tensor, got rank " +
                          std::to_string(input.rank()));
    const std::size_t C = input.extent(0), H = input.extent(1), W = input.extent(2),
                      D = input.extent(3);
    if (H % 2 != 0) throw ConfigError("maxpool: height " + std::to_string(H) + " is odd");
    if (W % 2 != 0) throw ConfigError("maxpool: width " + std::to_string(W) + " is odd");
    const std::size_t OH = H / 2, OW = W / 2;

    PoolResult<T> res{Tensor<T>({C, OH, OW, D}), {}};
    res.argmax.resize(res.output.numel());
    const T* in = input.raw();
    T* out = res.output.raw();
    for (std::size_t c = 0; c < C; ++c)
        for (std::size_t oy = 0; oy < OH; ++oy)
            for (std::size_t ox = 0; ox < OW; ++ox)
                for (std::size_t z = 0; z < D; ++z) {
                    T best = -std::numeric_limits<T>::infinity();
                    std::size_t best_idx = 0;
                    for (std::size_t dy = 0; dy < 2; ++dy)
                        for (std::size_t dx = 0; dx < 2; ++dx) {
                            const std::size_t idx =
                                ((c * H + 2 * oy + dy) * W + 2 * ox + dx) * D + z;
                            if (in[idx] > best) {
                                best = in[idx];
                                best_idx = idx;
                            }
                        }
                    const std::size_t oidx = ((c * OH + oy) * OW + ox) * D + z;
                    out[oidx] = best;
                    res.argmax[oidx] = best_idx;
                }
    return res;
}

template <typename T>
Tensor<T> maxpool_spatial_backward(const Tensor<T>& grad_out,
                                   const std::vector<std::size_t>& argmax,
                                   const std::vector<std::size_t>& input_shape) {
    if (grad_out.numel() != argmax.size())
        throw InternalError("maxpool backward: argmax record does not match grad_out");
    Tensor<T> gi(input_shape);
    for (std::size_t i = 0; i < argmax.size(); ++i) gi[argmax[i]] += grad_out[i];
    return gi;
}

template <typename T>
Tensor<T> deconv2d_forward(const Tensor<T>& input, const Tensor<T>& weights) {
    if (input.rank() != 3)
        throw ConfigError("deconv2d expects a [C,H,W] tensor");
    const std::size_t Ci = input.extent(0), H = input.extent(1), W = input.extent(2);
    if (weights.rank() != 4 || weights.extent(0) != Ci ||
        weights.extent(2) != kDeconvKernel || weights.extent(3) != kDeconvKernel)
        throw ConfigError("deconv2d weights must be [C_in,C_out,4,4]");
    const std::size_t Co = weights.extent(1);
    const std::size_t OH = 2 * H, OW = 2 * W;

    Tensor<T> out({Co, OH, OW});
    const T* in = input.raw();
    const T* w = weights.raw();
    T* o = out.raw();
    // Gather form: each output pixel sums the input taps that stamp onto it,
    // so the loop is deterministic and trivially parallel over outputs.
    parallel_for(Co, 1, [&](std::size_t b0, std::size_t b1) {
        for (std::size_t co = b0; co < b1; ++co)
            for (std::size_t oy = 0; oy < OH; ++oy)
                for (std::size_t ox = 0; ox < OW; ++ox) {
                    T acc = T(0);
                    for (std::size_t a = 0; a < kDeconvKernel; ++a) {
                        const long ny = sl(oy) + sl(kDeconvPad) - sl(a);
                        if (ny < 0 || ny % sl(kDeconvStride) != 0) continue;
                        const long iy = ny / sl(kDeconvStride);
                        if (iy >= sl(H)) continue;
                        for (std::size_t b = 0; b < kDeconvKernel; ++b) {
                            const long nx = sl(ox) + sl(kDeconvPad) - sl(b);
                            if (nx < 0 || nx % sl(kDeconvStride) != 0) continue;
                            const long ix = nx / sl(kDeconvStride);
                            if (ix >= sl(W)) continue;
                            for (std::size_t ci = 0; ci < Ci; ++ci)
                                acc += in[(ci * H + iy) * W + ix] *
                                       w[((ci * Co + co) * kDeconvKernel + a) * kDeconvKernel + b];
                        }
                    }
                    o[(co * OH + oy) * OW + ox] = acc;
                }
    });
    return out;
}

template <typename T>
Deconv2dGrads<T> deconv2d_backward(const Tensor<T>& grad_out,
                                   const Tensor<T>& saved_input,
                                   const Tensor<T>& weights) {
    const std::size_t Ci = saved_input.extent(0), H = saved_input.extent(1),
                      W = saved_input.extent(2);
    const std::size_t Co = weights.extent(1);
    if (grad_out.rank() != 3 || grad_out.extent(0) != Co || grad_out.extent(1) != 2 * H ||
        grad_out.extent(2) != 2 * W)
        throw InternalError("deconv2d backward: grad_out shape does not match saved context");
    const std::size_t OH = 2 * H, OW = 2 * W;

    Deconv2dGrads<T> g{Tensor<T>(saved_input.shape()), Tensor<T>(weights.shape())};
    const T* go = grad_out.raw();
    const T* in = saved_input.raw();
    const T* w = weights.raw();

    // Adjoint of the gather: grad wrt input is the stride-2 convolution of
    // grad_out with the same kernel.
    T* gi = g.input.raw();
    parallel_for(Ci, 1, [&](std::size_t b0, std::size_t b1) {
        for (std::size_t ci = b0; ci < b1; ++ci)
            for (std::size_t iy = 0; iy < H; ++iy)
                for (std::size_t ix = 0; ix < W; ++ix) {
                    T acc = T(0);
                    for (std::size_t a = 0; a < kDeconvKernel; ++a) {
                        const long oy = sl(iy) * sl(kDeconvStride) + sl(a) - sl(kDeconvPad);
                        if (oy < 0 || oy >= sl(OH)) continue;
                        for (std::size_t b = 0; b < kDeconvKernel; ++b) {
                            const long ox = sl(ix) * sl(kDeconvStride) + sl(b) - sl(kDeconvPad);
                            if (ox < 0 || ox >= sl(OW)) continue;
                            for (std::size_t co = 0; co < Co; ++co)
                                acc += go[(co * OH + oy) * OW + ox] *
                                       w[((ci * Co + co) * kDeconvKernel + a) * kDeconvKernel + b];
                        }
                    }
                    gi[(ci * H + iy) * W + ix] = acc;
                }
    });

    T* gw = g.weights.raw();
    parallel_for(Ci, 1, [&](std::size_t b0, std::size_t b1) {
        for (std::size_t ci = b0; ci < b1; ++ci)
            for (std::size_t co = 0; co < Co; ++co)
                for (std::size_t a = 0; a < kDeconvKernel; ++a)
                    for (std::size_t b = 0; b < kDeconvKernel; ++b) {
                        T acc = T(0);
                        for (std::size_t iy = 0; iy < H; ++iy) {
                            const long oy = sl(iy) * sl(kDeconvStride) + sl(a) - sl(kDeconvPad);
                            if (oy < 0 || oy >= sl(OH)) continue;
                            for (std::size_t ix = 0; ix < W; ++ix) {
                                const long ox = sl(ix) * sl(kDeconvStride) + sl(b) - sl(kDeconvPad);
                                if (ox < 0 || ox >= sl(OW)) continue;
                                acc += in[(ci * H + iy) * W + ix] * go[(co * OH + oy) * OW + ox];
                            }
                        }
                        gw[((ci * Co + co) * kDeconvKernel + a) * kDeconvKernel + b] = acc;
                    }
    });
    return g;
}

template <typename T>
BatchNormState<T> BatchNormState<T>::make(std::size_t channels) {
    BatchNormState<T> s;
    s.gamma = Tensor<T>::full({channels}, T(1));
    s.beta = Tensor<T>({channels});
    s.running_mean = Tensor<T>({channels});
    s.running_var = Tensor<T>::full({channels}, T(1));
    return s;
}

template <typename T>
Tensor<T> batchnorm_forward(const Tensor<T>& input, const BatchNormState<T>& state,
                            Mode mode, BatchNormContext<T>* ctx) {
    if (input.rank() < 2) throw ConfigError("batchnorm input needs a channel axis plus data");
    const std::size_t C = input.extent(0);
    if (state.gamma.numel() != C)
        throw ConfigError("batchnorm state has " + std::to_string(state.gamma.numel()) +
                          " channels, input has " + std::to_string(C));
    const std::size_t N = input.numel() / C;
    if (N == 0) throw ConfigError("batchnorm: zero-size channel");

    Tensor<T> out(input.shape());
    const T* in = input.raw();
    T* o = out.raw();

    if (mode == Mode::infer) {
        for (std::size_t c = 0; c < C; ++c) {
            const T scale = state.gamma[c] / std::sqrt(state.running_var[c] + state.epsilon);
            const T shift = state.beta[c] - scale * state.running_mean[c];
            const T* row = in + c * N;
            T* orow = o + c * N;
            for (std::size_t i = 0; i < N; ++i) orow[i] = scale * row[i] + shift;
        }
        return out;
    }

    if (ctx) {
        ctx->x_hat = Tensor<T>(input.shape());
        ctx->mean.assign(C, T(0));
        ctx->inv_std.assign(C, T(0));
        ctx->new_running_mean.assign(C, T(0));
        ctx->new_running_var.assign(C, T(0));
    }
    for (std::size_t c = 0; c < C; ++c) {
        const T* row = in + c * N;
        T mean = T(0);
        for (std::size_t i = 0; i < N; ++i) mean += row[i];
        mean /= T(N);
        T var = T(0);
        for (std::size_t i = 0; i < N; ++i) {
            const T d = row[i] - mean;
            var += d * d;
        }
        var /= T(N);  // population variance: normalized output has variance exactly 1
        const T inv_std = T(1) / std::sqrt(var + state.epsilon);
        T* orow = o + c * N;
        T* xh = ctx ? ctx->x_hat.raw() + c * N : nullptr;
        for (std::size_t i = 0; i < N; ++i) {
            const T h = (row[i] - mean) * inv_std;
            if (xh) xh[i] = h;
            orow[i] = state.gamma[c] * h + state.beta[c];
        }
        if (ctx) {
            ctx->mean[c] = mean;
            ctx->inv_std[c] = inv_std;
            ctx->new_running_mean[c] =
                (T(1) - state.momentum) * state.running_mean[c] + state.momentum * mean;
            ctx->new_running_var[c] =
                (T(1) - state.momentum) * state.running_var[c] + state.momentum * var;
        }
    }
    return out;
}

template <typename T>
BatchNormGrads<T> batchnorm_backward(const Tensor<T>& grad_out,
                                     const BatchNormContext<T>& ctx,
                                     const BatchNormState<T>& state) {
    const std::size_t C = state.gamma.numel();
    if (grad_out.shape() != ctx.x_hat.shape())
        throw InternalError("batchnorm backward: grad_out does not match saved context");
    const std::size_t N = grad_out.numel() / C;

    BatchNormGrads<T> g{Tensor<T>(grad_out.shape()), Tensor<T>({C}), Tensor<T>({C})};
    const T* go = grad_out.raw();
    const T* xh = ctx.x_hat.raw();
    T* gi = g.input.raw();
    for (std::size_t c = 0; c < C; ++c) {
        const T* gr = go + c * N;
        const T* hr = xh + c * N;
        T sum_g = T(0), sum_gh = T(0);
        for (std::size_t i = 0; i < N; ++i) {
            sum_g += gr[i];
            sum_gh += gr[i] * hr[i];
        }
        g.beta[c] = sum_g;
        g.gamma[c] = sum_gh;
        const T k = state.gamma[c] * ctx.inv_std[c];
        const T mg = sum_g / T(N);
        const T mgh = sum_gh / T(N);
        T* gir = gi + c * N;
        for (std::size_t i = 0; i < N; ++i) gir[i] = k * (gr[i] - mg - hr[i] * mgh);
    }
    return g;
}

template <typename T>
Tensor<T> dropout(const Tensor<T>& input, double p, Mode mode, std::uint64_t rng_seed) {
    if (p < 0.0 || p >= 1.0)
        throw ConfigError("dropout probability must be in [0,1), got " + std::to_string(p));
    if (mode == Mode::infer || p == 0.0) return input;
    Tensor<T> out(input.shape());
    Rng rng(rng_seed);
    const T scale = T(1.0 / (1.0 - p));
    for (std::size_t i = 0; i < input.numel(); ++i)
        out[i] = rng.uniform() < p ? T(0) : input[i] * scale;
    return out;
}

template <typename T>
Tensor<T> dropout_backward(const Tensor<T>& grad_out, double p, Mode mode,
                           std::uint64_t rng_seed) {
    if (mode == Mode::infer || p == 0.0) return grad_out;
    Tensor<T> gi(grad_out.shape());
    Rng rng(rng_seed);  // same stream as forward -> same mask
    const T scale = T(1.0 / (1.0 - p));
    for (std::size_t i = 0; i < grad_out.numel(); ++i)
        gi[i] = rng.uniform() < p ? T(0) : grad_out[i] * scale;
    return gi;
}

template <typename T>
Tensor<T> softmax2(const Tensor<T>& logits) {
    if (logits.rank() != 3 || logits.extent(0) != 2)
        throw ConfigError("softmax2 expects a [2,H,W] tensor");
    const std::size_t N = logits.extent(1) * logits.extent(2);
    Tensor<T> out(logits.shape());
    const T* z = logits.raw();
    T* p = out.raw();
    for (std::size_t i = 0; i < N; ++i) {
        const T z0 = z[i], z1 = z[N + i];
        const T m = z0 > z1 ? z0 : z1;
        const T e0 = std::exp(z0 - m), e1 = std::exp(z1 - m);
        const T s = e0 + e1;
        p[i] = e0 / s;
        p[N + i] = e1 / s;
    }
    return out;
}

template <typename T>
Tensor<T> relu(const Tensor<T>& input) {
    Tensor<T> out(input.shape());
    for (std::size_t i = 0; i < input.numel(); ++i)
        out[i] = input[i] > T(0) ? input[i] : T(0);
    return out;
}

template <typename T>
Tensor<T> relu_backward(const Tensor<T>& grad_out, const Tensor<T>& saved_input) {
    if (grad_out.shape() != saved_input.shape())
        throw InternalError("relu backward: grad_out does not match saved input");
    Tensor<T> gi(grad_out.shape());
    for (std::size_t i = 0; i < grad_out.numel(); ++i)
        gi[i] = saved_input[i] > T(0) ? grad_out[i] : T(0);
    return gi;
}

#define VOXELSEG_INSTANTIATE_LAYERS(T)                                                        \
    template Tensor<T> conv_forward<T>(const Tensor<T>&, const ConvSpec&, const Tensor<T>&,  \
                                       const Tensor<T>&);                                     \
    template ConvGrads<T> conv_backward<T>(const Tensor<T>&, const Tensor<T>&,               \
                                           const ConvSpec&, const Tensor<T>&);               \
    template PoolResult<T> maxpool_spatial_forward<T>(const Tensor<T>&);                      \
    template Tensor<T> maxpool_spatial_backward<T>(const Tensor<T>&,                         \
                                                   const std::vector<std::size_t>&,          \
                                                   const std::vector<std::size_t>&);         \
    template Tensor<T> deconv2d_forward<T>(const Tensor<T>&, const Tensor<T>&);               \
    template Deconv2dGrads<T> deconv2d_backward<T>(const Tensor<T>&, const Tensor<T>&,       \
                                                   const Tensor<T>&);                         \
    template struct BatchNormState<T>;                                                        \
    template Tensor<T> batchnorm_forward<T>(const Tensor<T>&, const BatchNormState<T>&,      \
                                            Mode, BatchNormContext<T>*);                     \
    template BatchNormGrads<T> batchnorm_backward<T>(const Tensor<T>&,                       \
                                                     const BatchNormContext<T>&,             \
                                                     const BatchNormState<T>&);              \
    template Tensor<T> dropout<T>(const Tensor<T>&, double, Mode, std::uint64_t);             \
    template Tensor<T> dropout_backward<T>(const Tensor<T>&, double, Mode, std::uint64_t);    \
    template Tensor<T> softmax2<T>(const Tensor<T>&);                                         \
    template Tensor<T> relu<T>(const Tensor<T>&);                                             \
    template Tensor<T> relu_backward<T>(const Tensor<T>&, const Tensor<T>&);

VOXELSEG_INSTANTIATE_LAYERS(float)
VOXELSEG_INSTANTIATE_LAYERS(double)

#undef VOXELSEG_INSTANTIATE_LAYERS

}  // namespace voxelseg
