#include "voxelseg/net.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>
#include <type_traits>

namespace voxelseg {

void NetworkConfig::validate() const {
    if (stages == 0) throw ConfigError("network: stages must be >= 1");
    if (convs_per_stage == 0) throw ConfigError("network: convs_per_stage must be >= 1");
    if (num_classes != 2) throw ConfigError("network: num_classes must be 2");
    if (dropout_p < 0.0 || dropout_p >= 1.0)
        throw ConfigError("network: dropout_p must be in [0,1)");
    if (channels.size() != stages + 1)
        throw ConfigError("network: channels must list stages+1 widths (" +
                          std::to_string(stages + 1) + " expected, " +
                          std::to_string(channels.size()) + " given)");
    for (auto c : channels)
        if (c == 0) throw ConfigError("network: channel widths must be positive");
    const std::size_t div = std::size_t(1) << stages;
    if (input_height == 0 || input_height % div != 0)
        throw ConfigError("network: input_height " + std::to_string(input_height) +
                          " is not divisible by 2^stages = " + std::to_string(div));
    if (input_width == 0 || input_width % div != 0)
        throw ConfigError("network: input_width " + std::to_string(input_width) +
                          " is not divisible by 2^stages = " + std::to_string(div));
    const std::size_t trimmed = 2 * convs_per_stage * stages;
    if (input_depth <= trimmed)
        throw ConfigError("network: input_depth " + std::to_string(input_depth) +
                          " leaves no bottleneck depth (needs > " + std::to_string(trimmed) + ")");
}

ShapeTrace trace_shapes(const NetworkConfig& config) {
    config.validate();
    ShapeTrace t;
    t.input_center_slice = (config.input_depth - 1) / 2;
    std::size_t h = config.input_height, w = config.input_width, d = config.input_depth;
    std::size_t convs_applied = 0;
    for (std::size_t s = 0; s < config.stages; ++s) {
        ShapeTrace::Stage st;
        d -= 2 * config.convs_per_stage;
        convs_applied += config.convs_per_stage;
        st.height = h;
        st.width = w;
        st.depth_pre_pool = d;
        st.center_index = (d - 1) / 2;
        // each valid 3x3x3 conv shifts feature index k to input index k+1
        st.center_input_slice = st.center_index + convs_applied;
        t.encoder.push_back(st);
        h /= 2;
        w /= 2;
    }
    t.bottleneck_height = h;
    t.bottleneck_width = w;
    t.bottleneck_depth_pre_collapse = d;
    t.bottleneck_depth_post_collapse = 1;
    return t;
}

template <typename T>
Tensor<T>& ParamRegistry<T>::add(std::string path, Tensor<T> value, bool trainable) {
    if (contains(path)) throw InternalError("duplicate parameter path: " + path);
    value.set_requires_grad(trainable);
    entries_.push_back(Entry{std::move(path), std::move(value), trainable});
    return entries_.back().value;
}

template <typename T>
Tensor<T>& ParamRegistry<T>::at(const std::string& path) {
    for (auto& e : entries_)
        if (e.path == path) return e.value;
    throw InternalError("unknown parameter path: " + path);
}

template <typename T>
const Tensor<T>& ParamRegistry<T>::at(const std::string& path) const {
    for (const auto& e : entries_)
        if (e.path == path) return e.value;
    throw InternalError("unknown parameter path: " + path);
}

template <typename T>
bool ParamRegistry<T>::contains(const std::string& path) const {
    for (const auto& e : entries_)
        if (e.path == path) return true;
    return false;
}

template <typename T>
void ParamRegistry<T>::zero_grads() {
    for (auto& e : entries_)
        if (e.trainable) e.value.zero_grad();
}

std::size_t center_index(std::size_t depth) {
    if (depth == 0) throw InternalError("center_index of empty depth axis");
    return (depth - 1) / 2;
}

template <typename T>
Tensor<T> center_slice_extract(const Tensor<T>& feature) {
    if (feature.rank() != 4) throw ConfigError("center_slice_extract expects [C,h,w,d]");
    const std::size_t C = feature.extent(0), h = feature.extent(1), w = feature.extent(2),
                      d = feature.extent(3);
    const std::size_t k = center_index(d);
    Tensor<T> out({C, h, w});
    for (std::size_t c = 0; c < C; ++c)
        for (std::size_t y = 0; y < h; ++y)
            for (std::size_t x = 0; x < w; ++x)
                out[(c * h + y) * w + x] = feature[((c * h + y) * w + x) * d + k];
    return out;
}

template <typename T>
Tensor<T> center_slice_backward(const Tensor<T>& grad_out,
                                const std::vector<std::size_t>& input_shape) {
    Tensor<T> gi(input_shape);
    const std::size_t h = input_shape[1], w = input_shape[2], d = input_shape[3];
    const std::size_t k = center_index(d);
    for (std::size_t c = 0; c < input_shape[0]; ++c)
        for (std::size_t y = 0; y < h; ++y)
            for (std::size_t x = 0; x < w; ++x)
                gi[((c * h + y) * w + x) * d + k] = grad_out[(c * h + y) * w + x];
    return gi;
}

template <typename T>
Tensor<T> crop_concat(const Tensor<T>& decoder_map, const Tensor<T>& encoder_center) {
    if (decoder_map.rank() != 3 || encoder_center.rank() != 3)
        throw ConfigError("crop_concat expects [C,h,w] maps");
    const std::size_t C1 = decoder_map.extent(0), h = decoder_map.extent(1),
                      w = decoder_map.extent(2);
    const std::size_t C2 = encoder_center.extent(0), eh = encoder_center.extent(1),
                      ew = encoder_center.extent(2);
    if (eh < h || ew < w)
        throw InternalError("crop_concat: encoder map " + encoder_center.shape_str() +
                            " is smaller than decoder map " + decoder_map.shape_str());
    const std::size_t oy = (eh - h) / 2, ox = (ew - w) / 2;
    Tensor<T> out({C1 + C2, h, w});
    std::copy(decoder_map.data().begin(), decoder_map.data().end(), out.data().begin());
    for (std::size_t c = 0; c < C2; ++c)
        for (std::size_t y = 0; y < h; ++y)
            for (std::size_t x = 0; x < w; ++x)
                out[((C1 + c) * h + y) * w + x] =
                    encoder_center[(c * eh + y + oy) * ew + x + ox];
    return out;
}

template <typename T>
CropConcatGrads<T> crop_concat_backward(const Tensor<T>& grad_out,
                                        const std::vector<std::size_t>& decoder_shape,
                                        const std::vector<std::size_t>& encoder_shape) {
    const std::size_t C1 = decoder_shape[0], h = decoder_shape[1], w = decoder_shape[2];
    const std::size_t C2 = encoder_shape[0], eh = encoder_shape[1], ew = encoder_shape[2];
    if (grad_out.extent(0) != C1 + C2)
        throw InternalError("crop_concat backward: channel mismatch");
    const std::size_t oy = (eh - h) / 2, ox = (ew - w) / 2;
    CropConcatGrads<T> g{Tensor<T>(decoder_shape), Tensor<T>(encoder_shape)};
    std::copy(grad_out.data().begin(), grad_out.data().begin() + C1 * h * w,
              g.decoder.data().begin());
    for (std::size_t c = 0; c < C2; ++c)
        for (std::size_t y = 0; y < h; ++y)
            for (std::size_t x = 0; x < w; ++x)
                g.encoder[(c * eh + y + oy) * ew + x + ox] =
                    grad_out[((C1 + c) * h + y) * w + x];
    return g;
}

template <typename T>
Tensor<T> depth_collapse(const Tensor<T>& feature) {
    if (feature.rank() != 4) throw ConfigError("depth_collapse expects [C,h,w,d]");
    const std::size_t C = feature.extent(0), h = feature.extent(1), w = feature.extent(2),
                      d = feature.extent(3);
    Tensor<T> out({C, h, w});
    const T inv = T(1) / T(d);
    for (std::size_t i = 0; i < C * h * w; ++i) {
        T acc = T(0);
        const T* row = feature.raw() + i * d;
        for (std::size_t z = 0; z < d; ++z) acc += row[z];
        out[i] = acc * inv;
    }
    return out;
}

template <typename T>
Tensor<T> depth_collapse_backward(const Tensor<T>& grad_out, std::size_t depth) {
    std::vector<std::size_t> shape = grad_out.shape();
    shape.push_back(depth);
    Tensor<T> gi(shape);
    const T inv = T(1) / T(depth);
    for (std::size_t i = 0; i < grad_out.numel(); ++i) {
        const T v = grad_out[i] * inv;
        T* row = gi.raw() + i * depth;
        for (std::size_t z = 0; z < depth; ++z) row[z] = v;
    }
    return gi;
}

// ---------------------------------------------------------------------------
// Net3D2D

template <typename T>
struct Net3D2D<T>::Tape {
    std::vector<std::vector<ConvBlockCtx>> enc_ctx;
    std::vector<std::vector<std::size_t>> prepool_shape;
    std::vector<std::vector<std::size_t>> pool_argmax;
    std::vector<std::vector<std::size_t>> skip_center_shape;  // [C,h,w] per stage
    std::size_t collapse_depth = 1;
    std::uint64_t dropout_seed = 0;
    std::vector<ConvBlockCtx> bottleneck_ctx;
    std::vector<Tensor<T>> deconv_in;                      // per decoder stage
    std::vector<std::vector<std::size_t>> concat_dec_shape;
    std::vector<std::vector<std::size_t>> concat_enc_shape;
    std::vector<std::vector<ConvBlockCtx>> dec_ctx;
    Tensor<T> head_in;
};

template <typename T>
Net3D2D<T>::Net3D2D(NetworkConfig config, std::uint64_t seed)
    : Net3D2D(std::move(config), seed, true) {}

template <typename T>
Net3D2D<T>::Net3D2D(Net3D2D&&) noexcept = default;
template <typename T>
Net3D2D<T>& Net3D2D<T>::operator=(Net3D2D&&) noexcept = default;
template <typename T>
Net3D2D<T>::~Net3D2D() = default;

template <typename T>
Net3D2D<T>::Net3D2D(NetworkConfig config, std::uint64_t seed, bool initialize)
    : config_(std::move(config)), seed_(seed) {
    config_.validate();
    build_layers(initialize);
}

template <typename T>
void Net3D2D<T>::build_layers(bool initialize) {
    Rng rng(seed_);
    const std::size_t S = config_.stages;
    const std::size_t cps = config_.convs_per_stage;

    auto init_conv = [&](std::vector<std::size_t> shape, std::size_t fan_in) {
        Tensor<T> w(std::move(shape));
        if (initialize) {
            const double std_dev = std::sqrt(2.0 / static_cast<double>(fan_in));
            for (auto& v : w.data()) v = T(rng.normal() * std_dev);
        }
        return w;
    };
    auto add_bn = [&](const std::string& prefix, std::size_t ch) {
        params_.add(prefix + ".gamma", Tensor<T>::full({ch}, T(1)), true);
        params_.add(prefix + ".beta", Tensor<T>({ch}), true);
        params_.add(prefix + ".running_mean", Tensor<T>({ch}), false);
        params_.add(prefix + ".running_var", Tensor<T>::full({ch}, T(1)), false);
    };
    auto add_conv_block = [&](const std::string& prefix, std::size_t j, std::size_t in_ch,
                              std::size_t out_ch, bool three_d) {
        ConvBlockRef blk;
        blk.spec = three_d
                       ? make_conv_spec(in_ch, out_ch, {3, 3, 3}, {1, 1, 1}, {1, 1, 0})
                       : make_conv_spec(in_ch, out_ch, {3, 3}, {1, 1}, {1, 1});
        std::vector<std::size_t> wshape{out_ch, in_ch};
        wshape.insert(wshape.end(), blk.spec.kernel.begin(), blk.spec.kernel.end());
        std::size_t fan_in = in_ch;
        for (auto k : blk.spec.kernel) fan_in *= k;
        blk.w = prefix + ".conv" + std::to_string(j) + ".weight";
        blk.b = prefix + ".conv" + std::to_string(j) + ".bias";
        blk.bn_prefix = prefix + ".bn" + std::to_string(j);
        params_.add(blk.w, init_conv(std::move(wshape), fan_in), true);
        params_.add(blk.b, Tensor<T>({out_ch}), true);
        add_bn(blk.bn_prefix, out_ch);
        return blk;
    };

    enc_blocks_.assign(S, {});
    std::size_t in_ch = 1;
    for (std::size_t s = 0; s < S; ++s) {
        for (std::size_t j = 0; j < cps; ++j) {
            enc_blocks_[s].push_back(
                add_conv_block("enc" + std::to_string(s), j, in_ch, config_.channels[s], true));
            in_ch = config_.channels[s];
        }
    }

    for (std::size_t j = 0; j < cps; ++j) {
        bottleneck_blocks_.push_back(
            add_conv_block("bottleneck", j, in_ch, config_.channels[S], false));
        in_ch = config_.channels[S];
    }

    deconv_w_.assign(S, {});
    dec_blocks_.assign(S, {});
    for (std::size_t si = S; si-- > 0;) {
        const std::size_t out_ch = config_.channels[si];
        deconv_w_[si] = "dec" + std::to_string(si) + ".deconv.weight";
        params_.add(deconv_w_[si],
                    init_conv({in_ch, out_ch, kDeconvKernel, kDeconvKernel},
                              in_ch * kDeconvKernel * kDeconvKernel),
                    true);
        std::size_t block_in = out_ch + config_.channels[si];  // deconv output + skip
        for (std::size_t j = 0; j < cps; ++j) {
            dec_blocks_[si].push_back(
                add_conv_block("dec" + std::to_string(si), j, block_in, out_ch, false));
            block_in = out_ch;
        }
        in_ch = out_ch;
    }

    head_spec_ = make_conv_spec(in_ch, config_.num_classes, {1, 1}, {1, 1}, {0, 0});
    head_w_ = "head.weight";
    head_b_ = "head.bias";
    params_.add(head_w_, init_conv({config_.num_classes, in_ch, 1, 1}, in_ch), true);
    params_.add(head_b_, Tensor<T>({config_.num_classes}), true);
}

template <typename T>
BatchNormState<T> Net3D2D<T>::bn_state(const std::string& prefix) const {
    BatchNormState<T> s;
    s.gamma = params_.at(prefix + ".gamma");
    s.beta = params_.at(prefix + ".beta");
    s.running_mean = params_.at(prefix + ".running_mean");
    s.running_var = params_.at(prefix + ".running_var");
    return s;
}

template <typename T>
Tensor<T> Net3D2D<T>::run_conv_block(const ConvBlockRef& blk, const Tensor<T>& x, Mode mode,
                                     ConvBlockCtx* ctx) {
    Tensor<T> y = conv_forward(x, blk.spec, params_.at(blk.w), params_.at(blk.b));
    if (ctx) ctx->conv_in = x;
    const BatchNormState<T> bn = bn_state(blk.bn_prefix);
    y = batchnorm_forward(y, bn, mode, ctx ? &ctx->bn_ctx : nullptr);
    if (ctx) ctx->relu_in = y;
    return relu(y);
}

template <typename T>
Tensor<T> Net3D2D<T>::conv_block_backward(const ConvBlockRef& blk, const Tensor<T>& grad,
                                          const ConvBlockCtx& ctx) {
    Tensor<T> g = relu_backward(grad, ctx.relu_in);
    const BatchNormState<T> bn = bn_state(blk.bn_prefix);
    BatchNormGrads<T> bg = batchnorm_backward(g, ctx.bn_ctx, bn);
    auto& gamma = params_.at(blk.bn_prefix + ".gamma");
    auto& beta = params_.at(blk.bn_prefix + ".beta");
    for (std::size_t i = 0; i < gamma.numel(); ++i) {
        gamma.grad()[i] += bg.gamma[i];
        beta.grad()[i] += bg.beta[i];
    }
    ConvGrads<T> cg = conv_backward(bg.input, ctx.conv_in, blk.spec, params_.at(blk.w));
    auto& w = params_.at(blk.w);
    auto& b = params_.at(blk.b);
    for (std::size_t i = 0; i < w.numel(); ++i) w.grad()[i] += cg.weights[i];
    for (std::size_t i = 0; i < b.numel(); ++i) b.grad()[i] += cg.bias[i];
    return std::move(cg.input);
}

template <typename T>
Tensor<T> Net3D2D<T>::forward(const Tensor<T>& volume, Mode mode, std::uint64_t dropout_seed) {
    if (volume.rank() != 4 || volume.extent(0) != 1 ||
        volume.extent(1) != config_.input_height || volume.extent(2) != config_.input_width ||
        volume.extent(3) != config_.input_depth)
        throw ConfigError("forward: volume shape " + volume.shape_str() + " does not match config [1," +
                          std::to_string(config_.input_height) + "," +
                          std::to_string(config_.input_width) + "," +
                          std::to_string(config_.input_depth) + "]");

    const std::size_t S = config_.stages;
    const bool train = mode == Mode::train;
    tape_.reset();
    std::unique_ptr<Tape> tape;
    if (train) {
        tape = std::make_unique<Tape>();
        tape->enc_ctx.resize(S);
        tape->prepool_shape.resize(S);
        tape->pool_argmax.resize(S);
        tape->skip_center_shape.resize(S);
        tape->deconv_in.resize(S);
        tape->concat_dec_shape.resize(S);
        tape->concat_enc_shape.resize(S);
        tape->dec_ctx.resize(S);
        tape->dropout_seed = dropout_seed;
    }

    Tensor<T> x = volume;
    std::vector<Tensor<T>> skips(S);
    for (std::size_t s = 0; s < S; ++s) {
        for (std::size_t j = 0; j < enc_blocks_[s].size(); ++j) {
            ConvBlockCtx* ctx = nullptr;
            if (train) {
                tape->enc_ctx[s].emplace_back();
                ctx = &tape->enc_ctx[s].back();
            }
            x = run_conv_block(enc_blocks_[s][j], x, mode, ctx);
        }
        skips[s] = center_slice_extract(x);
        if (train) {
            tape->prepool_shape[s] = x.shape();
            tape->skip_center_shape[s] = skips[s].shape();
        }
        PoolResult<T> pooled = maxpool_spatial_forward(x);
        if (train) tape->pool_argmax[s] = std::move(pooled.argmax);
        x = std::move(pooled.output);
    }

    if (train) tape->collapse_depth = x.extent(3);
    Tensor<T> plane = depth_collapse(x);
    plane = dropout(plane, config_.dropout_p, mode, dropout_seed);

    for (std::size_t j = 0; j < bottleneck_blocks_.size(); ++j) {
        ConvBlockCtx* ctx = nullptr;
        if (train) {
            tape->bottleneck_ctx.emplace_back();
            ctx = &tape->bottleneck_ctx.back();
        }
        plane = run_conv_block(bottleneck_blocks_[j], plane, mode, ctx);
    }

    for (std::size_t si = S; si-- > 0;) {
        if (train) tape->deconv_in[si] = plane;
        plane = deconv2d_forward(plane, params_.at(deconv_w_[si]));
        if (train) {
            tape->concat_dec_shape[si] = plane.shape();
            tape->concat_enc_shape[si] = skips[si].shape();
        }
        plane = crop_concat(plane, skips[si]);
        for (std::size_t j = 0; j < dec_blocks_[si].size(); ++j) {
            ConvBlockCtx* ctx = nullptr;
            if (train) {
                tape->dec_ctx[si].emplace_back();
                ctx = &tape->dec_ctx[si].back();
            }
            plane = run_conv_block(dec_blocks_[si][j], plane, mode, ctx);
        }
    }

    if (train) tape->head_in = plane;
    Tensor<T> logits = conv_forward(plane, head_spec_, params_.at(head_w_), params_.at(head_b_));
    if (train) tape_ = std::move(tape);
    return softmax2(logits);
}

template <typename T>
void Net3D2D<T>::backward(const Tensor<T>& grad_logits) {
    if (!tape_) throw InternalError("backward called without a train-mode forward");
    const Tape& tape = *tape_;
    const std::size_t S = config_.stages;

    ConvGrads<T> hg = conv_backward(grad_logits, tape.head_in, head_spec_, params_.at(head_w_));
    {
        auto& w = params_.at(head_w_);
        auto& b = params_.at(head_b_);
        for (std::size_t i = 0; i < w.numel(); ++i) w.grad()[i] += hg.weights[i];
        for (std::size_t i = 0; i < b.numel(); ++i) b.grad()[i] += hg.bias[i];
    }
    Tensor<T> grad = std::move(hg.input);

    std::vector<Tensor<T>> skip_grads(S);
    for (std::size_t si = 0; si < S; ++si) {
        for (std::size_t j = dec_blocks_[si].size(); j-- > 0;)
            grad = conv_block_backward(dec_blocks_[si][j], grad, tape.dec_ctx[si][j]);
        CropConcatGrads<T> cg =
            crop_concat_backward(grad, tape.concat_dec_shape[si], tape.concat_enc_shape[si]);
        skip_grads[si] = std::move(cg.encoder);
        Deconv2dGrads<T> dg =
            deconv2d_backward(cg.decoder, tape.deconv_in[si], params_.at(deconv_w_[si]));
        auto& w = params_.at(deconv_w_[si]);
        for (std::size_t i = 0; i < w.numel(); ++i) w.grad()[i] += dg.weights[i];
        grad = std::move(dg.input);
    }

    for (std::size_t j = bottleneck_blocks_.size(); j-- > 0;)
        grad = conv_block_backward(bottleneck_blocks_[j], grad, tape.bottleneck_ctx[j]);

    grad = dropout_backward(grad, config_.dropout_p, Mode::train, tape.dropout_seed);
    grad = depth_collapse_backward(grad, tape.collapse_depth);

    for (std::size_t s = S; s-- > 0;) {
        Tensor<T> pre = maxpool_spatial_backward(grad, tape.pool_argmax[s], tape.prepool_shape[s]);
        Tensor<T> skip = center_slice_backward(skip_grads[s], tape.prepool_shape[s]);
        for (std::size_t i = 0; i < pre.numel(); ++i) pre[i] += skip[i];
        grad = std::move(pre);
        for (std::size_t j = enc_blocks_[s].size(); j-- > 0;)
            grad = conv_block_backward(enc_blocks_[s][j], grad, tape.enc_ctx[s][j]);
    }
}

template <typename T>
void Net3D2D<T>::commit_batchnorm_updates() {
    if (!tape_) return;
    auto commit = [&](const std::string& prefix, const BatchNormContext<T>& ctx) {
        auto& rm = params_.at(prefix + ".running_mean");
        auto& rv = params_.at(prefix + ".running_var");
        for (std::size_t i = 0; i < rm.numel(); ++i) {
            rm[i] = ctx.new_running_mean[i];
            rv[i] = ctx.new_running_var[i];
        }
    };
    for (std::size_t s = 0; s < enc_blocks_.size(); ++s)
        for (std::size_t j = 0; j < enc_blocks_[s].size(); ++j)
            commit(enc_blocks_[s][j].bn_prefix, tape_->enc_ctx[s][j].bn_ctx);
    for (std::size_t j = 0; j < bottleneck_blocks_.size(); ++j)
        commit(bottleneck_blocks_[j].bn_prefix, tape_->bottleneck_ctx[j].bn_ctx);
    for (std::size_t s = 0; s < dec_blocks_.size(); ++s)
        for (std::size_t j = 0; j < dec_blocks_[s].size(); ++j)
            commit(dec_blocks_[s][j].bn_prefix, tape_->dec_ctx[s][j].bn_ctx);
}

// ---------------------------------------------------------------------------
// Checkpoint I/O: little-endian, fixed field order.

namespace {

std::string dims_str(const std::vector<std::size_t>& dims) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < dims.size(); ++i) os << dims[i] << (i + 1 < dims.size() ? "x" : "");
    os << ']';
    return os.str();
}

void put_u8(std::ostream& os, std::uint8_t v) { os.put(static_cast<char>(v)); }

void put_u32(std::ostream& os, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) os.put(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_u64(std::ostream& os, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) os.put(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_f64(std::ostream& os, double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, 8);
    put_u64(os, bits);
}

std::uint8_t get_u8(std::istream& is, const char* what) {
    const int c = is.get();
    if (c == EOF) throw IoError(std::string("truncated checkpoint while reading ") + what);
    return static_cast<std::uint8_t>(c);
}

std::uint32_t get_u32(std::istream& is, const char* what) {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t(get_u8(is, what)) << (8 * i);
    return v;
}

std::uint64_t get_u64(std::istream& is, const char* what) {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t(get_u8(is, what)) << (8 * i);
    return v;
}

double get_f64(std::istream& is, const char* what) {
    const std::uint64_t bits = get_u64(is, what);
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
}

template <typename T>
void put_values(std::ostream& os, const std::vector<T>& v) {
    for (const T x : v) {
        if constexpr (std::is_same_v<T, double>) {
            put_f64(os, x);
        } else {
            std::uint32_t bits;
            float f = x;
            std::memcpy(&bits, &f, 4);
            put_u32(os, bits);
        }
    }
}

template <typename T>
void get_values(std::istream& is, std::vector<T>& v, const char* what) {
    for (auto& x : v) {
        if constexpr (std::is_same_v<T, double>) {
            x = get_f64(is, what);
        } else {
            const std::uint32_t bits = get_u32(is, what);
            float f;
            std::memcpy(&f, &bits, 4);
            x = f;
        }
    }
}

NetworkConfig read_config(std::istream& is) {
    NetworkConfig c;
    c.input_height = get_u64(is, "config");
    c.input_width = get_u64(is, "config");
    c.input_depth = get_u64(is, "config");
    c.stages = get_u64(is, "config");
    c.convs_per_stage = get_u64(is, "config");
    const std::uint32_t n = get_u32(is, "config");
    c.channels.assign(n, 0);
    for (auto& ch : c.channels) ch = get_u64(is, "config");
    c.dropout_p = get_f64(is, "config");
    c.num_classes = get_u64(is, "config");
    return c;
}

void write_config(std::ostream& os, const NetworkConfig& c) {
    put_u64(os, c.input_height);
    put_u64(os, c.input_width);
    put_u64(os, c.input_depth);
    put_u64(os, c.stages);
    put_u64(os, c.convs_per_stage);
    put_u32(os, static_cast<std::uint32_t>(c.channels.size()));
    for (auto ch : c.channels) put_u64(os, ch);
    put_f64(os, c.dropout_p);
    put_u64(os, c.num_classes);
}

}  // namespace

template <typename T>
void Net3D2D<T>::save_checkpoint(const std::string& path) const {
    if (params_.size() == 0) throw InternalError("save_checkpoint on an empty registry");
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open checkpoint for writing: " + path);
    os.write(kCheckpointMagic, 5);
    put_u32(os, kCheckpointVersion);
    put_u8(os, static_cast<std::uint8_t>(dtype_of<T>()));
    put_u64(os, seed_);
    write_config(os, config_);
    put_u32(os, static_cast<std::uint32_t>(params_.size()));
    for (const auto& e : params_.entries()) {
        put_u32(os, static_cast<std::uint32_t>(e.path.size()));
        os.write(e.path.data(), static_cast<std::streamsize>(e.path.size()));
        put_u8(os, static_cast<std::uint8_t>(dtype_of<T>()));
        put_u8(os, e.trainable ? 1 : 0);
        put_u32(os, static_cast<std::uint32_t>(e.value.rank()));
        for (auto d : e.value.shape()) put_u64(os, d);
        put_values(os, e.value.data());
    }
    if (!os) throw IoError("write failed for checkpoint: " + path);
}

DType checkpoint_dtype(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open checkpoint: " + path);
    char magic[5];
    is.read(magic, 5);
    if (!is || std::memcmp(magic, kCheckpointMagic, 5) != 0)
        throw IoError("not a network checkpoint (bad magic): " + path);
    get_u32(is, "version");
    return static_cast<DType>(get_u8(is, "dtype"));
}

template <typename T>
Net3D2D<T> Net3D2D<T>::load_checkpoint(const std::string& path,
                                       const NetworkConfig* expected_config) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open checkpoint: " + path);
    char magic[5];
    is.read(magic, 5);
    if (is.gcount() != 5 || std::memcmp(magic, kCheckpointMagic, 5) != 0)
        throw IoError("not a network checkpoint (bad magic): " + path);
    const std::uint32_t version = get_u32(is, "version");
    if (version != kCheckpointVersion)
        throw IoError("unsupported checkpoint version " + std::to_string(version) +
                      " (expected " + std::to_string(kCheckpointVersion) + ")");
    const DType dtype = static_cast<DType>(get_u8(is, "dtype"));
    if (dtype != dtype_of<T>())
        throw IoError(std::string("checkpoint element type is ") + dtype_name(dtype) +
                      ", requested " + dtype_name(dtype_of<T>()));
    const std::uint64_t seed = get_u64(is, "seed");
    const NetworkConfig file_config = read_config(is);
    file_config.validate();

    Net3D2D<T> net(expected_config ? *expected_config : file_config, seed, false);

    const std::uint32_t count = get_u32(is, "entry count");
    if (count != net.params_.size())
        throw IoError("checkpoint layer count " + std::to_string(count) +
                      " does not match the expected architecture (" +
                      std::to_string(net.params_.size()) + " layers); first expected path: " +
                      net.params_.entries().front().path);
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::uint32_t len = get_u32(is, "path length");
        std::string p(len, '\0');
        is.read(p.data(), len);
        if (is.gcount() != static_cast<std::streamsize>(len))
            throw IoError("truncated checkpoint while reading a layer path");
        auto& expect = net.params_.entries()[i];
        if (p != expect.path)
            throw IoError("checkpoint layer path mismatch at entry " + std::to_string(i) +
                          ": file has '" + p + "', architecture expects '" + expect.path + "'");
        const DType etype = static_cast<DType>(get_u8(is, p.c_str()));
        if (etype != dtype_of<T>())
            throw IoError("layer " + p + ": element type mismatch");
        get_u8(is, p.c_str());  // trainable flag (derived from the architecture)
        const std::uint32_t rank = get_u32(is, p.c_str());
        std::vector<std::size_t> dims(rank);
        for (auto& d : dims) d = get_u64(is, p.c_str());
        if (dims != expect.value.shape())
            throw IoError("layer " + p + ": shape mismatch, file has " + dims_str(dims) +
                          ", architecture expects " + expect.value.shape_str());
        get_values(is, expect.value.data(), p.c_str());
    }
    if (is.peek() != EOF) throw IoError("trailing bytes after last checkpoint entry: " + path);
    return net;
}

#define VOXELSEG_INSTANTIATE_NET(T)                                                       \
    template class ParamRegistry<T>;                                                      \
    template Tensor<T> center_slice_extract<T>(const Tensor<T>&);                         \
    template Tensor<T> center_slice_backward<T>(const Tensor<T>&,                         \
                                                const std::vector<std::size_t>&);         \
    template Tensor<T> crop_concat<T>(const Tensor<T>&, const Tensor<T>&);                \
    template CropConcatGrads<T> crop_concat_backward<T>(const Tensor<T>&,                 \
                                                        const std::vector<std::size_t>&,  \
                                                        const std::vector<std::size_t>&); \
    template Tensor<T> depth_collapse<T>(const Tensor<T>&);                               \
    template Tensor<T> depth_collapse_backward<T>(const Tensor<T>&, std::size_t);         \
    template class Net3D2D<T>;

VOXELSEG_INSTANTIATE_NET(float)
VOXELSEG_INSTANTIATE_NET(double)

#undef VOXELSEG_INSTANTIATE_NET

}  // namespace voxelseg
