#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "voxelseg/layers.hpp"
#include "voxelseg/tensor.hpp"

namespace voxelseg {

/// Architecture hyperparameters. channels has stages+1 entries: one width per
/// encoder stage plus the bottleneck block width.
struct NetworkConfig {
    std::size_t input_height = 512;
    std::size_t input_width = 512;
    std::size_t input_depth = 38;
    std::size_t stages = 5;
    std::vector<std::size_t> channels = {16, 32, 64, 128, 256, 256};
    std::size_t convs_per_stage = 2;
    double dropout_p = 0.5;
    std::size_t num_classes = 2;

    void validate() const;  // throws ConfigError naming the failed constraint
    bool operator==(const NetworkConfig&) const = default;
};

/// Pure shape arithmetic for a config: per-stage extents and the input slice
/// index each stage's center slice corresponds to. Never allocates feature
/// maps, so it is usable at full 512-scale.
struct ShapeTrace {
    struct Stage {
        std::size_t height, width;
        std::size_t depth_pre_pool;      // after this stage's 3D convs
        std::size_t center_index;        // floor((depth_pre_pool - 1) / 2)
        std::size_t center_input_slice;  // input slice that center index reads
    };
    std::vector<Stage> encoder;
    std::size_t bottleneck_height = 0, bottleneck_width = 0;
    std::size_t bottleneck_depth_pre_collapse = 0;
    std::size_t bottleneck_depth_post_collapse = 1;
    std::size_t input_center_slice = 0;  // floor((D - 1) / 2)
};

ShapeTrace trace_shapes(const NetworkConfig& config);

/// Named, ordered tensor registry. Trainable entries take part in optimizer
/// steps; non-trainable entries (batchnorm running stats) are still
/// checkpointed.
template <typename T>
class ParamRegistry {
  public:
    struct Entry {
        std::string path;
        Tensor<T> value;
        bool trainable = true;
    };

    Tensor<T>& add(std::string path, Tensor<T> value, bool trainable);
    Tensor<T>& at(const std::string& path);
    const Tensor<T>& at(const std::string& path) const;
    bool contains(const std::string& path) const;

    std::vector<Entry>& entries() { return entries_; }
    const std::vector<Entry>& entries() const { return entries_; }
    std::size_t size() const { return entries_.size(); }

    void zero_grads();

  private:
    std::vector<Entry> entries_;
};

// Slice at depth index floor((d-1)/2) of a [C,h,w,d] map.
std::size_t center_index(std::size_t depth);

template <typename T>
Tensor<T> center_slice_extract(const Tensor<T>& feature);

template <typename T>
Tensor<T> center_slice_backward(const Tensor<T>& grad_out,
                                const std::vector<std::size_t>& input_shape);

// Center-crops encoder_center to the decoder map's extent and concatenates
// along channels. Throws InternalError if the encoder map is smaller.
template <typename T>
Tensor<T> crop_concat(const Tensor<T>& decoder_map, const Tensor<T>& encoder_center);

template <typename T>
struct CropConcatGrads {
    Tensor<T> decoder;
    Tensor<T> encoder;
};

template <typename T>
CropConcatGrads<T> crop_concat_backward(const Tensor<T>& grad_out,
                                        const std::vector<std::size_t>& decoder_shape,
                                        const std::vector<std::size_t>& encoder_shape);

// Mean over the depth axis of [C,h,w,d]; d = 1 reduces to a reshape.
template <typename T>
Tensor<T> depth_collapse(const Tensor<T>& feature);

template <typename T>
Tensor<T> depth_collapse_backward(const Tensor<T>& grad_out, std::size_t depth);

/// The 3D-encoding / 2D-decoding segmentation network. The encoder applies
/// stages of [3x3x3 conv (spatial pad 1, depth pad 0), BN, ReLU] blocks with
/// 2x2 spatial max-pooling; the depth axis shrinks by 2 per conv and the
/// remainder is mean-collapsed at the bottleneck. Skip connections take the
/// center slice of each stage's pre-pool feature map. The decoder upsamples
/// with 4x4 stride-2 transposed convs, crop&concats the skips, and a final
/// 1x1 conv + softmax yields the center-slice probability map.
template <typename T>
class Net3D2D {
  public:
    Net3D2D(NetworkConfig config, std::uint64_t seed);
    Net3D2D(Net3D2D&&) noexcept;
    Net3D2D& operator=(Net3D2D&&) noexcept;
    ~Net3D2D();

    /// volume [1,H,W,D] -> probability map [2,H,W] for the center slice.
    /// Train mode retains activations for backward; dropout_seed fixes the
    /// dropout mask so a forward is a pure function of its arguments.
    Tensor<T> forward(const Tensor<T>& volume, Mode mode, std::uint64_t dropout_seed = 0);

    /// Accumulates parameter gradients from d(loss)/d(logits) of the last
    /// train-mode forward; returns nothing (gradients live in the registry).
    void backward(const Tensor<T>& grad_logits);

    /// Applies the batchnorm running-average updates staged by the last
    /// train-mode forward. Call once per optimizer step.
    void commit_batchnorm_updates();

    const NetworkConfig& config() const { return config_; }
    std::uint64_t seed() const { return seed_; }
    ParamRegistry<T>& params() { return params_; }
    const ParamRegistry<T>& params() const { return params_; }

    void save_checkpoint(const std::string& path) const;
    static Net3D2D load_checkpoint(const std::string& path,
                                   const NetworkConfig* expected_config = nullptr);

  private:
    Net3D2D(NetworkConfig config, std::uint64_t seed, bool initialize);

    struct ConvBlockRef {
        ConvSpec spec;
        std::string w, b;  // registry paths
        std::string bn_prefix;
    };
    struct ConvBlockCtx {
        Tensor<T> conv_in;
        BatchNormContext<T> bn_ctx;
        Tensor<T> relu_in;
    };
    struct Tape;

    void build_layers(bool initialize);
    BatchNormState<T> bn_state(const std::string& prefix) const;
    Tensor<T> run_conv_block(const ConvBlockRef& blk, const Tensor<T>& x, Mode mode,
                             ConvBlockCtx* ctx);
    Tensor<T> conv_block_backward(const ConvBlockRef& blk, const Tensor<T>& grad,
                                  const ConvBlockCtx& ctx);

    NetworkConfig config_;
    std::uint64_t seed_ = 0;
    ParamRegistry<T> params_;

    std::vector<std::vector<ConvBlockRef>> enc_blocks_;   // [stage][conv]
    std::vector<ConvBlockRef> bottleneck_blocks_;
    std::vector<std::string> deconv_w_;                   // per decoder stage
    std::vector<std::vector<ConvBlockRef>> dec_blocks_;   // [stage][conv]
    std::string head_w_, head_b_;
    ConvSpec head_spec_;

    std::unique_ptr<Tape> tape_;
};

// Reads the element type tag of a checkpoint without loading it.
DType checkpoint_dtype(const std::string& path);

inline constexpr char kCheckpointMagic[] = "V3D2D";
inline constexpr std::uint32_t kCheckpointVersion = 1;

}  // namespace voxelseg
