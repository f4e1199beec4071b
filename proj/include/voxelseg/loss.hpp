#pragma once

#include <cstdint>
#include <vector>

#include "voxelseg/tensor.hpp"

namespace voxelseg {

struct PixelCoord {
    int y = 0;
    int x = 0;
    friend bool operator==(const PixelCoord&, const PixelCoord&) = default;
    friend auto operator<=>(const PixelCoord&, const PixelCoord&) = default;
};

struct LossParams {
    double w0 = 20.0;
    double sigma = 30.0;
    bool squared_distance = false;  // off: Eq. uses plain Euclidean d(x)
    void validate() const;
};

/// Two-sided boundary of a 0/1 mask: foreground pixels with a 4-connected
/// background neighbor plus background pixels with a 4-connected foreground
/// neighbor. With border_is_background, pixels outside the image count as
/// background (so an all-foreground mask has its rim as boundary); without
/// it, out-of-image neighbors are ignored (all-zero and all-one masks yield
/// an empty set). Result is in row-major scan order.
std::vector<PixelCoord> boundary_pixels(const Tensor<std::uint8_t>& mask,
                                        bool border_is_background = false);

/// Exact Euclidean distance from each pixel to the nearest boundary pixel,
/// via per-row 1-D squared-distance passes followed by a per-column
/// lower-envelope pass. Squared distances are exact integers; the returned
/// map holds their square roots. Throws ConfigError on an empty boundary.
Tensor<double> distance_transform(const std::vector<PixelCoord>& boundary,
                                  std::size_t height, std::size_t width);

// Same pass structure, returning exact squared distances.
Tensor<double> squared_distance_transform(const std::vector<PixelCoord>& boundary,
                                          std::size_t height, std::size_t width);

struct WeightMap {
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<double> weights;
    bool degenerate = false;  // empty boundary -> all-ones fallback
};

/// w(x) = 1 + w0 * exp(-d(x) / (2 sigma^2)). Degenerate masks (no boundary)
/// produce an all-ones map so background-only slices still train.
WeightMap weight_map(const Tensor<std::uint8_t>& mask, const LossParams& params);

template <typename T>
struct WceResult {
    T loss_sum = T(0);
    T loss_mean = T(0);
    Tensor<T> grad_logits;  // fused softmax + cross-entropy adjoint
};

/// E = -sum_x w(x) log p_c(x), probabilities clamped at 1e-12 before the log.
/// The gradient is with respect to the pre-softmax logits:
/// grad = w(x) * (p - onehot(c)).
template <typename T>
WceResult<T> weighted_cross_entropy(const Tensor<T>& probs, const Tensor<std::uint8_t>& target,
                                    const WeightMap& wmap);

}  // namespace voxelseg
