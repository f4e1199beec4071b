#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "voxelseg/loss.hpp"
#include "voxelseg/tensor.hpp"

namespace voxelseg {

struct CrfParams {
    double w1 = 2.0;
    double w2 = 0.5;
    double theta_alpha = 0.01;
    double theta_beta = 20.0;
    double theta_gamma = 20.0;
    int neighborhood_radius = 2;  // 2 -> 5x5 window
    int band_width = 5;
    int iterations = 5;
    void validate() const;
};

/// A boundary-band CRF over binary labels (0 background, 1 foreground).
/// Variables are the in-band pixels; out-of-band pixels inside a band pixel's
/// window contribute pairwise messages as frozen point masses and never
/// update. Unaries are -log of clamped network probabilities.
struct CrfInstance {
    int height = 0;
    int width = 0;
    std::vector<PixelCoord> pixels;                 // in-band, any order
    std::vector<std::array<double, 2>> unary;       // per in-band pixel
    std::vector<double> intensity;                  // grayscale in [0,255]
    std::vector<PixelCoord> frozen_pos;             // out-of-band neighbors
    std::vector<std::uint8_t> frozen_label;
    std::vector<double> frozen_intensity;

    void validate() const;
};

/// Thresholds the foreground channel at `threshold` (strictly greater), takes
/// the two-sided boundary of that mask (image border counts as background),
/// and dilates it by band_width in the Chebyshev metric. Scan order.
std::vector<PixelCoord> boundary_band(const Tensor<double>& prob_map, double threshold,
                                      int band_width);

/// k(i,j) = w1 exp(-|pi-pj|^2/(2 ta^2) - |Ii-Ij|^2/(2 tb^2))
///        + w2 exp(-|pi-pj|^2/(2 tg^2)); multiplies [xi != xj] in the energy.
double pairwise_kernel(PixelCoord pi, PixelCoord pj, double intensity_i, double intensity_j,
                       const CrfParams& params);

/// Builds the band instance from a [2,H,W] probability map and a grayscale
/// slice already scaled to [0,255]. Out-of-band window neighbors are frozen
/// at the thresholded labels.
CrfInstance make_crf_instance(const Tensor<double>& prob_map, const Tensor<double>& image255,
                              const std::vector<PixelCoord>& band, const CrfParams& params,
                              double threshold = 0.5);

/// Total energy of a labeling: unaries over in-band pixels plus each
/// unordered in-band pair within the window counted once (coordinate scan
/// order breaks the tie) plus one term per (in-band, frozen) neighbor pair.
double energy(const std::vector<std::uint8_t>& labeling, const CrfInstance& instance,
              const CrfParams& params);

struct MeanFieldResult {
    std::vector<std::array<double, 2>> marginals;
    std::vector<std::uint8_t> labels;  // argmax per pixel, ties to background
};

/// Jacobi mean-field: Q initialized from softmax(-unary); every iteration
/// recomputes all marginals from the previous iteration's values, so the
/// result is independent of pixel order. Runs exactly `iterations` rounds.
MeanFieldResult mean_field_infer(const CrfInstance& instance, const CrfParams& params);

struct BruteForceResult {
    std::vector<std::uint8_t> labels;
    double min_energy = 0.0;
};

/// Exhaustive minimum over all 2^n labelings; ties resolved to the
/// lexicographically smallest labeling. Refuses n > 20.
BruteForceResult brute_force_map(const CrfInstance& instance, const CrfParams& params);

/// Thresholds the probability map, runs mean-field on the boundary band, and
/// splices the inferred labels back; pixels outside the band keep the
/// thresholded network labels. The image slice is min-max rescaled to
/// [0,255] internally.
Tensor<std::uint8_t> refine(const Tensor<double>& prob_map, const Tensor<double>& image_slice,
                            const CrfParams& params);

}  // namespace voxelseg
