#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "voxelseg/net.hpp"

namespace voxelseg {

/// Central finite difference of a scalar evaluation with respect to *slot,
/// step h: (f(x+h) - f(x-h)) / 2h. The slot is restored afterwards.
double central_diff(const std::function<double()>& eval, double* slot, double step = 1e-6);

/// |a - b| / max(|a|, |b|, floor). The floor makes the comparison absolute
/// below gradient magnitude ~1e-2, where central-difference cancellation
/// noise (~1e-9 for these loss scales) would otherwise dominate a pure
/// relative error; any real adjoint defect still lands orders of magnitude
/// above the 1e-4 gate.
double rel_error(double a, double b, double floor = 1e-2);

struct GradCheckReport {
    std::string op;
    double max_rel_error = 0.0;
    bool pass = false;
};

inline constexpr double kGradCheckTolerance = 1e-4;

/// Finite-difference verification of every differentiable operation, one
/// report per op: conv2d, conv3d, deconv2d, maxpool, batchnorm, relu,
/// crop_concat, depth_collapse, weighted_cross_entropy (fused with softmax).
/// All at 64-bit with step 1e-6.
std::vector<GradCheckReport> run_gradcheck_suite(std::uint64_t seed);

/// End-to-end check on a tiny network (8x8x5, one stage, channels [2,4]):
/// every trainable parameter's accumulated gradient against central finite
/// differences of the boundary-weighted loss, dropout mask held fixed.
GradCheckReport full_pipeline_gradcheck(std::uint64_t seed);

}  // namespace voxelseg
