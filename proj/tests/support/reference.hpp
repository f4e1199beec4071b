#pragma once

// Independent reference implementations for oracle tests. Everything here is
// written straight from the defining formulas as plain nested loops and never
// calls into the library's optimized paths.

#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include "voxelseg/crf.hpp"
#include "voxelseg/tensor.hpp"

namespace refimpl {

using voxelseg::Tensor;

inline Tensor<double> conv2d(const Tensor<double>& in, const Tensor<double>& w,
                             const Tensor<double>& bias, long sy, long sx, long py, long px) {
    const long Ci = long(in.extent(0)), H = long(in.extent(1)), W = long(in.extent(2));
    const long Co = long(w.extent(0)), kH = long(w.extent(2)), kW = long(w.extent(3));
    const long OH = (H + 2 * py - kH) / sy + 1;
    const long OW = (W + 2 * px - kW) / sx + 1;
    Tensor<double> out({std::size_t(Co), std::size_t(OH), std::size_t(OW)});
    for (long co = 0; co < Co; ++co)
        for (long oy = 0; oy < OH; ++oy)
            for (long ox = 0; ox < OW; ++ox) {
                double acc = bias[std::size_t(co)];
                for (long ci = 0; ci < Ci; ++ci)
                    for (long ky = 0; ky < kH; ++ky)
                        for (long kx = 0; kx < kW; ++kx) {
                            const long iy = oy * sy + ky - py;
                            const long ix = ox * sx + kx - px;
                            if (iy < 0 || iy >= H || ix < 0 || ix >= W) continue;
                            acc += in[std::size_t((ci * H + iy) * W + ix)] *
                                   w[std::size_t(((co * Ci + ci) * kH + ky) * kW + kx)];
                        }
                out[std::size_t((co * OH + oy) * OW + ox)] = acc;
            }
    return out;
}

inline Tensor<double> conv3d(const Tensor<double>& in, const Tensor<double>& w,
                             const Tensor<double>& bias, long sy, long sx, long sz, long py,
                             long px, long pz) {
    const long Ci = long(in.extent(0)), H = long(in.extent(1)), W = long(in.extent(2)),
               D = long(in.extent(3));
    const long Co = long(w.extent(0)), kH = long(w.extent(2)), kW = long(w.extent(3)),
               kD = long(w.extent(4));
    const long OH = (H + 2 * py - kH) / sy + 1;
    const long OW = (W + 2 * px - kW) / sx + 1;
    const long OD = (D + 2 * pz - kD) / sz + 1;
    Tensor<double> out({std::size_t(Co), std::size_t(OH), std::size_t(OW), std::size_t(OD)});
    for (long co = 0; co < Co; ++co)
        for (long oy = 0; oy < OH; ++oy)
            for (long ox = 0; ox < OW; ++ox)
                for (long oz = 0; oz < OD; ++oz) {
                    double acc = bias[std::size_t(co)];
                    for (long ci = 0; ci < Ci; ++ci)
                        for (long ky = 0; ky < kH; ++ky)
                            for (long kx = 0; kx < kW; ++kx)
                                for (long kz = 0; kz < kD; ++kz) {
                                    const long iy = oy * sy + ky - py;
                                    const long ix = ox * sx + kx - px;
                                    const long iz = oz * sz + kz - pz;
                                    if (iy < 0 || iy >= H || ix < 0 || ix >= W || iz < 0 ||
                                        iz >= D)
                                        continue;
                                    acc += in[std::size_t(((ci * H + iy) * W + ix) * D + iz)] *
                                           w[std::size_t(
                                               (((co * Ci + ci) * kH + ky) * kW + kx) * kD +
                                               kz)];
                                }
                    out[std::size_t(((co * OH + oy) * OW + ox) * OD + oz)] = acc;
                }
    return out;
}

inline Tensor<double> maxpool(const Tensor<double>& in) {
    const std::size_t C = in.extent(0), H = in.extent(1), W = in.extent(2), D = in.extent(3);
    Tensor<double> out({C, H / 2, W / 2, D});
    for (std::size_t c = 0; c < C; ++c)
        for (std::size_t oy = 0; oy < H / 2; ++oy)
            for (std::size_t ox = 0; ox < W / 2; ++ox)
                for (std::size_t z = 0; z < D; ++z) {
                    double best = -std::numeric_limits<double>::infinity();
                    for (std::size_t dy = 0; dy < 2; ++dy)
                        for (std::size_t dx = 0; dx < 2; ++dx)
                            best = std::max(
                                best, in[((c * H + 2 * oy + dy) * W + 2 * ox + dx) * D + z]);
                    out[((c * (H / 2) + oy) * (W / 2) + ox) * D + z] = best;
                }
    return out;
}

inline double dot(const Tensor<double>& a, const Tensor<double>& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) s += a[i] * b[i];
    return s;
}

// O(N * |B|) nearest-boundary scan, exact squared distances.
inline Tensor<double> nearest_boundary_sq(const std::vector<voxelseg::PixelCoord>& boundary,
                                          std::size_t H, std::size_t W) {
    Tensor<double> out({H, W});
    for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x) {
            double best = std::numeric_limits<double>::infinity();
            for (const auto& b : boundary) {
                const double dy = double(y) - b.y, dx = double(x) - b.x;
                best = std::min(best, dy * dy + dx * dx);
            }
            out[y * W + x] = best;
        }
    return out;
}

// Direct double-loop boundary scan (4-neighborhood, two-sided).
inline std::vector<voxelseg::PixelCoord> boundary_scan(const Tensor<std::uint8_t>& mask,
                                                       bool border_is_background) {
    const int H = int(mask.extent(0)), W = int(mask.extent(1));
    std::vector<voxelseg::PixelCoord> out;
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            const int v = mask[std::size_t(y) * W + x];
            bool hit = false;
            const int offs[4][2] = {{-1, 0}, {1, 0}, {0, -1}, {0, 1}};
            for (const auto& o : offs) {
                const int ny = y + o[0], nx = x + o[1];
                if (ny < 0 || ny >= H || nx < 0 || nx >= W) {
                    if (border_is_background && v == 1) hit = true;
                } else if (int(mask[std::size_t(ny) * W + nx]) != v) {
                    hit = true;
                }
            }
            if (hit) out.push_back({y, x});
        }
    return out;
}

// Brute-force Chebyshev dilation of a pixel set.
inline std::vector<voxelseg::PixelCoord> dilate_chebyshev(
    const std::vector<voxelseg::PixelCoord>& set, int H, int W, int radius) {
    std::vector<voxelseg::PixelCoord> out;
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            bool close = false;
            for (const auto& p : set)
                if (std::abs(p.y - y) <= radius && std::abs(p.x - x) <= radius) {
                    close = true;
                    break;
                }
            if (close) out.push_back({y, x});
        }
    return out;
}

// Independent CRF energy: unaries plus each unordered in-band pair within
// the (2r+1)^2 window once plus each (in-band, frozen) pair once, kernels
// recomputed from the formula.
inline double crf_energy(const std::vector<std::uint8_t>& lab,
                         const voxelseg::CrfInstance& inst, const voxelseg::CrfParams& prm) {
    auto kernel = [&](voxelseg::PixelCoord a, voxelseg::PixelCoord b, double Ia, double Ib) {
        const double p2 = double(a.y - b.y) * (a.y - b.y) + double(a.x - b.x) * (a.x - b.x);
        const double di = Ia - Ib;
        return prm.w1 * std::exp(-p2 / (2 * prm.theta_alpha * prm.theta_alpha) -
                                 di * di / (2 * prm.theta_beta * prm.theta_beta)) +
               prm.w2 * std::exp(-p2 / (2 * prm.theta_gamma * prm.theta_gamma));
    };
    auto in_window = [&](voxelseg::PixelCoord a, voxelseg::PixelCoord b) {
        return std::abs(a.y - b.y) <= prm.neighborhood_radius &&
               std::abs(a.x - b.x) <= prm.neighborhood_radius &&
               !(a.y == b.y && a.x == b.x);
    };
    double e = 0.0;
    for (std::size_t i = 0; i < inst.pixels.size(); ++i) e += inst.unary[i][lab[i]];
    for (std::size_t i = 0; i < inst.pixels.size(); ++i)
        for (std::size_t j = i + 1; j < inst.pixels.size(); ++j)
            if (in_window(inst.pixels[i], inst.pixels[j]) && lab[i] != lab[j])
                e += kernel(inst.pixels[i], inst.pixels[j], inst.intensity[i],
                            inst.intensity[j]);
    for (std::size_t i = 0; i < inst.pixels.size(); ++i)
        for (std::size_t f = 0; f < inst.frozen_pos.size(); ++f)
            if (in_window(inst.pixels[i], inst.frozen_pos[f]) &&
                lab[i] != inst.frozen_label[f])
                e += kernel(inst.pixels[i], inst.frozen_pos[f], inst.intensity[i],
                            inst.frozen_intensity[f]);
    return e;
}

}  // namespace refimpl
