#include "voxelseg/loss.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace voxelseg {

void LossParams::validate() const {
    if (w0 < 0.0) throw ConfigError("loss: w0 must be >= 0");
    if (sigma <= 0.0) throw ConfigError("loss: sigma must be > 0");
}

namespace {

void check_mask(const Tensor<std::uint8_t>& mask) {
    if (mask.rank() != 2) throw ConfigError("mask must be a [H,W] tensor");
    for (auto v : mask.data())
        if (v > 1) throw ConfigError("mask must be strictly 0/1");
}

}  // namespace

std::vector<PixelCoord> boundary_pixels(const Tensor<std::uint8_t>& mask,
                                        bool border_is_background) {
    check_mask(mask);
    const int H = static_cast<int>(mask.extent(0));
    const int W = static_cast<int>(mask.extent(1));
    const auto at = [&](int y, int x) { return mask[std::size_t(y) * W + x]; };

    std::vector<PixelCoord> out;
    static constexpr int dy[4] = {-1, 1, 0, 0};
    static constexpr int dx[4] = {0, 0, -1, 1};
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            const std::uint8_t v = at(y, x);
            bool is_boundary = false;
            for (int k = 0; k < 4 && !is_boundary; ++k) {
                const int ny = y + dy[k], nx = x + dx[k];
                if (ny < 0 || ny >= H || nx < 0 || nx >= W) {
                    // outside pixels are background only under the band rule
                    if (border_is_background && v == 1) is_boundary = true;
                    continue;
                }
                if (at(ny, nx) != v) is_boundary = true;
            }
            if (is_boundary) out.push_back({y, x});
        }
    return out;
}

namespace {

// Felzenszwalb-Huttenlocher 1-D squared distance transform of a sampled
// function: d(x) = min_i (f[i] + (x - i)^2), exact in integer arithmetic.
void dt_1d(const std::vector<double>& f, std::vector<double>& d, std::vector<int>& v,
           std::vector<double>& z) {
    const int n = static_cast<int>(f.size());
    int k = 0;
    v[0] = 0;
    z[0] = -std::numeric_limits<double>::infinity();
    z[1] = std::numeric_limits<double>::infinity();
    for (int q = 1; q < n; ++q) {
        if (f[q] == std::numeric_limits<double>::infinity()) continue;
        double s;
        while (true) {
            if (f[v[k]] == std::numeric_limits<double>::infinity()) {
                // earlier parabola is absent; replace it outright
                --k;
                if (k < 0) break;
                continue;
            }
            s = ((f[q] + q * q) - (f[v[k]] + v[k] * v[k])) / (2.0 * q - 2.0 * v[k]);
            if (s > z[k]) break;
            --k;
            if (k < 0) break;
        }
        ++k;
        v[k] = q;
        z[k] = k == 0 ? -std::numeric_limits<double>::infinity() : s;
        z[k + 1] = std::numeric_limits<double>::infinity();
    }
    k = 0;
    for (int q = 0; q < n; ++q) {
        while (z[k + 1] < q) ++k;
        const double dx = q - v[k];
        d[q] = f[v[k]] + dx * dx;
    }
}

}  // namespace

Tensor<double> squared_distance_transform(const std::vector<PixelCoord>& boundary,
                                          std::size_t height, std::size_t width) {
    if (boundary.empty())
        throw ConfigError("distance_transform: boundary set is empty");
    const std::size_t H = height, W = width;
    constexpr double inf = std::numeric_limits<double>::infinity();

    // Pass 1: per row, squared distance to the nearest boundary in that row.
    Tensor<double> rowdist({H, W});
    std::fill(rowdist.data().begin(), rowdist.data().end(), inf);
    {
        Tensor<std::uint8_t> seed({H, W});
        for (const auto& p : boundary) {
            if (p.y < 0 || p.x < 0 || std::size_t(p.y) >= H || std::size_t(p.x) >= W)
                throw ConfigError("distance_transform: boundary pixel outside the image");
            seed[std::size_t(p.y) * W + p.x] = 1;
        }
        std::vector<double> f(W), d(W), z(W + 1);
        std::vector<int> v(W);
        for (std::size_t y = 0; y < H; ++y) {
            bool any = false;
            for (std::size_t x = 0; x < W; ++x) {
                f[x] = seed[y * W + x] ? 0.0 : inf;
                any |= seed[y * W + x] != 0;
            }
            if (!any) continue;  // row stays +inf; the column pass fills it
            dt_1d(f, d, v, z);
            for (std::size_t x = 0; x < W; ++x) rowdist[y * W + x] = d[x];
        }
    }

    // Pass 2: per column, lower envelope over rowdist + (dy)^2.
    Tensor<double> out({H, W});
    std::vector<double> f(H), d(H), z(H + 1);
    std::vector<int> v(H);
    for (std::size_t x = 0; x < W; ++x) {
        for (std::size_t y = 0; y < H; ++y) f[y] = rowdist[y * W + x];
        dt_1d(f, d, v, z);
        for (std::size_t y = 0; y < H; ++y) out[y * W + x] = d[y];
    }
    return out;
}

Tensor<double> distance_transform(const std::vector<PixelCoord>& boundary,
                                  std::size_t height, std::size_t width) {
    Tensor<double> sq = squared_distance_transform(boundary, height, width);
    for (auto& v : sq.data()) v = std::sqrt(v);
    return sq;
}

WeightMap weight_map(const Tensor<std::uint8_t>& mask, const LossParams& params) {
    params.validate();
    check_mask(mask);
    const std::size_t H = mask.extent(0), W = mask.extent(1);
    WeightMap wm;
    wm.height = H;
    wm.width = W;

    const std::vector<PixelCoord> boundary = boundary_pixels(mask, false);
    if (boundary.empty()) {
        wm.weights.assign(H * W, 1.0);
        wm.degenerate = true;
        return wm;
    }
    const double denom = 2.0 * params.sigma * params.sigma;
    Tensor<double> dist = params.squared_distance
                              ? squared_distance_transform(boundary, H, W)
                              : distance_transform(boundary, H, W);
    wm.weights.resize(H * W);
    for (std::size_t i = 0; i < H * W; ++i)
        wm.weights[i] = 1.0 + params.w0 * std::exp(-dist[i] / denom);
    return wm;
}

template <typename T>
WceResult<T> weighted_cross_entropy(const Tensor<T>& probs, const Tensor<std::uint8_t>& target,
                                    const WeightMap& wmap) {
    if (probs.rank() != 3 || probs.extent(0) != 2)
        throw ConfigError("weighted_cross_entropy expects probs [2,H,W]");
    check_mask(target);
    const std::size_t H = probs.extent(1), W = probs.extent(2);
    if (target.extent(0) != H || target.extent(1) != W)
        throw ConfigError("weighted_cross_entropy: target shape does not match probs");
    if (wmap.height != H || wmap.width != W)
        throw ConfigError("weighted_cross_entropy: weight map shape does not match probs");

    const std::size_t N = H * W;
    WceResult<T> res;
    res.grad_logits = Tensor<T>(probs.shape());
    const T clamp = T(1e-12);
    T sum = T(0);
    for (std::size_t i = 0; i < N; ++i) {
        const std::uint8_t c = target[i];
        const T w = T(wmap.weights[i]);
        const T pc = std::max(probs[c * N + i], clamp);
        sum -= w * std::log(pc);
        res.grad_logits[i] = w * (probs[i] - T(c == 0 ? 1 : 0));
        res.grad_logits[N + i] = w * (probs[N + i] - T(c == 1 ? 1 : 0));
    }
    res.loss_sum = sum;
    res.loss_mean = sum / T(N);
    return res;
}

template WceResult<float> weighted_cross_entropy<float>(const Tensor<float>&,
                                                        const Tensor<std::uint8_t>&,
                                                        const WeightMap&);
template WceResult<double> weighted_cross_entropy<double>(const Tensor<double>&,
                                                          const Tensor<std::uint8_t>&,
                                                          const WeightMap&);

}  // namespace voxelseg
