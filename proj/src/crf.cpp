#include "voxelseg/crf.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <unordered_map>

namespace voxelseg {

void CrfParams::validate() const {
    if (theta_alpha <= 0 || theta_beta <= 0 || theta_gamma <= 0)
        throw ConfigError("crf: kernel scales theta_* must be > 0");
    if (w1 < 0 || w2 < 0) throw ConfigError("crf: kernel weights must be >= 0");
    if (neighborhood_radius < 1) throw ConfigError("crf: neighborhood_radius must be >= 1");
    if (band_width < 1) throw ConfigError("crf: band_width must be >= 1");
    if (iterations < 1) throw ConfigError("crf: iterations must be >= 1");
}

void CrfInstance::validate() const {
    if (pixels.size() != unary.size() || pixels.size() != intensity.size())
        throw ConfigError("crf instance: per-pixel arrays disagree in length");
    if (frozen_pos.size() != frozen_label.size() ||
        frozen_pos.size() != frozen_intensity.size())
        throw ConfigError("crf instance: frozen arrays disagree in length");
    for (const auto& u : unary)
        if (!std::isfinite(u[0]) || !std::isfinite(u[1]))
            throw ConfigError("crf instance: unary potentials must be finite");
}

namespace {

Tensor<std::uint8_t> threshold_foreground(const Tensor<double>& prob_map, double threshold) {
    if (prob_map.rank() != 3 || prob_map.extent(0) != 2)
        throw ConfigError("probability map must be [2,H,W]");
    const std::size_t H = prob_map.extent(1), W = prob_map.extent(2);
    const std::size_t N = H * W;
    Tensor<std::uint8_t> mask({H, W});
    for (std::size_t i = 0; i < N; ++i) mask[i] = prob_map[N + i] > threshold ? 1 : 0;
    return mask;
}

}  // namespace

std::vector<PixelCoord> boundary_band(const Tensor<double>& prob_map, double threshold,
                                      int band_width) {
    if (band_width < 1) throw ConfigError("crf: band_width must be >= 1");
    const Tensor<std::uint8_t> mask = threshold_foreground(prob_map, threshold);
    const int H = static_cast<int>(mask.extent(0));
    const int W = static_cast<int>(mask.extent(1));

    const std::vector<PixelCoord> boundary = boundary_pixels(mask, /*border_is_background=*/true);
    if (boundary.empty()) return {};

    // Chebyshev dilation: repeated 3x3 grows radius by one per round.
    std::vector<std::uint8_t> in(std::size_t(H) * W, 0);
    for (const auto& p : boundary) in[std::size_t(p.y) * W + p.x] = 1;
    std::vector<std::uint8_t> next(in.size());
    for (int round = 0; round < band_width; ++round) {
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x) {
                std::uint8_t v = 0;
                for (int dy = -1; dy <= 1 && !v; ++dy)
                    for (int dx = -1; dx <= 1 && !v; ++dx) {
                        const int ny = y + dy, nx = x + dx;
                        if (ny < 0 || ny >= H || nx < 0 || nx >= W) continue;
                        v = in[std::size_t(ny) * W + nx];
                    }
                next[std::size_t(y) * W + x] = v;
            }
        std::swap(in, next);
    }
    std::vector<PixelCoord> band;
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x)
            if (in[std::size_t(y) * W + x]) band.push_back({y, x});
    return band;
}

double pairwise_kernel(PixelCoord pi, PixelCoord pj, double intensity_i, double intensity_j,
                       const CrfParams& params) {
    const double dy = pi.y - pj.y;
    const double dx = pi.x - pj.x;
    const double p2 = dy * dy + dx * dx;
    const double di = intensity_i - intensity_j;
    const double bilateral = params.w1 * std::exp(-p2 / (2.0 * params.theta_alpha * params.theta_alpha) -
                                                  di * di / (2.0 * params.theta_beta * params.theta_beta));
    const double smooth = params.w2 * std::exp(-p2 / (2.0 * params.theta_gamma * params.theta_gamma));
    return bilateral + smooth;
}

CrfInstance make_crf_instance(const Tensor<double>& prob_map, const Tensor<double>& image255,
                              const std::vector<PixelCoord>& band, const CrfParams& params,
                              double threshold) {
    params.validate();
    const std::size_t H = prob_map.extent(1), W = prob_map.extent(2);
    if (image255.rank() != 2 || image255.extent(0) != H || image255.extent(1) != W)
        throw ConfigError("crf: image slice shape does not match the probability map");
    const std::size_t N = H * W;
    const Tensor<std::uint8_t> mask = threshold_foreground(prob_map, threshold);

    CrfInstance inst;
    inst.height = static_cast<int>(H);
    inst.width = static_cast<int>(W);
    std::vector<char> in_band(N, 0);
    for (const auto& p : band) in_band[std::size_t(p.y) * W + p.x] = 1;

    // Background probability is taken as 1 - p(fg) so that the zero-pairwise
    // argmax coincides exactly with thresholding p(fg) at 0.5.
    constexpr double clamp = 1e-12;
    for (const auto& p : band) {
        const std::size_t i = std::size_t(p.y) * W + p.x;
        inst.pixels.push_back(p);
        const double p1 = std::clamp(prob_map[N + i], clamp, 1.0 - clamp);
        inst.unary.push_back({-std::log(1.0 - p1), -std::log(p1)});
        inst.intensity.push_back(image255[i]);
    }

    // Out-of-band pixels inside any band pixel's window become frozen
    // neighbors carrying the thresholded label.
    const int r = params.neighborhood_radius;
    std::vector<char> picked(N, 0);
    for (const auto& p : band)
        for (int dy = -r; dy <= r; ++dy)
            for (int dx = -r; dx <= r; ++dx) {
                const int ny = p.y + dy, nx = p.x + dx;
                if (ny < 0 || ny >= inst.height || nx < 0 || nx >= inst.width) continue;
                const std::size_t j = std::size_t(ny) * W + nx;
                if (in_band[j] || picked[j]) continue;
                picked[j] = 1;
                inst.frozen_pos.push_back({ny, nx});
                inst.frozen_label.push_back(mask[j]);
                inst.frozen_intensity.push_back(image255[j]);
            }
    return inst;
}

namespace {

// Window adjacency resolved once per instance: per in-band pixel, the list of
// (other in-band index | frozen index) with precomputed kernel values.
struct PreparedInstance {
    struct Link {
        std::size_t index;
        bool frozen;
        double kernel;
    };
    std::vector<std::vector<Link>> links;
};

PreparedInstance prepare(const CrfInstance& inst, const CrfParams& params) {
    inst.validate();
    params.validate();
    const int W = inst.width;
    std::unordered_map<long, std::size_t> band_at, frozen_at;
    band_at.reserve(inst.pixels.size() * 2);
    for (std::size_t i = 0; i < inst.pixels.size(); ++i)
        band_at[long(inst.pixels[i].y) * W + inst.pixels[i].x] = i;
    for (std::size_t i = 0; i < inst.frozen_pos.size(); ++i)
        frozen_at[long(inst.frozen_pos[i].y) * W + inst.frozen_pos[i].x] = i;

    const int r = params.neighborhood_radius;
    PreparedInstance prep;
    prep.links.resize(inst.pixels.size());
    for (std::size_t i = 0; i < inst.pixels.size(); ++i) {
        const PixelCoord p = inst.pixels[i];
        for (int dy = -r; dy <= r; ++dy)
            for (int dx = -r; dx <= r; ++dx) {
                if (dy == 0 && dx == 0) continue;
                const int ny = p.y + dy, nx = p.x + dx;
                if (ny < 0 || ny >= inst.height || nx < 0 || nx >= inst.width) continue;
                const long key = long(ny) * W + nx;
                if (auto it = band_at.find(key); it != band_at.end()) {
                    const std::size_t j = it->second;
                    prep.links[i].push_back(
                        {j, false,
                         pairwise_kernel(p, inst.pixels[j], inst.intensity[i], inst.intensity[j],
                                         params)});
                } else if (auto fit = frozen_at.find(key); fit != frozen_at.end()) {
                    const std::size_t j = fit->second;
                    prep.links[i].push_back(
                        {j, true,
                         pairwise_kernel(p, inst.frozen_pos[j], inst.intensity[i],
                                         inst.frozen_intensity[j], params)});
                }
                // windows may reach past the band+frozen halo only when the
                // instance was built by hand; such neighbors simply don't exist
            }
    }
    return prep;
}

bool scan_less(PixelCoord a, PixelCoord b) {
    return a.y < b.y || (a.y == b.y && a.x < b.x);
}

double energy_prepared(const std::vector<std::uint8_t>& labeling, const CrfInstance& inst,
                       const PreparedInstance& prep) {
    double e = 0.0;
    for (std::size_t i = 0; i < inst.pixels.size(); ++i) e += inst.unary[i][labeling[i]];
    for (std::size_t i = 0; i < inst.pixels.size(); ++i) {
        for (const auto& link : prep.links[i]) {
            if (link.frozen) {
                if (labeling[i] != inst.frozen_label[link.index]) e += link.kernel;
            } else if (scan_less(inst.pixels[i], inst.pixels[link.index])) {
                // unordered in-band pair counted once
                if (labeling[i] != labeling[link.index]) e += link.kernel;
            }
        }
    }
    return e;
}

}  // namespace

double energy(const std::vector<std::uint8_t>& labeling, const CrfInstance& inst,
              const CrfParams& params) {
    if (labeling.size() != inst.pixels.size())
        throw ConfigError("energy: labeling length does not match instance");
    return energy_prepared(labeling, inst, prepare(inst, params));
}

MeanFieldResult mean_field_infer(const CrfInstance& inst, const CrfParams& params) {
    const PreparedInstance prep = prepare(inst, params);
    const std::size_t n = inst.pixels.size();

    MeanFieldResult res;
    res.marginals.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double m = std::min(inst.unary[i][0], inst.unary[i][1]);
        const double e0 = std::exp(-(inst.unary[i][0] - m));
        const double e1 = std::exp(-(inst.unary[i][1] - m));
        res.marginals[i] = {e0 / (e0 + e1), e1 / (e0 + e1)};
    }

    std::vector<std::array<double, 2>> next(n);
    for (int it = 0; it < params.iterations; ++it) {
        for (std::size_t i = 0; i < n; ++i) {
            double s0 = -inst.unary[i][0];
            double s1 = -inst.unary[i][1];
            for (const auto& link : prep.links[i]) {
                double q0, q1;  // neighbor's belief in label 0 / 1
                if (link.frozen) {
                    q1 = inst.frozen_label[link.index];
                    q0 = 1.0 - q1;
                } else {
                    q0 = res.marginals[link.index][0];
                    q1 = res.marginals[link.index][1];
                }
                s0 -= link.kernel * q1;  // disagreement penalty against label 0
                s1 -= link.kernel * q0;
            }
            const double m = std::max(s0, s1);
            const double e0 = std::exp(s0 - m), e1 = std::exp(s1 - m);
            next[i] = {e0 / (e0 + e1), e1 / (e0 + e1)};
        }
        res.marginals.swap(next);
    }

    res.labels.resize(n);
    for (std::size_t i = 0; i < n; ++i)
        res.labels[i] = res.marginals[i][1] > res.marginals[i][0] ? 1 : 0;
    return res;
}

BruteForceResult brute_force_map(const CrfInstance& inst, const CrfParams& params) {
    const std::size_t n = inst.pixels.size();
    if (n > 20)
        throw ConfigError("brute_force_map: " + std::to_string(n) +
                          " pixels exceeds the 2^20 enumeration cap");
    const PreparedInstance prep = prepare(inst, params);
    BruteForceResult best;
    best.labels.assign(n, 0);
    best.min_energy = std::numeric_limits<double>::infinity();
    std::vector<std::uint8_t> lab(n, 0);
    const std::size_t total = std::size_t(1) << n;
    for (std::size_t code = 0; code < total; ++code) {
        // bit n-1-i drives pixel i, so `code` enumerates labelings in
        // lexicographic order and keeping strict minima breaks ties that way
        for (std::size_t i = 0; i < n; ++i) lab[i] = (code >> (n - 1 - i)) & 1;
        const double e = energy_prepared(lab, inst, prep);
        if (e < best.min_energy) {
            best.min_energy = e;
            best.labels = lab;
        }
    }
    return best;
}

Tensor<std::uint8_t> refine(const Tensor<double>& prob_map, const Tensor<double>& image_slice,
                            const CrfParams& params) {
    params.validate();
    Tensor<std::uint8_t> mask = threshold_foreground(prob_map, 0.5);
    const std::size_t H = mask.extent(0), W = mask.extent(1);
    if (image_slice.rank() != 2 || image_slice.extent(0) != H || image_slice.extent(1) != W)
        throw ConfigError("refine: image slice shape does not match the probability map");

    const std::vector<PixelCoord> band = boundary_band(prob_map, 0.5, params.band_width);
    if (band.empty()) return mask;

    Tensor<double> image255({H, W});
    {
        double lo = image_slice[0], hi = image_slice[0];
        for (auto v : image_slice.data()) {
            lo = std::min(lo, v);
            hi = std::max(hi, v);
        }
        const double scale = hi > lo ? 255.0 / (hi - lo) : 0.0;
        for (std::size_t i = 0; i < H * W; ++i) image255[i] = (image_slice[i] - lo) * scale;
    }

    const CrfInstance inst = make_crf_instance(prob_map, image255, band, params);
    const MeanFieldResult mf = mean_field_infer(inst, params);
    for (std::size_t i = 0; i < inst.pixels.size(); ++i)
        mask[std::size_t(inst.pixels[i].y) * W + inst.pixels[i].x] = mf.labels[i];
    return mask;
}

}  // namespace voxelseg
