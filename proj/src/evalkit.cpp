#include "voxelseg/evalkit.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace voxelseg {

double dice(const Tensor<std::uint8_t>& a, const Tensor<std::uint8_t>& b) {
    if (a.shape() != b.shape())
        throw ConfigError("dice: shapes " + a.shape_str() + " and " + b.shape_str() +
                          " differ");
    std::size_t na = 0, nb = 0, inter = 0;
    for (std::size_t i = 0; i < a.numel(); ++i) {
        na += a[i] != 0;
        nb += b[i] != 0;
        inter += (a[i] != 0) && (b[i] != 0);
    }
    if (na + nb == 0) return 1.0;
    return 2.0 * static_cast<double>(inter) / static_cast<double>(na + nb);
}

double timing_normalize(double seconds, std::size_t slices, std::size_t height,
                        std::size_t width) {
    if (slices == 0 || height == 0 || width == 0)
        throw ConfigError("timing_normalize: counts must be positive");
    return seconds * (100.0 / static_cast<double>(slices)) *
           (512.0 * 512.0) / static_cast<double>(height * width);
}

std::string SegmentationReport::machine_line() const {
    std::ostringstream os;
    os << std::setprecision(17);
    os << scan_id << '\t';
    if (dice_pre) os << *dice_pre;
    os << '\t';
    if (dice_post) os << *dice_post;
    os << '\t' << net_seconds << '\t' << crf_seconds << '\t' << normalized_net_seconds;
    return os.str();
}

std::string report_table_header() {
    std::ostringstream os;
    os << std::left << std::setw(16) << "scan" << std::setw(12) << "dice" << std::setw(12)
       << "dice+crf" << std::setw(12) << "net[s]" << std::setw(12) << "crf[s]" << std::setw(16)
       << "net[s/100sl]";
    return os.str();
}

std::string report_table_row(const SegmentationReport& r) {
    std::ostringstream os;
    os << std::left << std::setw(16) << r.scan_id << std::fixed << std::setprecision(4);
    if (r.dice_pre) os << std::setw(12) << *r.dice_pre;
    else os << std::setw(12) << "-";
    if (r.dice_post) os << std::setw(12) << *r.dice_post;
    else os << std::setw(12) << "-";
    os << std::setw(12) << r.net_seconds << std::setw(12) << r.crf_seconds << std::setw(16)
       << r.normalized_net_seconds;
    return os.str();
}

template <typename T>
SegmentationResult<T> segment_volume(Net3D2D<T>& net, const ScanRecord& scan,
                                     const CrfParams* crf_params) {
    using clock = std::chrono::steady_clock;
    const NetworkConfig& cfg = net.config();
    const Tensor<double>& vol = scan.volume.data;
    const std::size_t H = vol.extent(0), W = vol.extent(1), D = vol.extent(2);
    if (H != cfg.input_height || W != cfg.input_width)
        throw ConfigError("segment_volume: scan " + scan.scan_id + " is " + vol.shape_str() +
                          ", network expects " + std::to_string(cfg.input_height) + "x" +
                          std::to_string(cfg.input_width) + " slices");

    const Tensor<double> normalized = normalize_hu(vol);

    SegmentationResult<T> res;
    res.mask = Tensor<std::uint8_t>({H, W, D});
    res.report.scan_id = scan.scan_id;
    res.report.slices = D;

    Tensor<std::uint8_t> net_mask({H, W, D});
    std::vector<Tensor<double>> prob_maps;
    if (crf_params) prob_maps.reserve(D);

    const auto t0 = clock::now();
    for (std::size_t slice = 0; slice < D; ++slice) {
        const Tensor<double> window = extract_window(normalized, slice, cfg.input_depth);
        Tensor<T> probs = net.forward(tensor_cast<T>(window), Mode::infer);
        const std::size_t N = H * W;
        Tensor<double> pmap({2, H, W});
        for (std::size_t i = 0; i < 2 * N; ++i) pmap[i] = static_cast<double>(probs[i]);
        for (std::size_t y = 0; y < H; ++y)
            for (std::size_t x = 0; x < W; ++x)
                net_mask[(y * W + x) * D + slice] = pmap[N + y * W + x] > 0.5 ? 1 : 0;
        if (crf_params) prob_maps.push_back(std::move(pmap));
    }
    const auto t1 = clock::now();
    res.report.net_seconds = std::chrono::duration<double>(t1 - t0).count();

    res.mask = net_mask;
    if (crf_params) {
        const auto c0 = clock::now();
        for (std::size_t slice = 0; slice < D; ++slice) {
            Tensor<double> image({H, W});
            for (std::size_t y = 0; y < H; ++y)
                for (std::size_t x = 0; x < W; ++x)
                    image[y * W + x] = normalized[(y * W + x) * D + slice];
            const Tensor<std::uint8_t> refined = refine(prob_maps[slice], image, *crf_params);
            for (std::size_t y = 0; y < H; ++y)
                for (std::size_t x = 0; x < W; ++x)
                    res.mask[(y * W + x) * D + slice] = refined[y * W + x];
        }
        const auto c1 = clock::now();
        res.report.crf_seconds = std::chrono::duration<double>(c1 - c0).count();
    }

    res.report.normalized_net_seconds = timing_normalize(res.report.net_seconds, D, H, W);
    if (crf_params)
        res.report.normalized_crf_seconds = timing_normalize(res.report.crf_seconds, D, H, W);

    if (scan.has_mask()) {
        res.report.dice_pre = dice(net_mask, scan.mask);
        if (crf_params) res.report.dice_post = dice(res.mask, scan.mask);
    }
    return res;
}

void write_overlay_pgm(const std::string& path, const Tensor<double>& slice,
                       const Tensor<std::uint8_t>& predicted_slice,
                       const Tensor<std::uint8_t>* truth_slice) {
    const std::size_t H = slice.extent(0), W = slice.extent(1);
    if (predicted_slice.shape() != slice.shape())
        throw ConfigError("overlay: prediction shape does not match the slice");

    double lo = slice[0], hi = slice[0];
    for (auto v : slice.data()) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    const double scale = hi > lo ? 200.0 / (hi - lo) : 0.0;

    std::vector<std::uint8_t> px(H * W);
    for (std::size_t i = 0; i < H * W; ++i)
        px[i] = static_cast<std::uint8_t>(std::lround((slice[i] - lo) * scale));

    auto mark = [&](const Tensor<std::uint8_t>& m, std::uint8_t value) {
        const auto b = boundary_pixels(m, true);
        for (const auto& p : b) px[std::size_t(p.y) * W + p.x] = value;
    };
    if (truth_slice) mark(*truth_slice, 225);
    mark(predicted_slice, 255);

    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open overlay for writing: " + path);
    os << "P5\n" << W << " " << H << "\n255\n";
    os.write(reinterpret_cast<const char*>(px.data()), static_cast<std::streamsize>(px.size()));
    if (!os) throw IoError("write failed for overlay: " + path);
}

template SegmentationResult<float> segment_volume<float>(Net3D2D<float>&, const ScanRecord&,
                                                         const CrfParams*);
template SegmentationResult<double> segment_volume<double>(Net3D2D<double>&, const ScanRecord&,
                                                           const CrfParams*);

}  // namespace voxelseg
