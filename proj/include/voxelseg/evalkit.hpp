#pragma once

#include <optional>
#include <string>

#include "voxelseg/crf.hpp"
#include "voxelseg/dataio.hpp"
#include "voxelseg/net.hpp"

namespace voxelseg {

/// 2|A n B| / (|A| + |B|); 1.0 when both masks are empty.
double dice(const Tensor<std::uint8_t>& a, const Tensor<std::uint8_t>& b);

struct SegmentationReport {
    std::string scan_id;
    std::optional<double> dice_pre;       // network mask vs ground truth
    std::optional<double> dice_post;      // refined mask vs ground truth
    double net_seconds = 0.0;
    double crf_seconds = 0.0;
    double normalized_net_seconds = 0.0;  // per 100 slices at 512x512
    double normalized_crf_seconds = 0.0;
    std::size_t slices = 0;

    std::string machine_line() const;  // tab-separated single record
};

/// seconds * (100 / slices) * (512*512) / (H*W).
double timing_normalize(double seconds, std::size_t slices, std::size_t height,
                        std::size_t width);

template <typename T>
struct SegmentationResult {
    Tensor<std::uint8_t> mask;  // [H,W,D]
    SegmentationReport report;
};

/// Slides the network over every slice of the scan: window extraction,
/// forward in infer mode, center-slice map thresholded at 0.5. When
/// crf_params is given each slice is additionally refined on its boundary
/// band. Network and CRF phases are timed separately with a monotonic clock;
/// file I/O happens before either timer starts.
template <typename T>
SegmentationResult<T> segment_volume(Net3D2D<T>& net, const ScanRecord& scan,
                                     const CrfParams* crf_params);

/// P5 grayscale overlay of one slice: intensities rescaled into [0,200],
/// ground-truth boundary marked 225, predicted boundary marked 255
/// (prediction wins where they coincide).
void write_overlay_pgm(const std::string& path, const Tensor<double>& slice,
                       const Tensor<std::uint8_t>& predicted_slice,
                       const Tensor<std::uint8_t>* truth_slice);

std::string report_table_header();
std::string report_table_row(const SegmentationReport& r);

}  // namespace voxelseg
