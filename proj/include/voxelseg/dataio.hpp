#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "voxelseg/tensor.hpp"

namespace voxelseg {

inline constexpr char kVolumeMagic[] = "VOLF";
inline constexpr std::uint32_t kVolumeVersion = 1;

// Hounsfield window for normalization and rotation fill.
inline constexpr double kHuWindowLow = -200.0;
inline constexpr double kHuWindowHigh = 300.0;

enum class Modality : std::uint8_t { ct = 0, mask = 1 };

struct VolumeHeader {
    std::size_t height = 0, width = 0, depth = 0;
    std::array<double, 3> spacing_mm = {1.0, 1.0, 1.0};
    DType dtype = DType::f32;
    Modality modality = Modality::ct;
};

/// In-memory payload is always [H,W,D] double; the header's dtype tag records
/// the on-disk element type and is reused on save so a round trip is
/// bit-exact.
struct Volume {
    VolumeHeader header;
    Tensor<double> data;
};

Volume load_volume(const std::string& path);
void save_volume(const Volume& volume, const std::string& path);

struct Provenance {
    bool rotated = false;
    double degrees = 0.0;
    friend bool operator==(const Provenance&, const Provenance&) = default;
};

struct ScanRecord {
    std::string scan_id;
    Volume volume;                      // intensities in Hounsfield units
    Tensor<std::uint8_t> mask;          // 0/1, same dims; empty when absent
    Provenance provenance;

    bool has_mask() const { return !mask.empty(); }
    void validate() const;
};

// Pairs <id>.volume with <id>.mask under a directory. Mask file optional.
ScanRecord load_scan(const std::string& dir, const std::string& scan_id);
void save_scan(const ScanRecord& record, const std::string& dir);
std::vector<std::string> list_scan_ids(const std::string& dir);

/// Clamp to the [-200, 300] HU window, then map linearly to [0,1].
Tensor<double> normalize_hu(const Tensor<double>& volume);

/// In-plane rotation of every axial slice about its center: bilinear for
/// intensities (out-of-bounds reads fill with the window minimum, i.e. air),
/// nearest-neighbor for the mask. 0 degrees is a bit-exact identity; right
/// angles on square slices degenerate to exact index permutations.
ScanRecord rotate_scan(const ScanRecord& record, double degrees);

/// The seven rotations -30..30 in steps of 10, provenance-tagged.
std::vector<ScanRecord> augment_all(const ScanRecord& record);
inline constexpr std::array<double, 7> kAugmentAngles = {-30, -20, -10, 0, 10, 20, 30};

/// D consecutive slices of a [H,W,D_scan] volume centered (floor((D-1)/2)
/// convention) on center_slice_index, as a [1,H,W,D] tensor. Slices past
/// either end are replaced by replicating the first/last slice.
Tensor<double> extract_window(const Tensor<double>& volume, std::size_t center_slice_index,
                              std::size_t depth);

struct FoldPlan {
    struct Fold {
        std::vector<std::string> train_ids;
        std::vector<std::string> validation_ids;
        std::vector<std::string> test_ids;
    };
    std::size_t k = 0;
    std::vector<Fold> folds;
};

/// Deterministic k-fold split: shuffle under the seed, deal contiguous test
/// folds, then draw validation scans from each fold's training portion.
/// Rotated variants are derived from these base ids downstream, so they can
/// never straddle a split.
FoldPlan make_folds(std::vector<std::string> scan_ids, std::size_t k,
                    std::size_t validation_count, std::uint64_t seed);

}  // namespace voxelseg
