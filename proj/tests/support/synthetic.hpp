#pragma once

// Synthetic phantoms and scratch-directory plumbing shared by the trainer,
// evaluation, CLI, and acceptance tests.

#include <filesystem>
#include <string>

#include "voxelseg/dataio.hpp"

namespace synth {

using voxelseg::Rng;
using voxelseg::ScanRecord;
using voxelseg::Tensor;

/// Noisy ellipsoid phantom: bright tissue inside (~100 HU), dark outside
/// (~-150 HU), additive Gaussian noise, mask = exact ellipsoid indicator.
/// Centers and semi-axes jitter with the seed so a dataset of these has some
/// shape variety.
inline ScanRecord make_ellipsoid_scan(const std::string& id, std::size_t H, std::size_t W,
                                      std::size_t D, std::uint64_t seed) {
    Rng rng(seed);
    const double cy = H / 2.0 + rng.normal() * H * 0.04;
    const double cx = W / 2.0 + rng.normal() * W * 0.04;
    const double cz = (D - 1) / 2.0 + rng.normal() * 0.3;
    const double ry = H * (0.24 + 0.06 * rng.uniform());
    const double rx = W * (0.24 + 0.06 * rng.uniform());
    const double rz = D * (0.30 + 0.10 * rng.uniform());

    ScanRecord rec;
    rec.scan_id = id;
    rec.volume.header.height = H;
    rec.volume.header.width = W;
    rec.volume.header.depth = D;
    rec.volume.header.dtype = voxelseg::DType::f32;
    rec.volume.data = Tensor<double>({H, W, D});
    rec.mask = Tensor<std::uint8_t>({H, W, D});

    for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x)
            for (std::size_t z = 0; z < D; ++z) {
                const double dy = (y - cy) / ry, dx = (x - cx) / rx, dz = (z - cz) / rz;
                const bool inside = dy * dy + dx * dx + dz * dz <= 1.0;
                const double noise = rng.normal() * 15.0;
                // keep f32-representable so save/load round trips exactly
                const double hu = float(inside ? 100.0 + noise : -150.0 + noise);
                rec.volume.data[(y * W + x) * D + z] = hu;
                rec.mask[(y * W + x) * D + z] = inside ? 1 : 0;
            }
    return rec;
}

/// A fresh scratch directory under the system temp dir, removed on scope exit.
struct ScratchDir {
    std::filesystem::path path;

    explicit ScratchDir(const std::string& tag) {
        const auto base = std::filesystem::temp_directory_path();
        for (int attempt = 0;; ++attempt) {
            auto candidate = base / ("voxelseg_" + tag + "_" + std::to_string(::getpid()) +
                                     "_" + std::to_string(attempt));
            std::error_code ec;
            if (std::filesystem::create_directories(candidate, ec)) {
                path = candidate;
                return;
            }
        }
    }
    ~ScratchDir() {
        std::error_code ec;
        std::filesystem::remove_all(path, ec);
    }
    ScratchDir(const ScratchDir&) = delete;
    ScratchDir& operator=(const ScratchDir&) = delete;

    std::string str() const { return path.string(); }
};

/// Writes `count` ellipsoid scans into dir and returns their ids.
inline std::vector<std::string> write_ellipsoid_dataset(const std::string& dir,
                                                        std::size_t count, std::size_t H,
                                                        std::size_t W, std::size_t D,
                                                        std::uint64_t seed) {
    std::vector<std::string> ids;
    for (std::size_t i = 0; i < count; ++i) {
        std::string id = "phantom" + std::to_string(i);
        ScanRecord rec = make_ellipsoid_scan(id, H, W, D, voxelseg::Rng::mix(seed, i));
        voxelseg::save_scan(rec, dir);
        ids.push_back(std::move(id));
    }
    return ids;
}

}  // namespace synth
