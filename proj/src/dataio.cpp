#include "voxelseg/dataio.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>

namespace fs = std::filesystem;

namespace voxelseg {

namespace {

void put_u32(std::ostream& os, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) os.put(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_f64(std::ostream& os, double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, 8);
    for (int i = 0; i < 8; ++i) os.put(static_cast<char>((bits >> (8 * i)) & 0xff));
}

std::uint8_t get_u8(std::istream& is, const std::string& path, const char* what) {
    const int c = is.get();
    if (c == EOF) throw IoError(path + ": truncated header while reading " + what);
    return static_cast<std::uint8_t>(c);
}

std::uint32_t get_u32(std::istream& is, const std::string& path, const char* what) {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t(get_u8(is, path, what)) << (8 * i);
    return v;
}

double get_f64(std::istream& is, const std::string& path, const char* what) {
    std::uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) bits |= std::uint64_t(get_u8(is, path, what)) << (8 * i);
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
}

}  // namespace

Volume load_volume(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open volume file: " + path);
    char magic[4];
    is.read(magic, 4);
    if (is.gcount() != 4 || std::memcmp(magic, kVolumeMagic, 4) != 0)
        throw IoError(path + ": not a volume file (bad magic)");
    const std::uint32_t version = get_u32(is, path, "version");
    if (version != kVolumeVersion)
        throw IoError(path + ": unsupported volume version " + std::to_string(version));

    VolumeHeader h;
    h.height = get_u32(is, path, "height");
    h.width = get_u32(is, path, "width");
    h.depth = get_u32(is, path, "depth");
    for (auto& s : h.spacing_mm) s = get_f64(is, path, "spacing");
    const std::uint8_t tag = get_u8(is, path, "dtype");
    switch (tag) {
        case 0: h.dtype = DType::i16; break;
        case 1: h.dtype = DType::f32; break;
        case 2: h.dtype = DType::u8; break;
        default: throw IoError(path + ": unknown dtype tag " + std::to_string(tag));
    }
    h.modality = static_cast<Modality>(get_u8(is, path, "modality"));
    if (h.height == 0 || h.width == 0 || h.depth == 0)
        throw IoError(path + ": header dims must be positive");
    constexpr std::size_t voxel_cap = std::size_t(1) << 40;
    if (h.width > voxel_cap / h.height || h.depth > voxel_cap / (h.height * h.width))
        throw IoError(path + ": header dims overflow (" + std::to_string(h.height) + "x" +
                      std::to_string(h.width) + "x" + std::to_string(h.depth) + ")");

    const std::size_t voxels = h.height * h.width * h.depth;
    const std::size_t expected = voxels * dtype_size(h.dtype);
    std::vector<char> payload(expected);
    is.read(payload.data(), static_cast<std::streamsize>(expected));
    const std::size_t got = static_cast<std::size_t>(is.gcount());
    if (got != expected)
        throw IoError(path + ": truncated payload, expected " + std::to_string(expected) +
                      " bytes, got " + std::to_string(got));
    if (is.peek() != EOF) throw IoError(path + ": trailing bytes after payload");

    Volume vol;
    vol.header = h;
    vol.data = Tensor<double>({h.height, h.width, h.depth});
    // File payload is x-fastest (x, then y, then z); memory is [H,W,D]
    // row-major, i.e. z-fastest.
    const std::size_t H = h.height, W = h.width, D = h.depth;
    for (std::size_t z = 0; z < D; ++z)
        for (std::size_t y = 0; y < H; ++y)
            for (std::size_t x = 0; x < W; ++x) {
                const std::size_t fidx = (z * H + y) * W + x;
                double value = 0;
                switch (h.dtype) {
                    case DType::i16: {
                        std::uint16_t u = static_cast<std::uint8_t>(payload[2 * fidx]) |
                                          (std::uint16_t(static_cast<std::uint8_t>(
                                               payload[2 * fidx + 1]))
                                           << 8);
                        std::int16_t sv;
                        std::memcpy(&sv, &u, 2);
                        value = sv;
                        break;
                    }
                    case DType::f32: {
                        std::uint32_t u = 0;
                        for (int b = 0; b < 4; ++b)
                            u |= std::uint32_t(static_cast<std::uint8_t>(payload[4 * fidx + b]))
                                 << (8 * b);
                        float f;
                        std::memcpy(&f, &u, 4);
                        value = f;
                        break;
                    }
                    case DType::u8:
                        value = static_cast<std::uint8_t>(payload[fidx]);
                        break;
                    default:
                        break;
                }
                vol.data[(y * W + x) * D + z] = value;
            }
    return vol;
}

void save_volume(const Volume& volume, const std::string& path) {
    const auto& h = volume.header;
    if (h.height * h.width * h.depth != volume.data.numel())
        throw InternalError("save_volume: header dims do not match payload");
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open volume file for writing: " + path);
    os.write(kVolumeMagic, 4);
    put_u32(os, kVolumeVersion);
    put_u32(os, static_cast<std::uint32_t>(h.height));
    put_u32(os, static_cast<std::uint32_t>(h.width));
    put_u32(os, static_cast<std::uint32_t>(h.depth));
    for (auto s : h.spacing_mm) put_f64(os, s);
    switch (h.dtype) {
        case DType::i16: os.put(0); break;
        case DType::f32: os.put(1); break;
        case DType::u8: os.put(2); break;
        default: throw ConfigError("volume dtype must be i16, f32, or u8");
    }
    os.put(static_cast<char>(h.modality));

    const std::size_t H = h.height, W = h.width, D = h.depth;
    for (std::size_t z = 0; z < D; ++z)
        for (std::size_t y = 0; y < H; ++y)
            for (std::size_t x = 0; x < W; ++x) {
                const double value = volume.data[(y * W + x) * D + z];
                switch (h.dtype) {
                    case DType::i16: {
                        const std::int16_t sv = static_cast<std::int16_t>(std::lround(value));
                        std::uint16_t u;
                        std::memcpy(&u, &sv, 2);
                        os.put(static_cast<char>(u & 0xff));
                        os.put(static_cast<char>((u >> 8) & 0xff));
                        break;
                    }
                    case DType::f32: {
                        const float f = static_cast<float>(value);
                        std::uint32_t u;
                        std::memcpy(&u, &f, 4);
                        for (int b = 0; b < 4; ++b)
                            os.put(static_cast<char>((u >> (8 * b)) & 0xff));
                        break;
                    }
                    case DType::u8:
                        os.put(static_cast<char>(static_cast<std::uint8_t>(value)));
                        break;
                    default:
                        break;
                }
            }
    if (!os) throw IoError("write failed for volume file: " + path);
}

void ScanRecord::validate() const {
    if (has_mask()) {
        if (mask.shape() != volume.data.shape())
            throw ConfigError("scan " + scan_id + ": mask shape " + mask.shape_str() +
                              " does not match volume " + volume.data.shape_str());
        for (auto v : mask.data())
            if (v > 1) throw ConfigError("scan " + scan_id + ": mask must be strictly 0/1");
    }
}

ScanRecord load_scan(const std::string& dir, const std::string& scan_id) {
    ScanRecord rec;
    rec.scan_id = scan_id;
    rec.volume = load_volume((fs::path(dir) / (scan_id + ".volume")).string());
    const fs::path mask_path = fs::path(dir) / (scan_id + ".mask");
    if (fs::exists(mask_path)) {
        Volume m = load_volume(mask_path.string());
        if (m.header.modality != Modality::mask)
            throw IoError(mask_path.string() + ": modality tag is not mask");
        rec.mask = tensor_cast<std::uint8_t>(m.data);
    }
    rec.validate();
    return rec;
}

void save_scan(const ScanRecord& record, const std::string& dir) {
    record.validate();
    fs::create_directories(dir);
    save_volume(record.volume, (fs::path(dir) / (record.scan_id + ".volume")).string());
    if (record.has_mask()) {
        Volume m;
        m.header = record.volume.header;
        m.header.dtype = DType::u8;
        m.header.modality = Modality::mask;
        m.data = tensor_cast<double>(record.mask);
        save_volume(m, (fs::path(dir) / (record.scan_id + ".mask")).string());
    }
}

std::vector<std::string> list_scan_ids(const std::string& dir) {
    if (!fs::is_directory(dir)) throw IoError("dataset root is not a directory: " + dir);
    std::vector<std::string> ids;
    for (const auto& entry : fs::directory_iterator(dir)) {
        if (!entry.is_regular_file()) continue;
        const fs::path p = entry.path();
        if (p.extension() == ".volume") ids.push_back(p.stem().string());
    }
    std::sort(ids.begin(), ids.end());
    return ids;
}

Tensor<double> normalize_hu(const Tensor<double>& volume) {
    Tensor<double> out(volume.shape());
    const double span = kHuWindowHigh - kHuWindowLow;
    for (std::size_t i = 0; i < volume.numel(); ++i) {
        const double v = std::clamp(volume[i], kHuWindowLow, kHuWindowHigh);
        out[i] = (v - kHuWindowLow) / span;
    }
    return out;
}

ScanRecord rotate_scan(const ScanRecord& record, double degrees) {
    if (degrees == 0.0) {
        ScanRecord out = record;
        out.provenance = Provenance{true, 0.0};
        return out;
    }
    const std::size_t H = record.volume.data.extent(0), W = record.volume.data.extent(1),
                      D = record.volume.data.extent(2);
    const double rad = degrees * 3.14159265358979323846 / 180.0;
    double c = std::cos(rad), s = std::sin(rad);
    // Snap right angles so they degenerate to exact grid sampling.
    if (std::abs(c) < 1e-12) c = 0.0;
    if (std::abs(s) < 1e-12) s = 0.0;
    if (std::abs(c - 1.0) < 1e-12) c = 1.0;
    if (std::abs(c + 1.0) < 1e-12) c = -1.0;
    if (std::abs(s - 1.0) < 1e-12) s = 1.0;
    if (std::abs(s + 1.0) < 1e-12) s = -1.0;
    const double cy = (static_cast<double>(H) - 1.0) / 2.0;
    const double cx = (static_cast<double>(W) - 1.0) / 2.0;

    ScanRecord out;
    out.scan_id = record.scan_id;
    out.provenance = Provenance{true, degrees};
    out.volume.header = record.volume.header;
    out.volume.data = Tensor<double>(record.volume.data.shape());
    if (record.has_mask()) out.mask = Tensor<std::uint8_t>(record.mask.shape());

    for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x) {
            // inverse map: sample the source at the back-rotated position
            const double ry = static_cast<double>(y) - cy;
            const double rx = static_cast<double>(x) - cx;
            const double sy = c * ry + s * rx + cy;
            const double sx = -s * ry + c * rx + cx;

            const double fy = std::floor(sy), fx = std::floor(sx);
            const long y0 = static_cast<long>(fy), x0 = static_cast<long>(fx);
            const double wy = sy - fy, wx = sx - fx;

            const long ny = std::lround(sy), nx = std::lround(sx);
            const bool nn_inside = ny >= 0 && ny < static_cast<long>(H) && nx >= 0 &&
                                   nx < static_cast<long>(W);

            for (std::size_t z = 0; z < D; ++z) {
                auto sample = [&](long yy, long xx) {
                    if (yy < 0 || yy >= static_cast<long>(H) || xx < 0 ||
                        xx >= static_cast<long>(W))
                        return kHuWindowLow;  // air
                    return record.volume.data[(std::size_t(yy) * W + xx) * D + z];
                };
                double v;
                if (wy == 0.0 && wx == 0.0) {
                    v = sample(y0, x0);
                } else {
                    v = (1 - wy) * (1 - wx) * sample(y0, x0) +
                        (1 - wy) * wx * sample(y0, x0 + 1) +
                        wy * (1 - wx) * sample(y0 + 1, x0) + wy * wx * sample(y0 + 1, x0 + 1);
                }
                out.volume.data[(y * W + x) * D + z] = v;
                if (record.has_mask())
                    out.mask[(y * W + x) * D + z] =
                        nn_inside ? record.mask[(std::size_t(ny) * W + nx) * D + z] : 0;
            }
        }
    return out;
}

std::vector<ScanRecord> augment_all(const ScanRecord& record) {
    std::vector<ScanRecord> out;
    out.reserve(kAugmentAngles.size());
    for (double angle : kAugmentAngles) out.push_back(rotate_scan(record, angle));
    return out;
}

Tensor<double> extract_window(const Tensor<double>& volume, std::size_t center_slice_index,
                              std::size_t depth) {
    if (volume.rank() != 3) throw ConfigError("extract_window expects a [H,W,D] volume");
    if (depth == 0) throw ConfigError("extract_window: depth must be positive");
    const std::size_t H = volume.extent(0), W = volume.extent(1), D = volume.extent(2);
    if (center_slice_index >= D)
        throw ConfigError("extract_window: center slice " + std::to_string(center_slice_index) +
                          " outside a depth-" + std::to_string(D) + " scan");
    const long center = static_cast<long>((depth - 1) / 2);

    Tensor<double> out({1, H, W, depth});
    for (std::size_t d = 0; d < depth; ++d) {
        long src = static_cast<long>(center_slice_index) + static_cast<long>(d) - center;
        src = std::clamp(src, 0L, static_cast<long>(D) - 1);  // edge replication
        for (std::size_t y = 0; y < H; ++y)
            for (std::size_t x = 0; x < W; ++x)
                out[((y * W + x) * depth) + d] = volume[(y * W + x) * D + std::size_t(src)];
    }
    return out;
}

FoldPlan make_folds(std::vector<std::string> scan_ids, std::size_t k,
                    std::size_t validation_count, std::uint64_t seed) {
    if (k < 2) throw ConfigError("folds: k must be >= 2");
    if (k > scan_ids.size())
        throw ConfigError("folds: k = " + std::to_string(k) + " exceeds scan count " +
                          std::to_string(scan_ids.size()));
    std::sort(scan_ids.begin(), scan_ids.end());

    // Fisher-Yates with explicit index draws; std::shuffle is
    // implementation-defined and would break cross-platform determinism.
    Rng rng(seed);
    for (std::size_t i = scan_ids.size(); i > 1; --i)
        std::swap(scan_ids[i - 1], scan_ids[rng.below(i)]);

    FoldPlan plan;
    plan.k = k;
    const std::size_t n = scan_ids.size();
    for (std::size_t f = 0; f < k; ++f) {
        const std::size_t lo = f * n / k, hi = (f + 1) * n / k;
        FoldPlan::Fold fold;
        fold.test_ids.assign(scan_ids.begin() + lo, scan_ids.begin() + hi);
        std::vector<std::string> rest;
        rest.insert(rest.end(), scan_ids.begin(), scan_ids.begin() + lo);
        rest.insert(rest.end(), scan_ids.begin() + hi, scan_ids.end());
        if (validation_count >= rest.size())
            throw ConfigError("folds: validation_count " + std::to_string(validation_count) +
                              " leaves no training scans");
        Rng vrng(Rng::mix(seed, f + 1));
        for (std::size_t i = 0; i < validation_count; ++i) {
            const std::size_t pick = vrng.below(rest.size());
            fold.validation_ids.push_back(rest[pick]);
            rest.erase(rest.begin() + static_cast<long>(pick));
        }
        fold.train_ids = std::move(rest);
        plan.folds.push_back(std::move(fold));
    }
    return plan;
}

}  // namespace voxelseg
