#pragma once

#include <string>
#include <vector>

#include "voxelseg/crf.hpp"
#include "voxelseg/net.hpp"
#include "voxelseg/trainer.hpp"

namespace voxelseg {

/// The single configuration document for the command-line pipeline. Every
/// subcommand reads one of these (file + overrides); unknown keys are
/// rejected with their full dotted path.
struct RunConfig {
    std::uint64_t seed = 1234;
    DType dtype = DType::f64;  // "f64" | "f32"
    int threads = 1;
    std::string dataset_root = "data";
    std::string cache_dir;  // empty -> <dataset_root>/.augcache; VOXELSEG_CACHE wins
    std::string output_dir = "out";
    NetworkConfig network;
    TrainConfig train;  // seed and loss are filled from the top-level fields
    LossParams loss;
    CrfParams crf;
    struct Folds {
        std::size_t k = 5;
        std::size_t validation_count = 2;
        std::size_t index = 0;
    } folds;

    std::string effective_cache_dir() const;
    void validate() const;
};

RunConfig parse_run_config(const std::string& json_text);
RunConfig load_run_config(const std::string& path);

/// Serializes with every field present, so print-config output re-parses to
/// an equivalent config.
std::string print_run_config(const RunConfig& config);

/// Applies `section.key=value` overrides on the JSON document before the
/// strict parse; values are parsed as JSON when possible, else as strings.
std::string apply_overrides(const std::string& json_text,
                            const std::vector<std::string>& overrides);

}  // namespace voxelseg
