#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "voxelseg/dataio.hpp"
#include "voxelseg/loss.hpp"
#include "voxelseg/net.hpp"

namespace voxelseg {

enum class OptimizerKind { sgd_momentum, adam };

struct TrainConfig {
    OptimizerKind optimizer = OptimizerKind::adam;
    double learning_rate = 1e-4;
    double momentum = 0.9;   // sgd
    double beta1 = 0.9;      // adam
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    std::size_t max_epochs = 200;
    std::size_t patience = 10;
    std::size_t batch_size = 1;  // windows per optimizer step, gradients summed
    std::uint64_t seed = 0;
    bool augment = true;  // iterate all 7 rotations of each training scan
    LossParams loss;

    void validate() const;
};

/// Optimizer slots, one pair of moment vectors per trainable entry in
/// registry order. SGD stores its velocity in m. Stored in f64 so resume
/// round-trips losslessly for either element type.
struct OptimizerState {
    std::size_t step_count = 0;
    std::vector<std::vector<double>> m;
    std::vector<std::vector<double>> v;
};

/// One deterministic update over all trainable parameters; gradients are
/// zeroed afterwards. Throws InternalError naming the layer path if a
/// trainable parameter has no populated gradient slot.
template <typename T>
void optimizer_step(ParamRegistry<T>& params, OptimizerState& state, const TrainConfig& cfg);

struct EpochRecord {
    std::size_t epoch = 0;  // 1-based
    double train_loss_sum = 0.0;
    double train_loss_mean = 0.0;  // per-pixel mean, averaged over windows
    double val_loss = 0.0;
    double val_dice = 0.0;
    double seconds = 0.0;
    std::string checkpoint_path;
};

struct TrainLog {
    std::vector<EpochRecord> records;
    std::size_t best_epoch = 0;  // 1-based index into records

    // One epoch per line: epoch, train_loss, val_loss, val_dice, seconds,
    // checkpoint path; tab-separated, full double precision.
    void save(const std::string& path) const;
    static TrainLog load(const std::string& path);
};

struct ValidationResult {
    double mean_loss = 0.0;
    double mean_dice = 0.0;
};

/// Infer-mode loss and Dice over full scans: per-slice windows for the loss,
/// evalkit-style full segmentation for the Dice. Throws ConfigError on an
/// empty scan list.
template <typename T>
ValidationResult validate(Net3D2D<T>& net, const std::vector<ScanRecord>& scans,
                          const LossParams& loss_params);

struct TrainOptions {
    std::string checkpoint_dir;  // required: per-epoch checkpoints + resume state
    bool resume = false;
    // Rotations come from this cache (written by the augment command) when
    // set; otherwise they are recomputed in memory.
    std::string augment_cache_dir;
    std::function<void(const EpochRecord&)> on_epoch;  // per-epoch progress hook
    // Optional early exit once validation Dice reaches a target (the
    // overfit harness stops as soon as the bar is cleared).
    std::optional<double> stop_at_val_dice;
};

template <typename T>
struct TrainResult {
    Net3D2D<T> net;  // parameters of the best validation epoch
    TrainLog log;
};

/// Epoch loop: deterministic shuffle of (record, slice) pairs, window
/// extraction, boundary-weighted cross-entropy, backward, optimizer step,
/// then validation loss/Dice and early stopping on `patience` epochs without
/// validation-loss improvement. All randomness is keyed on (seed, epoch,
/// step), so an interrupted run resumed from the latest checkpoint continues
/// the exact same trajectory.
template <typename T>
TrainResult<T> train(const NetworkConfig& net_config, const TrainConfig& train_config,
                     const FoldPlan::Fold& fold, const std::string& data_root,
                     const TrainOptions& options);

inline constexpr char kTrainerStateMagic[] = "V3TRS";
inline constexpr std::uint32_t kTrainerStateVersion = 1;

}  // namespace voxelseg
