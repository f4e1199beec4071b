#include "voxelseg/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>

#include "voxelseg/evalkit.hpp"

namespace fs = std::filesystem;

namespace voxelseg {

void TrainConfig::validate() const {
    if (learning_rate <= 0.0) throw ConfigError("train: learning_rate must be > 0");
    if (patience < 1) throw ConfigError("train: patience must be >= 1");
    if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
    if (max_epochs < 1) throw ConfigError("train: max_epochs must be >= 1");
    if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("train: momentum must be in [0,1)");
    if (beta1 <= 0.0 || beta1 >= 1.0 || beta2 <= 0.0 || beta2 >= 1.0)
        throw ConfigError("train: adam betas must be in (0,1)");
    loss.validate();
}

template <typename T>
void optimizer_step(ParamRegistry<T>& params, OptimizerState& state, const TrainConfig& cfg) {
    std::size_t trainable = 0;
    for (const auto& e : params.entries()) trainable += e.trainable;
    if (state.m.size() != trainable) {
        state.m.assign(trainable, {});
        state.v.assign(trainable, {});
    }

    state.step_count += 1;
    std::size_t slot = 0;
    for (auto& e : params.entries()) {
        if (!e.trainable) continue;
        if (!e.value.has_grad())
            throw InternalError("optimizer_step: no gradient populated for " + e.path);
        auto& w = e.value.data();
        auto& g = e.value.grad();
        auto& m = state.m[slot];
        auto& v = state.v[slot];
        if (m.size() != w.size()) m.assign(w.size(), 0.0);

        if (cfg.optimizer == OptimizerKind::sgd_momentum) {
            for (std::size_t i = 0; i < w.size(); ++i) {
                m[i] = cfg.momentum * m[i] + static_cast<double>(g[i]);
                w[i] -= T(cfg.learning_rate * m[i]);
            }
        } else {
            if (v.size() != w.size()) v.assign(w.size(), 0.0);
            const double bc1 = 1.0 - std::pow(cfg.beta1, double(state.step_count));
            const double bc2 = 1.0 - std::pow(cfg.beta2, double(state.step_count));
            for (std::size_t i = 0; i < w.size(); ++i) {
                const double gi = static_cast<double>(g[i]);
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
                const double mhat = m[i] / bc1;
                const double vhat = v[i] / bc2;
                w[i] -= T(cfg.learning_rate * mhat / (std::sqrt(vhat) + cfg.adam_eps));
            }
        }
        e.value.zero_grad();
        ++slot;
    }
}

// ---------------------------------------------------------------------------
// TrainLog persistence

void TrainLog::save(const std::string& path) const {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw IoError("cannot open train log for writing: " + path);
    os << std::setprecision(17);
    for (const auto& r : records)
        os << r.epoch << '\t' << r.train_loss_sum << '\t' << r.val_loss << '\t' << r.val_dice
           << '\t' << r.seconds << '\t' << r.checkpoint_path << '\n';
    if (!os) throw IoError("write failed for train log: " + path);
}

TrainLog TrainLog::load(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open train log: " + path);
    TrainLog log;
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::istringstream ls(line);
        EpochRecord r;
        std::string field;
        auto next = [&]() {
            if (!std::getline(ls, field, '\t'))
                throw IoError(path + ": malformed train log line: " + line);
            return field;
        };
        r.epoch = std::stoull(next());
        r.train_loss_sum = std::stod(next());
        r.val_loss = std::stod(next());
        r.val_dice = std::stod(next());
        r.seconds = std::stod(next());
        std::getline(ls, r.checkpoint_path, '\t');
        log.records.push_back(std::move(r));
    }
    return log;
}

// ---------------------------------------------------------------------------
// Validation

template <typename T>
ValidationResult validate(Net3D2D<T>& net, const std::vector<ScanRecord>& scans,
                          const LossParams& loss_params) {
    if (scans.empty()) throw ConfigError("validate: empty scan list");
    const NetworkConfig& cfg = net.config();

    double loss_total = 0.0;
    std::size_t loss_count = 0;
    double dice_total = 0.0;
    for (const auto& scan : scans) {
        if (!scan.has_mask())
            throw DomainError("validate: scan " + scan.scan_id + " has no ground-truth mask");
        const Tensor<double> normalized = normalize_hu(scan.volume.data);
        const std::size_t H = normalized.extent(0), W = normalized.extent(1),
                          D = normalized.extent(2);
        for (std::size_t slice = 0; slice < D; ++slice) {
            const Tensor<double> window = extract_window(normalized, slice, cfg.input_depth);
            const Tensor<T> probs = net.forward(tensor_cast<T>(window), Mode::infer);
            Tensor<std::uint8_t> target({H, W});
            for (std::size_t i = 0; i < H * W; ++i)
                target[i] = scan.mask[i * D + slice];
            const WeightMap wmap = weight_map(target, loss_params);
            const WceResult<T> wce = weighted_cross_entropy(probs, target, wmap);
            loss_total += static_cast<double>(wce.loss_mean);
            ++loss_count;
        }
        SegmentationResult<T> seg = segment_volume(net, scan, nullptr);
        dice_total += seg.report.dice_pre.value();
    }
    return {loss_total / static_cast<double>(loss_count),
            dice_total / static_cast<double>(scans.size())};
}

// ---------------------------------------------------------------------------
// Trainer resume state (sidecar next to the latest checkpoint)

namespace {

struct TrainerState {
    std::size_t epoch = 0;  // last completed epoch
    std::size_t best_epoch = 0;
    double best_val_loss = 0.0;
    std::size_t epochs_since_improve = 0;
    OptimizerState opt;
};

void put_u64(std::ostream& os, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) os.put(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_f64(std::ostream& os, double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, 8);
    put_u64(os, bits);
}

std::uint64_t get_u64(std::istream& is, const std::string& path) {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) {
        const int c = is.get();
        if (c == EOF) throw IoError(path + ": truncated trainer state");
        v |= std::uint64_t(static_cast<std::uint8_t>(c)) << (8 * i);
    }
    return v;
}

double get_f64(std::istream& is, const std::string& path) {
    const std::uint64_t bits = get_u64(is, path);
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
}

void save_trainer_state(const TrainerState& st, const std::string& path) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open trainer state for writing: " + path);
    os.write(kTrainerStateMagic, 5);
    put_u64(os, kTrainerStateVersion);
    put_u64(os, st.epoch);
    put_u64(os, st.best_epoch);
    put_f64(os, st.best_val_loss);
    put_u64(os, st.epochs_since_improve);
    put_u64(os, st.opt.step_count);
    put_u64(os, st.opt.m.size());
    for (std::size_t i = 0; i < st.opt.m.size(); ++i) {
        put_u64(os, st.opt.m[i].size());
        for (double x : st.opt.m[i]) put_f64(os, x);
        put_u64(os, st.opt.v[i].size());
        for (double x : st.opt.v[i]) put_f64(os, x);
    }
    if (!os) throw IoError("write failed for trainer state: " + path);
}

TrainerState load_trainer_state(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open trainer state: " + path);
    char magic[5];
    is.read(magic, 5);
    if (is.gcount() != 5 || std::memcmp(magic, kTrainerStateMagic, 5) != 0)
        throw IoError(path + ": not a trainer state file");
    const std::uint64_t version = get_u64(is, path);
    if (version != kTrainerStateVersion)
        throw IoError(path + ": unsupported trainer state version " + std::to_string(version));
    TrainerState st;
    st.epoch = get_u64(is, path);
    st.best_epoch = get_u64(is, path);
    st.best_val_loss = get_f64(is, path);
    st.epochs_since_improve = get_u64(is, path);
    st.opt.step_count = get_u64(is, path);
    const std::uint64_t n = get_u64(is, path);
    st.opt.m.resize(n);
    st.opt.v.resize(n);
    for (std::uint64_t i = 0; i < n; ++i) {
        st.opt.m[i].resize(get_u64(is, path));
        for (auto& x : st.opt.m[i]) x = get_f64(is, path);
        st.opt.v[i].resize(get_u64(is, path));
        for (auto& x : st.opt.v[i]) x = get_f64(is, path);
    }
    return st;
}

std::string epoch_checkpoint_path(const std::string& dir, std::size_t epoch) {
    std::ostringstream os;
    os << "epoch_" << std::setw(4) << std::setfill('0') << epoch << ".ckpt";
    return (fs::path(dir) / os.str()).string();
}

}  // namespace

// ---------------------------------------------------------------------------
// Training loop

template <typename T>
TrainResult<T> train(const NetworkConfig& net_config, const TrainConfig& train_config,
                     const FoldPlan::Fold& fold, const std::string& data_root,
                     const TrainOptions& options) {
    using clock = std::chrono::steady_clock;
    net_config.validate();
    train_config.validate();
    if (options.checkpoint_dir.empty())
        throw ConfigError("train: checkpoint_dir must be set");
    if (fold.train_ids.empty()) throw ConfigError("train: fold has no training scans");
    if (fold.validation_ids.empty()) throw ConfigError("train: fold has no validation scans");
    fs::create_directories(options.checkpoint_dir);

    // Materialize training records (with rotations) and validation records.
    std::vector<ScanRecord> records;
    for (const auto& id : fold.train_ids) {
        try {
            if (train_config.augment && !options.augment_cache_dir.empty()) {
                for (double angle : kAugmentAngles) {
                    std::ostringstream name;
                    name << id << ".rot" << static_cast<int>(angle);
                    records.push_back(load_scan(options.augment_cache_dir, name.str()));
                }
            } else if (train_config.augment) {
                ScanRecord base = load_scan(data_root, id);
                for (auto& r : augment_all(base)) records.push_back(std::move(r));
            } else {
                records.push_back(load_scan(data_root, id));
            }
        } catch (const IoError& e) {
            throw DomainError("train: failed to load scan " + id + ": " + e.what());
        }
    }
    for (const auto& r : records)
        if (!r.has_mask())
            throw DomainError("train: scan " + r.scan_id + " has no ground-truth mask");
    std::vector<ScanRecord> val_scans;
    for (const auto& id : fold.validation_ids) {
        try {
            val_scans.push_back(load_scan(data_root, id));
        } catch (const IoError& e) {
            throw DomainError("train: failed to load validation scan " + id + ": " + e.what());
        }
    }

    std::vector<Tensor<double>> normalized;
    normalized.reserve(records.size());
    for (const auto& r : records) normalized.push_back(normalize_hu(r.volume.data));

    // One window per (record, slice) per epoch.
    struct Sample {
        std::size_t record;
        std::size_t slice;
    };
    std::vector<Sample> samples;
    for (std::size_t r = 0; r < records.size(); ++r)
        for (std::size_t s = 0; s < records[r].volume.data.extent(2); ++s)
            samples.push_back({r, s});

    Net3D2D<T> net(net_config, train_config.seed);
    TrainerState st;
    TrainLog log;
    const std::string state_path = (fs::path(options.checkpoint_dir) / "latest.state").string();
    const std::string log_path = (fs::path(options.checkpoint_dir) / "train.log").string();

    if (options.resume) {
        if (!fs::exists(state_path))
            throw IoError("resume requested but no trainer state at " + state_path);
        st = load_trainer_state(state_path);
        net = Net3D2D<T>::load_checkpoint(epoch_checkpoint_path(options.checkpoint_dir, st.epoch),
                                          &net_config);
        log = TrainLog::load(log_path);
        log.best_epoch = st.best_epoch;
    } else {
        st.best_val_loss = std::numeric_limits<double>::infinity();
    }

    const std::size_t H = net_config.input_height, W = net_config.input_width;
    bool stop = false;
    for (std::size_t epoch = st.epoch + 1; epoch <= train_config.max_epochs && !stop; ++epoch) {
        const auto e0 = clock::now();

        // Deterministic epoch-keyed shuffle; no state carries across epochs,
        // which is what makes resume exact.
        std::vector<std::size_t> order(samples.size());
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        Rng shuffle_rng(Rng::mix(train_config.seed, 0x5f0e1d2c00000000ULL + epoch));
        for (std::size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[shuffle_rng.below(i)]);

        double loss_sum = 0.0;
        double loss_mean_sum = 0.0;
        std::size_t in_batch = 0;
        for (std::size_t step = 0; step < order.size(); ++step) {
            const Sample& smp = samples[order[step]];
            const ScanRecord& rec = records[smp.record];
            const Tensor<double> window =
                extract_window(normalized[smp.record], smp.slice, net_config.input_depth);

            Tensor<std::uint8_t> target({H, W});
            const std::size_t D = rec.volume.data.extent(2);
            for (std::size_t i = 0; i < H * W; ++i) target[i] = rec.mask[i * D + smp.slice];
            const WeightMap wmap = weight_map(target, train_config.loss);

            const std::uint64_t step_seed =
                Rng::mix(train_config.seed, epoch * 0x100000 + step);
            const Tensor<T> probs = net.forward(tensor_cast<T>(window), Mode::train, step_seed);
            const WceResult<T> wce = weighted_cross_entropy(probs, target, wmap);
            if (!std::isfinite(static_cast<double>(wce.loss_sum)))
                throw DomainError("training diverged: non-finite loss at epoch " +
                                  std::to_string(epoch) + ", step " + std::to_string(step));
            loss_sum += static_cast<double>(wce.loss_sum);
            loss_mean_sum += static_cast<double>(wce.loss_mean);

            net.backward(wce.grad_logits);
            net.commit_batchnorm_updates();
            if (++in_batch == train_config.batch_size || step + 1 == order.size()) {
                optimizer_step(net.params(), st.opt, train_config);
                in_batch = 0;
            }
        }

        const ValidationResult val = validate(net, val_scans, train_config.loss);

        EpochRecord rec;
        rec.epoch = epoch;
        rec.train_loss_sum = loss_sum;
        rec.train_loss_mean = loss_mean_sum / static_cast<double>(order.size());
        rec.val_loss = val.mean_loss;
        rec.val_dice = val.mean_dice;
        rec.checkpoint_path = epoch_checkpoint_path(options.checkpoint_dir, epoch);
        net.save_checkpoint(rec.checkpoint_path);

        if (val.mean_loss < st.best_val_loss) {
            st.best_val_loss = val.mean_loss;
            st.best_epoch = epoch;
            st.epochs_since_improve = 0;
        } else if (++st.epochs_since_improve >= train_config.patience) {
            stop = true;
        }
        st.epoch = epoch;
        log.best_epoch = st.best_epoch;

        rec.seconds = std::chrono::duration<double>(clock::now() - e0).count();
        log.records.push_back(rec);
        log.save(log_path);
        save_trainer_state(st, state_path);
        if (options.on_epoch) options.on_epoch(rec);
        if (options.stop_at_val_dice && val.mean_dice >= *options.stop_at_val_dice) stop = true;
    }

    Net3D2D<T> best = Net3D2D<T>::load_checkpoint(
        epoch_checkpoint_path(options.checkpoint_dir, st.best_epoch), &net_config);
    const std::string best_path = (fs::path(options.checkpoint_dir) / "best.ckpt").string();
    best.save_checkpoint(best_path);
    return TrainResult<T>{std::move(best), std::move(log)};
}

#define VOXELSEG_INSTANTIATE_TRAINER(T)                                                      \
    template void optimizer_step<T>(ParamRegistry<T>&, OptimizerState&, const TrainConfig&); \
    template ValidationResult validate<T>(Net3D2D<T>&, const std::vector<ScanRecord>&,       \
                                          const LossParams&);                                \
    template TrainResult<T> train<T>(const NetworkConfig&, const TrainConfig&,               \
                                     const FoldPlan::Fold&, const std::string&,              \
                                     const TrainOptions&);

VOXELSEG_INSTANTIATE_TRAINER(float)
VOXELSEG_INSTANTIATE_TRAINER(double)

#undef VOXELSEG_INSTANTIATE_TRAINER

}  // namespace voxelseg
