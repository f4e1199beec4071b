#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "voxelseg/evalkit.hpp"
#include "voxelseg/gradcheck.hpp"
#include "voxelseg/runconfig.hpp"

namespace fs = std::filesystem;
using namespace voxelseg;

namespace {

struct CommonArgs {
    std::string config_path;
    std::vector<std::string> overrides;
};

RunConfig make_config(const CommonArgs& args) {
    std::string text = "{}";
    if (!args.config_path.empty()) {
        std::ifstream is(args.config_path);
        if (!is) throw IoError("cannot open config file: " + args.config_path);
        std::ostringstream buf;
        buf << is.rdbuf();
        text = buf.str();
    }
    text = apply_overrides(text, args.overrides);
    RunConfig cfg = parse_run_config(text);
    cfg.validate();
    set_max_threads(cfg.threads);
    return cfg;
}

FoldPlan::Fold select_fold(const RunConfig& cfg) {
    const std::vector<std::string> ids = list_scan_ids(cfg.dataset_root);
    if (ids.empty()) throw IoError("no scans (*.volume) under " + cfg.dataset_root);
    FoldPlan plan = make_folds(ids, cfg.folds.k, cfg.folds.validation_count, cfg.seed);
    if (cfg.folds.index >= plan.folds.size())
        throw ConfigError("folds.index " + std::to_string(cfg.folds.index) +
                          " out of range for k=" + std::to_string(cfg.folds.k));
    return plan.folds[cfg.folds.index];
}

int cmd_print_config(const CommonArgs& args) {
    std::cout << print_run_config(make_config(args));
    return 0;
}

int cmd_augment(const CommonArgs& args) {
    const RunConfig cfg = make_config(args);
    const std::string cache = cfg.effective_cache_dir();
    fs::create_directories(cache);

    const std::vector<std::string> ids = list_scan_ids(cfg.dataset_root);
    if (ids.empty()) throw IoError("no scans (*.volume) under " + cfg.dataset_root);

    std::vector<std::string> failures;
    std::size_t written = 0, skipped = 0;
    for (const auto& id : ids) {
        try {
            ScanRecord base = load_scan(cfg.dataset_root, id);
            if (!base.has_mask()) throw DomainError("mask file missing");
            for (double angle : kAugmentAngles) {
                std::ostringstream name;
                name << id << ".rot" << static_cast<int>(angle);
                const fs::path vol = fs::path(cache) / (name.str() + ".volume");
                const fs::path msk = fs::path(cache) / (name.str() + ".mask");
                if (fs::exists(vol) && fs::exists(msk)) {
                    ++skipped;
                    continue;
                }
                ScanRecord rotated = rotate_scan(base, angle);
                rotated.scan_id = name.str();
                save_scan(rotated, cache);
                ++written;
            }
        } catch (const std::exception& e) {
            failures.push_back(id + ": " + e.what());
        }
    }
    std::cout << "augment: " << written << " records written, " << skipped
              << " already cached under " << cache << "\n";
    if (!failures.empty()) {
        std::cerr << "augment: " << failures.size() << " scan(s) failed:\n";
        for (const auto& f : failures) std::cerr << "  " << f << "\n";
        return 1;
    }
    return 0;
}

template <typename T>
int run_train(const RunConfig& cfg, bool resume) {
    const FoldPlan::Fold fold = select_fold(cfg);
    TrainOptions opts;
    opts.checkpoint_dir =
        (fs::path(cfg.output_dir) / ("fold" + std::to_string(cfg.folds.index))).string();
    opts.resume = resume;
    const std::string cache = cfg.effective_cache_dir();
    if (cfg.train.augment && fs::is_directory(cache)) opts.augment_cache_dir = cache;
    opts.on_epoch = [](const EpochRecord& r) {
        std::cout << "epoch " << r.epoch << "  train_loss=" << std::setprecision(8)
                  << r.train_loss_sum << "  val_loss=" << r.val_loss
                  << "  val_dice=" << std::setprecision(4) << r.val_dice << "  ("
                  << std::setprecision(3) << r.seconds << " s)\n";
    };

    TrainResult<T> res = train<T>(cfg.network, cfg.train, fold, cfg.dataset_root, opts);
    std::cout << "best epoch: " << res.log.best_epoch << " (checkpoint "
              << (fs::path(opts.checkpoint_dir) / "best.ckpt").string() << ")\n";
    return 0;
}

int cmd_train(const CommonArgs& args, bool resume) {
    const RunConfig cfg = make_config(args);
    return cfg.dtype == DType::f64 ? run_train<double>(cfg, resume)
                                   : run_train<float>(cfg, resume);
}

template <typename T>
int run_segment(const RunConfig& cfg, const std::string& checkpoint, const std::string& scan_id,
                bool use_crf, const std::string& overlay_dir) {
    Net3D2D<T> net = Net3D2D<T>::load_checkpoint(checkpoint, &cfg.network);
    const ScanRecord scan = load_scan(cfg.dataset_root, scan_id);
    const CrfParams* crf = use_crf ? &cfg.crf : nullptr;
    SegmentationResult<T> res = segment_volume(net, scan, crf);

    fs::create_directories(cfg.output_dir);
    Volume out;
    out.header = scan.volume.header;
    out.header.dtype = DType::u8;
    out.header.modality = Modality::mask;
    out.data = tensor_cast<double>(res.mask);
    const std::string mask_path =
        (fs::path(cfg.output_dir) / (scan_id + ".pred.mask")).string();
    save_volume(out, mask_path);

    if (!overlay_dir.empty()) {
        fs::create_directories(overlay_dir);
        const std::size_t H = res.mask.extent(0), W = res.mask.extent(1),
                          D = res.mask.extent(2);
        for (std::size_t z = 0; z < D; ++z) {
            Tensor<double> slice({H, W});
            Tensor<std::uint8_t> pred({H, W});
            Tensor<std::uint8_t> truth({H, W});
            for (std::size_t i = 0; i < H * W; ++i) {
                slice[i] = scan.volume.data[i * D + z];
                pred[i] = res.mask[i * D + z];
                if (scan.has_mask()) truth[i] = scan.mask[i * D + z];
            }
            std::ostringstream name;
            name << scan_id << "_slice" << std::setw(4) << std::setfill('0') << z << ".pgm";
            write_overlay_pgm((fs::path(overlay_dir) / name.str()).string(), slice, pred,
                              scan.has_mask() ? &truth : nullptr);
        }
    }

    std::cout << report_table_header() << "\n" << report_table_row(res.report) << "\n";
    std::cout << res.report.machine_line() << "\n";
    std::cout << "mask written to " << mask_path << "\n";
    return 0;
}

int cmd_segment(const CommonArgs& args, const std::string& checkpoint,
                const std::string& scan_id, bool use_crf, const std::string& overlay_dir) {
    const RunConfig cfg = make_config(args);
    if (!fs::exists(checkpoint)) throw IoError("checkpoint not found: " + checkpoint);
    return checkpoint_dtype(checkpoint) == DType::f64
               ? run_segment<double>(cfg, checkpoint, scan_id, use_crf, overlay_dir)
               : run_segment<float>(cfg, checkpoint, scan_id, use_crf, overlay_dir);
}

template <typename T>
int run_eval(const RunConfig& cfg, const std::string& checkpoint, bool use_crf) {
    Net3D2D<T> net = Net3D2D<T>::load_checkpoint(checkpoint, &cfg.network);
    const FoldPlan::Fold fold = select_fold(cfg);
    const CrfParams* crf = use_crf ? &cfg.crf : nullptr;

    std::cout << report_table_header() << "\n";
    double dice_sum = 0.0;
    std::size_t dice_count = 0;
    std::vector<std::string> machine;
    for (const auto& id : fold.test_ids) {
        const ScanRecord scan = load_scan(cfg.dataset_root, id);
        SegmentationResult<T> res = segment_volume(net, scan, crf);
        std::cout << report_table_row(res.report) << "\n";
        machine.push_back(res.report.machine_line());
        const auto d = use_crf ? res.report.dice_post : res.report.dice_pre;
        if (d) {
            dice_sum += *d;
            ++dice_count;
        }
    }
    for (const auto& line : machine) std::cout << line << "\n";
    if (dice_count)
        std::cout << "mean dice over " << dice_count << " scan(s): " << std::setprecision(6)
                  << dice_sum / static_cast<double>(dice_count) << "\n";
    return 0;
}

int cmd_eval(const CommonArgs& args, const std::string& checkpoint, bool use_crf) {
    const RunConfig cfg = make_config(args);
    if (!fs::exists(checkpoint)) throw IoError("checkpoint not found: " + checkpoint);
    return checkpoint_dtype(checkpoint) == DType::f64 ? run_eval<double>(cfg, checkpoint, use_crf)
                                                      : run_eval<float>(cfg, checkpoint, use_crf);
}

int cmd_refine(const CommonArgs& args, const std::string& prob_path,
               const std::string& image_path, const std::string& output_path) {
    const RunConfig cfg = make_config(args);
    const Volume prob = load_volume(prob_path);
    const Volume image = load_volume(image_path);
    if (prob.data.shape() != image.data.shape())
        throw ConfigError("refine: probability and image volumes have different dims");

    const std::size_t H = prob.data.extent(0), W = prob.data.extent(1),
                      D = prob.data.extent(2);
    Volume out;
    out.header = image.header;
    out.header.dtype = DType::u8;
    out.header.modality = Modality::mask;
    out.data = Tensor<double>({H, W, D});

    for (std::size_t z = 0; z < D; ++z) {
        Tensor<double> pmap({2, H, W});
        Tensor<double> slice({H, W});
        for (std::size_t i = 0; i < H * W; ++i) {
            const double p1 = prob.data[i * D + z];
            pmap[H * W + i] = p1;
            pmap[i] = 1.0 - p1;
            slice[i] = image.data[i * D + z];
        }
        const Tensor<std::uint8_t> refined = refine(pmap, slice, cfg.crf);
        for (std::size_t i = 0; i < H * W; ++i) out.data[i * D + z] = refined[i];
    }
    save_volume(out, output_path);
    std::cout << "refined mask written to " << output_path << "\n";
    return 0;
}

int cmd_gradcheck(const CommonArgs& args) {
    const RunConfig cfg = make_config(args);
    const std::vector<GradCheckReport> reports = run_gradcheck_suite(cfg.seed);
    bool all_pass = true;
    std::string worst_op;
    double worst = -1.0;
    for (const auto& r : reports) {
        std::cout << std::left << std::setw(24) << r.op << " max_rel_error="
                  << std::scientific << std::setprecision(3) << r.max_rel_error << "  "
                  << (r.pass ? "PASS" : "FAIL") << "\n"
                  << std::defaultfloat;
        all_pass &= r.pass;
        if (r.max_rel_error > worst) {
            worst = r.max_rel_error;
            worst_op = r.op;
        }
    }
    if (!all_pass) {
        std::cerr << "gradcheck failed; worst offender: " << worst_op << " (" << std::scientific
                  << worst << ")\n";
        return 1;
    }
    std::cout << "all " << reports.size() << " operations within " << kGradCheckTolerance
              << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"voxelseg - volumetric CT segmentation pipeline"};
    app.require_subcommand(1);
    app.fallthrough();

    CommonArgs common;
    app.add_option("--config", common.config_path, "JSON config file");
    app.add_option("--set", common.overrides,
                   "override a config value, e.g. --set train.max_epochs=5");

    auto* print_cmd = app.add_subcommand("print-config", "print the merged configuration");

    auto* augment_cmd =
        app.add_subcommand("augment", "materialize the 7 rotations of every scan");

    auto* train_cmd = app.add_subcommand("train", "train on the configured fold");
    bool resume = false;
    train_cmd->add_flag("--resume", resume, "continue from the latest checkpoint");

    auto* segment_cmd = app.add_subcommand("segment", "segment one scan with a checkpoint");
    std::string checkpoint, scan_id, overlay_dir;
    bool use_crf = false;
    segment_cmd->add_option("--checkpoint", checkpoint, "network checkpoint")->required();
    segment_cmd->add_option("--scan", scan_id, "scan id under dataset_root")->required();
    segment_cmd->add_flag("--crf", use_crf, "apply boundary-band CRF refinement");
    segment_cmd->add_option("--overlay-dir", overlay_dir, "write per-slice overlay pixmaps");

    auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on the fold's test set");
    std::string eval_checkpoint;
    bool eval_crf = false;
    eval_cmd->add_option("--checkpoint", eval_checkpoint, "network checkpoint")->required();
    eval_cmd->add_flag("--crf", eval_crf, "apply boundary-band CRF refinement");

    auto* refine_cmd =
        app.add_subcommand("refine", "CRF-refine a probability volume against an image volume");
    std::string prob_path, image_path, refine_out;
    refine_cmd->add_option("--prob", prob_path, "foreground-probability volume file")
        ->required();
    refine_cmd->add_option("--image", image_path, "intensity volume file")->required();
    refine_cmd->add_option("--output", refine_out, "output mask volume file")->required();

    auto* gradcheck_cmd =
        app.add_subcommand("gradcheck", "finite-difference check of every differentiable op");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        if (print_cmd->parsed()) return cmd_print_config(common);
        if (augment_cmd->parsed()) return cmd_augment(common);
        if (train_cmd->parsed()) return cmd_train(common, resume);
        if (segment_cmd->parsed())
            return cmd_segment(common, checkpoint, scan_id, use_crf, overlay_dir);
        if (eval_cmd->parsed()) return cmd_eval(common, eval_checkpoint, eval_crf);
        if (refine_cmd->parsed()) return cmd_refine(common, prob_path, image_path, refine_out);
        if (gradcheck_cmd->parsed()) return cmd_gradcheck(common);
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const IoError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 2;
}
