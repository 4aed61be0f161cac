// skipseg: command-line harness for single-skip-connection segmentation experiments.
//
// Exit codes: 0 success, 1 numerical-check failure, 2 I/O or configuration error,
// 3 checkpoint incompatibility.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "skipseg/ablation.hpp"
#include "skipseg/checkpoint.hpp"
#include "skipseg/dataset.hpp"
#include "skipseg/gradcheck.hpp"
#include "skipseg/metrics.hpp"
#include "skipseg/network.hpp"
#include "skipseg/trainer.hpp"

namespace fs = std::filesystem;
using namespace skipseg;

namespace {

constexpr int kExitNumeric = 1;
constexpr int kExitIo = 2;
constexpr int kExitCheckpoint = 3;

struct NetFlags {
    int input_size = 0;  // 0: image size of the dataset
    std::vector<int> stage_channels{8, 16, 16, 32};
    int convs_per_stage = 1;
    int classes = 0;  // 0: inferred from the dataset masks
    int grid = 67;
    std::vector<int> tap_points;
    int skip_channels = 0;
    std::string upsample = "bilinear";

    NetworkConfig resolve(const Dataset& ds) const {
        NetworkConfig cfg;
        cfg.input_size = input_size > 0 ? input_size : (ds.empty() ? 0 : ds.samples.front().image.height());
        cfg.stage_channels = stage_channels;
        cfg.convs_per_stage = convs_per_stage;
        cfg.n_classes = classes > 0 ? classes : ds.n_classes;
        cfg.grid_size = grid;
        cfg.tap_points = tap_points;
        cfg.skip_channels = skip_channels;
        if (upsample == "bilinear") cfg.upsample_mode = UpsampleMode::bilinear;
        else if (upsample == "nearest") cfg.upsample_mode = UpsampleMode::nearest;
        else throw ConfigError("--upsample must be 'bilinear' or 'nearest'");
        cfg.validate();
        return cfg;
    }
};

void add_net_flags(CLI::App* cmd, NetFlags& f) {
    cmd->add_option("--input-size", f.input_size, "Network input size (default: dataset image size)");
    cmd->add_option("--stages", f.stage_channels, "Channel count per backbone stage")->delimiter(',');
    cmd->add_option("--convs-per-stage", f.convs_per_stage, "3x3 convolutions per stage");
    cmd->add_option("--classes", f.classes, "Class count including background (default: inferred)");
    cmd->add_option("--grid", f.grid, "Prediction grid size");
    cmd->add_option("--tap-points", f.tap_points, "Stages eligible for a skip connection")->delimiter(',');
    cmd->add_option("--skip-channels", f.skip_channels, "Width of the skip intermediate (0: tap width)");
    cmd->add_option("--upsample", f.upsample, "bilinear or nearest");
}

void add_train_flags(CLI::App* cmd, TrainConfig& t) {
    cmd->add_option("--epochs", t.epochs, "Training epochs");
    cmd->add_option("--batch-size", t.batch_size, "Minibatch size");
    cmd->add_option("--lr", t.learning_rate, "Learning rate");
    cmd->add_option("--momentum", t.momentum, "SGD momentum");
    cmd->add_option("--weight-decay", t.weight_decay, "L2 weight decay");
}

void write_text(const std::string& path, const std::string& text) {
    if (path.empty() || path == "-") {
        std::cout << text;
        return;
    }
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError(path + ": cannot write");
    out << text;
    if (!out) throw DataError(path + ": write failed");
}

std::string metrics_tsv(const ConfusionMatrix& cm) {
    std::vector<std::string> header{"pixel_acc", "mean_acc", "mean_iou"};
    const auto m = summarize(cm);
    std::vector<std::string> values{tsv::num(m.pixel_acc), tsv::num(m.mean_acc), tsv::num(m.mean_iou)};
    const auto ious = per_class_iou(cm);
    for (std::size_t c = 0; c < ious.size(); ++c) {
        header.push_back("iou_" + std::to_string(c));
        values.push_back(tsv::num(ious[c]));
    }
    return tsv::row(header) + tsv::row(values);
}

struct GenDataArgs {
    std::uint64_t seed = 1;
    int count = 64;
    int classes = 3;
    int size = 134;
    int val_count = -1;
    int min_shapes = 1;
    int max_shapes = 3;
    double hue_jitter = 0.0;
    std::string out;
};

int cmd_gen_data(const GenDataArgs& a) {
    GenerateOptions opt;
    opt.min_shapes = a.min_shapes;
    opt.max_shapes = a.max_shapes;
    opt.hue_jitter = a.hue_jitter;
    opt.val_count = a.val_count >= 0 ? std::min(a.val_count, a.count) : a.count / 3;
    const auto ds = generate(a.seed, a.count, a.classes, a.size, opt);
    std::cout << save_dataset(ds, a.out) << "\n";
    return 0;
}

struct TrainArgs {
    std::string data;
    std::string out;
    std::string log;
    std::uint64_t seed = 1;
    std::optional<int> tap;
    int filter = 3;
    NetFlags net;
    TrainConfig train;
};

int cmd_train(TrainArgs& a) {
    const auto ds = load_dataset(a.data, a.net.classes);
    const auto cfg = a.net.resolve(ds);
    const SkipSpec skip{a.tap, a.filter};
    auto net = build<float>(cfg, skip, a.seed);
    a.train.seed = a.seed;
    const auto train_set = prepare<float>(ds.subset("train"), cfg.grid_size);
    const auto val_set = prepare<float>(ds.subset("val"), cfg.grid_size);
    TrainLog log;
    if (a.train.epochs > 0) {
        try {
            log = train(net, train_set, a.train, &val_set);
        } catch (const DivergenceError& e) {
            std::cerr << "training diverged: " << e.what() << "\n";
            return kExitNumeric;
        }
    }
    save_checkpoint(net, a.out);
    write_text(a.log.empty() ? a.out + ".log.tsv" : a.log, log.to_tsv());
    std::cout << a.out << "\n";
    return 0;
}

struct EvaluateArgs {
    std::string checkpoint;
    std::string data;
    std::string split = "val";
    std::string out;
};

int cmd_evaluate(const EvaluateArgs& a) {
    auto net = load_checkpoint<float>(a.checkpoint);
    auto ds = load_dataset(a.data, net.config().n_classes);
    if (a.split != "all") ds = ds.subset(a.split);
    if (ds.empty()) throw DataError(a.data + ": split '" + a.split + "' is empty");
    const auto cm = evaluate(net, prepare<float>(ds, net.config().grid_size));
    write_text(a.out, metrics_tsv(cm));
    return 0;
}

struct AblateArgs {
    std::string data;
    std::string out;
    std::string timing;
    std::vector<int> taps;
    std::vector<int> filters{3};
    std::vector<std::uint64_t> seeds{1};
    std::string checkpoint_dir;
    int jobs = 1;
    NetFlags net;
    TrainConfig train;
};

int cmd_ablate(AblateArgs& a) {
    const auto ds = load_dataset(a.data, a.net.classes);
    AblationSettings s;
    s.network = a.net.resolve(ds);
    s.train = a.train;
    s.taps = a.taps;
    s.filter_sizes = a.filters;
    s.seeds = a.seeds;
    s.jobs = a.jobs;
    s.checkpoint_dir = a.checkpoint_dir;
    const auto report = run_ablation(s, ds.subset("train"), ds.subset("val"), [](const AblationRow& r) {
        std::cerr << "arm " << r.arm_label() << " seed " << r.seed << ": "
                  << (r.diverged ? std::string("diverged") : "mIoU " + tsv::num(r.metrics.mean_iou)) << " ("
                  << tsv::num(r.wall_time) << " s)\n";
    });
    write_text(a.out, report.to_tsv());
    if (!a.timing.empty()) write_text(a.timing, report.timing_tsv());
    return 0;
}

struct ExportArgs {
    std::string checkpoint;
    std::string data;
    std::vector<std::string> ids;
    std::string out;
};

int cmd_export_heatmaps(ExportArgs& a) {
    const auto net = load_checkpoint<float>(a.checkpoint);
    if (a.ids.empty()) {
        for (const auto& s : load_dataset(a.data, net.config().n_classes).subset("val").samples) a.ids.push_back(s.id);
    }
    const auto result = export_heatmaps(net, a.data, a.ids, a.out);
    for (const auto& id : result.missing) std::cerr << "warning: sample '" << id << "' not found, skipped\n";
    const auto done = a.ids.size() - result.missing.size();
    std::cout << "exported " << result.written.size() << " heatmaps for " << done << " samples\n";
    return done > 0 ? 0 : kExitIo;
}

struct GradcheckArgs {
    std::uint64_t seed = 7;
    std::string inject_fault;
    std::string out;
};

int cmd_gradcheck(const GradcheckArgs& a) {
    GradcheckOptions opt{a.seed, a.inject_fault};
    const auto report = run_gradcheck(opt);
    write_text(a.out, report.to_tsv());
    for (const auto& e : report.entries) {
        if (!e.passed) std::cerr << "gradient check failed: " << e.op << "\n";
    }
    return report.passed() ? 0 : kExitNumeric;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Single skip-connection segmentation lab"};
    app.set_config("--config", "", "Config file (TOML/INI); explicit flags override it");
    app.require_subcommand(1);

    GenDataArgs gen;
    auto* gen_cmd = app.add_subcommand("gen-data", "Generate a synthetic shapes dataset");
    gen_cmd->add_option("--seed", gen.seed);
    gen_cmd->add_option("--count", gen.count, "Number of samples");
    gen_cmd->add_option("--classes", gen.classes, "Object classes (background is added)");
    gen_cmd->add_option("--size", gen.size, "Image side in pixels");
    gen_cmd->add_option("--val-count", gen.val_count, "Samples in the val split (default: count/3)");
    gen_cmd->add_option("--min-shapes", gen.min_shapes);
    gen_cmd->add_option("--max-shapes", gen.max_shapes, "0 yields background-only images");
    gen_cmd->add_option("--hue-jitter", gen.hue_jitter, "Random hue offset per shape, 0 keeps hue tied to class");
    gen_cmd->add_option("--out", gen.out, "Dataset directory")->required();

    TrainArgs tr;
    auto* train_cmd = app.add_subcommand("train", "Train one network and write a checkpoint");
    train_cmd->add_option("--data", tr.data)->required();
    train_cmd->add_option("--out", tr.out, "Checkpoint path")->required();
    train_cmd->add_option("--log", tr.log, "TrainLog TSV (default: <out>.log.tsv)");
    train_cmd->add_option("--seed", tr.seed);
    train_cmd->add_option("--tap", tr.tap, "Skip tap stage (omit for no connection)");
    train_cmd->add_option("--filter", tr.filter, "Skip filter size: 3, 5 or 7");
    add_net_flags(train_cmd, tr.net);
    add_train_flags(train_cmd, tr.train);

    EvaluateArgs ev;
    auto* eval_cmd = app.add_subcommand("evaluate", "Evaluate a checkpoint");
    eval_cmd->add_option("--checkpoint", ev.checkpoint)->required();
    eval_cmd->add_option("--data", ev.data)->required();
    eval_cmd->add_option("--split", ev.split, "train, val or all");
    eval_cmd->add_option("--out", ev.out, "Metrics TSV (default: stdout)");

    AblateArgs ab;
    auto* ablate_cmd = app.add_subcommand("ablate", "Sweep skip connections and filter sizes");
    ablate_cmd->add_option("--data", ab.data)->required();
    ablate_cmd->add_option("--out", ab.out, "Report TSV (default: stdout)");
    ablate_cmd->add_option("--timing", ab.timing, "Per-arm wall time TSV");
    ablate_cmd->add_option("--taps", ab.taps, "Tap stages to sweep")->delimiter(',');
    ablate_cmd->add_option("--filters", ab.filters, "Skip filter sizes to sweep")->delimiter(',');
    ablate_cmd->add_option("--seeds", ab.seeds, "Seeds per arm")->delimiter(',');
    ablate_cmd->add_option("--checkpoint-dir", ab.checkpoint_dir, "Save each trained arm here");
    ablate_cmd->add_option("--jobs", ab.jobs, "Arms trained in parallel");
    add_net_flags(ablate_cmd, ab.net);
    add_train_flags(ablate_cmd, ab.train);

    ExportArgs ex;
    auto* export_cmd = app.add_subcommand("export-heatmaps", "Write per-class heatmaps as PGM");
    export_cmd->add_option("--checkpoint", ex.checkpoint)->required();
    export_cmd->add_option("--data", ex.data)->required();
    export_cmd->add_option("--ids", ex.ids, "Sample ids (default: the val split)")->delimiter(',');
    export_cmd->add_option("--out", ex.out)->required();

    GradcheckArgs gc;
    auto* grad_cmd = app.add_subcommand("gradcheck", "Finite-difference check of every backward pass");
    grad_cmd->add_option("--seed", gc.seed);
    grad_cmd->add_option("--inject-fault", gc.inject_fault, "Corrupt the named op's gradient (tests the gate)");
    grad_cmd->add_option("--out", gc.out, "Report TSV (default: stdout)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kExitIo;
    }

    try {
        if (*gen_cmd) return cmd_gen_data(gen);
        if (*train_cmd) return cmd_train(tr);
        if (*eval_cmd) return cmd_evaluate(ev);
        if (*ablate_cmd) return cmd_ablate(ab);
        if (*export_cmd) return cmd_export_heatmaps(ex);
        if (*grad_cmd) return cmd_gradcheck(gc);
    } catch (const VersionError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitCheckpoint;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitIo;
    }
    return kExitIo;
}
