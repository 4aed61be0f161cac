#pragma once

// Ablation sweep over skip connections and filter sizes, and heatmap export.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <functional>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "checkpoint.hpp"
#include "dataset.hpp"
#include "metrics.hpp"
#include "network.hpp"
#include "trainer.hpp"
#include "tsv.hpp"

namespace skipseg {

struct AblationRow {
    SkipSpec skip;
    std::uint64_t seed = 0;
    MetricSummary metrics;
    bool diverged = false;
    double wall_time = 0.0;

    [[nodiscard]] std::string tap_label() const { return skip.tap_label(); }
    [[nodiscard]] std::string filter_label() const { return skip.active() ? std::to_string(skip.filter_size) : "NA"; }
    [[nodiscard]] std::string arm_label() const {
        return skip.active() ? "tap" + tap_label() + "_n" + filter_label() : "none";
    }
};

struct AblationSettings {
    NetworkConfig network;
    TrainConfig train;
    std::vector<int> taps;
    std::vector<int> filter_sizes{3};
    std::vector<std::uint64_t> seeds{1};
    int jobs = 1;
    std::string checkpoint_dir;  // when set, each arm's trained network is saved here
};

struct AblationReport {
    std::vector<AblationRow> rows;  // sorted by mean_iou, descending

    /// Arm with the highest median mean IoU over seeds (diverged runs count as 0).
    [[nodiscard]] std::optional<std::pair<SkipSpec, double>> best_arm(bool skip_only = false) const {
        std::optional<std::pair<SkipSpec, double>> best;
        for (const auto& [spec, median] : arm_medians()) {
            if (skip_only && !spec.active()) continue;
            if (!best || median > best->second) best = {spec, median};
        }
        return best;
    }

    /// (arm, median mean IoU) in first-appearance order of the sweep.
    [[nodiscard]] std::vector<std::pair<SkipSpec, double>> arm_medians() const {
        std::vector<SkipSpec> arms;
        for (const auto& r : sweep_order_) {
            if (std::find(arms.begin(), arms.end(), r) == arms.end()) arms.push_back(r);
        }
        std::vector<std::pair<SkipSpec, double>> out;
        for (const auto& arm : arms) {
            std::vector<double> v;
            for (const auto& r : rows) {
                if (r.skip == arm) v.push_back(r.diverged ? 0.0 : r.metrics.mean_iou);
            }
            std::sort(v.begin(), v.end());
            const std::size_t n = v.size();
            out.emplace_back(arm, n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]));
        }
        return out;
    }

    /// Deterministic report: timings are kept out so repeated runs byte-match.
    [[nodiscard]] std::string to_tsv() const {
        std::string out = tsv::row({"tap", "filter_size", "seed", "pixel_acc", "mean_acc", "mean_iou", "status"});
        for (const auto& r : rows) {
            const double nan = std::nan("");
            out += tsv::row({r.tap_label(), r.filter_label(), std::to_string(r.seed),
                             tsv::num(r.diverged ? nan : r.metrics.pixel_acc), tsv::num(r.diverged ? nan : r.metrics.mean_acc),
                             tsv::num(r.diverged ? nan : r.metrics.mean_iou), r.diverged ? "diverged" : "ok"});
        }
        if (const auto best = best_arm()) {
            const AblationRow probe{best->first, 0, {}, false, 0.0};
            out += tsv::row({"# best_connection", probe.tap_label(), probe.filter_label(), "median_mean_iou",
                             tsv::num(best->second)});
        }
        return out;
    }

    [[nodiscard]] std::string timing_tsv() const {
        std::string out = tsv::row({"tap", "filter_size", "seed", "wall_time"});
        for (const auto& r : rows) out += tsv::row({r.tap_label(), r.filter_label(), std::to_string(r.seed), tsv::num(r.wall_time)});
        return out;
    }

    std::vector<SkipSpec> sweep_order_;
};

inline std::string checkpoint_name(const SkipSpec& skip, std::uint64_t seed) {
    const AblationRow probe{skip, seed, {}, false, 0.0};
    return probe.arm_label() + "_seed" + std::to_string(seed) + ".sksg";
}

/// Arms in sweep order: the baseline first, then every tap crossed with every filter size.
inline std::vector<SkipSpec> sweep_arms(const std::vector<int>& taps, const std::vector<int>& filter_sizes) {
    std::vector<SkipSpec> arms{SkipSpec{}};
    for (int t : taps) {
        for (int n : filter_sizes) arms.push_back(SkipSpec{t, n});
    }
    return arms;
}

inline AblationRow run_arm(const AblationSettings& s, const SkipSpec& skip, std::uint64_t seed,
                           const PreparedSet<float>& train_set, const PreparedSet<float>& val_set) {
    const auto start = std::chrono::steady_clock::now();
    AblationRow row{skip, seed, {}, false, 0.0};
    auto net = build<float>(s.network, skip, seed);
    TrainConfig tc = s.train;
    tc.seed = seed;
    tc.eval_every = 0;
    try {
        train(net, train_set, tc);
        row.metrics = summarize(evaluate(net, val_set));
    } catch (const DivergenceError&) {
        row.diverged = true;
    }
    if (!s.checkpoint_dir.empty() && !row.diverged) {
        save_checkpoint(net, (std::filesystem::path(s.checkpoint_dir) / checkpoint_name(skip, seed)).string());
    }
    row.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return row;
}

/// Trains and evaluates every (arm, seed). Arms are independent and run on up to `jobs` threads.
inline AblationReport run_ablation(const AblationSettings& s, const Dataset& train_data, const Dataset& val_data,
                                   const std::function<void(const AblationRow&)>& on_row = {}) {
    s.network.validate();
    s.train.validate();
    for (int n : s.filter_sizes) SkipSpec{0, n}.validate();
    if (s.seeds.empty()) throw ConfigError("ablation needs at least one seed");
    if (train_data.empty()) throw ConfigError("ablation needs a non-empty train split");
    if (val_data.empty()) throw ConfigError("ablation needs a non-empty val split");
    if (!s.checkpoint_dir.empty()) {
        std::error_code ec;
        std::filesystem::create_directories(s.checkpoint_dir, ec);
        if (ec) throw DataError(s.checkpoint_dir + ": cannot create checkpoint directory");
    }
    const auto train_set = prepare<float>(train_data, s.network.grid_size);
    const auto val_set = prepare<float>(val_data, s.network.grid_size);

    struct Job {
        SkipSpec skip;
        std::uint64_t seed;
    };
    std::vector<Job> jobs;
    const auto arms = sweep_arms(s.taps, s.filter_sizes);
    for (const auto& arm : arms) {
        for (auto seed : s.seeds) jobs.push_back({arm, seed});
    }
    for (const auto& j : jobs) Network<float>(s.network, j.skip);  // surface config errors before training

    std::vector<AblationRow> rows(jobs.size());
    std::atomic<std::size_t> next{0};
    std::mutex report_mutex;
    auto worker = [&] {
        for (std::size_t i = next++; i < jobs.size(); i = next++) {
            rows[i] = run_arm(s, jobs[i].skip, jobs[i].seed, train_set, val_set);
            if (on_row) {
                std::lock_guard lock(report_mutex);
                on_row(rows[i]);
            }
        }
    };
    const int n_threads = std::max(1, std::min<int>(s.jobs, static_cast<int>(jobs.size())));
    if (n_threads == 1) {
        worker();
    } else {
        std::vector<std::jthread> pool;
        for (int t = 0; t < n_threads; ++t) pool.emplace_back(worker);
    }

    AblationReport report;
    report.sweep_order_ = arms;
    std::vector<std::size_t> order(rows.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        const auto key = [&](std::size_t i) { return rows[i].diverged ? -1.0 : rows[i].metrics.mean_iou; };
        return key(a) > key(b);
    });
    for (auto i : order) report.rows.push_back(rows[i]);
    return report;
}

// ---- heatmaps ----

/// Per-channel min-max scaling of one image's class map to 0..255; a constant channel maps to 128.
inline std::vector<std::uint8_t> normalize_channel(const Tensor<float>& maps, int n, int c) {
    const int H = maps.height(), W = maps.width();
    const float* p = maps.plane(n, c);
    const auto [lo, hi] = std::minmax_element(p, p + static_cast<std::ptrdiff_t>(H) * W);
    std::vector<std::uint8_t> out(static_cast<std::size_t>(H) * W, 128);
    if (*hi > *lo) {
        const double range = static_cast<double>(*hi) - *lo;
        for (std::size_t i = 0; i < out.size(); ++i) {
            out[i] = static_cast<std::uint8_t>(std::lround(255.0 * (static_cast<double>(p[i]) - *lo) / range));
        }
    }
    return out;
}

struct HeatmapExportResult {
    std::vector<std::string> written;
    std::vector<std::string> missing;
};

/// Writes `<id>_<class>.pgm` for every class channel of the merged logits, `<id>_argmax.pgm`, and
/// when a skip is active, the z_skip channels (upsampled to the grid) under `skip/`.
inline void export_sample_heatmaps(const Network<float>& net, const Sample& sample, const std::string& out_dir,
                                   std::vector<std::string>& written) {
    namespace fs = std::filesystem;
    const auto bundle = net.forward(sample.image);
    const int C = net.config().n_classes, G = net.config().grid_size;
    for (int c = 0; c < C; ++c) {
        const auto path = (fs::path(out_dir) / (sample.id + "_" + std::to_string(c) + ".pgm")).string();
        write_pgm(path, G, G, normalize_channel(bundle.merged, 0, c));
        written.push_back(path);
    }
    const auto pred = argmax_labels(bundle.merged);
    std::vector<std::uint8_t> labels(pred.labels.begin(), pred.labels.end());
    const auto argmax_path = (fs::path(out_dir) / (sample.id + "_argmax.pgm")).string();
    write_pgm(argmax_path, G, G, labels);
    written.push_back(argmax_path);
    if (bundle.tap) {
        const auto skip_maps = upsample(bundle.z_skip, G, G, net.config().upsample_mode);
        fs::create_directories(fs::path(out_dir) / "skip");
        for (int c = 0; c < C; ++c) {
            const auto path = (fs::path(out_dir) / "skip" / (sample.id + "_" + std::to_string(c) + ".pgm")).string();
            write_pgm(path, G, G, normalize_channel(skip_maps, 0, c));
            written.push_back(path);
        }
    }
}

inline HeatmapExportResult export_heatmaps(const Network<float>& net, const std::string& data_root,
                                           const std::vector<std::string>& ids, const std::string& out_dir) {
    std::error_code ec;
    std::filesystem::create_directories(out_dir, ec);
    if (ec) throw DataError(out_dir + ": cannot create output directory");
    HeatmapExportResult result;
    for (const auto& id : ids) {
        const auto paths = sample_paths(data_root, id);
        if (!std::filesystem::exists(paths.image) || !std::filesystem::exists(paths.mask)) {
            result.missing.push_back(id);
            continue;
        }
        auto sample = load_sample(paths.image, paths.mask);
        sample.id = id;
        export_sample_heatmaps(net, sample, out_dir, result.written);
    }
    return result;
}

}  // namespace skipseg
