#pragma once

// Central finite-difference checks of every backward pass, run in double precision.

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "network.hpp"
#include "ops.hpp"
#include "random.hpp"
#include "tsv.hpp"

namespace skipseg {

inline constexpr double kFiniteDifferenceStep = 1e-5;
inline constexpr double kGradTolerance64 = 1e-5;
inline constexpr double kGradTolerance32 = 1e-3;
// Gradients smaller than this are compared in absolute terms.
inline constexpr double kRelativeErrorFloor = 1e-4;
inline constexpr double kKinkMargin = 1e-4;

inline double relative_error(double analytic, double numeric) {
    return std::fabs(analytic - numeric) / std::max({std::fabs(analytic), std::fabs(numeric), kRelativeErrorFloor});
}

/// Central differences of `objective` with respect to every entry of `values`.
inline std::vector<double> numeric_gradient(std::span<double> values, const std::function<double()>& objective,
                                            double step = kFiniteDifferenceStep) {
    std::vector<double> out(values.size());
    for (std::size_t i = 0; i < values.size(); ++i) {
        const double keep = values[i];
        values[i] = keep + step;
        const double up = objective();
        values[i] = keep - step;
        const double down = objective();
        values[i] = keep;
        out[i] = (up - down) / (2.0 * step);
    }
    return out;
}

inline double max_relative_error(std::span<const double> analytic, std::span<const double> numeric) {
    double worst = 0.0;
    for (std::size_t i = 0; i < analytic.size(); ++i) worst = std::max(worst, relative_error(analytic[i], numeric[i]));
    return worst;
}

/// Uniform [-1, 1] tensor whose entries all keep at least kKinkMargin distance from zero.
inline Tensor<double> random_tensor(Shape shape, Rng& rng, bool avoid_zero = false) {
    Tensor<double> t(shape);
    for (auto& v : t.data()) {
        do {
            v = rng.uniform(-1.0, 1.0);
        } while (avoid_zero && std::fabs(v) < kKinkMargin);
    }
    return t;
}

/// Weighted sum <weights, t>, a generic scalar objective for checking tensor-valued ops.
inline double project(const Tensor<double>& t, const Tensor<double>& weights) {
    double s = 0.0;
    for (std::size_t i = 0; i < t.size(); ++i) s += t[i] * weights[i];
    return s;
}

struct GradcheckEntry {
    std::string op;
    double max_rel_error = 0.0;
    bool passed = false;
};

struct GradcheckReport {
    std::vector<GradcheckEntry> entries;
    double tolerance = kGradTolerance64;

    [[nodiscard]] bool passed() const {
        return std::all_of(entries.begin(), entries.end(), [](const auto& e) { return e.passed; });
    }
    [[nodiscard]] std::string to_tsv() const {
        std::string out = tsv::row({"op", "max_rel_error", "status"});
        for (const auto& e : entries) out += tsv::row({e.op, tsv::num(e.max_rel_error), e.passed ? "pass" : "FAIL"});
        return out;
    }
};

struct GradcheckOptions {
    std::uint64_t seed = 7;
    std::string inject_fault;  // op whose analytic gradient is deliberately perturbed (testing the gate)
};

namespace detail {

inline void maybe_corrupt(const GradcheckOptions& opt, const std::string& op, std::span<double> grad) {
    if (opt.inject_fault == op && !grad.empty()) grad[grad.size() / 2] += 0.5 + std::fabs(grad[grad.size() / 2]);
}

inline bool pool_has_near_tie(const Tensor<double>& x) {
    for (int n = 0; n < x.batch(); ++n) {
        for (int c = 0; c < x.channels(); ++c) {
            for (int y = 0; y + 1 < x.height(); y += 2) {
                for (int xx = 0; xx + 1 < x.width(); xx += 2) {
                    double v[4] = {x(n, c, y, xx), x(n, c, y, xx + 1), x(n, c, y + 1, xx), x(n, c, y + 1, xx + 1)};
                    std::sort(v, v + 4);
                    if (v[3] - v[2] < kKinkMargin) return true;
                }
            }
        }
    }
    return false;
}

template <typename T>
bool bundle_near_kink(const FeatureBundle<T>& b) {
    auto near_zero = [](const Tensor<T>& t) {
        return std::any_of(t.data().begin(), t.data().end(), [](T v) { return std::fabs(static_cast<double>(v)) < kKinkMargin; });
    };
    for (const auto& st : b.preacts) {
        for (const auto& p : st) {
            if (near_zero(p)) return true;
        }
    }
    for (std::size_t s = 0; s + 1 < b.features.size(); ++s) {
        if (pool_has_near_tie(b.features[s].template cast<double>())) return true;
    }
    return b.tap && near_zero(b.skip_preact);
}

}  // namespace detail

/// conv2d: input, weight and bias gradients on a (1,2,5,5) input with a 3x3 kernel.
inline GradcheckEntry check_conv2d(const GradcheckOptions& opt) {
    Rng rng(derive_seed(opt.seed, 10));
    auto input = random_tensor({1, 2, 5, 5}, rng);
    ConvParams<double> p = ConvParams<double>::same(2, 3, 3);
    p.weights = random_tensor(p.weights.shape(), rng);
    for (auto& b : p.bias) b = rng.uniform(-1.0, 1.0);
    const auto proj = random_tensor({1, 3, 5, 5}, rng);
    auto g = conv2d_backward(input, p, proj);
    detail::maybe_corrupt(opt, "conv2d", g.weight_grad.data());
    auto f = [&] { return project(conv2d_forward(input, p), proj); };
    double err = max_relative_error(g.input_grad.data(), numeric_gradient(input.data(), f));
    err = std::max(err, max_relative_error(g.weight_grad.data(), numeric_gradient(p.weights.data(), f)));
    err = std::max(err, max_relative_error(g.bias_grad, numeric_gradient(p.bias, f)));
    return {"conv2d", err, err <= kGradTolerance64};
}

inline GradcheckEntry check_relu(const GradcheckOptions& opt) {
    Rng rng(derive_seed(opt.seed, 11));
    auto input = random_tensor({2, 3, 4, 4}, rng, true);
    const auto proj = random_tensor(input.shape(), rng);
    auto g = relu_backward(input, proj);
    detail::maybe_corrupt(opt, "relu", g.data());
    const double err = max_relative_error(g.data(), numeric_gradient(input.data(), [&] { return project(relu(input), proj); }));
    return {"relu", err, err <= kGradTolerance64};
}

inline GradcheckEntry check_downsample2x(const GradcheckOptions& opt) {
    Rng rng(derive_seed(opt.seed, 12));
    auto input = random_tensor({1, 2, 8, 8}, rng);
    while (detail::pool_has_near_tie(input)) input = random_tensor({1, 2, 8, 8}, rng);
    const auto proj = random_tensor({1, 2, 4, 4}, rng);
    auto g = downsample2x_backward(input, proj);
    detail::maybe_corrupt(opt, "downsample2x", g.data());
    const double err =
        max_relative_error(g.data(), numeric_gradient(input.data(), [&] { return project(downsample2x(input), proj); }));
    return {"downsample2x", err, err <= kGradTolerance64};
}

inline GradcheckEntry check_upsample(const GradcheckOptions& opt, UpsampleMode mode) {
    const std::string name = mode == UpsampleMode::bilinear ? "upsample_bilinear" : "upsample_nearest";
    Rng rng(derive_seed(opt.seed, mode == UpsampleMode::bilinear ? 13 : 14));
    auto input = random_tensor({1, 1, 33, 33}, rng);
    const auto proj = random_tensor({1, 1, 67, 67}, rng);
    auto g = upsample_backward(proj, 33, 33, mode);
    detail::maybe_corrupt(opt, name, g.data());
    const double err = max_relative_error(
        g.data(), numeric_gradient(input.data(), [&] { return project(upsample(input, 67, 67, mode), proj); }));
    return {name, err, err <= kGradTolerance64};
}

inline GradcheckEntry check_add(const GradcheckOptions& opt) {
    Rng rng(derive_seed(opt.seed, 15));
    auto a = random_tensor({1, 2, 3, 3}, rng);
    auto b = random_tensor({1, 2, 3, 3}, rng);
    const auto proj = random_tensor(a.shape(), rng);
    auto [ga, gb] = add_backward(proj);
    detail::maybe_corrupt(opt, "add", ga.data());
    auto f = [&] { return project(add(a, b), proj); };
    const double err = std::max(max_relative_error(ga.data(), numeric_gradient(a.data(), f)),
                                max_relative_error(gb.data(), numeric_gradient(b.data(), f)));
    return {"add", err, err <= kGradTolerance64};
}

inline GradcheckEntry check_softmax_cross_entropy(const GradcheckOptions& opt) {
    Rng rng(derive_seed(opt.seed, 16));
    auto logits = random_tensor({1, 2, 3, 3}, rng);
    LabelGrid labels(1, 3, 3);
    for (auto& l : labels.labels) l = rng.uniform_int(0, 1);
    labels.labels[4] = kIgnoreLabel;
    auto r = softmax_cross_entropy(logits, labels);
    detail::maybe_corrupt(opt, "softmax_cross_entropy", r.logit_grad.data());
    const double err = max_relative_error(
        r.logit_grad.data(), numeric_gradient(logits.data(), [&] { return softmax_cross_entropy(logits, labels).loss; }));
    return {"softmax_cross_entropy", err, err <= kGradTolerance64};
}

/// The tiny network every whole-network check uses: 2 stages, 8x8 input, 2 classes.
inline NetworkConfig tiny_network_config() {
    NetworkConfig cfg;
    cfg.input_size = 8;
    cfg.stage_channels = {3, 4};
    cfg.convs_per_stage = 1;
    cfg.n_classes = 2;
    cfg.grid_size = 8;
    return cfg;
}

/// Whole-network check over every parameter, with loss = softmax cross-entropy of the merged logits.
inline GradcheckEntry check_network(const GradcheckOptions& opt, const SkipSpec& skip, const std::string& name) {
    const auto cfg = tiny_network_config();
    for (std::uint64_t attempt = 0;; ++attempt) {
        Rng rng(derive_seed(opt.seed, 100 + attempt));
        auto net = build<double>(cfg, skip, derive_seed(opt.seed, 200 + attempt));
        for (auto& np : net.parameters()) {
            for (auto& b : np.params->bias) b = rng.uniform(-0.1, 0.1);
        }
        const auto images = random_tensor({2, 3, cfg.input_size, cfg.input_size}, rng);
        LabelGrid labels(2, cfg.grid_size, cfg.grid_size);
        for (auto& l : labels.labels) l = rng.uniform_int(0, cfg.n_classes - 1);

        const auto bundle = net.forward(images);
        if (detail::bundle_near_kink(bundle) && attempt < 50) continue;
        const auto loss = softmax_cross_entropy(bundle.merged, labels);
        auto grads = net.backward(bundle, loss.logit_grad);
        auto objective = [&] { return softmax_cross_entropy(net.forward(images).merged, labels).loss; };

        double err = 0.0;
        auto params = net.parameters();
        for (std::size_t i = 0; i < params.size(); ++i) {
            auto& g = grads.entries[i];
            detail::maybe_corrupt(opt, name, g.weight_grad.data());
            err = std::max(err, max_relative_error(g.weight_grad.data(), numeric_gradient(params[i].params->weights.data(), objective)));
            err = std::max(err, max_relative_error(g.bias_grad, numeric_gradient(params[i].params->bias, objective)));
        }
        return {name, err, err <= kGradTolerance64};
    }
}

inline GradcheckReport run_gradcheck(const GradcheckOptions& opt = {}) {
    GradcheckReport report;
    report.entries.push_back(check_conv2d(opt));
    report.entries.push_back(check_relu(opt));
    report.entries.push_back(check_downsample2x(opt));
    report.entries.push_back(check_upsample(opt, UpsampleMode::bilinear));
    report.entries.push_back(check_upsample(opt, UpsampleMode::nearest));
    report.entries.push_back(check_add(opt));
    report.entries.push_back(check_softmax_cross_entropy(opt));
    report.entries.push_back(check_network(opt, SkipSpec{}, "network_baseline"));
    report.entries.push_back(check_network(opt, SkipSpec{0, 3}, "network_skip"));
    return report;
}

}  // namespace skipseg
