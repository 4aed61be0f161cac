#pragma once

#include <cmath>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dataset.hpp"
#include "error.hpp"
#include "metrics.hpp"
#include "network.hpp"
#include "random.hpp"
#include "tsv.hpp"

namespace skipseg {

struct TrainConfig {
    int epochs = 100;
    int batch_size = 8;
    double learning_rate = 0.05;
    double momentum = 0.9;
    std::uint64_t seed = 1;
    double weight_decay = 0.0;
    int eval_every = 1;  // validation cadence in epochs; 0 evaluates only after the last epoch

    void validate() const {
        if (epochs < 0) throw ConfigError("epochs must be >= 0");
        if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
        if (!(learning_rate >= 0.0)) throw ConfigError("learning_rate must be >= 0");
        if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must lie in [0, 1)");
        if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be >= 0");
        if (eval_every < 0) throw ConfigError("eval_every must be >= 0");
    }
};

/// Velocity buffers, one per parameter tensor in declaration order.
template <typename T>
struct SgdState {
    std::vector<std::vector<T>> weight_velocity;
    std::vector<std::vector<T>> bias_velocity;
};

/// v <- momentum * v + g + weight_decay * w;  w <- w - lr * v
template <typename T>
void sgd_momentum_step(std::span<T> params, std::span<const T> grads, std::vector<T>& velocity, const TrainConfig& cfg) {
    if (grads.size() != params.size()) throw ConfigError("sgd step: gradient and parameter sizes differ");
    if (velocity.size() != params.size()) velocity.assign(params.size(), T{0});
    const T mu = static_cast<T>(cfg.momentum);
    const T lr = static_cast<T>(cfg.learning_rate);
    const T wd = static_cast<T>(cfg.weight_decay);
    for (std::size_t i = 0; i < params.size(); ++i) {
        velocity[i] = mu * velocity[i] + grads[i] + wd * params[i];
        params[i] -= lr * velocity[i];
    }
}

template <typename T>
void apply_update(Network<T>& net, const ParameterGrads<T>& grads, SgdState<T>& state, const TrainConfig& cfg) {
    auto params = net.parameters();
    if (grads.entries.size() != params.size()) throw ConfigError("apply_update: gradients do not match network");
    state.weight_velocity.resize(params.size());
    state.bias_velocity.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (grads.entries[i].name != params[i].name) throw ConfigError("apply_update: gradient order mismatch at " + params[i].name);
        sgd_momentum_step<T>(params[i].params->weights.data(), grads.entries[i].weight_grad.data(), state.weight_velocity[i], cfg);
        sgd_momentum_step<T>(params[i].params->bias, grads.entries[i].bias_grad, state.bias_velocity[i], cfg);
    }
}

/// Box-wise labels: the mask is divided into grid_size x grid_size boxes and each cell takes
/// the majority label of its box. Ties go to the smallest label, ignored pixels do not vote,
/// and a box of only ignored pixels stays ignored.
inline LabelImage label_to_grid(const LabelImage& mask, int grid_size, int ignore_value = kIgnoreLabel) {
    if (grid_size < 1 || mask.height < grid_size || mask.width < grid_size) {
        throw ConfigError("mask " + std::to_string(mask.width) + "x" + std::to_string(mask.height) +
                          " is smaller than the " + std::to_string(grid_size) + "x" + std::to_string(grid_size) + " grid");
    }
    LabelImage grid(grid_size, grid_size, ignore_value);
    std::map<int, int> votes;
    for (int gy = 0; gy < grid_size; ++gy) {
        const int y0 = static_cast<int>(static_cast<long long>(gy) * mask.height / grid_size);
        const int y1 = static_cast<int>(static_cast<long long>(gy + 1) * mask.height / grid_size);
        for (int gx = 0; gx < grid_size; ++gx) {
            const int x0 = static_cast<int>(static_cast<long long>(gx) * mask.width / grid_size);
            const int x1 = static_cast<int>(static_cast<long long>(gx + 1) * mask.width / grid_size);
            votes.clear();
            for (int y = y0; y < y1; ++y) {
                for (int x = x0; x < x1; ++x) {
                    const int l = mask.at(y, x);
                    if (l != ignore_value) ++votes[l];
                }
            }
            int best = ignore_value, best_count = 0;
            for (const auto& [label, count] : votes) {  // ascending label order
                if (count > best_count) {
                    best = label;
                    best_count = count;
                }
            }
            grid.at(gy, gx) = best;
        }
    }
    return grid;
}

/// Images and grid labels of a dataset, ready for batching.
template <typename T>
struct PreparedSet {
    std::vector<Tensor<T>> images;
    std::vector<LabelImage> grids;
    int n_classes = 0;

    [[nodiscard]] std::size_t size() const { return images.size(); }
};

template <typename T>
PreparedSet<T> prepare(const Dataset& ds, int grid_size) {
    PreparedSet<T> out;
    out.n_classes = ds.n_classes;
    for (const auto& s : ds.samples) {
        out.images.push_back(s.image.template cast<T>());
        out.grids.push_back(label_to_grid(s.mask, grid_size));
    }
    return out;
}

template <typename T>
std::pair<Tensor<T>, LabelGrid> make_batch(const PreparedSet<T>& set, std::span<const std::size_t> indices) {
    const Shape one = set.images.at(indices.front()).shape();
    Tensor<T> images({static_cast<int>(indices.size()), one.channels, one.height, one.width});
    const auto& g0 = set.grids.at(indices.front());
    LabelGrid labels(static_cast<int>(indices.size()), g0.height, g0.width);
    const std::size_t per_image = static_cast<std::size_t>(one.channels) * one.height * one.width;
    const std::size_t per_grid = static_cast<std::size_t>(g0.height) * g0.width;
    for (std::size_t b = 0; b < indices.size(); ++b) {
        const auto& img = set.images[indices[b]];
        require_same_shape(img.shape(), one, "make_batch image");
        std::copy(img.data().begin(), img.data().end(), images.data().begin() + static_cast<std::ptrdiff_t>(b * per_image));
        const auto& g = set.grids[indices[b]];
        std::copy(g.labels.begin(), g.labels.end(), labels.labels.begin() + static_cast<std::ptrdiff_t>(b * per_grid));
    }
    return {std::move(images), std::move(labels)};
}

/// Predicted grid labels for every sample, evaluated in batches.
template <typename T>
ConfusionMatrix evaluate(const Network<T>& net, const PreparedSet<T>& set, int batch_size = 16) {
    ConfusionMatrix cm(net.config().n_classes);
    std::vector<std::size_t> idx;
    for (std::size_t start = 0; start < set.size(); start += static_cast<std::size_t>(batch_size)) {
        idx.clear();
        for (std::size_t i = start; i < std::min(set.size(), start + batch_size); ++i) idx.push_back(i);
        auto [images, labels] = make_batch(set, idx);
        const auto bundle = net.forward(images);
        cm.accumulate(argmax_labels(bundle.merged), labels);
    }
    return cm;
}

struct EpochRecord {
    int epoch = 0;
    double mean_loss = 0.0;
    std::optional<MetricSummary> validation;
};

struct TrainLog {
    std::vector<EpochRecord> epochs;
    std::vector<double> step_losses;

    [[nodiscard]] std::string to_tsv() const {
        std::string out = tsv::row({"epoch", "mean_loss", "pixel_acc", "mean_acc", "mean_iou"});
        for (const auto& e : epochs) {
            const double nan = std::nan("");
            const auto& v = e.validation;
            out += tsv::row({std::to_string(e.epoch), tsv::num(e.mean_loss), tsv::num(v ? v->pixel_acc : nan),
                             tsv::num(v ? v->mean_acc : nan), tsv::num(v ? v->mean_iou : nan)});
        }
        return out;
    }

    friend bool operator==(const TrainLog& a, const TrainLog& b) { return a.to_tsv() == b.to_tsv() && a.step_losses == b.step_losses; }
};

/// Minibatch SGD with momentum. Batches follow a seeded shuffle per epoch; validation metrics
/// are computed on `val` (when non-empty) every `eval_every` epochs and after the last one.
template <typename T>
TrainLog train(Network<T>& net, const PreparedSet<T>& data, const TrainConfig& cfg, const PreparedSet<T>* val = nullptr) {
    cfg.validate();
    if (data.size() == 0) throw ConfigError("training set is empty");
    for (const auto& g : data.grids) {
        if (g.height != net.config().grid_size || g.width != net.config().grid_size) {
            throw ConfigError("training label grids must be " + std::to_string(net.config().grid_size) + " cells wide");
        }
    }
    TrainLog log;
    SgdState<T> state;
    Rng order_rng(derive_seed(cfg.seed, 2));
    std::vector<std::size_t> order(data.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        order_rng.shuffle(order.begin(), order.end());
        double loss_sum = 0.0;
        long long cells = 0;
        int batch_no = 0;
        for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size), ++batch_no) {
            const auto end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
            auto [images, labels] = make_batch(data, std::span<const std::size_t>(order).subspan(start, end - start));
            const auto bundle = net.forward(images);
            const auto loss = softmax_cross_entropy(bundle.merged, labels);
            if (!std::isfinite(static_cast<double>(loss.loss))) throw DivergenceError(epoch, batch_no);
            log.step_losses.push_back(static_cast<double>(loss.loss));
            loss_sum += static_cast<double>(loss.loss) * loss.counted_cells;
            cells += loss.counted_cells;
            const auto grads = net.backward(bundle, loss.logit_grad);
            apply_update(net, grads, state, cfg);
        }
        EpochRecord rec{epoch, cells ? loss_sum / static_cast<double>(cells) : 0.0, std::nullopt};
        const bool due = epoch == cfg.epochs || (cfg.eval_every > 0 && epoch % cfg.eval_every == 0);
        if (val && val->size() > 0 && due) rec.validation = summarize(evaluate(net, *val));
        log.epochs.push_back(rec);
    }
    return log;
}

}  // namespace skipseg
