#pragma once

// Plain convolutional backbone with numbered stages, a 1x1 class head on the last stage,
// and at most one skip branch (n x n conv -> ReLU -> 1x1 class map) tapped from an
// intermediate stage. Both class maps are upsampled to the prediction grid and summed.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "error.hpp"
#include "ops.hpp"
#include "random.hpp"
#include "tensor.hpp"

namespace skipseg {

struct NetworkConfig {
    int input_size = 32;
    std::vector<int> stage_channels{8, 16, 16, 32};
    int convs_per_stage = 1;
    int n_classes = 21;
    int grid_size = 67;
    std::vector<int> tap_points;  // empty: every stage whose features fit inside the grid
    int skip_channels = 0;        // width of h; 0 uses the tap's channel count
    UpsampleMode upsample_mode = UpsampleMode::bilinear;

    [[nodiscard]] int stages() const { return static_cast<int>(stage_channels.size()); }
    [[nodiscard]] int stage_size(int stage) const { return input_size >> stage; }

    /// Tap points after defaulting.
    [[nodiscard]] std::vector<int> effective_taps() const {
        if (!tap_points.empty()) return tap_points;
        std::vector<int> taps;
        for (int s = 0; s < stages(); ++s) {
            if (stage_size(s) <= grid_size) taps.push_back(s);
        }
        return taps;
    }

    void validate() const {
        if (stages() < 2) throw ConfigError("network needs at least 2 stages");
        for (int c : stage_channels) {
            if (c < 1) throw ConfigError("stage channel counts must be positive");
        }
        if (convs_per_stage < 1) throw ConfigError("convs_per_stage must be >= 1");
        if (input_size < 1 || input_size % (1 << (stages() - 1)) != 0) {
            throw ConfigError("input_size " + std::to_string(input_size) + " must be divisible by 2^" +
                              std::to_string(stages() - 1));
        }
        if (n_classes < 2) throw ConfigError("n_classes must be >= 2 (one object class plus background)");
        if (grid_size < stage_size(stages() - 1)) {
            throw ConfigError("grid_size " + std::to_string(grid_size) + " is smaller than the top feature map " +
                              std::to_string(stage_size(stages() - 1)));
        }
        if (skip_channels < 0) throw ConfigError("skip_channels must be >= 0");
        int prev = -1;
        for (int t : tap_points) {
            if (t <= prev) throw ConfigError("tap points must be strictly increasing");
            if (t < 0 || t >= stages()) {
                throw ConfigError("tap point " + std::to_string(t) + " references a missing stage");
            }
            if (stage_size(t) > grid_size) {
                throw ConfigError("tap point " + std::to_string(t) + " has " + std::to_string(stage_size(t)) +
                                  "x" + std::to_string(stage_size(t)) + " features, larger than the grid");
            }
            prev = t;
        }
    }

    friend bool operator==(const NetworkConfig&, const NetworkConfig&) = default;
};

struct SkipSpec {
    std::optional<int> tap_index;  // nullopt: baseline without a skip connection
    int filter_size = 3;

    [[nodiscard]] bool active() const { return tap_index.has_value(); }

    void validate() const {
        if (filter_size != 3 && filter_size != 5 && filter_size != 7) {
            throw ConfigError("skip filter size must be 3, 5 or 7, got " + std::to_string(filter_size));
        }
    }

    [[nodiscard]] std::string tap_label() const { return tap_index ? std::to_string(*tap_index) : "none"; }

    friend bool operator==(const SkipSpec&, const SkipSpec&) = default;
};

/// Activations of one forward pass, kept for the backward pass and for heatmap export.
template <typename T>
struct FeatureBundle {
    Tensor<T> images;
    std::vector<std::vector<Tensor<T>>> conv_inputs;  // [stage][conv]
    std::vector<std::vector<Tensor<T>>> preacts;      // [stage][conv]
    std::vector<Tensor<T>> features;                  // f_i, post-ReLU output of stage i
    std::optional<int> tap;
    Tensor<T> skip_preact;
    Tensor<T> skip_hidden;  // h
    Tensor<T> z_skip;
    Tensor<T> z_top;
    Tensor<T> merged;  // (batch, n_classes, grid, grid)
};

template <typename T>
struct NamedParam {
    std::string name;
    ConvParams<T>* params;
};

template <typename T>
struct NamedGrad {
    std::string name;
    Tensor<T> weight_grad;
    std::vector<T> bias_grad;
};

template <typename T>
struct ParameterGrads {
    std::vector<NamedGrad<T>> entries;  // declaration order

    [[nodiscard]] const NamedGrad<T>* find(const std::string& name) const {
        for (const auto& e : entries) {
            if (e.name == name) return &e;
        }
        return nullptr;
    }
};

template <typename T>
class Network {
public:
    Network(NetworkConfig config, SkipSpec skip) : config_(std::move(config)), skip_(skip) {
        config_.validate();
        skip_.validate();
        const auto taps = config_.effective_taps();
        if (skip_.tap_index && std::find(taps.begin(), taps.end(), *skip_.tap_index) == taps.end()) {
            throw ConfigError("skip tap " + std::to_string(*skip_.tap_index) + " is not one of the tap points");
        }
        int in = 3;
        stages_.resize(config_.stage_channels.size());
        for (std::size_t s = 0; s < stages_.size(); ++s) {
            for (int j = 0; j < config_.convs_per_stage; ++j) {
                stages_[s].push_back(ConvParams<T>::same(in, config_.stage_channels[s], 3));
                in = config_.stage_channels[s];
            }
        }
        top_head_ = ConvParams<T>::same(in, config_.n_classes, 1);
        if (skip_.tap_index) {
            const int tap_c = config_.stage_channels[*skip_.tap_index];
            skip_conv_ = ConvParams<T>::same(tap_c, hidden_channels(), skip_.filter_size);
            skip_head_ = ConvParams<T>::same(hidden_channels(), config_.n_classes, 1);
        }
    }

    [[nodiscard]] const NetworkConfig& config() const { return config_; }
    [[nodiscard]] const SkipSpec& skip() const { return skip_; }

    [[nodiscard]] int hidden_channels() const {
        if (!skip_.tap_index) return 0;
        return config_.skip_channels > 0 ? config_.skip_channels : config_.stage_channels[*skip_.tap_index];
    }

    /// Parameters in declaration order (the checkpoint and optimizer order).
    std::vector<NamedParam<T>> parameters() {
        std::vector<NamedParam<T>> out;
        for (auto& st : stages_) {
            for (auto& p : st) out.push_back({"", &p});
        }
        out.push_back({"", &top_head_});
        if (skip_conv_) {
            out.push_back({"", &*skip_conv_});
            out.push_back({"", &*skip_head_});
        }
        const auto names = parameter_names();
        for (std::size_t i = 0; i < out.size(); ++i) out[i].name = names[i];
        return out;
    }

    [[nodiscard]] std::vector<std::string> parameter_names() const {
        std::vector<std::string> names;
        for (std::size_t s = 0; s < stages_.size(); ++s) {
            for (std::size_t j = 0; j < stages_[s].size(); ++j) {
                names.push_back("stage" + std::to_string(s) + ".conv" + std::to_string(j));
            }
        }
        names.push_back("top.head");
        if (skip_conv_) {
            names.push_back("skip.conv");
            names.push_back("skip.head");
        }
        return names;
    }

    [[nodiscard]] std::size_t parameter_count() const {
        std::size_t n = top_head_.parameter_count();
        for (const auto& st : stages_) {
            for (const auto& p : st) n += p.parameter_count();
        }
        if (skip_conv_) n += skip_conv_->parameter_count() + skip_head_->parameter_count();
        return n;
    }

    /// Gaussian weights with std sqrt(2 / fan_in), zero biases. Backbone and skip branch draw
    /// from separate streams so arms with the same seed share backbone weights.
    void initialize(std::uint64_t seed) {
        Rng backbone(derive_seed(seed, 0));
        Rng branch(derive_seed(seed, 1));
        for (auto& np : parameters()) {
            Rng& rng = np.name.starts_with("skip.") ? branch : backbone;
            auto& w = np.params->weights;
            const double fan_in = static_cast<double>(w.channels()) * w.height() * w.width();
            const double stddev = std::sqrt(2.0 / fan_in);
            for (auto& v : w.data()) v = static_cast<T>(rng.normal() * stddev);
            std::fill(np.params->bias.begin(), np.params->bias.end(), T{0});
        }
    }

    void zero_skip_branch() {
        for (auto* p : {skip_conv_ ? &*skip_conv_ : nullptr, skip_head_ ? &*skip_head_ : nullptr}) {
            if (!p) continue;
            p->weights.fill(T{0});
            std::fill(p->bias.begin(), p->bias.end(), T{0});
        }
    }

    /// Copies stage and top-head parameters from a network with the same backbone config.
    void copy_backbone_from(const Network& other) {
        if (!(other.config_ == config_)) throw ConfigError("copy_backbone_from: configs differ");
        stages_ = other.stages_;
        top_head_ = other.top_head_;
    }

    [[nodiscard]] FeatureBundle<T> forward(const Tensor<T>& images) const {
        const int S = config_.input_size;
        if (images.channels() != 3 || images.height() != S || images.width() != S) {
            throw ConfigError("network expects images of shape (N,3," + std::to_string(S) + "," +
                              std::to_string(S) + "), got " + images.shape().str());
        }
        FeatureBundle<T> b;
        b.images = images;
        b.tap = skip_.tap_index;
        b.conv_inputs.resize(stages_.size());
        b.preacts.resize(stages_.size());
        const Tensor<T>* x = &images;
        Tensor<T> pooled;
        for (std::size_t s = 0; s < stages_.size(); ++s) {
            if (s > 0) {
                pooled = downsample2x(b.features.back());
                x = &pooled;
            }
            Tensor<T> cur = *x;
            for (const auto& conv : stages_[s]) {
                b.conv_inputs[s].push_back(cur);
                b.preacts[s].push_back(conv2d_forward(cur, conv));
                cur = relu(b.preacts[s].back());
            }
            b.features.push_back(std::move(cur));
        }

        const int G = config_.grid_size;
        b.z_top = conv2d_forward(b.features.back(), top_head_);
        b.merged = upsample(b.z_top, G, G, config_.upsample_mode);
        if (skip_.tap_index) {
            b.skip_preact = conv2d_forward(b.features[*skip_.tap_index], *skip_conv_);
            b.skip_hidden = relu(b.skip_preact);
            b.z_skip = conv2d_forward(b.skip_hidden, *skip_head_);
            b.merged = add(b.merged, upsample(b.z_skip, G, G, config_.upsample_mode));
        }
        return b;
    }

    [[nodiscard]] ParameterGrads<T> backward(const FeatureBundle<T>& b, const Tensor<T>& logit_grad) const {
        if (b.tap != skip_.tap_index || b.features.size() != stages_.size()) {
            throw ConfigError("feature bundle was not produced by this network");
        }
        require_same_shape(logit_grad.shape(), b.merged.shape(), "network backward logit_grad");

        const auto [g_top_up, g_skip_up] = add_backward(logit_grad);
        std::vector<Tensor<T>> g_features(stages_.size());
        std::map<std::string, ConvGrads<T>> grads;

        const Tensor<T>& top_in = b.features.back();
        auto g_z_top = upsample_backward(g_top_up, b.z_top.height(), b.z_top.width(), config_.upsample_mode);
        auto top = conv2d_backward(top_in, top_head_, g_z_top);
        g_features.back() = std::move(top.input_grad);
        grads["top.head"] = std::move(top);

        if (skip_.tap_index) {
            const int tap = *skip_.tap_index;
            auto g_z_skip = upsample_backward(g_skip_up, b.z_skip.height(), b.z_skip.width(), config_.upsample_mode);
            auto head = conv2d_backward(b.skip_hidden, *skip_head_, g_z_skip);
            auto g_pre = relu_backward(b.skip_preact, head.input_grad);
            auto conv = conv2d_backward(b.features[tap], *skip_conv_, g_pre);
            g_features[tap] = g_features[tap].size() ? add(g_features[tap], conv.input_grad) : conv.input_grad;
            grads["skip.head"] = std::move(head);
            grads["skip.conv"] = std::move(conv);
        }

        for (int s = static_cast<int>(stages_.size()) - 1; s >= 0; --s) {
            Tensor<T> g = g_features[s].size() ? std::move(g_features[s]) : Tensor<T>(b.features[s].shape());
            for (int j = static_cast<int>(stages_[s].size()) - 1; j >= 0; --j) {
                auto g_pre = relu_backward(b.preacts[s][j], g);
                auto cg = conv2d_backward(b.conv_inputs[s][j], stages_[s][j], g_pre);
                g = std::move(cg.input_grad);
                grads["stage" + std::to_string(s) + ".conv" + std::to_string(j)] = std::move(cg);
            }
            if (s > 0) {
                auto g_prev = downsample2x_backward(b.features[s - 1], g);
                g_features[s - 1] = g_features[s - 1].size() ? add(g_features[s - 1], g_prev) : std::move(g_prev);
            }
        }

        ParameterGrads<T> out;
        for (const auto& name : parameter_names()) {
            auto& cg = grads.at(name);
            out.entries.push_back({name, std::move(cg.weight_grad), std::move(cg.bias_grad)});
        }
        return out;
    }

private:
    NetworkConfig config_;
    SkipSpec skip_;
    std::vector<std::vector<ConvParams<T>>> stages_;
    ConvParams<T> top_head_;
    std::optional<ConvParams<T>> skip_conv_;
    std::optional<ConvParams<T>> skip_head_;
};

template <typename T = float>
Network<T> build(const NetworkConfig& config, const SkipSpec& skip, std::uint64_t seed) {
    Network<T> net(config, skip);
    net.initialize(seed);
    return net;
}

/// Class maps for heatmap export: z_top and merged always, z_skip when a skip is active.
template <typename T>
std::map<std::string, Tensor<T>> extract_classmaps(const FeatureBundle<T>& b) {
    std::map<std::string, Tensor<T>> maps{{"z_top", b.z_top}, {"merged", b.merged}};
    if (b.tap) maps.emplace("z_skip", b.z_skip);
    return maps;
}

/// Parameters added by a skip branch with filter n on a tap of `tap_channels` and hidden width `hidden`.
inline std::size_t skip_parameter_count(int n, int tap_channels, int hidden, int n_classes) {
    return static_cast<std::size_t>(n) * n * tap_channels * hidden + hidden +
           static_cast<std::size_t>(hidden) * n_classes + n_classes;
}

/// Network with the same parameter values in another precision.
template <typename U, typename T>
Network<U> convert(Network<T>& net) {
    Network<U> out(net.config(), net.skip());
    auto src = net.parameters();
    auto dst = out.parameters();
    for (std::size_t i = 0; i < src.size(); ++i) {
        dst[i].params->weights = src[i].params->weights.template cast<U>();
        dst[i].params->bias.assign(src[i].params->bias.begin(), src[i].params->bias.end());
    }
    return out;
}

}  // namespace skipseg
