#pragma once

// Differentiable tensor operations. Every forward op has a matching backward that
// returns gradients with respect to its inputs; backward passes are hand-composed.

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "error.hpp"
#include "tensor.hpp"

namespace skipseg {

template <typename T>
struct ConvParams {
    Tensor<T> weights;  // (out_channels, in_channels, k, k)
    std::vector<T> bias;
    int stride = 1;
    int padding = 0;

    [[nodiscard]] int out_channels() const { return weights.batch(); }
    [[nodiscard]] int in_channels() const { return weights.channels(); }
    [[nodiscard]] int kernel() const { return weights.height(); }
    [[nodiscard]] std::size_t parameter_count() const { return weights.size() + bias.size(); }

    /// Zero-initialized "same" convolution.
    static ConvParams same(int in_channels, int out_channels, int k) {
        ConvParams p;
        p.weights = Tensor<T>({out_channels, in_channels, k, k});
        p.bias.assign(static_cast<std::size_t>(out_channels), T{0});
        p.stride = 1;
        p.padding = (k - 1) / 2;
        return p;
    }
};

template <typename T>
struct ConvGrads {
    Tensor<T> input_grad;
    Tensor<T> weight_grad;
    std::vector<T> bias_grad;
};

enum class UpsampleMode { nearest, bilinear };

namespace detail {

inline int conv_out_size(int in, int k, int pad, int stride) { return (in + 2 * pad - k) / stride + 1; }

template <typename T>
void validate_conv(const Shape& in, const ConvParams<T>& p) {
    const Shape& w = p.weights.shape();
    if (w.height != w.width || w.height % 2 == 0) {
        throw ConfigError("convolution kernel must be square with odd size, got weights " + w.str());
    }
    if (p.bias.size() != static_cast<std::size_t>(w.batch)) {
        throw ConfigError("convolution bias length " + std::to_string(p.bias.size()) +
                          " does not match out_channels of weights " + w.str());
    }
    if (p.stride < 1 || p.padding < 0) {
        throw ConfigError("convolution stride must be >= 1 and padding >= 0");
    }
    if (in.channels != w.channels) {
        throw ConfigError("convolution input " + in.str() + " does not match weights " + w.str());
    }
    if (in.height + 2 * p.padding < w.height || in.width + 2 * p.padding < w.width) {
        throw ConfigError("convolution input " + in.str() + " smaller than kernel " + w.str() +
                          " after padding");
    }
}

// Range of output columns whose input column ox*stride - pad + k lies in [0, in).
inline void valid_range(int out, int in, int stride, int offset, int& lo, int& hi) {
    lo = 0;
    while (lo < out && lo * stride + offset < 0) ++lo;
    hi = out;
    while (hi > lo && (hi - 1) * stride + offset >= in) --hi;
}

}  // namespace detail

template <typename T>
Tensor<T> conv2d_forward(const Tensor<T>& input, const ConvParams<T>& params) {
    detail::validate_conv(input.shape(), params);
    const int N = input.batch(), C = input.channels(), H = input.height(), W = input.width();
    const int O = params.out_channels(), K = params.kernel(), S = params.stride, P = params.padding;
    const int OH = detail::conv_out_size(H, K, P, S), OW = detail::conv_out_size(W, K, P, S);
    Tensor<T> out({N, O, OH, OW});

    for (int n = 0; n < N; ++n) {
        for (int o = 0; o < O; ++o) {
            T* dst = out.plane(n, o);
            std::fill(dst, dst + static_cast<std::ptrdiff_t>(OH) * OW, params.bias[o]);
            for (int c = 0; c < C; ++c) {
                const T* src = input.plane(n, c);
                const T* w = params.weights.plane(o, c);
                for (int ky = 0; ky < K; ++ky) {
                    int y_lo, y_hi;
                    detail::valid_range(OH, H, S, ky - P, y_lo, y_hi);
                    for (int kx = 0; kx < K; ++kx) {
                        const T wv = w[ky * K + kx];
                        int x_lo, x_hi;
                        detail::valid_range(OW, W, S, kx - P, x_lo, x_hi);
                        for (int oy = y_lo; oy < y_hi; ++oy) {
                            const T* row = src + static_cast<std::ptrdiff_t>(oy * S + ky - P) * W + (kx - P);
                            T* drow = dst + static_cast<std::ptrdiff_t>(oy) * OW;
                            if (S == 1) {
                                for (int ox = x_lo; ox < x_hi; ++ox) drow[ox] += wv * row[ox];
                            } else {
                                for (int ox = x_lo; ox < x_hi; ++ox) drow[ox] += wv * row[ox * S];
                            }
                        }
                    }
                }
            }
        }
    }
    return out;
}

template <typename T>
ConvGrads<T> conv2d_backward(const Tensor<T>& input, const ConvParams<T>& params,
                             const Tensor<T>& upstream_grad) {
    detail::validate_conv(input.shape(), params);
    const int N = input.batch(), C = input.channels(), H = input.height(), W = input.width();
    const int O = params.out_channels(), K = params.kernel(), S = params.stride, P = params.padding;
    const int OH = detail::conv_out_size(H, K, P, S), OW = detail::conv_out_size(W, K, P, S);
    require_same_shape(upstream_grad.shape(), Shape{N, O, OH, OW}, "conv2d_backward upstream_grad");

    ConvGrads<T> g{Tensor<T>(input.shape()), Tensor<T>(params.weights.shape()),
                   std::vector<T>(static_cast<std::size_t>(O), T{0})};

    for (int n = 0; n < N; ++n) {
        for (int o = 0; o < O; ++o) {
            const T* up = upstream_grad.plane(n, o);
            T bsum{0};
            for (int i = 0; i < OH * OW; ++i) bsum += up[i];
            g.bias_grad[o] += bsum;
            for (int c = 0; c < C; ++c) {
                const T* src = input.plane(n, c);
                T* isrc = g.input_grad.plane(n, c);
                const T* w = params.weights.plane(o, c);
                T* gw = g.weight_grad.plane(o, c);
                for (int ky = 0; ky < K; ++ky) {
                    int y_lo, y_hi;
                    detail::valid_range(OH, H, S, ky - P, y_lo, y_hi);
                    for (int kx = 0; kx < K; ++kx) {
                        const T wv = w[ky * K + kx];
                        int x_lo, x_hi;
                        detail::valid_range(OW, W, S, kx - P, x_lo, x_hi);
                        T acc{0};
                        for (int oy = y_lo; oy < y_hi; ++oy) {
                            const std::ptrdiff_t off = static_cast<std::ptrdiff_t>(oy * S + ky - P) * W + (kx - P);
                            const T* row = src + off;
                            T* irow = isrc + off;
                            const T* urow = up + static_cast<std::ptrdiff_t>(oy) * OW;
                            for (int ox = x_lo; ox < x_hi; ++ox) {
                                acc += urow[ox] * row[ox * S];
                                irow[ox * S] += wv * urow[ox];
                            }
                        }
                        gw[ky * K + kx] += acc;
                    }
                }
            }
        }
    }
    return g;
}

template <typename T>
Tensor<T> relu(const Tensor<T>& input) {
    Tensor<T> out(input.shape());
    auto src = input.data();
    auto dst = out.data();
    for (std::size_t i = 0; i < src.size(); ++i) dst[i] = src[i] > T{0} ? src[i] : T{0};
    return out;
}

/// Passes upstream where input > 0; the subgradient at 0 is 0.
template <typename T>
Tensor<T> relu_backward(const Tensor<T>& input, const Tensor<T>& upstream_grad) {
    require_same_shape(input.shape(), upstream_grad.shape(), "relu_backward");
    Tensor<T> out(input.shape());
    auto src = input.data();
    auto up = upstream_grad.data();
    auto dst = out.data();
    for (std::size_t i = 0; i < src.size(); ++i) dst[i] = src[i] > T{0} ? up[i] : T{0};
    return out;
}

namespace detail {

inline void require_even(const Shape& s) {
    if (s.height % 2 != 0 || s.width % 2 != 0) {
        throw ConfigError("downsample2x needs even spatial dims, got " + s.str() +
                          "; pad the input to an even size");
    }
}

// Offset (0..3) of the window maximum; ties resolve to the top-left-most cell.
template <typename T>
int window_argmax(const T* src, int W, int y, int x) {
    const T v[4] = {src[y * W + x], src[y * W + x + 1], src[(y + 1) * W + x], src[(y + 1) * W + x + 1]};
    int best = 0;
    for (int i = 1; i < 4; ++i) {
        if (v[i] > v[best]) best = i;
    }
    return best;
}

}  // namespace detail

/// 2x2 max pooling with stride 2.
template <typename T>
Tensor<T> downsample2x(const Tensor<T>& input) {
    detail::require_even(input.shape());
    const int N = input.batch(), C = input.channels(), H = input.height(), W = input.width();
    Tensor<T> out({N, C, H / 2, W / 2});
    for (int n = 0; n < N; ++n) {
        for (int c = 0; c < C; ++c) {
            const T* src = input.plane(n, c);
            T* dst = out.plane(n, c);
            for (int y = 0; y < H / 2; ++y) {
                for (int x = 0; x < W / 2; ++x) {
                    const int a = detail::window_argmax(src, W, 2 * y, 2 * x);
                    dst[y * (W / 2) + x] = src[(2 * y + a / 2) * W + 2 * x + a % 2];
                }
            }
        }
    }
    return out;
}

template <typename T>
Tensor<T> downsample2x_backward(const Tensor<T>& input, const Tensor<T>& upstream_grad) {
    detail::require_even(input.shape());
    const int N = input.batch(), C = input.channels(), H = input.height(), W = input.width();
    require_same_shape(upstream_grad.shape(), Shape{N, C, H / 2, W / 2}, "downsample2x_backward");
    Tensor<T> out(input.shape());
    for (int n = 0; n < N; ++n) {
        for (int c = 0; c < C; ++c) {
            const T* src = input.plane(n, c);
            const T* up = upstream_grad.plane(n, c);
            T* dst = out.plane(n, c);
            for (int y = 0; y < H / 2; ++y) {
                for (int x = 0; x < W / 2; ++x) {
                    const int a = detail::window_argmax(src, W, 2 * y, 2 * x);
                    dst[(2 * y + a / 2) * W + 2 * x + a % 2] += up[y * (W / 2) + x];
                }
            }
        }
    }
    return out;
}

namespace detail {

// One interpolation tap along an axis: out index -> (i0, i1, weight of i1).
struct AxisTap {
    int i0;
    int i1;
    double w1;
};

inline std::vector<AxisTap> axis_taps(int in, int out, UpsampleMode mode) {
    std::vector<AxisTap> taps(static_cast<std::size_t>(out));
    for (int i = 0; i < out; ++i) {
        if (mode == UpsampleMode::nearest) {
            const int s = static_cast<int>(static_cast<long long>(i) * in / out);
            taps[i] = {s, s, 0.0};
        } else {
            // align_corners: endpoints of source and target coincide.
            const double src = out > 1 ? static_cast<double>(i) * (in - 1) / (out - 1) : 0.0;
            int i0 = static_cast<int>(std::floor(src));
            i0 = std::clamp(i0, 0, in - 1);
            const int i1 = std::min(i0 + 1, in - 1);
            taps[i] = {i0, i1, i1 == i0 ? 0.0 : src - i0};
        }
    }
    return taps;
}

inline void check_upsample(const Shape& s, int th, int tw) {
    if (th < s.height || tw < s.width) {
        throw ConfigError("upsample target " + std::to_string(th) + "x" + std::to_string(tw) +
                          " is smaller than source " + s.str());
    }
}

}  // namespace detail

template <typename T>
Tensor<T> upsample(const Tensor<T>& input, int target_h, int target_w, UpsampleMode mode) {
    detail::check_upsample(input.shape(), target_h, target_w);
    const int N = input.batch(), C = input.channels(), W = input.width();
    const auto ty = detail::axis_taps(input.height(), target_h, mode);
    const auto tx = detail::axis_taps(W, target_w, mode);
    Tensor<T> out({N, C, target_h, target_w});
    for (int n = 0; n < N; ++n) {
        for (int c = 0; c < C; ++c) {
            const T* src = input.plane(n, c);
            T* dst = out.plane(n, c);
            for (int y = 0; y < target_h; ++y) {
                const auto& a = ty[y];
                const T wy1 = static_cast<T>(a.w1), wy0 = T{1} - wy1;
                for (int x = 0; x < target_w; ++x) {
                    const auto& b = tx[x];
                    const T wx1 = static_cast<T>(b.w1), wx0 = T{1} - wx1;
                    dst[y * target_w + x] = wy0 * (wx0 * src[a.i0 * W + b.i0] + wx1 * src[a.i0 * W + b.i1]) +
                                            wy1 * (wx0 * src[a.i1 * W + b.i0] + wx1 * src[a.i1 * W + b.i1]);
                }
            }
        }
    }
    return out;
}

/// Transpose of `upsample`: scatter-adds the upstream gradient onto the source grid.
template <typename T>
Tensor<T> upsample_backward(const Tensor<T>& upstream_grad, int source_h, int source_w, UpsampleMode mode) {
    const int N = upstream_grad.batch(), C = upstream_grad.channels();
    const int TH = upstream_grad.height(), TW = upstream_grad.width();
    detail::check_upsample(Shape{N, C, source_h, source_w}, TH, TW);
    const auto ty = detail::axis_taps(source_h, TH, mode);
    const auto tx = detail::axis_taps(source_w, TW, mode);
    Tensor<T> out({N, C, source_h, source_w});
    for (int n = 0; n < N; ++n) {
        for (int c = 0; c < C; ++c) {
            const T* up = upstream_grad.plane(n, c);
            T* dst = out.plane(n, c);
            for (int y = 0; y < TH; ++y) {
                const auto& a = ty[y];
                const T wy1 = static_cast<T>(a.w1), wy0 = T{1} - wy1;
                for (int x = 0; x < TW; ++x) {
                    const auto& b = tx[x];
                    const T wx1 = static_cast<T>(b.w1), wx0 = T{1} - wx1;
                    const T g = up[y * TW + x];
                    dst[a.i0 * source_w + b.i0] += wy0 * wx0 * g;
                    dst[a.i0 * source_w + b.i1] += wy0 * wx1 * g;
                    dst[a.i1 * source_w + b.i0] += wy1 * wx0 * g;
                    dst[a.i1 * source_w + b.i1] += wy1 * wx1 * g;
                }
            }
        }
    }
    return out;
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    require_same_shape(a.shape(), b.shape(), "add");
    Tensor<T> out(a.shape());
    auto x = a.data();
    auto y = b.data();
    auto z = out.data();
    for (std::size_t i = 0; i < z.size(); ++i) z[i] = x[i] + y[i];
    return out;
}

/// The sum passes its upstream gradient unchanged to both operands.
template <typename T>
std::pair<Tensor<T>, Tensor<T>> add_backward(const Tensor<T>& upstream_grad) {
    return {upstream_grad, upstream_grad};
}

template <typename T>
struct LossResult {
    T loss{0};
    Tensor<T> logit_grad;
    int counted_cells = 0;
};

/// Mean cross-entropy of softmax(logits) over non-ignored cells. The empty mean is 0.
template <typename T>
LossResult<T> softmax_cross_entropy(const Tensor<T>& logits, const LabelGrid& labels,
                                    int ignore_value = kIgnoreLabel) {
    const int N = logits.batch(), C = logits.channels(), H = logits.height(), W = logits.width();
    if (labels.batch != N || labels.height != H || labels.width != W) {
        throw ConfigError("label grid (" + std::to_string(labels.batch) + "," + std::to_string(labels.height) +
                          "," + std::to_string(labels.width) + ") does not match logits " +
                          logits.shape().str());
    }
    LossResult<T> r{T{0}, Tensor<T>(logits.shape()), 0};
    for (int n = 0; n < N; ++n) {
        for (int y = 0; y < H; ++y) {
            for (int x = 0; x < W; ++x) {
                const int label = labels.at(n, y, x);
                if (label == ignore_value) continue;
                if (label < 0 || label >= C) {
                    throw DataError("label " + std::to_string(label) + " out of range at cell (" +
                                    std::to_string(n) + "," + std::to_string(y) + "," + std::to_string(x) +
                                    ") for " + std::to_string(C) + " classes");
                }
                ++r.counted_cells;
            }
        }
    }
    if (r.counted_cells == 0) return r;

    const T inv = T{1} / static_cast<T>(r.counted_cells);
    double total = 0.0;
    std::vector<T> prob(static_cast<std::size_t>(C));
    for (int n = 0; n < N; ++n) {
        for (int y = 0; y < H; ++y) {
            for (int x = 0; x < W; ++x) {
                const int label = labels.at(n, y, x);
                if (label == ignore_value) continue;
                T mx = logits(n, 0, y, x);
                for (int c = 1; c < C; ++c) mx = std::max(mx, logits(n, c, y, x));
                T sum{0};
                for (int c = 0; c < C; ++c) {
                    prob[c] = std::exp(logits(n, c, y, x) - mx);
                    sum += prob[c];
                }
                total += static_cast<double>(std::log(sum) - (logits(n, label, y, x) - mx));
                for (int c = 0; c < C; ++c) {
                    const T p = prob[c] / sum;
                    r.logit_grad(n, c, y, x) = (p - (c == label ? T{1} : T{0})) * inv;
                }
            }
        }
    }
    r.loss = static_cast<T>(total / r.counted_cells);
    return r;
}

/// Per-cell argmax over the class axis; ties go to the lowest class index.
template <typename T>
LabelGrid argmax_labels(const Tensor<T>& logits) {
    const int N = logits.batch(), C = logits.channels(), H = logits.height(), W = logits.width();
    LabelGrid out(N, H, W);
    for (int n = 0; n < N; ++n) {
        for (int y = 0; y < H; ++y) {
            for (int x = 0; x < W; ++x) {
                int best = 0;
                for (int c = 1; c < C; ++c) {
                    if (logits(n, c, y, x) > logits(n, best, y, x)) best = c;
                }
                out.at(n, y, x) = best;
            }
        }
    }
    return out;
}

}  // namespace skipseg
