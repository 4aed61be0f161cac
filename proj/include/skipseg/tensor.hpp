#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "error.hpp"

namespace skipseg {

struct Shape {
    int batch = 0;
    int channels = 0;
    int height = 0;
    int width = 0;

    [[nodiscard]] std::size_t size() const {
        return static_cast<std::size_t>(batch) * channels * height * width;
    }
    [[nodiscard]] std::string str() const {
        return "(" + std::to_string(batch) + "," + std::to_string(channels) + "," +
               std::to_string(height) + "," + std::to_string(width) + ")";
    }
    friend bool operator==(const Shape&, const Shape&) = default;
};

/// Dense NCHW array. `grad` is empty until allocated with `ensure_grad()`.
template <typename T>
class Tensor {
public:
    using value_type = T;

    Tensor() = default;
    explicit Tensor(Shape shape, T fill = T{0}) : shape_(shape), data_(checked_size(shape), fill) {}
    Tensor(Shape shape, std::vector<T> data) : shape_(shape), data_(std::move(data)) {
        if (data_.size() != checked_size(shape_)) {
            throw ConfigError("tensor data length " + std::to_string(data_.size()) +
                              " does not match shape " + shape_.str());
        }
    }

    [[nodiscard]] const Shape& shape() const { return shape_; }
    [[nodiscard]] int batch() const { return shape_.batch; }
    [[nodiscard]] int channels() const { return shape_.channels; }
    [[nodiscard]] int height() const { return shape_.height; }
    [[nodiscard]] int width() const { return shape_.width; }
    [[nodiscard]] std::size_t size() const { return data_.size(); }

    [[nodiscard]] std::span<T> data() { return data_; }
    [[nodiscard]] std::span<const T> data() const { return data_; }
    [[nodiscard]] std::vector<T>& values() { return data_; }
    [[nodiscard]] const std::vector<T>& values() const { return data_; }

    [[nodiscard]] std::size_t index(int n, int c, int y, int x) const {
        return ((static_cast<std::size_t>(n) * shape_.channels + c) * shape_.height + y) *
                   shape_.width + x;
    }
    T& operator()(int n, int c, int y, int x) { return data_[index(n, c, y, x)]; }
    const T& operator()(int n, int c, int y, int x) const { return data_[index(n, c, y, x)]; }
    T& operator[](std::size_t i) { return data_[i]; }
    const T& operator[](std::size_t i) const { return data_[i]; }

    /// Pointer to the start of plane (n, c).
    T* plane(int n, int c) { return data_.data() + index(n, c, 0, 0); }
    const T* plane(int n, int c) const { return data_.data() + index(n, c, 0, 0); }

    [[nodiscard]] bool has_grad() const { return !grad_.empty(); }
    std::vector<T>& ensure_grad() {
        if (grad_.size() != data_.size()) grad_.assign(data_.size(), T{0});
        return grad_;
    }
    [[nodiscard]] std::span<T> grad() { return grad_; }
    [[nodiscard]] std::span<const T> grad() const { return grad_; }
    void zero_grad() { std::fill(grad_.begin(), grad_.end(), T{0}); }

    void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

    [[nodiscard]] bool all_finite() const {
        return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
    }

    /// Element-type conversion; gradients are not carried over.
    template <typename U>
    [[nodiscard]] Tensor<U> cast() const {
        std::vector<U> out(data_.size());
        std::transform(data_.begin(), data_.end(), out.begin(), [](T v) { return static_cast<U>(v); });
        return Tensor<U>(shape_, std::move(out));
    }

    /// Copy of the samples [first, first + count) along the batch axis.
    [[nodiscard]] Tensor slice_batch(int first, int count) const {
        Shape s = shape_;
        s.batch = count;
        const std::size_t per = static_cast<std::size_t>(shape_.channels) * shape_.height * shape_.width;
        auto begin = data_.begin() + static_cast<std::ptrdiff_t>(per * first);
        return Tensor(s, std::vector<T>(begin, begin + static_cast<std::ptrdiff_t>(per * count)));
    }

private:
    static std::size_t checked_size(const Shape& s) {
        if (s.batch < 0 || s.channels < 0 || s.height < 0 || s.width < 0) {
            throw ConfigError("negative tensor dimension in shape " + s.str());
        }
        return s.size();
    }

    Shape shape_{};
    std::vector<T> data_;
    std::vector<T> grad_;
};

inline void require_same_shape(const Shape& a, const Shape& b, const char* what) {
    if (!(a == b)) {
        throw ConfigError(std::string(what) + ": shape mismatch " + a.str() + " vs " + b.str());
    }
}

/// Row-major label grid (batch, height, width); 255 marks ignored cells.
struct LabelGrid {
    int batch = 0;
    int height = 0;
    int width = 0;
    std::vector<int> labels;

    LabelGrid() = default;
    LabelGrid(int b, int h, int w, int fill = 0)
        : batch(b), height(h), width(w), labels(static_cast<std::size_t>(b) * h * w, fill) {}

    int& at(int n, int y, int x) { return labels[(static_cast<std::size_t>(n) * height + y) * width + x]; }
    [[nodiscard]] int at(int n, int y, int x) const {
        return labels[(static_cast<std::size_t>(n) * height + y) * width + x];
    }
};

/// Per-pixel class labels of one image, row-major.
struct LabelImage {
    int height = 0;
    int width = 0;
    std::vector<int> labels;

    LabelImage() = default;
    LabelImage(int h, int w, int fill = 0) : height(h), width(w), labels(static_cast<std::size_t>(h) * w, fill) {}

    int& at(int y, int x) { return labels[static_cast<std::size_t>(y) * width + x]; }
    [[nodiscard]] int at(int y, int x) const { return labels[static_cast<std::size_t>(y) * width + x]; }
    friend bool operator==(const LabelImage&, const LabelImage&) = default;
};

inline constexpr int kIgnoreLabel = 255;

}  // namespace skipseg
