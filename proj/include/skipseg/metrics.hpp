#pragma once

// Confusion-matrix accumulation and the three segmentation measures: pixel accuracy,
// mean (per-class) accuracy and mean intersection-over-union.

#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "error.hpp"
#include "tensor.hpp"

namespace skipseg {

/// How classes with no truth cells (accuracy) or no truth and no predicted cells (IoU) enter the mean.
enum class AbsentClassPolicy {
    exclude,        // dropped from the mean
    count_as_zero,  // contribute 0 and the mean divides by n_classes
};

class ConfusionMatrix {
public:
    explicit ConfusionMatrix(int n_classes) : n_(n_classes), counts_(static_cast<std::size_t>(n_classes) * n_classes, 0) {
        if (n_classes < 1) throw ConfigError("confusion matrix needs at least one class");
    }

    /// Builds a matrix from row-major counts[truth][pred].
    static ConfusionMatrix from_counts(const std::vector<std::vector<std::int64_t>>& rows) {
        ConfusionMatrix cm(static_cast<int>(rows.size()));
        for (int i = 0; i < cm.n_; ++i) {
            if (static_cast<int>(rows[i].size()) != cm.n_) throw ConfigError("confusion matrix rows must be square");
            for (int j = 0; j < cm.n_; ++j) {
                if (rows[i][j] < 0) throw DataError("negative confusion count");
                cm.at(i, j) = rows[i][j];
            }
        }
        return cm;
    }

    [[nodiscard]] int n_classes() const { return n_; }
    std::int64_t& at(int truth, int pred) { return counts_[static_cast<std::size_t>(truth) * n_ + pred]; }
    [[nodiscard]] std::int64_t at(int truth, int pred) const { return counts_[static_cast<std::size_t>(truth) * n_ + pred]; }

    /// t_i: cells whose true class is i.
    [[nodiscard]] std::int64_t truth_total(int i) const {
        std::int64_t t = 0;
        for (int j = 0; j < n_; ++j) t += at(i, j);
        return t;
    }
    /// Cells predicted as class j.
    [[nodiscard]] std::int64_t predicted_total(int j) const {
        std::int64_t t = 0;
        for (int i = 0; i < n_; ++i) t += at(i, j);
        return t;
    }
    [[nodiscard]] std::int64_t total() const {
        std::int64_t t = 0;
        for (auto c : counts_) t += c;
        return t;
    }

    /// counts[truth][pred] += 1 for every cell whose truth is not `ignore_value`.
    void accumulate(const LabelGrid& pred, const LabelGrid& truth, int ignore_value = kIgnoreLabel) {
        if (pred.batch != truth.batch || pred.height != truth.height || pred.width != truth.width) {
            throw ConfigError("prediction and truth grids differ in shape");
        }
        for (std::size_t k = 0; k < truth.labels.size(); ++k) {
            const int t = truth.labels[k];
            if (t == ignore_value) continue;
            const int p = pred.labels[k];
            if (t < 0 || t >= n_) throw DataError("truth label " + std::to_string(t) + " out of range at cell " + std::to_string(k));
            if (p < 0 || p >= n_) throw DataError("predicted label " + std::to_string(p) + " out of range at cell " + std::to_string(k));
            ++at(t, p);
        }
    }

    void merge(const ConfusionMatrix& other) {
        if (other.n_ != n_) throw ConfigError("cannot merge confusion matrices of different class counts");
        for (std::size_t k = 0; k < counts_.size(); ++k) counts_[k] += other.counts_[k];
    }

    friend bool operator==(const ConfusionMatrix&, const ConfusionMatrix&) = default;

private:
    int n_;
    std::vector<std::int64_t> counts_;
};

inline ConfusionMatrix merge(const ConfusionMatrix& a, const ConfusionMatrix& b) {
    ConfusionMatrix out = a;
    out.merge(b);
    return out;
}

/// Sum of the diagonal over all evaluated cells; 0 for an empty matrix.
inline double pixel_accuracy(const ConfusionMatrix& cm) {
    const auto total = cm.total();
    if (total == 0) return 0.0;
    std::int64_t correct = 0;
    for (int i = 0; i < cm.n_classes(); ++i) correct += cm.at(i, i);
    return static_cast<double>(correct) / static_cast<double>(total);
}

inline double mean_accuracy(const ConfusionMatrix& cm, AbsentClassPolicy policy = AbsentClassPolicy::exclude) {
    double sum = 0.0;
    int present = 0;
    for (int i = 0; i < cm.n_classes(); ++i) {
        const auto t = cm.truth_total(i);
        if (t == 0) continue;
        sum += static_cast<double>(cm.at(i, i)) / static_cast<double>(t);
        ++present;
    }
    const int denom = policy == AbsentClassPolicy::exclude ? present : cm.n_classes();
    return denom == 0 ? 0.0 : sum / denom;
}

/// IoU of class i; NaN when the class has neither truth nor predicted cells.
inline double class_iou(const ConfusionMatrix& cm, int i) {
    const auto t = cm.truth_total(i);
    const auto p = cm.predicted_total(i);
    if (t + p == 0) return std::numeric_limits<double>::quiet_NaN();
    return static_cast<double>(cm.at(i, i)) / static_cast<double>(t + p - cm.at(i, i));
}

inline std::vector<double> per_class_iou(const ConfusionMatrix& cm) {
    std::vector<double> out;
    for (int i = 0; i < cm.n_classes(); ++i) out.push_back(class_iou(cm, i));
    return out;
}

inline double mean_iou(const ConfusionMatrix& cm, AbsentClassPolicy policy = AbsentClassPolicy::exclude) {
    double sum = 0.0;
    int present = 0;
    for (int i = 0; i < cm.n_classes(); ++i) {
        const double iou = class_iou(cm, i);
        if (std::isnan(iou)) continue;
        sum += iou;
        ++present;
    }
    const int denom = policy == AbsentClassPolicy::exclude ? present : cm.n_classes();
    return denom == 0 ? 0.0 : sum / denom;
}

struct MetricSummary {
    double pixel_acc = 0.0;
    double mean_acc = 0.0;
    double mean_iou = 0.0;
};

inline MetricSummary summarize(const ConfusionMatrix& cm, AbsentClassPolicy policy = AbsentClassPolicy::exclude) {
    return {pixel_accuracy(cm), mean_accuracy(cm, policy), mean_iou(cm, policy)};
}

}  // namespace skipseg
