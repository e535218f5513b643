#pragma once

// Segmentation metrics (IoU, F1, MAE) and the continual-learning measures
// AA / FM / FT over an accuracy matrix a[i][j] = quality on task j after
// training step i. Unfilled matrix cells stay absent; they are never
// zero-defaulted.

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "samcl/errors.hpp"
#include "samcl/tensor.hpp"

namespace samcl {

namespace detail {
inline void require_binary_mask(const Tensor& t, const char* what) {
    for (std::size_t i = 0; i < t.size(); ++i) {
        const double v = t.data()[i];
        if (v != 0.0 && v != 1.0) {
            throw validation_error(std::string(what) + ": mask is not binary (value " +
                                   std::to_string(v) + ")");
        }
    }
}
} // namespace detail

// Intersection over union of two binary masks; 1.0 when both are empty.
inline double iou_binary(const Tensor& pred, const Tensor& gt) {
    detail::require_same_shape(pred, gt, "iou_binary");
    detail::require_binary_mask(pred, "iou_binary pred");
    detail::require_binary_mask(gt, "iou_binary gt");
    std::size_t inter = 0, uni = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const bool p = pred.data()[i] != 0.0;
        const bool g = gt.data()[i] != 0.0;
        inter += (p && g);
        uni += (p || g);
    }
    if (uni == 0) return 1.0;
    return static_cast<double>(inter) / static_cast<double>(uni);
}

// F1 (= Dice) of binary masks; 1.0 when both empty, 0 when exactly one is.
inline double f1_binary(const Tensor& pred, const Tensor& gt) {
    detail::require_same_shape(pred, gt, "f1_binary");
    detail::require_binary_mask(pred, "f1_binary pred");
    detail::require_binary_mask(gt, "f1_binary gt");
    std::size_t inter = 0, np = 0, ng = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const bool p = pred.data()[i] != 0.0;
        const bool g = gt.data()[i] != 0.0;
        inter += (p && g);
        np += p;
        ng += g;
    }
    if (np == 0 && ng == 0) return 1.0;
    if (np == 0 || ng == 0) return 0.0;
    return 2.0 * static_cast<double>(inter) / static_cast<double>(np + ng);
}

// Mean absolute error between a probability map and a binary ground truth.
inline double mae(const Tensor& prob, const Tensor& gt) {
    detail::require_same_shape(prob, gt, "mae");
    double acc = 0.0;
    for (std::size_t i = 0; i < prob.size(); ++i) {
        acc += std::fabs(prob.data()[i] - gt.data()[i]);
    }
    return acc / static_cast<double>(prob.size());
}

// a[i][j]; filled cells are j <= i plus the forward-transfer column j = i+1.
class AccuracyMatrix {
public:
    AccuracyMatrix() = default;
    explicit AccuracyMatrix(std::size_t tasks)
        : tasks_(tasks), cells_(tasks * tasks) {}

    std::size_t tasks() const { return tasks_; }

    void set(std::size_t i, std::size_t j, double v) {
        cells_.at(index(i, j)) = v;
    }

    bool filled(std::size_t i, std::size_t j) const {
        return cells_.at(index(i, j)).has_value();
    }

    double get(std::size_t i, std::size_t j) const {
        const auto& c = cells_.at(index(i, j));
        if (!c) {
            throw state_error("AccuracyMatrix: cell (" + std::to_string(i) + "," +
                              std::to_string(j) + ") is not filled");
        }
        return *c;
    }

    std::optional<double> maybe(std::size_t i, std::size_t j) const { return cells_.at(index(i, j)); }

private:
    std::size_t index(std::size_t i, std::size_t j) const {
        if (i >= tasks_ || j >= tasks_) {
            throw state_error("AccuracyMatrix: index (" + std::to_string(i) + "," +
                              std::to_string(j) + ") outside " + std::to_string(tasks_) + " tasks");
        }
        return i * tasks_ + j;
    }
    std::size_t tasks_ = 0;
    std::vector<std::optional<double>> cells_;
};

// Average accuracy: mean of the final row.
inline double aa(const AccuracyMatrix& m) {
    const std::size_t t = m.tasks();
    if (t == 0) throw state_error("aa: empty matrix");
    double acc = 0.0;
    for (std::size_t j = 0; j < t; ++j) {
        if (!m.filled(t - 1, j)) {
            throw state_error("aa: incomplete final row at column " + std::to_string(j));
        }
        acc += m.get(t - 1, j);
    }
    return acc / static_cast<double>(t);
}

// Forgetting measure: mean over j of a[j][j] - a[T-1][j].
inline double fm(const AccuracyMatrix& m) {
    const std::size_t t = m.tasks();
    if (t == 0) throw state_error("fm: empty matrix");
    double acc = 0.0;
    for (std::size_t j = 0; j < t; ++j) {
        if (!m.filled(j, j) || !m.filled(t - 1, j)) {
            throw state_error("fm: incomplete diagonal or final row at column " + std::to_string(j));
        }
        acc += m.get(j, j) - m.get(t - 1, j);
    }
    return acc / static_cast<double>(t);
}

// Forward transfer: mean of the superdiagonal a[i][i+1].
inline double ft(const AccuracyMatrix& m) {
    const std::size_t t = m.tasks();
    if (t < 2) throw state_error("ft: undefined for fewer than two tasks");
    double acc = 0.0;
    for (std::size_t i = 0; i + 1 < t; ++i) {
        if (!m.filled(i, i + 1)) {
            throw state_error("ft: missing superdiagonal cell (" + std::to_string(i) + "," +
                              std::to_string(i + 1) + ")");
        }
        acc += m.get(i, i + 1);
    }
    return acc / static_cast<double>(t - 1);
}

} // namespace samcl
