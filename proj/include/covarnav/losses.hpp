#pragma once

#include "covarnav/common.hpp"

#include <span>

namespace covarnav {

template <typename Scalar>
struct LossValue {
    double value = 0;
    Mat<Scalar> dlogits;  // gradient of value w.r.t. logits (batch x K)
};

enum class Reduction { mean, sum };

// Numerically stable row-wise log-softmax.
template <typename Scalar>
Mat<Scalar> log_softmax(const Mat<Scalar>& logits) {
    Mat<Scalar> out(logits.rows(), logits.cols());
    for (Eigen::Index r = 0; r < logits.rows(); ++r) {
        const Scalar mx = logits.row(r).maxCoeff();
        const Scalar lse = mx + std::log((logits.row(r).array() - mx).exp().sum());
        out.row(r) = logits.row(r).array() - lse;
    }
    return out;
}

template <typename Scalar>
Mat<Scalar> softmax(const Mat<Scalar>& logits) {
    return log_softmax(logits).array().exp();
}

// Per-sample cross-entropy values.
template <typename Scalar>
std::vector<double> cross_entropy_per_sample(const Mat<Scalar>& logits, std::span<const int> labels) {
    if (static_cast<Eigen::Index>(labels.size()) != logits.rows())
        throw ShapeError("cross-entropy label count does not match logits");
    const Mat<Scalar> lsm = log_softmax(logits);
    std::vector<double> out(labels.size());
    for (std::size_t i = 0; i < labels.size(); ++i) out[i] = -static_cast<double>(lsm(i, labels[i]));
    return out;
}

template <typename Scalar>
LossValue<Scalar> cross_entropy(const Mat<Scalar>& logits, std::span<const int> labels,
                                Reduction reduction = Reduction::mean) {
    if (static_cast<Eigen::Index>(labels.size()) != logits.rows() || labels.empty())
        throw ShapeError("cross-entropy label count does not match logits");
    const Mat<Scalar> lsm = log_softmax(logits);
    LossValue<Scalar> out;
    out.dlogits = lsm.array().exp();
    double total = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] < 0 || labels[i] >= logits.cols())
            throw ValidationError("cross-entropy label out of range");
        total -= static_cast<double>(lsm(i, labels[i]));
        out.dlogits(i, labels[i]) -= Scalar(1);
    }
    const double scale = reduction == Reduction::mean ? 1.0 / labels.size() : 1.0;
    out.value = total * scale;
    out.dlogits *= Scalar(scale);
    return out;
}

}  // namespace covarnav
