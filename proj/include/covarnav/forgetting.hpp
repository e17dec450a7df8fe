#pragma once

// Forget-set relabeling strategies and the forgetting losses built on them.

#include "covarnav/dataset.hpp"
#include "covarnav/losses.hpp"
#include "covarnav/network.hpp"

#include <numbers>
#include <random>

namespace covarnav {

enum class ForgetStrategy { largest_wrong_logit, random_labels, boundary_shrink, entropy };

inline std::string to_string(ForgetStrategy s) {
    switch (s) {
        case ForgetStrategy::largest_wrong_logit: return "largest-wrong-logit";
        case ForgetStrategy::random_labels: return "random";
        case ForgetStrategy::boundary_shrink: return "boundary-shrink";
        case ForgetStrategy::entropy: return "entropy";
    }
    return "?";
}

inline ForgetStrategy forget_strategy_from_string(const std::string& s) {
    for (auto k : {ForgetStrategy::largest_wrong_logit, ForgetStrategy::random_labels,
                   ForgetStrategy::boundary_shrink, ForgetStrategy::entropy})
        if (to_string(k) == s) return k;
    throw ValidationError("unknown forgetting strategy '" + s + "'");
}

// D_f paired with replacement labels. data.labels holds the replacement labels.
struct MislabeledForgetSet {
    LabeledDataset data;
    std::vector<int> original_labels;
    ForgetStrategy strategy = ForgetStrategy::largest_wrong_logit;
    std::string source_fingerprint;
    int forget_class = -1;

    int size() const { return data.size(); }

    // Dataset view carrying both label columns, ready for save_packed().
    LabeledDataset to_dataset() const {
        LabeledDataset out = data;
        out.partition = "D_hat_f";
        out.extra["original_labels"] = original_labels;
        out.extra["strategy"] = to_string(strategy);
        out.extra["source_fingerprint"] = source_fingerprint;
        out.extra["forget_class"] = forget_class;
        return out;
    }
};

inline int single_class_of(const LabeledDataset& forget_set) {
    if (forget_set.empty()) throw ValidationError("forget set is empty");
    const int cf = forget_set.labels.front();
    for (int y : forget_set.labels)
        if (y != cf) throw ValidationError("forget set must contain a single class");
    return cf;
}

namespace detail {

inline MislabeledForgetSet start_mislabel(const LabeledDataset& forget_set, ForgetStrategy s) {
    MislabeledForgetSet out;
    out.forget_class = single_class_of(forget_set);
    out.data = forget_set;
    out.data.partition = "D_hat_f";
    out.original_labels = forget_set.labels;
    out.strategy = s;
    out.source_fingerprint = forget_set.fingerprint();
    return out;
}

}  // namespace detail

template <typename Scalar>
MislabeledForgetSet mislabel_largest_wrong_logit(const ModelSnapshot<Scalar>& model,
                                                 const LabeledDataset& forget_set, int chunk = 256) {
    auto out = detail::start_mislabel(forget_set, ForgetStrategy::largest_wrong_logit);
    for (int b = 0; b < forget_set.size(); b += chunk) {
        const int e = std::min(forget_set.size(), b + chunk);
        const auto logits = forward(model, forget_set.batch_range<Scalar>(b, e).images);
        const auto y = argmax_rows(logits, out.forget_class);
        std::copy(y.begin(), y.end(), out.data.labels.begin() + b);
    }
    return out;
}

inline MislabeledForgetSet mislabel_random(const LabeledDataset& forget_set, int num_classes,
                                           std::uint64_t seed) {
    if (num_classes < 2) throw ValidationError("random relabeling needs K >= 2");
    auto out = detail::start_mislabel(forget_set, ForgetStrategy::random_labels);
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<int> pick(0, num_classes - 2);
    for (auto& y : out.data.labels) {
        const int r = pick(rng);
        y = r < out.forget_class ? r : r + 1;
    }
    return out;
}

// One untargeted FGSM step x' = x + eps * sign(grad_x CE(x, c_f)); the new label is
// the prediction at x', falling back to the largest wrong logit at x' when the
// step did not leave c_f.
template <typename Scalar>
MislabeledForgetSet mislabel_boundary_shrink(const ModelSnapshot<Scalar>& model,
                                             const LabeledDataset& forget_set, double epsilon,
                                             int chunk = 128) {
    if (epsilon < 0) throw ValidationError("FGSM epsilon must be non-negative");
    auto out = detail::start_mislabel(forget_set, ForgetStrategy::boundary_shrink);
    out.data.extra["fgsm_epsilon"] = epsilon;
    for (int b = 0; b < forget_set.size(); b += chunk) {
        const int e = std::min(forget_set.size(), b + chunk);
        auto batch = forget_set.batch_range<Scalar>(b, e);
        const auto tape = forward_tape(model.state(), batch.images, Mode::eval);
        const auto ce = cross_entropy<Scalar>(tape.logits, batch.labels, Reduction::sum);
        const auto g = backward(model.state(), tape, ce.dlogits, true).input;
        for (std::size_t i = 0; i < batch.images.data.size(); ++i) {
            const Scalar s = g.data[i] > 0 ? Scalar(1) : (g.data[i] < 0 ? Scalar(-1) : Scalar(0));
            batch.images.data[i] += Scalar(epsilon) * s;
        }
        const auto logits = forward(model, batch.images);
        const auto pred = argmax_rows(logits);
        const auto fallback = argmax_rows(logits, out.forget_class);
        for (int i = 0; i < e - b; ++i)
            out.data.labels[b + i] = pred[i] != out.forget_class ? pred[i] : fallback[i];
    }
    return out;
}

// Entropy strategy keeps the true labels; the loss itself does the work.
inline MislabeledForgetSet entropy_forget_set(const LabeledDataset& forget_set) {
    return detail::start_mislabel(forget_set, ForgetStrategy::entropy);
}

// -min(CE, ln K): minimizing it raises the cross-entropy until chance level, then stops.
template <typename Scalar>
LossValue<Scalar> clamped_negative_cross_entropy(const Mat<Scalar>& logits, std::span<const int> labels) {
    auto ce = cross_entropy<Scalar>(logits, labels, Reduction::mean);
    const double chance = std::log(static_cast<double>(logits.cols()));
    if (ce.value >= chance) {
        ce.value = -chance;
        ce.dlogits.setZero();
    } else {
        ce.value = -ce.value;
        ce.dlogits = -ce.dlogits;
    }
    return ce;
}

// Loss on one batch of logits for a given strategy: mean CE against the
// replacement labels, or the clamped negative CE for the entropy strategy.
template <typename Scalar>
LossValue<Scalar> forgetting_objective(ForgetStrategy s, const Mat<Scalar>& logits, std::span<const int> labels) {
    if (s == ForgetStrategy::entropy) return clamped_negative_cross_entropy<Scalar>(logits, labels);
    return cross_entropy<Scalar>(logits, labels, Reduction::mean);
}

template <typename Scalar>
double forgetting_loss(const ModelSnapshot<Scalar>& model, const MislabeledForgetSet& set) {
    if (set.data.empty()) throw ValidationError("forgetting loss of an empty set");
    const auto logits = forward(model, set.data.batch_range<Scalar>(0, set.size()).images);
    return cross_entropy<Scalar>(logits, set.data.labels, Reduction::mean).value;
}

template <typename Scalar>
double entropy_maximization_loss(const ModelSnapshot<Scalar>& model, const LabeledDataset& forget_set) {
    if (forget_set.empty()) throw ValidationError("entropy loss of an empty set");
    const auto logits = forward(model, forget_set.batch_range<Scalar>(0, forget_set.size()).images);
    return clamped_negative_cross_entropy<Scalar>(logits, forget_set.labels).value;
}

}  // namespace covarnav
