#pragma once

// Post-hoc comparison methods behind one interface.

#include "covarnav/covariance_navigation.hpp"
#include "covarnav/metrics.hpp"

namespace covarnav {

enum class BaselineMethod {
    retrain,
    finetune,
    negative_gradient,
    random_labels,
    boundary_shrink,
    max_entropy,
    largest_wrong_logit,
    lwl_l2,
};

inline const std::vector<BaselineMethod>& all_baselines() {
    static const std::vector<BaselineMethod> v = {
        BaselineMethod::retrain,         BaselineMethod::finetune,    BaselineMethod::negative_gradient,
        BaselineMethod::random_labels,   BaselineMethod::boundary_shrink, BaselineMethod::max_entropy,
        BaselineMethod::largest_wrong_logit, BaselineMethod::lwl_l2};
    return v;
}

inline std::string to_string(BaselineMethod m) {
    switch (m) {
        case BaselineMethod::retrain: return "retrain";
        case BaselineMethod::finetune: return "finetune";
        case BaselineMethod::negative_gradient: return "negative-gradient";
        case BaselineMethod::random_labels: return "random-labels";
        case BaselineMethod::boundary_shrink: return "boundary-shrink";
        case BaselineMethod::max_entropy: return "max-entropy";
        case BaselineMethod::largest_wrong_logit: return "largest-wrong-logit";
        case BaselineMethod::lwl_l2: return "lwl-l2";
    }
    return "?";
}

inline BaselineMethod baseline_from_string(const std::string& s) {
    for (auto m : all_baselines())
        if (to_string(m) == s) return m;
    throw ValidationError("unknown baseline method '" + s + "'");
}

// Retrain, finetune and negative gradient touch D_r; the rest only see D_f.
inline bool needs_retained(BaselineMethod m) {
    return m == BaselineMethod::retrain || m == BaselineMethod::finetune || m == BaselineMethod::negative_gradient;
}

// Forgetting objective behind the four relabeling / entropy methods.
inline std::optional<ForgetStrategy> strategy_of(BaselineMethod m) {
    switch (m) {
        case BaselineMethod::random_labels: return ForgetStrategy::random_labels;
        case BaselineMethod::boundary_shrink: return ForgetStrategy::boundary_shrink;
        case BaselineMethod::max_entropy: return ForgetStrategy::entropy;
        case BaselineMethod::largest_wrong_logit:
        case BaselineMethod::lwl_l2: return ForgetStrategy::largest_wrong_logit;
        default: return std::nullopt;
    }
}

struct BaselineSpec {
    BaselineMethod method = BaselineMethod::largest_wrong_logit;
    double lr = 1e-3;           // Adam lr of the descent methods
    int epochs = 25;            // descent epochs; passes over D_r for finetune / negative gradient
    int batch_size = 64;
    double l2_lambda = 1e-2;
    double epsilon = 0.03;      // FGSM step for boundary shrink
    double finetune_lr_multiplier = 10;
    bool update_biases = false;
    TrainConfig train{};        // original training hyperparameters (retrain, finetune, negative gradient)
    std::uint64_t seed = 0;

    bool needs_retained() const { return covarnav::needs_retained(method); }

    void validate() const {
        if (!(lr > 0)) throw ValidationError("baseline lr must be positive");
        if (epochs < 0) throw ValidationError("baseline epochs must be non-negative");
        if (batch_size < 0) throw ValidationError("baseline batch size must be non-negative");
        if (l2_lambda < 0) throw ValidationError("lambda_l2 must be non-negative");
        if (epsilon < 0) throw ValidationError("FGSM epsilon must be non-negative");
    }
};

inline std::string method_id(const BaselineSpec& s) { return to_string(s.method); }

template <typename Scalar>
MislabeledForgetSet relabel_for(ForgetStrategy s, const ModelSnapshot<Scalar>& model, const LabeledDataset& forget_set,
                                double epsilon, std::uint64_t seed) {
    switch (s) {
        case ForgetStrategy::largest_wrong_logit: return mislabel_largest_wrong_logit(model, forget_set);
        case ForgetStrategy::random_labels: return mislabel_random(forget_set, model.num_classes(), seed);
        case ForgetStrategy::boundary_shrink: return mislabel_boundary_shrink(model, forget_set, epsilon);
        case ForgetStrategy::entropy: return entropy_forget_set(forget_set);
    }
    throw ValidationError("unknown forgetting strategy");
}

// One ascent step on a D_f batch with the clamped loss. Returns false (and
// leaves every parameter and running statistic untouched) when the clamp is
// active, since the forget gradient is then zero.
template <typename Scalar>
bool negative_gradient_forget_step(ModelState<Scalar>& state, Sgd<Scalar>& opt, const ImageBatch<Scalar>& batch) {
    // Forget batches hold a single class; batch statistics would normalize its features away.
    const auto tape = forward_tape(state, batch.images, Mode::eval);
    const auto loss = clamped_negative_cross_entropy<Scalar>(tape.logits, batch.labels);
    if (!std::isfinite(loss.value)) throw TrainingError("non-finite negative-gradient loss");
    if (loss.dlogits.isZero(0)) return false;
    opt.step(state, backward(state, tape, loss.dlogits).layers);
    return true;
}

namespace detail {

template <typename Scalar>
ModelSnapshot<Scalar> negative_gradient(const ModelSnapshot<Scalar>& model, const LabeledDataset& forget_set,
                                        const LabeledDataset& retain_set, const BaselineSpec& spec,
                                        nlohmann::json& details) {
    auto state = model.mutable_copy();
    Sgd<Scalar> retain_opt(state, spec.train.sgd);
    Sgd<Scalar> forget_opt(state, spec.train.sgd);
    std::mt19937_64 rng(derive_seed(spec.seed, 11));
    const int bs = std::max(2, spec.train.batch_size);
    long forget_steps = 0, clamped = 0;
    std::vector<int> forder;
    int fpos = 0;
    for (int epoch = 0; epoch < spec.epochs; ++epoch) {
        const auto order = shuffled_indices(retain_set.size(), rng);
        for (int b = 0; b + 1 < retain_set.size(); b += bs) {
            const int e = std::min(retain_set.size(), b + bs);
            const auto batch = retain_set.batch<Scalar>(std::span<const int>(order.data() + b, e - b));
            const auto tape = forward_tape(state, batch.images, Mode::train);
            const auto loss = cross_entropy<Scalar>(tape.logits, batch.labels);
            if (!std::isfinite(loss.value)) throw TrainingError("non-finite loss on D_r");
            retain_opt.step(state, backward(state, tape, loss.dlogits).layers);
            update_running_stats(state, tape);

            if (fpos + 2 > static_cast<int>(forder.size())) {
                forder = shuffled_indices(forget_set.size(), rng);
                fpos = 0;
            }
            const int fe = std::min(static_cast<int>(forder.size()), fpos + bs);
            const auto fbatch = forget_set.batch<Scalar>(std::span<const int>(forder.data() + fpos, fe - fpos));
            fpos = fe;
            ++forget_steps;
            if (!negative_gradient_forget_step(state, forget_opt, fbatch)) ++clamped;
        }
    }
    details["forget_steps"] = forget_steps;
    details["clamped_forget_steps"] = clamped;
    return ModelSnapshot<Scalar>(std::move(state));
}

inline DescentConfig baseline_descent(const BaselineSpec& spec) {
    DescentConfig d;
    d.lr = spec.lr;
    d.epochs = spec.epochs;
    d.batch_size = spec.batch_size;
    d.anchor_l2 = spec.method == BaselineMethod::lwl_l2 ? spec.l2_lambda : 0.0;
    d.trainable = spec.update_biases ? TrainableSet::all() : TrainableSet::weights_only();
    d.seed = derive_seed(spec.seed, 7);
    return d;
}

inline void fill_hparams(const BaselineSpec& spec, UnlearningReport& r) {
    r.method = method_id(spec);
    r.seed = spec.seed;
    r.details["hparams"] = {{"lr", spec.lr},
                            {"epochs", spec.epochs},
                            {"batch_size", spec.batch_size},
                            {"l2_lambda", spec.l2_lambda},
                            {"epsilon", spec.epsilon},
                            {"finetune_lr_multiplier", spec.finetune_lr_multiplier},
                            {"needs_retained", spec.needs_retained()}};
}

}  // namespace detail

template <typename Scalar>
UnlearningOutcome<Scalar> run_baseline(const BaselineSpec& spec, const ModelSnapshot<Scalar>& model,
                                       const LabeledDataset& forget_set, const LabeledDataset* retain_set) {
    spec.validate();
    if (spec.needs_retained() && (!retain_set || retain_set->empty()))
        throw AccessError("method '" + method_id(spec) + "' needs the retained training data D_r");
    const int cf = single_class_of(forget_set);
    const auto t0 = std::chrono::steady_clock::now();
    UnlearningOutcome<Scalar> out{model, {}, std::nullopt, std::nullopt, std::nullopt};
    detail::fill_hparams(spec, out.report);

    switch (spec.method) {
        case BaselineMethod::retrain: {
            TrainConfig tc = spec.train;
            tc.seed = spec.seed;
            out.model = train_original<Scalar>(*retain_set, model.architecture(), tc).model;
            break;
        }
        case BaselineMethod::finetune: {
            TrainConfig tc = spec.train;
            tc.sgd.lr *= spec.finetune_lr_multiplier;
            tc.epochs = spec.epochs;
            tc.seed = derive_seed(spec.seed, 3);
            auto state = model.mutable_copy();
            fit(state, *retain_set, tc);
            out.model = ModelSnapshot<Scalar>(std::move(state));
            break;
        }
        case BaselineMethod::negative_gradient:
            out.model = detail::negative_gradient(model, forget_set, *retain_set, spec, out.report.details);
            break;
        default: {
            const auto relabeled =
                relabel_for(*strategy_of(spec.method), model, forget_set, spec.epsilon, derive_seed(spec.seed, 5));
            DescentLog log;
            out.model = forgetting_descent(model, relabeled, detail::baseline_descent(spec), nullptr, &log);
            out.report.details["epoch_loss"] = log.epoch_loss;
            out.report.details["steps"] = log.steps;
            out.relabeled = relabeled;
        }
    }
    out.report.details["forget_class"] = cf;
    out.report.runtime_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return out;
}

// The CovarNav pipeline with the relabeling strategy swapped in.
template <typename Scalar>
UnlearningOutcome<Scalar> run_baseline_with_projection(const BaselineSpec& spec, const ModelSnapshot<Scalar>& model,
                                                       const LabeledDataset& forget_set, const LabeledDataset& proxy,
                                                       CovarNavConfig cfg) {
    spec.validate();
    const auto strategy = strategy_of(spec.method);
    if (!strategy || spec.method == BaselineMethod::lwl_l2)
        throw ValidationError("method '" + method_id(spec) + "' has no projected variant");
    const auto t0 = std::chrono::steady_clock::now();
    cfg.seed = spec.seed;
    const auto relabeled = relabel_for(*strategy, model, forget_set, spec.epsilon, derive_seed(spec.seed, 5));
    auto out = navigate(model, relabeled, proxy, cfg, method_id(spec) + "+projection");
    out.report.runtime_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return out;
}

}  // namespace covarnav
