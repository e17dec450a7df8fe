#pragma once

// SGD with momentum / weight decay and Adam over ModelState parameter slots.

#include "covarnav/network.hpp"

#include <type_traits>

namespace covarnav {

// Which parameter groups an optimizer is allowed to touch.
struct TrainableSet {
    bool weights = true;     // conv / linear weight matrices
    bool biases = true;      // conv / linear biases
    bool bn_affine = true;   // batch-norm gamma / beta

    static TrainableSet all() { return {}; }
    static TrainableSet weights_only() { return {true, false, false}; }

    bool weight_slot(LayerKind k) const {
        return k == LayerKind::batch_norm ? bn_affine : (weights && (k == LayerKind::conv || k == LayerKind::linear));
    }
    bool bias_slot(LayerKind k) const {
        return k == LayerKind::batch_norm ? bn_affine : (biases && (k == LayerKind::conv || k == LayerKind::linear));
    }
};

// Zero-initialized buffers shaped like the trainable slots of `state`.
template <typename Scalar>
std::vector<LayerParams<Scalar>> zeros_like(const ModelState<Scalar>& state) {
    std::vector<LayerParams<Scalar>> out(state.params.size());
    for (std::size_t i = 0; i < state.params.size(); ++i) {
        out[i].weight = Mat<Scalar>::Zero(state.params[i].weight.rows(), state.params[i].weight.cols());
        out[i].bias = Vec<Scalar>::Zero(state.params[i].bias.size());
    }
    return out;
}

// Weight (Mat) or bias (Vec) slot of a LayerParams, selected by type.
template <typename T, typename Scalar>
T& slot(LayerParams<Scalar>& p) {
    if constexpr (std::is_same_v<T, Mat<Scalar>>) return p.weight;
    else return p.bias;
}
template <typename T, typename Scalar>
const T& slot(const LayerParams<Scalar>& p) {
    if constexpr (std::is_same_v<T, Mat<Scalar>>) return p.weight;
    else return p.bias;
}

// Calls fn(layer, param, grad) for each trainable slot.
template <typename Scalar, typename Fn>
void for_each_slot(ModelState<Scalar>& state, const std::vector<LayerParams<Scalar>>& grads,
                   const TrainableSet& trainable, Fn&& fn) {
    for (std::size_t i = 0; i < state.params.size(); ++i) {
        const auto kind = state.arch.layers[i].kind;
        auto& p = state.params[i];
        if (trainable.weight_slot(kind) && p.weight.size() && grads[i].weight.size())
            fn(static_cast<int>(i), p.weight, grads[i].weight);
        if (trainable.bias_slot(kind) && p.bias.size() && grads[i].bias.size())
            fn(static_cast<int>(i), p.bias, grads[i].bias);
    }
}

struct SgdConfig {
    double lr = 0.05;
    double momentum = 0.9;
    double weight_decay = 1e-4;
};

template <typename Scalar>
class Sgd {
public:
    Sgd(const ModelState<Scalar>& state, SgdConfig cfg, TrainableSet trainable = TrainableSet::all())
        : cfg_(cfg), trainable_(trainable), velocity_(zeros_like(state)) {}

    void step(ModelState<Scalar>& state, const std::vector<LayerParams<Scalar>>& grads) {
        for_each_slot(state, grads, trainable_, [&](int li, auto& param, const auto& grad) {
            auto& vv = slot<std::remove_cvref_t<decltype(param)>>(velocity_[li]);
            vv = Scalar(cfg_.momentum) * vv + grad + Scalar(cfg_.weight_decay) * param;
            param -= Scalar(cfg_.lr) * vv;
        });
    }

    void set_lr(double lr) { cfg_.lr = lr; }

private:
    SgdConfig cfg_;
    TrainableSet trainable_;
    std::vector<LayerParams<Scalar>> velocity_;
};

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

// Adam whose raw step can be inspected (and projected) before it is applied.
template <typename Scalar>
class Adam {
public:
    Adam(const ModelState<Scalar>& state, AdamConfig cfg, TrainableSet trainable)
        : cfg_(cfg), trainable_(trainable), m_(zeros_like(state)), v_(zeros_like(state)) {}

    // Updates the moment estimates from `grads` and returns the step Adam(g, lr),
    // i.e. the quantity to subtract from the parameters. Untouched slots stay zero.
    std::vector<LayerParams<Scalar>> compute_step(ModelState<Scalar>& state,
                                                  const std::vector<LayerParams<Scalar>>& grads) {
        ++t_;
        auto step = zeros_like(state);
        const double bc1 = 1 - std::pow(cfg_.beta1, t_);
        const double bc2 = 1 - std::pow(cfg_.beta2, t_);
        for_each_slot(state, grads, trainable_, [&](int li, auto& param, const auto& grad) {
            using T = std::remove_cvref_t<decltype(param)>;
            auto& m = slot<T>(m_[li]);
            auto& v = slot<T>(v_[li]);
            auto& s = slot<T>(step[li]);
            m = Scalar(cfg_.beta1) * m + Scalar(1 - cfg_.beta1) * grad;
            v = Scalar(cfg_.beta2) * v + Scalar(1 - cfg_.beta2) * grad.cwiseProduct(grad);
            s = (Scalar(cfg_.lr / bc1) * m.array() /
                 ((v.array() / Scalar(bc2)).sqrt() + Scalar(cfg_.eps)))
                    .matrix();
        });
        return step;
    }

    const TrainableSet& trainable() const { return trainable_; }

private:
    AdamConfig cfg_;
    TrainableSet trainable_;
    std::vector<LayerParams<Scalar>> m_, v_;
    int t_ = 0;
};

// param -= step for every trainable slot.
template <typename Scalar>
void apply_step(ModelState<Scalar>& state, const std::vector<LayerParams<Scalar>>& step,
                const TrainableSet& trainable) {
    for_each_slot(state, step, trainable, [](int, auto& param, const auto& s) { param -= s; });
}

}  // namespace covarnav
