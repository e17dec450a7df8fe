#pragma once

// Supervised training of the original classifier, plus the generic
// mini-batch loop reused by retrain / finetune / relearn.

#include "covarnav/dataset.hpp"
#include "covarnav/losses.hpp"
#include "covarnav/optim.hpp"

#include <functional>
#include <numeric>

namespace covarnav {

struct TrainConfig {
    int epochs = 20;
    int batch_size = 64;
    SgdConfig sgd{};
    bool cosine_schedule = true;
    std::uint64_t seed = 0;
};

struct TrainLog {
    std::vector<double> epoch_loss;
    double train_accuracy = 0;
    long steps = 0;
};

template <typename Scalar>
struct TrainResult {
    ModelSnapshot<Scalar> model;
    TrainLog log;
};

inline std::vector<int> shuffled_indices(int n, std::mt19937_64& rng) {
    std::vector<int> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    for (int i = n - 1; i > 0; --i) {
        std::uniform_int_distribution<int> pick(0, i);
        std::swap(idx[i], idx[pick(rng)]);
    }
    return idx;
}

// Eval-mode logits for a whole dataset, computed in chunks.
template <typename Scalar>
Mat<Scalar> predict_logits(const ModelSnapshot<Scalar>& model, const LabeledDataset& ds,
                           int chunk = 256) {
    Mat<Scalar> out(ds.size(), model.num_classes());
    for (int b = 0; b < ds.size(); b += chunk) {
        const int e = std::min(ds.size(), b + chunk);
        out.middleRows(b, e - b) = forward(model, ds.batch_range<Scalar>(b, e).images);
    }
    return out;
}

template <typename Scalar>
std::vector<int> predict(const ModelSnapshot<Scalar>& model, const LabeledDataset& ds, int chunk = 256) {
    return argmax_rows(predict_logits(model, ds, chunk));
}

// Called after every optimizer step with the 1-based step count; return false to stop.
template <typename Scalar>
using StepHook = std::function<bool(long step, const ModelState<Scalar>& state)>;

// Mini-batch SGD with train-mode batch norm. Returns the loss log.
template <typename Scalar>
TrainLog fit(ModelState<Scalar>& state, const LabeledDataset& ds, const TrainConfig& cfg,
             const StepHook<Scalar>& hook = {}) {
    if (ds.empty()) throw ValidationError("cannot train on an empty dataset");
    if (cfg.batch_size < 1) throw ValidationError("batch size must be positive");
    TrainLog log;
    std::mt19937_64 rng(cfg.seed);
    Sgd<Scalar> opt(state, cfg.sgd);
    const int steps_per_epoch = (ds.size() + cfg.batch_size - 1) / cfg.batch_size;
    const long total_steps = static_cast<long>(steps_per_epoch) * cfg.epochs;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        const auto order = shuffled_indices(ds.size(), rng);
        double loss_sum = 0;
        for (int b = 0; b < ds.size(); b += cfg.batch_size) {
            // A batch of one cannot be normalized with batch statistics.
            const int e = std::min(ds.size(), b + cfg.batch_size);
            if (e - b < 2 && ds.size() >= 2) continue;
            const std::span<const int> idx(order.data() + b, e - b);
            const auto batch = ds.batch<Scalar>(idx);
            if (cfg.cosine_schedule && total_steps > 0)
                opt.set_lr(cfg.sgd.lr * 0.5 *
                           (1 + std::cos(std::numbers::pi * static_cast<double>(log.steps) / total_steps)));
            const auto tape = forward_tape(state, batch.images, Mode::train);
            const auto loss = cross_entropy<Scalar>(tape.logits, batch.labels);
            if (!std::isfinite(loss.value))
                throw TrainingError("non-finite training loss at epoch " + std::to_string(epoch) +
                                    ", step " + std::to_string(log.steps));
            const auto grads = backward(state, tape, loss.dlogits);
            opt.step(state, grads.layers);
            update_running_stats(state, tape);
            loss_sum += loss.value * (e - b);
            ++log.steps;
            if (hook && !hook(log.steps, state)) {
                log.epoch_loss.push_back(loss_sum / ds.size());
                return log;
            }
        }
        log.epoch_loss.push_back(loss_sum / ds.size());
    }
    return log;
}

template <typename Scalar>
double accuracy_of(const ModelSnapshot<Scalar>& model, const LabeledDataset& ds) {
    if (ds.empty()) throw ValidationError("accuracy of an empty dataset is undefined");
    const auto pred = predict(model, ds);
    long hit = 0;
    for (int i = 0; i < ds.size(); ++i) hit += pred[i] == ds.labels[i];
    return static_cast<double>(hit) / ds.size();
}

// Trains a freshly initialized network (seeded by cfg.seed) on `dataset`.
template <typename Scalar>
TrainResult<Scalar> train_original(const LabeledDataset& dataset, const Architecture& arch,
                                   const TrainConfig& cfg) {
    if (dataset.empty()) throw ValidationError("training dataset is empty");
    if (dataset.num_classes < 2) throw ValidationError("training needs K >= 2");
    if (!(dataset.shape == arch.input) || dataset.num_classes != arch.num_classes)
        throw ShapeError("dataset does not match architecture");
    auto init = initialize<Scalar>(arch, derive_seed(cfg.seed, 0));
    auto state = init.mutable_copy();
    TrainConfig loop = cfg;
    loop.seed = derive_seed(cfg.seed, 1);
    auto log = fit(state, dataset, loop);
    TrainResult<Scalar> out{ModelSnapshot<Scalar>(std::move(state)), std::move(log)};
    out.log.train_accuracy = accuracy_of(out.model, dataset);
    return out;
}

}  // namespace covarnav
