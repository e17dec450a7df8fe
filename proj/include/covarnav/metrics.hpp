#pragma once

// Four-way accuracies, relearn time and the Anamnesis Index.

#include "covarnav/dataset.hpp"
#include "covarnav/report.hpp"
#include "covarnav/training.hpp"

#include <chrono>
#include <map>

namespace covarnav {

template <typename Scalar>
double accuracy(const ModelSnapshot<Scalar>& model, const LabeledDataset& ds) {
    return accuracy_of(model, ds);
}

template <typename Scalar>
AccuracyReport measure(const ModelSnapshot<Scalar>& model, const Partitions& parts) {
    AccuracyReport a;
    a.df = accuracy(model, parts.forget);
    a.dr = accuracy(model, parts.retain);
    a.dft = accuracy(model, parts.forget_test);
    a.drt = accuracy(model, parts.retain_test);
    a.n_df = parts.forget.size();
    a.n_dr = parts.retain.size();
    a.n_dft = parts.forget_test.size();
    a.n_drt = parts.retain_test.size();
    return a;
}

struct RelearnConfig {
    TrainConfig train{};  // the original training hyperparameters
    double alpha = 0.1;
    long cap = 1000;
    bool absolute_band = false;  // band = reference - alpha instead of (1 - alpha) * reference
};

struct RelearnResult {
    long steps = 0;
    bool capped = false;
    double threshold = 0;
    std::vector<double> curve;  // forget accuracy after 0, 1, 2, ... steps
};

inline double relearn_threshold(double reference_acc, double alpha, bool absolute_band) {
    return absolute_band ? reference_acc - alpha : (1 - alpha) * reference_acc;
}

// Mini-batches of finetuning on the full training set until the forget-set
// accuracy re-enters the alpha band around the original model's accuracy.
// Evaluates before the first step and after every step.
template <typename Scalar>
RelearnResult relearn_time(const ModelSnapshot<Scalar>& model, const LabeledDataset& full_train,
                           const LabeledDataset& forget_set, double reference_acc, const RelearnConfig& cfg) {
    if (!(cfg.alpha > 0 && cfg.alpha < 1)) throw ValidationError("alpha must lie in (0, 1)");
    if (cfg.cap < 0) throw ValidationError("relearn cap must be non-negative");
    RelearnResult r;
    r.threshold = relearn_threshold(reference_acc, cfg.alpha, cfg.absolute_band);
    r.curve.push_back(accuracy(model, forget_set));
    if (r.curve.back() >= r.threshold) return r;
    if (cfg.cap == 0) {
        r.capped = true;
        return r;
    }
    auto state = model.mutable_copy();
    TrainConfig tc = cfg.train;
    tc.cosine_schedule = false;
    const long per_epoch = (full_train.size() + tc.batch_size - 1) / tc.batch_size;
    tc.epochs = static_cast<int>((cfg.cap + per_epoch - 1) / std::max(1L, per_epoch)) + 1;
    bool reached = false;
    fit<Scalar>(state, full_train, tc, [&](long step, const ModelState<Scalar>& s) {
        r.curve.push_back(accuracy(ModelSnapshot<Scalar>(s), forget_set));
        r.steps = step;
        if (r.curve.back() >= r.threshold) {
            reached = true;
            return false;
        }
        return step < cfg.cap;
    });
    if (!reached) {
        r.steps = cfg.cap;
        r.capped = true;
    }
    return r;
}

inline double anamnesis_index(long rt_unlearned, long rt_scratch) {
    if (rt_scratch <= 0)
        throw ValidationError("anamnesis index undefined: scratch relearn time is " + std::to_string(rt_scratch));
    return static_cast<double>(rt_unlearned) / static_cast<double>(rt_scratch);
}

template <typename Scalar>
UnlearningReport evaluate(const ModelSnapshot<Scalar>& before, const ModelSnapshot<Scalar>& after,
                          const Partitions& parts, UnlearningReport base = {}) {
    if (!(before.architecture() == after.architecture()))
        throw ShapeError("before/after models have different architectures");
    if (parts.forget.empty() || parts.retain.empty() || parts.forget_test.empty() || parts.retain_test.empty())
        throw ValidationError("evaluation needs all four non-empty partitions");
    for (const auto* ds : {&parts.forget, &parts.retain, &parts.forget_test, &parts.retain_test})
        if (!(ds->shape == before.architecture().input) || ds->num_classes != before.num_classes())
            throw ShapeError("partition " + ds->partition + " does not match the model");
    base.before = measure(before, parts);
    base.after = measure(after, parts);
    return base;
}

struct MeanStd {
    double mean = 0, std = 0;
    int n = 0;
};

inline MeanStd mean_std(const std::vector<double>& v) {
    MeanStd m;
    m.n = static_cast<int>(v.size());
    if (v.empty()) return m;
    for (double x : v) m.mean += x;
    m.mean /= v.size();
    if (v.size() > 1) {
        double ss = 0;
        for (double x : v) ss += (x - m.mean) * (x - m.mean);
        m.std = std::sqrt(ss / (v.size() - 1));
    }
    return m;
}

// Per-field mean / sample standard deviation across seeds.
inline nlohmann::json aggregate_reports(const std::vector<UnlearningReport>& reports) {
    if (reports.empty()) throw ValidationError("nothing to aggregate");
    std::map<std::string, std::vector<double>> fields;
    for (const auto& r : reports) {
        for (const auto& [phase, acc] : {std::pair{"before", r.before}, std::pair{"after", r.after}}) {
            if (!acc) continue;
            fields[std::string(phase) + ".df"].push_back(acc->df);
            fields[std::string(phase) + ".dr"].push_back(acc->dr);
            fields[std::string(phase) + ".dft"].push_back(acc->dft);
            fields[std::string(phase) + ".drt"].push_back(acc->drt);
        }
        if (r.ain) fields["ain"].push_back(*r.ain);
        fields["runtime_s"].push_back(r.runtime_s);
    }
    nlohmann::json out = {{"method", reports.front().method}, {"runs", reports.size()}};
    std::vector<std::uint64_t> seeds;
    for (const auto& r : reports) seeds.push_back(r.seed);
    out["seeds"] = seeds;
    for (const auto& [k, v] : fields) {
        const auto ms = mean_std(v);
        out["mean"][k] = ms.mean;
        out["std"][k] = ms.std;
    }
    return out;
}

}  // namespace covarnav
