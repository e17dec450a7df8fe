#pragma once

// Model inversion: synthesize a proxy for the retained data by optimizing
// images against the frozen classifier. The objective for a batch is
//
//   sum_j CE(f(x_j), y_j) + a_tv * TV(x_j) + a_l2 * ||x_j||_2
//     + a_f * sum_l ( ||mu_l - m_l||_2 + ||sigma2_l - v_l||_2 )
//
// where (mu_l, sigma2_l) are the per-channel batch statistics at the input of
// batch-norm layer l and (m_l, v_l) the running statistics stored in the model.
// The network runs in evaluation mode throughout.

#include "covarnav/dataset.hpp"
#include "covarnav/losses.hpp"
#include "covarnav/network.hpp"

#include <optional>
#include <random>

namespace covarnav {

struct InversionConfig {
    int batch_size = 90;
    int steps = 2000;
    double lr = 0.1;  // Adam step size on pixels
    double alpha_tv = 1e-4;
    double alpha_l2 = 1e-5;
    double alpha_f = 1e-2;
    int samples_per_class = 100;
    int forget_class = -1;
    double quality_gate = 0.9;
    std::uint64_t seed = 0;
};

struct ChannelStats {
    int layer = -1;
    VectorXd mean;
    VectorXd var;
};

// Anisotropic l1 total variation: sum of |horizontal| + |vertical| neighbor
// differences over every channel of every image.
template <typename Scalar>
double tv_regularizer(const Tensor<Scalar>& x, Tensor<Scalar>* grad = nullptr, double scale = 1.0) {
    if (x.h < 2 || x.w < 2) throw ShapeError("total variation needs spatial dims >= 2");
    double tv = 0;
    for (int n = 0; n < x.n; ++n)
        for (int c = 0; c < x.c; ++c)
            for (int y = 0; y < x.h; ++y)
                for (int xx = 0; xx < x.w; ++xx) {
                    const Scalar v = x.at(n, c, y, xx);
                    if (xx + 1 < x.w) {
                        const double d = x.at(n, c, y, xx + 1) - v;
                        tv += std::abs(d);
                        if (grad && d != 0) {
                            const Scalar s = Scalar(d > 0 ? scale : -scale);
                            grad->at(n, c, y, xx + 1) += s;
                            grad->at(n, c, y, xx) -= s;
                        }
                    }
                    if (y + 1 < x.h) {
                        const double d = x.at(n, c, y + 1, xx) - v;
                        tv += std::abs(d);
                        if (grad && d != 0) {
                            const Scalar s = Scalar(d > 0 ? scale : -scale);
                            grad->at(n, c, y + 1, xx) += s;
                            grad->at(n, c, y, xx) -= s;
                        }
                    }
                }
    return tv;
}

// Sum over images of each image's l2 norm.
template <typename Scalar>
double l2_regularizer(const Tensor<Scalar>& x, Tensor<Scalar>* grad = nullptr, double scale = 1.0) {
    double total = 0;
    const int d = x.sample_size();
    for (int n = 0; n < x.n; ++n) {
        const Scalar* p = x.sample(n);
        double ss = 0;
        for (int i = 0; i < d; ++i) ss += double(p[i]) * p[i];
        const double norm = std::sqrt(ss);
        total += norm;
        if (grad && norm > 0)
            for (int i = 0; i < d; ++i) grad->sample(n)[i] += Scalar(scale * p[i] / norm);
    }
    return total;
}

template <typename Scalar>
std::vector<ChannelStats> stored_bn_stats(const ModelSnapshot<Scalar>& model) {
    std::vector<ChannelStats> out;
    for (int li : model.architecture().batch_norm_layers()) {
        const auto& p = model.state().params[li];
        out.push_back({li, p.running_mean.template cast<double>(), p.running_var.template cast<double>()});
    }
    return out;
}

// Batch statistics (mean, biased variance) at every batch-norm input, from an eval-mode tape.
template <typename Scalar>
std::vector<ChannelStats> batch_bn_stats(const ModelState<Scalar>& state, const ForwardTape<Scalar>& tape) {
    std::vector<ChannelStats> out;
    for (int li : state.arch.batch_norm_layers())
        out.push_back({li, tape.layers[li].batch_mean.template cast<double>(),
                       tape.layers[li].batch_var.template cast<double>()});
    return out;
}

// sum_l ||mu_l - m_l||_2 + ||sigma2_l - v_l||_2. Optionally returns d/dmu and d/dsigma2 per layer.
inline double feature_stats_loss(const std::vector<ChannelStats>& batch,
                                 const std::vector<ChannelStats>& stored,
                                 std::vector<ChannelStats>* grads = nullptr) {
    if (batch.size() != stored.size())
        throw ShapeError("feature statistics: " + std::to_string(batch.size()) + " batch layers vs " +
                         std::to_string(stored.size()) + " stored layers");
    double total = 0;
    if (grads) grads->clear();
    for (std::size_t l = 0; l < batch.size(); ++l) {
        if (batch[l].mean.size() != stored[l].mean.size() || batch[l].var.size() != stored[l].var.size())
            throw ShapeError("feature statistics: channel count mismatch at layer " +
                             std::to_string(stored[l].layer));
        const VectorXd dm = batch[l].mean - stored[l].mean;
        const VectorXd dv = batch[l].var - stored[l].var;
        const double nm = dm.norm(), nv = dv.norm();
        total += nm + nv;
        if (grads)
            grads->push_back({stored[l].layer, nm > 0 ? VectorXd(dm / nm) : VectorXd::Zero(dm.size()),
                              nv > 0 ? VectorXd(dv / nv) : VectorXd::Zero(dv.size())});
    }
    return total;
}

struct InversionTerms {
    double task = 0;  // summed cross-entropy
    double tv = 0;
    double l2 = 0;
    double feat = 0;
    double total = 0;
    std::vector<double> per_image_task;
};

template <typename Scalar>
struct InversionEvaluation {
    InversionTerms terms;
    Tensor<Scalar> grad;  // d total / d pixels (when requested)
    Mat<Scalar> logits;
};

template <typename Scalar>
InversionEvaluation<Scalar> evaluate_inversion_objective(const Tensor<Scalar>& images,
                                                         std::span<const int> labels,
                                                         const ModelSnapshot<Scalar>& model,
                                                         const InversionConfig& cfg, bool with_grad) {
    for (int y : labels)
        if (y == cfg.forget_class)
            throw ValidationError("inversion target labels must exclude the forget class " +
                                  std::to_string(cfg.forget_class));
    if (static_cast<int>(labels.size()) != images.n) throw ShapeError("one label per image required");
    InversionEvaluation<Scalar> out;
    const auto tape = forward_tape(model.state(), images, Mode::eval);
    out.logits = tape.logits;
    const auto ce = cross_entropy<Scalar>(tape.logits, labels, Reduction::sum);
    out.terms.per_image_task = cross_entropy_per_sample<Scalar>(tape.logits, labels);
    out.terms.task = ce.value;

    std::vector<ChannelStats> stat_dirs;
    out.terms.feat = feature_stats_loss(batch_bn_stats(model.state(), tape), stored_bn_stats(model),
                                        with_grad ? &stat_dirs : nullptr);
    if (with_grad) {
        std::vector<BatchStatGrad<Scalar>> sg(model.architecture().layers.size());
        if (cfg.alpha_f != 0)
            for (const auto& s : stat_dirs)
                sg[s.layer] = {(cfg.alpha_f * s.mean).template cast<Scalar>(),
                               (cfg.alpha_f * s.var).template cast<Scalar>()};
        out.grad = backward(model.state(), tape, ce.dlogits, true, &sg).input;
    }
    Tensor<Scalar>* g = with_grad ? &out.grad : nullptr;
    out.terms.tv = tv_regularizer(images, g, cfg.alpha_tv);
    out.terms.l2 = l2_regularizer(images, g, cfg.alpha_l2);
    out.terms.total = out.terms.task + cfg.alpha_tv * out.terms.tv + cfg.alpha_l2 * out.terms.l2 +
                      cfg.alpha_f * out.terms.feat;
    return out;
}

template <typename Scalar>
double inversion_objective(const Tensor<Scalar>& images, std::span<const int> labels,
                           const ModelSnapshot<Scalar>& model, const InversionConfig& cfg) {
    return evaluate_inversion_objective(images, labels, model, cfg, false).terms.total;
}

struct SyntheticDataset {
    LabeledDataset data;                 // partition "D_hat_r", synthetic = true
    std::vector<double> final_objective; // per image (batch-level term shared equally)
    double target_hit_rate = 0;          // fraction predicted as their target label
    bool quality_ok = false;
    std::vector<double> batch_initial_objective;
    std::vector<double> batch_final_objective;
    std::vector<std::string> warnings;
};

inline std::vector<int> retained_classes(int num_classes, int forget_class) {
    std::vector<int> out;
    for (int c = 0; c < num_classes; ++c)
        if (c != forget_class) out.push_back(c);
    return out;
}

// Runs the inversion for samples_per_class images of every retained class.
// Batches are independent: batch b draws its initialization from derive_seed(seed, b).
template <typename Scalar>
SyntheticDataset invert(const ModelSnapshot<Scalar>& model, const InversionConfig& cfg) {
    if (cfg.batch_size < 1) throw ValidationError("inversion batch size must be >= 1");
    if (cfg.samples_per_class < 1) throw ValidationError("samples_per_class must be >= 1");
    if (cfg.alpha_tv < 0 || cfg.alpha_l2 < 0 || cfg.alpha_f < 0)
        throw ValidationError("inversion coefficients must be non-negative");
    const auto& arch = model.architecture();
    const auto classes = retained_classes(arch.num_classes, cfg.forget_class);
    if (classes.empty()) throw ValidationError("no retained classes to invert");

    const int total = cfg.samples_per_class * static_cast<int>(classes.size());
    SyntheticDataset out;
    out.data.partition = "D_hat_r";
    out.data.shape = arch.input;
    out.data.num_classes = arch.num_classes;
    out.data.synthetic = true;
    out.data.pixels.reserve(static_cast<std::size_t>(total) * arch.input.size());
    long hits = 0;

    for (int start = 0, b = 0; start < total; start += cfg.batch_size, ++b) {
        const int n = std::min(cfg.batch_size, total - start);
        std::vector<int> labels(n);
        for (int i = 0; i < n; ++i) labels[i] = classes[(start + i) % classes.size()];

        std::mt19937_64 rng(derive_seed(cfg.seed, b));
        std::normal_distribution<double> gauss(0.0, 1.0);
        Tensor<Scalar> x(n, arch.input.channels, arch.input.height, arch.input.width);
        for (auto& v : x.data) v = Scalar(std::clamp(gauss(rng), double(kInputMin), double(kInputMax)));

        Vec<Scalar> m = Vec<Scalar>::Zero(x.size()), v = Vec<Scalar>::Zero(x.size());
        const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
        double first = 0;
        InversionEvaluation<Scalar> eval;
        for (int step = 0; step < cfg.steps; ++step) {
            eval = evaluate_inversion_objective(x, labels, model, cfg, true);
            if (step == 0) first = eval.terms.total;
            const Eigen::Map<const Vec<Scalar>> g(eval.grad.data.data(), x.size());
            m = Scalar(b1) * m + Scalar(1 - b1) * g;
            v = Scalar(b2) * v + Scalar(1 - b2) * g.cwiseProduct(g);
            const double bc1 = 1 - std::pow(b1, step + 1), bc2 = 1 - std::pow(b2, step + 1);
            Eigen::Map<Vec<Scalar>> xv(x.data.data(), x.size());
            xv.array() -= Scalar(cfg.lr / bc1) * m.array() / ((v.array() / Scalar(bc2)).sqrt() + Scalar(eps));
            xv = xv.cwiseMax(Scalar(kInputMin)).cwiseMin(Scalar(kInputMax));
        }
        eval = evaluate_inversion_objective(x, labels, model, cfg, false);
        if (cfg.steps == 0) first = eval.terms.total;
        out.batch_initial_objective.push_back(first);
        out.batch_final_objective.push_back(eval.terms.total);

        const auto pred = argmax_rows(eval.logits);
        const double shared = cfg.alpha_f * eval.terms.feat / n;
        std::vector<double> tv_i(n), l2_i(n);
        for (int i = 0; i < n; ++i) {
            Tensor<Scalar> one(1, x.c, x.h, x.w);
            std::copy(x.sample(i), x.sample(i) + x.sample_size(), one.sample(0));
            out.final_objective.push_back(eval.terms.per_image_task[i] +
                                          cfg.alpha_tv * tv_regularizer(one) +
                                          cfg.alpha_l2 * l2_regularizer(one) + shared);
            hits += pred[i] == labels[i];
            out.data.labels.push_back(labels[i]);
            for (int k = 0; k < x.sample_size(); ++k)
                out.data.pixels.push_back(static_cast<float>(x.sample(i)[k]));
        }
    }
    out.target_hit_rate = static_cast<double>(hits) / total;
    out.quality_ok = out.target_hit_rate >= cfg.quality_gate;
    if (!out.quality_ok) {
        char buf[160];
        std::snprintf(buf, sizeof(buf),
                      "inversion quality gate unmet: %.1f%% of synthetic images hit their target (gate %.1f%%)",
                      100 * out.target_hit_rate, 100 * cfg.quality_gate);
        out.warnings.emplace_back(buf);
    }
    out.data.extra["inversion"] = {{"samples_per_class", cfg.samples_per_class},
                                   {"steps", cfg.steps},
                                   {"lr", cfg.lr},
                                   {"alpha_tv", cfg.alpha_tv},
                                   {"alpha_l2", cfg.alpha_l2},
                                   {"alpha_f", cfg.alpha_f},
                                   {"forget_class", cfg.forget_class},
                                   {"seed", cfg.seed},
                                   {"target_hit_rate", out.target_hit_rate}};
    return out;
}

}  // namespace covarnav
