#pragma once

// Covariance navigation: per-layer uncentered activation covariances, their
// approximate null spaces, and the projected unlearning loop
//
//     theta <- theta - Proj_Null[ Adam(g, lr) ]
//
// For each projected layer with weight W (out x d) and null-space basis U
// (d x r), a step dW is replaced by dW * U * U^T, so dW x = 0 for every
// recorded layer input x in the span of the proxy activations.

#include "covarnav/dataset.hpp"
#include "covarnav/forgetting.hpp"
#include "covarnav/inversion.hpp"
#include "covarnav/network.hpp"
#include "covarnav/optim.hpp"
#include "covarnav/report.hpp"
#include "covarnav/training.hpp"

#include <Eigen/Eigenvalues>
#include <json.hpp>

#include <chrono>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>

namespace covarnav {

struct LayerCovariance {
    int layer = -1;
    MatrixXd S;        // d x d, sum of x x^T over recorded columns
    long columns = 0;  // number of accumulated columns
};

struct NullSpaceBasis {
    int layer = -1;
    int dim = 0;              // d_l
    int k = 0;                // retained (range) directions
    double rho = 0;           // energy fraction of the top-k eigenvalues
    VectorXd eigenvalues;     // descending, after zeroing below rank_tol * lambda_max
    MatrixXd basis;           // d x (d - k), orthonormal

    int null_dim() const { return static_cast<int>(basis.cols()); }
};

// Stacks the recorded columns of one layer into a d x M matrix (float64).
template <typename Scalar>
MatrixXd layer_input_matrix(std::span<const ActivationRecord<Scalar>> records, LayerKind kind) {
    if (records.empty()) throw ValidationError("no activation records");
    const int layer = records.front().layer;
    const auto rows = records.front().columns.rows();
    Eigen::Index cols = 0;
    for (const auto& r : records) {
        if (r.layer != layer) throw ValidationError("activation records from different layers");
        if (r.kind != kind) throw ValidationError("activation record kind mismatch");
        if (r.columns.rows() != rows)
            throw ShapeError("inconsistent layer-input dimension across records (" +
                             std::to_string(rows) + " vs " + std::to_string(r.columns.rows()) + ")");
        cols += r.columns.cols();
    }
    MatrixXd X(rows, cols);
    Eigen::Index at = 0;
    for (const auto& r : records) {
        X.middleCols(at, r.columns.cols()) = r.columns.template cast<double>();
        at += r.columns.cols();
    }
    return X;
}

inline LayerCovariance uncentered_covariance(const MatrixXd& X, int layer = -1) {
    if (!X.allFinite()) throw ValidationError("activation matrix has non-finite entries");
    LayerCovariance c;
    c.layer = layer;
    c.columns = X.cols();
    c.S = MatrixXd::Zero(X.rows(), X.rows());
    c.S.selfadjointView<Eigen::Lower>().rankUpdate(X);
    c.S = c.S.selfadjointView<Eigen::Lower>();
    return c;
}

// k = min{k : rho_k >= p} over the descending spectrum, where eigenvalues at or
// below rank_tol * lambda_max count as exact zeros. The trailing d - k
// eigenvectors form the basis. An all-zero S yields the full space (k = 0).
inline NullSpaceBasis approximate_null_basis(const MatrixXd& S, double p, double rank_tol = 1e-10,
                                             int layer = -1) {
    if (S.rows() != S.cols()) throw ShapeError("covariance must be square");
    if (p < 0 || p > 1) throw ValidationError("p must lie in [0, 1]");
    const int d = static_cast<int>(S.rows());
    Eigen::SelfAdjointEigenSolver<MatrixXd> es(S);
    if (es.info() != Eigen::Success) throw Error("eigendecomposition failed");
    // Eigen sorts ascending; flip to descending.
    VectorXd lambda = es.eigenvalues().reverse();
    MatrixXd vecs = es.eigenvectors().rowwise().reverse();
    const double lmax = d ? std::max(lambda[0], 0.0) : 0.0;
    for (int i = 0; i < d; ++i)
        if (lambda[i] <= rank_tol * lmax) lambda[i] = 0;

    NullSpaceBasis out;
    out.layer = layer;
    out.dim = d;
    out.eigenvalues = lambda;
    std::vector<double> cumulative(d + 1, 0.0);
    for (int i = 0; i < d; ++i) cumulative[i + 1] = cumulative[i] + lambda[i];
    const double total = cumulative[d];
    if (total <= 0) {
        out.k = 0;
        out.rho = 1;
    } else {
        int k = 0;
        while (k < d && cumulative[k] / total < p) ++k;
        out.k = k;
        out.rho = cumulative[k] / total;
    }
    out.basis = vecs.rightCols(d - out.k);
    return out;
}

inline std::vector<double> energy_ratios(const NullSpaceBasis& b) {
    std::vector<double> rho(b.dim + 1, 0.0);
    double total = b.eigenvalues.sum();
    for (int k = 1; k <= b.dim; ++k)
        rho[k] = rho[k - 1] + (total > 0 ? b.eigenvalues[k - 1] / total : 0.0);
    return rho;
}

// update * U U^T. Identity when the null space is the whole input space.
inline MatrixXd project_update(const MatrixXd& update, const NullSpaceBasis& basis) {
    if (update.cols() != basis.dim)
        throw ShapeError("update has " + std::to_string(update.cols()) + " columns but basis dimension is " +
                         std::to_string(basis.dim));
    if (basis.null_dim() == basis.dim) return update;
    if (basis.null_dim() == 0) return MatrixXd::Zero(update.rows(), update.cols());
    return (update * basis.basis) * basis.basis.transpose();
}

struct ProjectionSet {
    std::map<int, NullSpaceBasis> bases;
    std::string source_fingerprint;
    double p = 1.0;
    double rank_tol = 1e-10;

    bool covers(int layer) const { return bases.count(layer) > 0; }
    bool all_empty() const {
        for (const auto& [l, b] : bases)
            if (b.null_dim() > 0) return false;
        return true;
    }

    nlohmann::json summary() const {
        nlohmann::json layers = nlohmann::json::array();
        for (const auto& [l, b] : bases)
            layers.push_back({{"layer", l}, {"d", b.dim}, {"k", b.k}, {"null_dim", b.null_dim()}, {"rho", b.rho}});
        return {{"p", p}, {"rank_tol", rank_tol}, {"source_fingerprint", source_fingerprint}, {"layers", layers}};
    }
};

// Persist as <stem>.json (metadata) + <stem>.f64 (bases, column-major, concatenated).
inline void save_projection_set(const ProjectionSet& ps, const std::filesystem::path& index_path) {
    auto data_path = index_path;
    data_path.replace_extension(".f64");
    if (index_path.has_parent_path()) std::filesystem::create_directories(index_path.parent_path());
    std::ofstream data(data_path, std::ios::binary);
    if (!data) throw Error("cannot write " + data_path.string());
    nlohmann::json layers = nlohmann::json::array();
    std::size_t offset = 0;
    for (const auto& [l, b] : ps.bases) {
        const std::size_t n = static_cast<std::size_t>(b.basis.size());
        data.write(reinterpret_cast<const char*>(b.basis.data()), static_cast<std::streamsize>(n * sizeof(double)));
        data.write(reinterpret_cast<const char*>(b.eigenvalues.data()),
                   static_cast<std::streamsize>(b.dim * sizeof(double)));
        layers.push_back({{"layer", l}, {"d", b.dim}, {"k", b.k}, {"null_dim", b.null_dim()}, {"rho", b.rho},
                          {"offset", offset}});
        offset += (n + b.dim) * sizeof(double);
    }
    nlohmann::json j = {{"format", "covarnav-projection"}, {"version", 1},
                        {"p", ps.p},   {"rank_tol", ps.rank_tol},
                        {"source_fingerprint", ps.source_fingerprint},
                        {"data_file", data_path.filename().string()},
                        {"dtype", "float64"}, {"layers", layers}};
    std::ofstream(index_path) << j.dump(1) << '\n';
}

inline ProjectionSet load_projection_set(const std::filesystem::path& index_path) {
    std::ifstream in(index_path);
    if (!in) throw Error("cannot open " + index_path.string());
    nlohmann::json j;
    in >> j;
    if (j.value("format", "") != "covarnav-projection" || j.value("version", 0) != 1)
        throw VersionError("not a version-1 projection set");
    ProjectionSet ps;
    ps.p = j.at("p").get<double>();
    ps.rank_tol = j.at("rank_tol").get<double>();
    ps.source_fingerprint = j.at("source_fingerprint").get<std::string>();
    std::ifstream data(index_path.parent_path() / j.at("data_file").get<std::string>(), std::ios::binary);
    for (const auto& l : j.at("layers")) {
        NullSpaceBasis b;
        b.layer = l.at("layer").get<int>();
        b.dim = l.at("d").get<int>();
        b.k = l.at("k").get<int>();
        b.rho = l.at("rho").get<double>();
        b.basis.resize(b.dim, l.at("null_dim").get<int>());
        b.eigenvalues.resize(b.dim);
        data.seekg(static_cast<std::streamoff>(l.at("offset").get<std::size_t>()));
        data.read(reinterpret_cast<char*>(b.basis.data()), static_cast<std::streamsize>(b.basis.size() * sizeof(double)));
        data.read(reinterpret_cast<char*>(b.eigenvalues.data()), static_cast<std::streamsize>(b.dim * sizeof(double)));
        if (!data) throw IntegrityError("projection payload truncated");
        ps.bases[b.layer] = std::move(b);
    }
    return ps;
}

struct CovarNavConfig {
    double p = 1.0;
    double lr = 1e-3;
    int epochs = 25;
    int batch_size = 64;  // 0 = the whole forget set in one step per epoch
    double rank_tol = 1e-10;
    std::vector<int> project_layers;  // empty = every conv / linear layer
    bool project_before_adam = false;
    bool refresh_covariance = false;
    bool update_biases = false;       // biases and BN affine stay frozen by default
    int covariance_chunk = 128;
    std::uint64_t seed = 0;

    void validate() const {
        if (p < 0 || p > 1) throw ValidationError("p must lie in [0, 1]");
        if (!(lr > 0)) throw ValidationError("learning rate must be positive");
        if (epochs < 0) throw ValidationError("epochs must be non-negative");
        if (batch_size < 0) throw ValidationError("batch size must be non-negative");
        if (rank_tol < 0) throw ValidationError("rank_tol must be non-negative");
    }
};

// Accumulates S_l = sum_b X_b X_b^T per selected layer over the proxy set
// in eval mode, then extracts the bases.
template <typename Scalar>
std::map<int, LayerCovariance> accumulate_covariances(const ModelSnapshot<Scalar>& model,
                                                      const LabeledDataset& proxy,
                                                      const std::vector<int>& layers_in, int chunk) {
    if (proxy.empty()) throw ValidationError("proxy set for covariance is empty");
    const auto& arch = model.architecture();
    std::vector<int> layers = layers_in.empty() ? arch.projectable_layers() : layers_in;
    std::map<int, LayerCovariance> cov;
    for (int l : layers) {
        if (l < 0 || l >= static_cast<int>(arch.layers.size()) || !arch.layers[l].projectable())
            throw ValidationError("layer " + std::to_string(l) + " is not a conv/linear layer");
        const int d = arch.layers[l].input_dim();
        cov[l] = {l, MatrixXd::Zero(d, d), 0};
    }
    for (int b = 0; b < proxy.size(); b += std::max(1, chunk)) {
        const int e = std::min(proxy.size(), b + std::max(1, chunk));
        const auto cap = forward_with_activations(model, proxy.batch_range<Scalar>(b, e).images);
        for (const auto& rec : cap.records) {
            auto it = cov.find(rec.layer);
            if (it == cov.end()) continue;
            const MatrixXd X = rec.columns.template cast<double>();
            it->second.S.template selfadjointView<Eigen::Lower>().rankUpdate(X);
            it->second.columns += X.cols();
        }
    }
    for (auto& [l, c] : cov) c.S = c.S.template selfadjointView<Eigen::Lower>();
    return cov;
}

template <typename Scalar>
ProjectionSet build_projection_set(const ModelSnapshot<Scalar>& model, const LabeledDataset& proxy,
                                   const CovarNavConfig& cfg) {
    ProjectionSet ps;
    ps.p = cfg.p;
    ps.rank_tol = cfg.rank_tol;
    ps.source_fingerprint = proxy.fingerprint();
    for (const auto& [l, c] : accumulate_covariances(model, proxy, cfg.project_layers, cfg.covariance_chunk))
        ps.bases[l] = approximate_null_basis(c.S, cfg.p, cfg.rank_tol, l);
    return ps;
}

// Settings of the first-order forgetting loop shared by CovarNav and the
// objective-swapping baselines.
struct DescentConfig {
    double lr = 1e-3;
    int epochs = 25;
    int batch_size = 64;
    bool project_before_adam = false;
    double anchor_l2 = 0;  // lambda for lambda * ||theta - theta*||^2
    TrainableSet trainable = TrainableSet::weights_only();
    std::uint64_t seed = 0;
};

struct DescentLog {
    std::vector<double> epoch_loss;
    long steps = 0;
};

// Minimizes the strategy's forgetting objective on `set` with Adam, eval-mode
// batch norm, and (when `projection` is given) each covered layer's step
// projected onto its null space. `refresh` rebuilds the projection from the
// current parameters at the start of every epoch after the first.
template <typename Scalar>
ModelSnapshot<Scalar> forgetting_descent(const ModelSnapshot<Scalar>& start, const MislabeledForgetSet& set,
                                         const DescentConfig& cfg, const ProjectionSet* projection,
                                         DescentLog* log = nullptr,
                                         const std::function<ProjectionSet(const ModelSnapshot<Scalar>&)>& refresh = {}) {
    if (set.data.empty()) throw ValidationError("forget set is empty");
    if (cfg.epochs == 0) return start;
    auto state = start.mutable_copy();
    const auto& anchor = start.state();
    Adam<Scalar> adam(state, AdamConfig{cfg.lr}, cfg.trainable);
    std::mt19937_64 rng(cfg.seed);
    const int bs = cfg.batch_size > 0 ? cfg.batch_size : set.size();
    std::optional<ProjectionSet> refreshed;

    const auto project_all = [&](std::vector<LayerParams<Scalar>>& slots, const ProjectionSet* ps) {
        if (!ps) return;
        for (const auto& [l, basis] : ps->bases) {
            auto& w = slots[l].weight;
            if (!w.size()) continue;
            w = project_update(w.template cast<double>(), basis).template cast<Scalar>();
        }
    };

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        if (refresh && epoch > 0) refreshed = refresh(ModelSnapshot<Scalar>(state));
        const ProjectionSet* ps = refreshed ? &*refreshed : projection;
        const auto order = shuffled_indices(set.size(), rng);
        double loss_sum = 0;
        for (int b = 0; b < set.size(); b += bs) {
            const int e = std::min(set.size(), b + bs);
            const auto batch = set.data.batch<Scalar>(std::span<const int>(order.data() + b, e - b));
            const auto tape = forward_tape(state, batch.images, Mode::eval);
            const auto loss = forgetting_objective<Scalar>(set.strategy, tape.logits, batch.labels);
            if (!std::isfinite(loss.value)) throw TrainingError("non-finite forgetting loss");
            loss_sum += loss.value * (e - b);
            auto grads = backward(state, tape, loss.dlogits).layers;
            if (cfg.anchor_l2 > 0)
                for_each_slot(state, grads, cfg.trainable, [&](int li, auto& param, const auto&) {
                    using T = std::remove_cvref_t<decltype(param)>;
                    auto& g = slot<T>(grads[li]);
                    g += Scalar(2 * cfg.anchor_l2) * (param - slot<T>(anchor.params[li]));
                });
            if (cfg.project_before_adam) project_all(grads, ps);
            auto step = adam.compute_step(state, grads);
            if (!cfg.project_before_adam) project_all(step, ps);
            apply_step(state, step, cfg.trainable);
            if (log) ++log->steps;
        }
        if (log) log->epoch_loss.push_back(loss_sum / set.size());
    }
    return ModelSnapshot<Scalar>(std::move(state));
}

template <typename Scalar>
struct UnlearningOutcome {
    ModelSnapshot<Scalar> model;
    UnlearningReport report;
    std::optional<ProjectionSet> projection;
    std::optional<SyntheticDataset> proxy;
    std::optional<MislabeledForgetSet> relabeled;
};

inline DescentConfig descent_config(const CovarNavConfig& cfg) {
    DescentConfig d;
    d.lr = cfg.lr;
    d.epochs = cfg.epochs;
    d.batch_size = cfg.batch_size;
    d.project_before_adam = cfg.project_before_adam;
    d.trainable = cfg.update_biases ? TrainableSet::all() : TrainableSet::weights_only();
    d.seed = derive_seed(cfg.seed, 7);
    return d;
}

// Steps 2 and 3 given an already relabeled forget set and a proxy dataset.
template <typename Scalar>
UnlearningOutcome<Scalar> navigate(const ModelSnapshot<Scalar>& model, const MislabeledForgetSet& relabeled,
                                   const LabeledDataset& proxy, const CovarNavConfig& cfg,
                                   std::string method = "covarnav") {
    cfg.validate();
    const auto t0 = std::chrono::steady_clock::now();
    UnlearningOutcome<Scalar> out{model, {}, std::nullopt, std::nullopt, relabeled};
    out.report.method = std::move(method);
    out.report.seed = cfg.seed;
    auto ps = build_projection_set(model, proxy, cfg);
    out.report.details["projection"] = ps.summary();
    out.report.details["proxy_size"] = proxy.size();
    out.report.details["strategy"] = to_string(relabeled.strategy);

    const auto all_layers = model.architecture().projectable_layers();
    const bool every_layer_projected = cfg.project_layers.empty() ||
        std::all_of(all_layers.begin(), all_layers.end(), [&](int l) { return ps.covers(l); });
    if (every_layer_projected && ps.all_empty() && !cfg.update_biases) {
        out.report.diagnostics.push_back(
            "cannot forget: the null space is empty at every projected layer; returning the original model");
    } else {
        std::function<ProjectionSet(const ModelSnapshot<Scalar>&)> refresh;
        if (cfg.refresh_covariance)
            refresh = [&](const ModelSnapshot<Scalar>& m) { return build_projection_set(m, proxy, cfg); };
        DescentLog log;
        out.model = forgetting_descent(model, relabeled, descent_config(cfg), &ps, &log, refresh);
        out.report.details["epoch_loss"] = log.epoch_loss;
        out.report.details["steps"] = log.steps;
    }
    out.projection = std::move(ps);
    out.report.runtime_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return out;
}

// The full pipeline: invert (unless a proxy is injected), relabel D_f by the
// largest wrong logit, and run the projected descent.
template <typename Scalar>
UnlearningOutcome<Scalar> covarnav_unlearn(const ModelSnapshot<Scalar>& model, const LabeledDataset& forget_set,
                                           const CovarNavConfig& cfg, const InversionConfig& inversion,
                                           const LabeledDataset* injected_proxy = nullptr) {
    const auto t0 = std::chrono::steady_clock::now();
    const int cf = single_class_of(forget_set);
    std::optional<SyntheticDataset> synthetic;
    if (!injected_proxy) {
        InversionConfig inv = inversion;
        inv.forget_class = cf;
        synthetic = invert(model, inv);
    }
    const LabeledDataset& proxy = injected_proxy ? *injected_proxy : synthetic->data;
    const auto relabeled = mislabel_largest_wrong_logit(model, forget_set);
    auto out = navigate(model, relabeled, proxy, cfg);
    if (synthetic) {
        out.report.details["inversion"] = {{"target_hit_rate", synthetic->target_hit_rate},
                                           {"quality_ok", synthetic->quality_ok}};
        for (const auto& w : synthetic->warnings) out.report.diagnostics.push_back(w);
        out.proxy = std::move(synthetic);
    }
    out.report.details["covariance_source"] = injected_proxy ? injected_proxy->partition : "D_hat_r";
    out.report.runtime_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return out;
}

}  // namespace covarnav
