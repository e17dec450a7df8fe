#pragma once

// Ablation sweeps: covariance source (real D_r vs inverted D_hat_r) and the
// forgetting objective used under projection.

#include "covarnav/baselines.hpp"
#include "covarnav/metrics.hpp"

namespace covarnav {

struct AblationRow {
    std::string sweep;       // "covariance-source" or "objective"
    std::string setting;     // D_r / D_hat_r, or the strategy name
    std::uint64_t seed = 0;
    AccuracyReport after;
    nlohmann::json projection;
};

struct AblationPlan {
    std::vector<std::string> sources;  // "D_r" and / or "D_hat_r"
    std::vector<ForgetStrategy> objectives;
};

inline nlohmann::json to_json(const AblationRow& r) {
    return {{"sweep", r.sweep},
            {"setting", r.setting},
            {"seed", r.seed},
            {"acc", {{"df", r.after.df}, {"dr", r.after.dr}, {"dft", r.after.dft}, {"drt", r.after.drt}}},
            {"projection", r.projection}};
}

// One seed of both sweeps. The inverted proxy is shared by every cell;
// the covariance-source sweep uses the largest-wrong-logit objective and
// the objective sweep uses the inverted proxy.
template <typename Scalar>
std::vector<AblationRow> run_ablation(const ModelSnapshot<Scalar>& model, const Partitions& parts,
                                      const LabeledDataset& inverted_proxy, const CovarNavConfig& cfg,
                                      const AblationPlan& plan, double fgsm_epsilon = 0.03) {
    std::vector<AblationRow> rows;
    for (const auto& src : plan.sources) {
        if (src != "D_r" && src != "D_hat_r") throw ValidationError("unknown covariance source '" + src + "'");
        const LabeledDataset& proxy = src == "D_r" ? parts.retain : inverted_proxy;
        const auto relabeled = mislabel_largest_wrong_logit(model, parts.forget);
        auto out = navigate(model, relabeled, proxy, cfg);
        rows.push_back({"covariance-source", src, cfg.seed, measure(out.model, parts), out.report.details["projection"]});
    }
    for (auto s : plan.objectives) {
        const auto relabeled = relabel_for(s, model, parts.forget, fgsm_epsilon, derive_seed(cfg.seed, 5));
        auto out = navigate(model, relabeled, inverted_proxy, cfg);
        rows.push_back({"objective", to_string(s), cfg.seed, measure(out.model, parts), out.report.details["projection"]});
    }
    return rows;
}

// Mean / std of the retained-test accuracy per (sweep, setting) across seeds.
inline nlohmann::json summarize_ablation(const std::vector<AblationRow>& rows) {
    std::map<std::pair<std::string, std::string>, std::vector<AblationRow>> groups;
    std::vector<std::pair<std::string, std::string>> order;
    for (const auto& r : rows) {
        const auto key = std::make_pair(r.sweep, r.setting);
        if (!groups.count(key)) order.push_back(key);
        groups[key].push_back(r);
    }
    nlohmann::json table = nlohmann::json::array();
    for (const auto& key : order) {
        const auto& g = groups[key];
        nlohmann::json row = {{"sweep", key.first}, {"setting", key.second}, {"runs", g.size()}};
        for (const char* field : {"df", "dr", "dft", "drt"}) {
            std::vector<double> v;
            for (const auto& r : g) {
                const std::string f = field;
                v.push_back(f == "df" ? r.after.df : f == "dr" ? r.after.dr : f == "dft" ? r.after.dft : r.after.drt);
            }
            const auto ms = mean_std(v);
            row["mean"][field] = ms.mean;
            row["std"][field] = ms.std;
        }
        table.push_back(row);
    }
    return table;
}

}  // namespace covarnav
