#pragma once

// Command-line front end: train, invert, unlearn, evaluate, ablate,
// export-embeddings. Exit codes: 0 success, 2 validation failure, 3 runtime failure.

#include "covarnav/ablation.hpp"
#include "covarnav/baselines.hpp"
#include "covarnav/checkpoint.hpp"
#include "covarnav/config.hpp"
#include "covarnav/embeddings.hpp"
#include "covarnav/metrics.hpp"

#include <CLI11.hpp>

#include <iostream>

namespace covarnav {

inline constexpr int kExitOk = 0;
inline constexpr int kExitValidation = 2;
inline constexpr int kExitRuntime = 3;

using Real = double;

namespace fs = std::filesystem;

inline fs::path run_dir(const ExperimentConfig& c, const std::string& method, std::uint64_t seed) {
    return fs::path(c.output_dir) / c.dataset.name / method / std::to_string(seed);
}

inline fs::path original_checkpoint_path(const ExperimentConfig& c, std::uint64_t seed) {
    return run_dir(c, "original", seed) / "checkpoints" / "original.ckpt";
}

inline void write_json(const fs::path& path, const nlohmann::json& j) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw Error("cannot write " + path.string());
    out << j.dump(2) << '\n';
}

inline nlohmann::json stamp(const ExperimentConfig& c, std::uint64_t seed, nlohmann::json extra = {}) {
    nlohmann::json m = {{"config_fingerprint", fingerprint(c)}, {"seed", seed}, {"dataset", c.dataset.name},
                        {"forget_class", c.forget_class}};
    if (extra.is_object()) m.update(extra);
    return m;
}

inline InversionConfig inversion_for(const ExperimentConfig& c, std::uint64_t seed) {
    InversionConfig inv = c.inversion;
    inv.forget_class = c.forget_class;
    inv.seed = derive_seed(seed, 101);
    return inv;
}

inline TrainConfig train_for(const ExperimentConfig& c, std::uint64_t seed) {
    TrainConfig t = c.train;
    t.seed = seed;
    return t;
}

inline ModelSnapshot<Real> load_model_checked(const fs::path& path, const Architecture& expected) {
    if (!fs::exists(path)) throw ValidationError("checkpoint not found: " + path.string() + " (run 'train' first)");
    auto m = load_snapshot<Real>(path);
    if (!(m.architecture() == expected)) throw ShapeError("checkpoint " + path.string() + " does not match the config");
    return m;
}

inline ModelSnapshot<Real> train_and_save(const ExperimentConfig& c, const LabeledDataset& train, std::uint64_t seed,
                                          std::ostream& out) {
    const auto arch = architecture_of(c, train.shape);
    auto res = train_original<Real>(train, arch, train_for(c, seed));
    const auto path = original_checkpoint_path(c, seed);
    save_snapshot(res.model, path, stamp(c, seed, {{"role", "original"}}));
    write_json(run_dir(c, "original", seed) / "train_log.json",
               {{"config_fingerprint", fingerprint(c)},
                {"seed", seed},
                {"epoch_loss", res.log.epoch_loss},
                {"steps", res.log.steps},
                {"train_accuracy", res.log.train_accuracy}});
    out << path.string() << '\n';
    return res.model;
}

// Relearn times of the unlearned and scratch models; fills the AIN fields.
inline void attach_ain(UnlearningReport& r, const ModelSnapshot<Real>& original, const ModelSnapshot<Real>& unlearned,
                       const Partitions& parts, const ExperimentConfig& c, std::uint64_t seed) {
    RelearnConfig rc;
    rc.train = train_for(c, derive_seed(seed, 31));
    rc.alpha = c.alpha;
    rc.absolute_band = c.absolute_band;
    rc.cap = c.relearn_cap;
    const double ref = accuracy(original, parts.forget);
    const auto scratch = train_original<Real>(parts.retain, original.architecture(), train_for(c, seed)).model;
    const auto rs = relearn_time(scratch, parts.train, parts.forget, ref, rc);
    if (rs.steps > 0 && c.relearn_cap_multiplier > 0)
        rc.cap = static_cast<long>(std::ceil(c.relearn_cap_multiplier * rs.steps));
    const auto ru = relearn_time(unlearned, parts.train, parts.forget, ref, rc);
    r.rt_scratch = rs.steps;
    r.rt_unlearned = ru.steps;
    r.capped = ru.capped || rs.capped;
    r.details["relearn"] = {{"alpha", c.alpha}, {"absolute_band", c.absolute_band}, {"threshold", ru.threshold},
                            {"cap", rc.cap}, {"data", "D"}, {"scratch_capped", rs.capped}};
    if (rs.steps > 0) r.ain = anamnesis_index(ru.steps, rs.steps);
    else r.diagnostics.push_back("AIN undefined: the scratch model already lies within the relearn band");
}

inline LabeledDataset obtain_proxy(const ExperimentConfig& c, const ModelSnapshot<Real>& model, std::uint64_t seed,
                                   const std::string& proxy_path, UnlearningReport* report) {
    if (!proxy_path.empty()) {
        auto ds = load_packed(proxy_path);
        for (int y : ds.labels)
            if (y == c.forget_class) throw ValidationError("proxy set contains forget-class labels");
        return ds;
    }
    auto syn = invert(model, inversion_for(c, seed));
    if (report) {
        for (const auto& w : syn.warnings) report->diagnostics.push_back(w);
        report->details["inversion"] = {{"target_hit_rate", syn.target_hit_rate}, {"quality_ok", syn.quality_ok}};
    }
    return std::move(syn.data);
}

struct CliState {
    std::string config_path;
    std::vector<std::uint64_t> seeds;
    std::string model;
    std::string out;
    std::string method = "covarnav";
    std::string proxy;
    bool no_retain_access = false;
    bool ain = false;
    std::string before, after;
    std::vector<std::string> aggregate;
    std::vector<std::string> models, names;
    std::string split = "train";
    std::vector<std::string> sources = {"D_r", "D_hat_r"};
    std::vector<std::string> objectives = {"entropy", "random", "boundary-shrink", "largest-wrong-logit"};
};

inline std::vector<std::uint64_t> seeds_of(const CliState& s, const ExperimentConfig& c) {
    return s.seeds.empty() ? c.seeds : s.seeds;
}

inline void cmd_train(const CliState& s, std::ostream& out) {
    const auto c = load_config(s.config_path);
    const auto data = load_datasets(c);
    for (auto seed : seeds_of(s, c)) train_and_save(c, data.train, seed, out);
}

inline void cmd_invert(const CliState& s, std::ostream& out) {
    const auto c = load_config(s.config_path);
    const auto data = load_datasets(c);
    for (auto seed : seeds_of(s, c)) {
        const auto arch = architecture_of(c, data.train.shape);
        const auto model = load_model_checked(s.model.empty() ? original_checkpoint_path(c, seed) : fs::path(s.model), arch);
        auto syn = invert(model, inversion_for(c, seed));
        for (const auto& w : syn.warnings) std::cerr << "warning: " << w << '\n';
        syn.data.extra["config_fingerprint"] = fingerprint(c);
        syn.data.extra["target_hit_rate"] = syn.target_hit_rate;
        syn.data.extra["quality_ok"] = syn.quality_ok;
        const auto path = s.out.empty() ? run_dir(c, "inversion", seed) / "proxy.json" : fs::path(s.out);
        save_packed(syn.data, path);
        out << path.string() << '\n';
    }
}

inline void cmd_unlearn(const CliState& s, std::ostream& out) {
    const auto c = load_config(s.config_path);
    const bool is_covarnav = s.method == "covarnav";
    std::optional<BaselineMethod> baseline;
    if (!is_covarnav) baseline = baseline_from_string(s.method);
    if (s.no_retain_access) {
        if (baseline && needs_retained(*baseline))
            throw AccessError("method '" + s.method +
                              "' trains on the retained data D_r, which --no-retain-access forbids");
        if (is_covarnav && c.covariance_source == CovarianceSource::retained)
            throw AccessError("covariance_source 'retained' reads D_r, which --no-retain-access forbids");
    }
    const auto data = load_datasets(c);
    const auto parts = make_partitions(data.train, data.test, c.forget_class);
    const auto arch = architecture_of(c, data.train.shape);
    for (auto seed : seeds_of(s, c)) {
        const auto original =
            load_model_checked(s.model.empty() ? original_checkpoint_path(c, seed) : fs::path(s.model), arch);
        UnlearningOutcome<Real> res{original, {}, std::nullopt, std::nullopt, std::nullopt};
        const auto t0 = std::chrono::steady_clock::now();
        if (is_covarnav) {
            CovarNavConfig u = c.unlearning;
            u.seed = seed;
            UnlearningReport pre;
            const LabeledDataset proxy = c.covariance_source == CovarianceSource::retained
                                             ? parts.retain
                                             : obtain_proxy(c, original, seed, s.proxy, &pre);
            res = navigate(original, mislabel_largest_wrong_logit(original, parts.forget), proxy, u);
            for (const auto& d : pre.diagnostics) res.report.diagnostics.push_back(d);
            if (pre.details.contains("inversion")) res.report.details["inversion"] = pre.details["inversion"];
            res.report.details["covariance_source"] =
                c.covariance_source == CovarianceSource::retained ? "D_r" : "D_hat_r";
        } else {
            BaselineSpec spec = c.baseline;
            spec.method = *baseline;
            spec.seed = seed;
            res = run_baseline(spec, original, parts.forget, s.no_retain_access ? nullptr : &parts.retain);
        }
        res.report.details["retain_access"] = !s.no_retain_access;
        res.report.runtime_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        auto report = evaluate(original, res.model, parts, res.report);
        report.config_fingerprint = fingerprint(c);
        report.seed = seed;
        if (s.ain) attach_ain(report, original, res.model, parts, c, seed);
        for (const auto& d : report.diagnostics) std::cerr << "diagnostic: " << d << '\n';
        const auto dir = run_dir(c, s.method, seed);
        save_snapshot(res.model, dir / "checkpoints" / "unlearned.ckpt", stamp(c, seed, {{"role", "unlearned"},
                                                                                         {"method", s.method}}));
        if (res.projection) save_projection_set(*res.projection, dir / "checkpoints" / "projection.json");
        write_json(dir / "report.json", to_json(report));
        out << (dir / "report.json").string() << '\n';
    }
}

inline void cmd_evaluate(const CliState& s, std::ostream& out) {
    if (!s.aggregate.empty()) {
        std::vector<UnlearningReport> reports;
        for (const auto& p : s.aggregate) {
            std::ifstream in(p);
            if (!in) throw ValidationError("cannot open report " + p);
            nlohmann::json j;
            in >> j;
            const auto errs = validate_report_json(j);
            if (!errs.empty()) throw ValidationError(p + ": " + errs.front());
            reports.push_back(report_from_json(j));
        }
        const auto agg = aggregate_reports(reports);
        if (!s.out.empty()) write_json(s.out, agg);
        out << agg.dump(2) << '\n';
        return;
    }
    const auto c = load_config(s.config_path);
    if (s.before.empty() || s.after.empty()) throw ValidationError("evaluate needs --before and --after");
    const auto data = load_datasets(c);
    const auto parts = make_partitions(data.train, data.test, c.forget_class);
    const auto arch = architecture_of(c, data.train.shape);
    const auto before = load_model_checked(s.before, arch);
    const auto after = load_model_checked(s.after, arch);
    const auto seed = seeds_of(s, c).front();
    UnlearningReport r;
    r.method = checkpoint_metadata(s.after).value("method", std::string("evaluate"));
    r.seed = seed;
    r.config_fingerprint = fingerprint(c);
    const auto t0 = std::chrono::steady_clock::now();
    r = evaluate(before, after, parts, r);
    if (s.ain) attach_ain(r, before, after, parts, c, seed);
    r.runtime_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (!s.out.empty()) write_json(s.out, to_json(r));
    out << to_json(r).dump(2) << '\n';
}

inline void cmd_ablate(const CliState& s, std::ostream& out) {
    const auto c = load_config(s.config_path);
    const auto data = load_datasets(c);
    const auto parts = make_partitions(data.train, data.test, c.forget_class);
    const auto arch = architecture_of(c, data.train.shape);
    AblationPlan plan;
    plan.sources = s.sources;
    for (const auto& o : s.objectives) plan.objectives.push_back(forget_strategy_from_string(o));
    for (const auto& src : plan.sources)
        if (src != "D_r" && src != "D_hat_r") throw ValidationError("unknown covariance source '" + src + "'");
    std::vector<AblationRow> rows;
    for (auto seed : seeds_of(s, c)) {
        const auto ckpt = original_checkpoint_path(c, seed);
        const auto model = fs::exists(ckpt) ? load_model_checked(ckpt, arch) : train_and_save(c, data.train, seed, std::cerr);
        CovarNavConfig u = c.unlearning;
        u.seed = seed;
        const auto proxy = obtain_proxy(c, model, seed, s.proxy, nullptr);
        for (auto& r : run_ablation(model, parts, proxy, u, plan, c.baseline.epsilon)) rows.push_back(std::move(r));
    }
    nlohmann::json raw = nlohmann::json::array();
    for (const auto& r : rows) raw.push_back(to_json(r));
    const nlohmann::json table = {{"config_fingerprint", fingerprint(c)},
                                  {"rows", raw},
                                  {"summary", summarize_ablation(rows)}};
    const auto path = s.out.empty() ? fs::path(c.output_dir) / c.dataset.name / "ablation" / "table.json" : fs::path(s.out);
    write_json(path, table);
    out << path.string() << '\n';
}

inline void cmd_export_embeddings(const CliState& s, std::ostream& out) {
    const auto c = load_config(s.config_path);
    if (s.models.empty()) throw ValidationError("export-embeddings needs at least one --model");
    if (!s.names.empty() && s.names.size() != s.models.size())
        throw ValidationError("--name must be given once per --model");
    if (s.split != "train" && s.split != "test") throw ValidationError("--split must be 'train' or 'test'");
    const auto data = load_datasets(c);
    std::vector<std::pair<std::string, ModelSnapshot<Real>>> models;
    for (std::size_t i = 0; i < s.models.size(); ++i) {
        if (!fs::exists(s.models[i])) throw ValidationError("checkpoint not found: " + s.models[i]);
        models.emplace_back(s.names.empty() ? fs::path(s.models[i]).stem().string() : s.names[i],
                            load_snapshot<Real>(s.models[i]));
    }
    auto e = export_embeddings(models, s.split == "train" ? data.train : data.test, c.forget_class);
    e.metadata = {{"config_fingerprint", fingerprint(c)}, {"split", s.split}, {"checkpoints", s.models}};
    const auto path = s.out.empty() ? fs::path(c.output_dir) / c.dataset.name / "embeddings" / (s.split + ".json")
                                    : fs::path(s.out);
    save_embeddings(e, path);
    out << path.string() << '\n';
}

inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
    CLI::App app{"covarnav: class unlearning by covariance navigation"};
    app.require_subcommand(1);
    CliState s;
    const auto add_common = [&](CLI::App* sub) {
        sub->add_option("-c,--config", s.config_path, "experiment config (JSON)")->required();
        sub->add_option("--seed", s.seeds, "seed(s) to run; defaults to the config's seeds");
    };

    auto* train = app.add_subcommand("train", "train the original classifier");
    add_common(train);

    auto* inv = app.add_subcommand("invert", "synthesize a retained-class proxy set by model inversion");
    add_common(inv);
    inv->add_option("--model", s.model, "checkpoint to invert (default: the trained original)");
    inv->add_option("-o,--out", s.out, "output index path");

    auto* unl = app.add_subcommand("unlearn", "remove the forget class with covarnav or a baseline");
    add_common(unl);
    unl->add_option("-m,--method", s.method,
                    "covarnav, retrain, finetune, negative-gradient, random-labels, boundary-shrink, max-entropy, "
                    "largest-wrong-logit or lwl-l2");
    unl->add_option("--model", s.model, "original checkpoint (default: the trained original)");
    unl->add_option("--proxy", s.proxy, "precomputed proxy set (skips inversion)");
    unl->add_flag("--no-retain-access", s.no_retain_access, "refuse any use of the retained training data");
    unl->add_flag("--ain", s.ain, "also measure relearn times and the Anamnesis Index");

    auto* ev = app.add_subcommand("evaluate", "compare two checkpoints or aggregate reports");
    ev->add_option("-c,--config", s.config_path, "experiment config (JSON)");
    ev->add_option("--seed", s.seeds, "seed recorded in the report");
    ev->add_option("--before", s.before, "original checkpoint");
    ev->add_option("--after", s.after, "unlearned checkpoint");
    ev->add_option("--aggregate", s.aggregate, "report.json files to average");
    ev->add_option("-o,--out", s.out, "write the resulting JSON here too");
    ev->add_flag("--ain", s.ain, "also measure relearn times and the Anamnesis Index");

    auto* abl = app.add_subcommand("ablate", "covariance-source and forgetting-objective sweeps");
    add_common(abl);
    abl->add_option("--sources", s.sources, "covariance sources: D_r, D_hat_r")->delimiter(',');
    abl->add_option("--objectives", s.objectives, "entropy, random, boundary-shrink, largest-wrong-logit")
        ->delimiter(',');
    abl->add_option("--proxy", s.proxy, "precomputed proxy set (skips inversion)");
    abl->add_option("-o,--out", s.out, "output table path");

    auto* emb = app.add_subcommand("export-embeddings", "penultimate-layer vectors for visualization");
    add_common(emb);
    emb->add_option("--model", s.models, "checkpoint (repeatable)")->required();
    emb->add_option("--name", s.names, "display name per --model");
    emb->add_option("--split", s.split, "train or test");
    emb->add_option("-o,--out", s.out, "output index path");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? kExitOk : kExitValidation;
    }
    try {
        if (*train) cmd_train(s, out);
        else if (*inv) cmd_invert(s, out);
        else if (*unl) cmd_unlearn(s, out);
        else if (*ev) {
            if (s.aggregate.empty() && s.config_path.empty()) throw ValidationError("evaluate needs --config");
            cmd_evaluate(s, out);
        } else if (*abl) cmd_ablate(s, out);
        else if (*emb) cmd_export_embeddings(s, out);
    } catch (const AccessError& e) {
        err << "refused: " << e.what() << '\n';
        return kExitValidation;
    } catch (const ValidationError& e) {
        err << "invalid: " << e.what() << '\n';
        return kExitValidation;
    } catch (const ShapeError& e) {
        err << "invalid: " << e.what() << '\n';
        return kExitValidation;
    } catch (const VersionError& e) {
        err << "invalid: " << e.what() << '\n';
        return kExitValidation;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return kExitRuntime;
    }
    return kExitOk;
}

}  // namespace covarnav
