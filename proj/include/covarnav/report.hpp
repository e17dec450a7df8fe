#pragma once

// UnlearningReport and its JSON form. Every method (CovarNav and all
// baselines) emits the same field set.

#include "covarnav/common.hpp"

#include <json.hpp>

#include <optional>
#include <string>
#include <vector>

namespace covarnav {

struct AccuracyReport {
    double df = 0, dr = 0, dft = 0, drt = 0;
    int n_df = 0, n_dr = 0, n_dft = 0, n_drt = 0;

    bool operator==(const AccuracyReport&) const = default;
};

struct UnlearningReport {
    std::string method;
    std::uint64_t seed = 0;
    std::string config_fingerprint;
    std::optional<AccuracyReport> before;
    std::optional<AccuracyReport> after;
    std::optional<double> ain;
    std::optional<long> rt_unlearned;
    std::optional<long> rt_scratch;
    bool capped = false;
    double runtime_s = 0;
    std::vector<std::string> diagnostics;
    nlohmann::json details = nlohmann::json::object();
};

inline nlohmann::json accuracy_json(const std::optional<AccuracyReport>& a) {
    if (!a) return nullptr;
    return {{"df", a->df}, {"dr", a->dr}, {"dft", a->dft}, {"drt", a->drt}};
}

template <typename T>
nlohmann::json optional_json(const std::optional<T>& v) {
    return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
}

inline nlohmann::json to_json(const UnlearningReport& r) {
    nlohmann::json counts = nullptr;
    if (const auto& a = r.after ? r.after : r.before)
        counts = {{"df", a->n_df}, {"dr", a->n_dr}, {"dft", a->n_dft}, {"drt", a->n_drt}};
    return {{"method", r.method},
            {"seed", r.seed},
            {"config_fingerprint", r.config_fingerprint},
            {"acc", {{"before", accuracy_json(r.before)}, {"after", accuracy_json(r.after)}}},
            {"counts", counts},
            {"ain", optional_json(r.ain)},
            {"rt_unlearned", optional_json(r.rt_unlearned)},
            {"rt_scratch", optional_json(r.rt_scratch)},
            {"capped", r.capped},
            {"runtime_s", r.runtime_s},
            {"diagnostics", r.diagnostics},
            {"details", r.details}};
}

inline std::optional<AccuracyReport> accuracy_from_json(const nlohmann::json& acc, const nlohmann::json& counts) {
    if (acc.is_null()) return std::nullopt;
    AccuracyReport a{acc.at("df").get<double>(), acc.at("dr").get<double>(), acc.at("dft").get<double>(),
                     acc.at("drt").get<double>()};
    if (counts.is_object()) {
        a.n_df = counts.at("df").get<int>();
        a.n_dr = counts.at("dr").get<int>();
        a.n_dft = counts.at("dft").get<int>();
        a.n_drt = counts.at("drt").get<int>();
    }
    return a;
}

inline UnlearningReport report_from_json(const nlohmann::json& j) {
    UnlearningReport r;
    r.method = j.at("method").get<std::string>();
    r.seed = j.at("seed").get<std::uint64_t>();
    r.config_fingerprint = j.at("config_fingerprint").get<std::string>();
    r.before = accuracy_from_json(j.at("acc").at("before"), j.at("counts"));
    r.after = accuracy_from_json(j.at("acc").at("after"), j.at("counts"));
    if (!j.at("ain").is_null()) r.ain = j["ain"].get<double>();
    if (!j.at("rt_unlearned").is_null()) r.rt_unlearned = j["rt_unlearned"].get<long>();
    if (!j.at("rt_scratch").is_null()) r.rt_scratch = j["rt_scratch"].get<long>();
    r.capped = j.at("capped").get<bool>();
    r.runtime_s = j.at("runtime_s").get<double>();
    r.diagnostics = j.at("diagnostics").get<std::vector<std::string>>();
    r.details = j.value("details", nlohmann::json::object());
    return r;
}

// Structural check against the published report schema
// (schemas/unlearning_report.schema.json). Returns the list of violations.
inline std::vector<std::string> validate_report_json(const nlohmann::json& j) {
    std::vector<std::string> errs;
    if (!j.is_object()) return {"report must be an object"};
    const auto need = [&](const char* key, auto pred, const char* what) {
        if (!j.contains(key)) errs.push_back(std::string("missing field '") + key + "'");
        else if (!pred(j[key])) errs.push_back(std::string("field '") + key + "' must be " + what);
    };
    const auto num_or_null = [](const nlohmann::json& v) { return v.is_null() || v.is_number(); };
    const auto int_or_null = [](const nlohmann::json& v) { return v.is_null() || v.is_number_integer(); };
    need("method", [](const auto& v) { return v.is_string() && !v.template get<std::string>().empty(); }, "a non-empty string");
    need("seed", [](const auto& v) { return v.is_number_unsigned() || v.is_number_integer(); }, "an integer");
    need("config_fingerprint", [](const auto& v) { return v.is_string(); }, "a string");
    need("acc", [](const auto& v) { return v.is_object() && v.contains("before") && v.contains("after"); },
         "an object with 'before' and 'after'");
    need("counts", [](const auto& v) { return v.is_null() || v.is_object(); }, "an object or null");
    need("ain", num_or_null, "a number or null");
    need("rt_unlearned", int_or_null, "an integer or null");
    need("rt_scratch", int_or_null, "an integer or null");
    need("capped", [](const auto& v) { return v.is_boolean(); }, "a boolean");
    need("runtime_s", [](const auto& v) { return v.is_number() && v.template get<double>() >= 0; },
         "a non-negative number");
    need("diagnostics", [](const auto& v) { return v.is_array(); }, "an array");
    if (j.contains("acc") && j["acc"].is_object())
        for (const char* phase : {"before", "after"}) {
            if (!j["acc"].contains(phase)) continue;
            const auto& a = j["acc"][phase];
            if (a.is_null()) continue;
            for (const char* k : {"df", "dr", "dft", "drt"}) {
                if (!a.contains(k) || !a[k].is_number())
                    errs.push_back(std::string("acc.") + phase + "." + k + " must be a number");
                else if (a[k].get<double>() < 0 || a[k].get<double>() > 1)
                    errs.push_back(std::string("acc.") + phase + "." + k + " outside [0, 1]");
            }
        }
    static const std::vector<std::string> allowed = {
        "method",     "seed",       "config_fingerprint", "acc",     "counts",      "ain",
        "rt_unlearned", "rt_scratch", "capped",           "runtime_s", "diagnostics", "details"};
    for (const auto& [k, v] : j.items())
        if (std::find(allowed.begin(), allowed.end(), k) == allowed.end())
            errs.push_back("unexpected field '" + k + "'");
    return errs;
}

}  // namespace covarnav
