#pragma once

// ExperimentConfig: one JSON document holding every knob of a run. Unknown
// keys are rejected; missing keys take the defaults below. The fingerprint
// hashes the canonical (sorted-key, defaults-filled) serialization.

#include "covarnav/baselines.hpp"
#include "covarnav/checkpoint.hpp"
#include "covarnav/covariance_navigation.hpp"
#include "covarnav/dataset.hpp"
#include "covarnav/inversion.hpp"
#include "covarnav/metrics.hpp"

#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <set>

namespace covarnav {

struct DatasetSpec {
    std::string kind = "glyphs";  // glyphs | packed | image-dir | cifar10
    std::string name = "glyphs";
    std::string train_path;       // packed index, image root, or CIFAR batch dir
    std::string test_path;
    int per_class = 500;          // glyphs: train images per class; cifar10: cap per class (0 = all)
    int test_per_class = 100;
    int image_size = 16;
    double noise = 0.3;
    int num_classes = 10;
    std::uint64_t seed = 1;
};

enum class CovarianceSource { inverted, retained };

struct ExperimentConfig {
    DatasetSpec dataset;
    std::vector<int> channels = {16, 32, 64};
    int pool_blocks = -1;
    int forget_class = 0;
    TrainConfig train;
    InversionConfig inversion;
    CovarNavConfig unlearning;
    CovarianceSource covariance_source = CovarianceSource::inverted;
    BaselineSpec baseline;
    double alpha = 0.1;
    long relearn_cap = 1000;
    double relearn_cap_multiplier = 50;
    bool absolute_band = false;
    std::vector<std::uint64_t> seeds = {0};
    std::string output_dir = "results";

    ExperimentConfig() {
        train.epochs = 10;
        inversion.samples_per_class = 20;
        inversion.steps = 200;
    }
};

namespace detail {

// Reads j[key] into out if present; records the key as consumed.
struct Reader {
    const nlohmann::json& j;
    std::string where;
    std::set<std::string> seen;

    Reader(const nlohmann::json& j_, std::string where_) : j(j_), where(std::move(where_)) {}

    template <typename T>
    void get(const char* key, T& out) {
        seen.insert(key);
        if (!j.contains(key)) return;
        try {
            out = j.at(key).get<T>();
        } catch (const nlohmann::json::exception& e) {
            throw ValidationError(where + key + ": " + e.what());
        }
    }

    const nlohmann::json* object(const char* key) {
        seen.insert(key);
        if (!j.contains(key)) return nullptr;
        if (!j.at(key).is_object()) throw ValidationError(where + key + " must be an object");
        return &j.at(key);
    }

    void finish() const {
        for (const auto& [k, v] : j.items())
            if (!seen.count(k)) throw ValidationError("unknown config key '" + where + k + "'");
    }
};

}  // namespace detail

inline nlohmann::json to_json(const ExperimentConfig& c) {
    const auto& d = c.dataset;
    const auto& u = c.unlearning;
    const auto& b = c.baseline;
    const auto& inv = c.inversion;
    return {
        {"dataset",
         {{"kind", d.kind}, {"name", d.name}, {"train_path", d.train_path}, {"test_path", d.test_path},
          {"per_class", d.per_class}, {"test_per_class", d.test_per_class}, {"image_size", d.image_size},
          {"noise", d.noise}, {"num_classes", d.num_classes}, {"seed", d.seed}}},
        {"architecture", {{"channels", c.channels}, {"pool_blocks", c.pool_blocks}}},
        {"forget_class", c.forget_class},
        {"train",
         {{"epochs", c.train.epochs}, {"batch_size", c.train.batch_size}, {"lr", c.train.sgd.lr},
          {"momentum", c.train.sgd.momentum}, {"weight_decay", c.train.sgd.weight_decay},
          {"cosine_schedule", c.train.cosine_schedule}}},
        {"inversion",
         {{"batch_size", inv.batch_size}, {"steps", inv.steps}, {"lr", inv.lr}, {"alpha_tv", inv.alpha_tv},
          {"alpha_l2", inv.alpha_l2}, {"alpha_f", inv.alpha_f}, {"samples_per_class", inv.samples_per_class},
          {"quality_gate", inv.quality_gate}}},
        {"unlearning",
         {{"p", u.p}, {"lr", u.lr}, {"epochs", u.epochs}, {"batch_size", u.batch_size}, {"rank_tol", u.rank_tol},
          {"project_layers", u.project_layers}, {"project_before_adam", u.project_before_adam},
          {"refresh_covariance", u.refresh_covariance}, {"update_biases", u.update_biases},
          {"covariance_chunk", u.covariance_chunk},
          {"covariance_source", c.covariance_source == CovarianceSource::inverted ? "inverted" : "retained"}}},
        {"baseline",
         {{"lr", b.lr}, {"epochs", b.epochs}, {"batch_size", b.batch_size}, {"l2_lambda", b.l2_lambda},
          {"epsilon", b.epsilon}, {"finetune_lr_multiplier", b.finetune_lr_multiplier},
          {"update_biases", b.update_biases}}},
        {"metrics",
         {{"alpha", c.alpha}, {"relearn_cap", c.relearn_cap}, {"relearn_cap_multiplier", c.relearn_cap_multiplier},
          {"absolute_band", c.absolute_band}}},
        {"seeds", c.seeds},
        {"output_dir", c.output_dir},
    };
}

inline void validate(const ExperimentConfig& c) {
    static const std::set<std::string> kinds = {"glyphs", "packed", "image-dir", "cifar10"};
    if (!kinds.count(c.dataset.kind)) throw ValidationError("unknown dataset kind '" + c.dataset.kind + "'");
    if (c.dataset.name.empty() || c.dataset.name.find('/') != std::string::npos)
        throw ValidationError("dataset name must be a non-empty path component");
    if (c.dataset.num_classes < 2) throw ValidationError("need at least 2 classes");
    if (c.forget_class < 0 || c.forget_class >= c.dataset.num_classes)
        throw ValidationError("forget_class " + std::to_string(c.forget_class) + " outside [0, " +
                              std::to_string(c.dataset.num_classes - 1) + "]");
    if (c.dataset.kind != "glyphs") {
        for (const auto* p : {&c.dataset.train_path, &c.dataset.test_path}) {
            if (p->empty()) throw ValidationError("dataset." + c.dataset.kind + " needs train_path and test_path");
            if (!std::filesystem::exists(resolve_data_path(*p)))
                throw ValidationError("dataset path does not exist: " + resolve_data_path(*p).string());
        }
    }
    if (c.dataset.kind == "glyphs" && (c.dataset.per_class < 1 || c.dataset.test_per_class < 1 ||
                                       c.dataset.image_size < 4))
        throw ValidationError("glyph dataset needs per_class, test_per_class >= 1 and image_size >= 4");
    if (c.channels.empty()) throw ValidationError("architecture needs at least one conv block");
    for (int ch : c.channels)
        if (ch < 1) throw ValidationError("channel counts must be positive");
    if (c.train.epochs < 0 || c.train.batch_size < 1 || !(c.train.sgd.lr > 0))
        throw ValidationError("invalid training block");
    if (c.inversion.batch_size < 1 || c.inversion.steps < 0 || c.inversion.samples_per_class < 1 ||
        !(c.inversion.lr > 0))
        throw ValidationError("invalid inversion block");
    c.unlearning.validate();
    c.baseline.validate();
    if (!(c.alpha > 0 && c.alpha < 1)) throw ValidationError("metrics.alpha must lie in (0, 1)");
    if (c.relearn_cap < 0 || c.relearn_cap_multiplier < 0) throw ValidationError("relearn caps must be non-negative");
    if (c.seeds.empty()) throw ValidationError("at least one seed is required");
    if (c.output_dir.empty()) throw ValidationError("output_dir must be set");
}

inline ExperimentConfig config_from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw ValidationError("config must be a JSON object");
    ExperimentConfig c;
    detail::Reader top{j, ""};
    if (const auto* d = top.object("dataset")) {
        detail::Reader r{*d, "dataset."};
        r.get("kind", c.dataset.kind);
        r.get("name", c.dataset.name);
        r.get("train_path", c.dataset.train_path);
        r.get("test_path", c.dataset.test_path);
        r.get("per_class", c.dataset.per_class);
        r.get("test_per_class", c.dataset.test_per_class);
        r.get("image_size", c.dataset.image_size);
        r.get("noise", c.dataset.noise);
        r.get("num_classes", c.dataset.num_classes);
        r.get("seed", c.dataset.seed);
        r.finish();
    }
    if (const auto* a = top.object("architecture")) {
        detail::Reader r{*a, "architecture."};
        r.get("channels", c.channels);
        r.get("pool_blocks", c.pool_blocks);
        r.finish();
    }
    top.get("forget_class", c.forget_class);
    if (const auto* t = top.object("train")) {
        detail::Reader r{*t, "train."};
        r.get("epochs", c.train.epochs);
        r.get("batch_size", c.train.batch_size);
        r.get("lr", c.train.sgd.lr);
        r.get("momentum", c.train.sgd.momentum);
        r.get("weight_decay", c.train.sgd.weight_decay);
        r.get("cosine_schedule", c.train.cosine_schedule);
        r.finish();
    }
    if (const auto* t = top.object("inversion")) {
        detail::Reader r{*t, "inversion."};
        r.get("batch_size", c.inversion.batch_size);
        r.get("steps", c.inversion.steps);
        r.get("lr", c.inversion.lr);
        r.get("alpha_tv", c.inversion.alpha_tv);
        r.get("alpha_l2", c.inversion.alpha_l2);
        r.get("alpha_f", c.inversion.alpha_f);
        r.get("samples_per_class", c.inversion.samples_per_class);
        r.get("quality_gate", c.inversion.quality_gate);
        r.finish();
    }
    if (const auto* t = top.object("unlearning")) {
        detail::Reader r{*t, "unlearning."};
        auto& u = c.unlearning;
        r.get("p", u.p);
        r.get("lr", u.lr);
        r.get("epochs", u.epochs);
        r.get("batch_size", u.batch_size);
        r.get("rank_tol", u.rank_tol);
        r.get("project_layers", u.project_layers);
        r.get("project_before_adam", u.project_before_adam);
        r.get("refresh_covariance", u.refresh_covariance);
        r.get("update_biases", u.update_biases);
        r.get("covariance_chunk", u.covariance_chunk);
        std::string src = "inverted";
        r.get("covariance_source", src);
        if (src == "inverted") c.covariance_source = CovarianceSource::inverted;
        else if (src == "retained") c.covariance_source = CovarianceSource::retained;
        else throw ValidationError("unlearning.covariance_source must be 'inverted' or 'retained'");
        r.finish();
    }
    if (const auto* t = top.object("baseline")) {
        detail::Reader r{*t, "baseline."};
        auto& b = c.baseline;
        r.get("lr", b.lr);
        r.get("epochs", b.epochs);
        r.get("batch_size", b.batch_size);
        r.get("l2_lambda", b.l2_lambda);
        r.get("epsilon", b.epsilon);
        r.get("finetune_lr_multiplier", b.finetune_lr_multiplier);
        r.get("update_biases", b.update_biases);
        r.finish();
    }
    if (const auto* t = top.object("metrics")) {
        detail::Reader r{*t, "metrics."};
        r.get("alpha", c.alpha);
        r.get("relearn_cap", c.relearn_cap);
        r.get("relearn_cap_multiplier", c.relearn_cap_multiplier);
        r.get("absolute_band", c.absolute_band);
        r.finish();
    }
    top.get("seeds", c.seeds);
    top.get("output_dir", c.output_dir);
    top.finish();
    c.baseline.train = c.train;
    validate(c);
    return c;
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ValidationError("cannot open config " + path.string());
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::parse_error& e) {
        throw ValidationError("config " + path.string() + " is not valid JSON: " + e.what());
    }
    return config_from_json(j);
}

inline std::string canonical_dump(const ExperimentConfig& c) { return to_json(c).dump(); }

inline std::string fingerprint(const ExperimentConfig& c) { return fnv1a_hex(canonical_dump(c)); }

inline Architecture architecture_of(const ExperimentConfig& c, Shape input) {
    return make_conv_net(input, c.dataset.num_classes, c.channels, c.pool_blocks);
}

struct LoadedData {
    LabeledDataset train, test;
};

inline LoadedData load_datasets(const ExperimentConfig& c) {
    const auto& d = c.dataset;
    LoadedData out;
    if (d.kind == "glyphs") {
        out.train = make_glyphs({d.per_class, d.image_size, d.noise, d.seed, d.num_classes}, "D");
        out.test = make_glyphs({d.test_per_class, d.image_size, d.noise, derive_seed(d.seed, 1), d.num_classes}, "test");
    } else if (d.kind == "packed") {
        out.train = load_packed(d.train_path);
        out.test = load_packed(d.test_path);
    } else if (d.kind == "image-dir") {
        out.train = load_image_dir(d.train_path, "D");
        out.test = load_image_dir(d.test_path, "test");
    } else {
        out.train = load_cifar10_bin(d.train_path, true, d.per_class);
        out.test = load_cifar10_bin(d.test_path, false, d.test_per_class);
    }
    if (out.train.num_classes != d.num_classes || out.test.num_classes != d.num_classes)
        throw ValidationError("dataset has " + std::to_string(out.train.num_classes) + " classes but config says " +
                              std::to_string(d.num_classes));
    if (!(out.train.shape == out.test.shape)) throw ShapeError("train and test image shapes differ");
    return out;
}

}  // namespace covarnav
