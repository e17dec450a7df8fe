#pragma once

// Penultimate-layer embeddings of one or more models over a shared dataset,
// exported for external visualization (TSNE and friends).

#include "covarnav/dataset.hpp"
#include "covarnav/network.hpp"

#include <json.hpp>

#include <filesystem>
#include <fstream>

namespace covarnav {

// Input of the final linear layer for every sample, N x D, eval mode.
template <typename Scalar>
Mat<Scalar> penultimate(const ModelSnapshot<Scalar>& model, const LabeledDataset& ds, int chunk = 256) {
    if (ds.empty()) throw ValidationError("no samples to embed");
    const int d = model.architecture().layers[model.architecture().head_layer()].in;
    Mat<Scalar> out(ds.size(), d);
    for (int b = 0; b < ds.size(); b += chunk) {
        const int e = std::min(ds.size(), b + chunk);
        const auto tape = forward_tape(model.state(), ds.batch_range<Scalar>(b, e).images, Mode::eval);
        const auto& h = tape.head_input;
        for (int i = 0; i < e - b; ++i)
            for (int j = 0; j < d; ++j) out(b + i, j) = h.data[static_cast<std::size_t>(i) * d + j];
    }
    return out;
}

struct EmbeddingExport {
    std::vector<std::string> model_names;
    std::vector<Mat<float>> vectors;  // one N x D block per model
    std::vector<int> labels;
    std::vector<std::uint8_t> forget_mask;
    int forget_class = -1;
    std::string dataset_fingerprint;
    nlohmann::json metadata = nlohmann::json::object();

    int size() const { return static_cast<int>(labels.size()); }
};

template <typename Scalar>
EmbeddingExport export_embeddings(const std::vector<std::pair<std::string, ModelSnapshot<Scalar>>>& models,
                                  const LabeledDataset& ds, int forget_class) {
    if (models.empty()) throw ValidationError("no models to embed");
    const auto& arch = models.front().second.architecture();
    for (const auto& [name, m] : models)
        if (!(m.architecture() == arch))
            throw ShapeError("model '" + name + "' has a different architecture from '" + models.front().first + "'");
    if (forget_class < 0 || forget_class >= arch.num_classes) throw ValidationError("forget class out of range");
    EmbeddingExport out;
    out.labels = ds.labels;
    out.forget_class = forget_class;
    out.dataset_fingerprint = ds.fingerprint();
    for (int y : ds.labels) out.forget_mask.push_back(y == forget_class ? 1 : 0);
    for (const auto& [name, m] : models) {
        out.model_names.push_back(name);
        out.vectors.push_back(penultimate(m, ds).template cast<float>());
    }
    return out;
}

// <stem>.json index + <stem>.f32 payload: row-major N x D blocks in model order.
inline void save_embeddings(const EmbeddingExport& e, const std::filesystem::path& index_path) {
    auto data_path = index_path;
    data_path.replace_extension(".f32");
    if (index_path.has_parent_path()) std::filesystem::create_directories(index_path.parent_path());
    std::ofstream data(data_path, std::ios::binary);
    if (!data) throw Error("cannot write " + data_path.string());
    nlohmann::json blocks = nlohmann::json::array();
    std::size_t offset = 0;
    for (std::size_t m = 0; m < e.vectors.size(); ++m) {
        const Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rm = e.vectors[m];
        const auto bytes = static_cast<std::size_t>(rm.size()) * sizeof(float);
        data.write(reinterpret_cast<const char*>(rm.data()), static_cast<std::streamsize>(bytes));
        blocks.push_back({{"model", e.model_names[m]}, {"rows", rm.rows()}, {"dim", rm.cols()}, {"offset", offset}});
        offset += bytes;
    }
    nlohmann::json j = {{"format", "covarnav-embeddings"}, {"version", 1},
                        {"dtype", "float32"}, {"data_file", data_path.filename().string()},
                        {"blocks", blocks}, {"labels", e.labels},
                        {"forget_mask", e.forget_mask}, {"forget_class", e.forget_class},
                        {"dataset_fingerprint", e.dataset_fingerprint}, {"metadata", e.metadata}};
    std::ofstream(index_path) << j.dump(1) << '\n';
}

inline EmbeddingExport load_embeddings(const std::filesystem::path& index_path) {
    std::ifstream in(index_path);
    if (!in) throw Error("cannot open " + index_path.string());
    nlohmann::json j;
    in >> j;
    if (j.value("format", "") != "covarnav-embeddings" || j.value("version", 0) != 1)
        throw VersionError("not a version-1 embedding export");
    EmbeddingExport e;
    e.labels = j.at("labels").get<std::vector<int>>();
    e.forget_mask = j.at("forget_mask").get<std::vector<std::uint8_t>>();
    e.forget_class = j.at("forget_class").get<int>();
    e.dataset_fingerprint = j.at("dataset_fingerprint").get<std::string>();
    e.metadata = j.at("metadata");
    std::ifstream data(index_path.parent_path() / j.at("data_file").get<std::string>(), std::ios::binary);
    for (const auto& b : j.at("blocks")) {
        Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rm(b.at("rows").get<int>(),
                                                                              b.at("dim").get<int>());
        data.seekg(static_cast<std::streamoff>(b.at("offset").get<std::size_t>()));
        data.read(reinterpret_cast<char*>(rm.data()), static_cast<std::streamsize>(rm.size() * sizeof(float)));
        if (!data) throw IntegrityError("embedding payload truncated");
        e.model_names.push_back(b.at("model").get<std::string>());
        e.vectors.push_back(rm);
    }
    return e;
}

}  // namespace covarnav
