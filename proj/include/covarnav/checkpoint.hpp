#pragma once

// Single-file checkpoint: 8-byte magic, u64 header length, JSON header
// (architecture, version, dtype, tensor table, checksum), then the raw
// little-endian parameter payload. Weights are written row-major
// (out, in, kh, kw) so the payload is readable without this library.

#include "covarnav/network.hpp"

#include <json.hpp>

#include <cstring>
#include <filesystem>
#include <fstream>
#include <type_traits>

namespace covarnav {

inline constexpr char kCheckpointMagic[8] = {'C', 'V', 'N', 'C', 'K', 'P', 'T', '\0'};

template <typename Scalar>
constexpr const char* dtype_name() {
    if constexpr (std::is_same_v<Scalar, float>) return "float32";
    else return "float64";
}

namespace detail {

template <typename Scalar, typename Fn>
void for_each_tensor(const ModelState<Scalar>& s, Fn&& fn) {
    for (std::size_t i = 0; i < s.params.size(); ++i) {
        const auto& p = s.params[i];
        if (p.weight.size()) fn(static_cast<int>(i), "weight", p.weight.rows(), p.weight.cols());
        if (p.bias.size()) fn(static_cast<int>(i), "bias", p.bias.size(), 1);
        if (p.running_mean.size()) fn(static_cast<int>(i), "running_mean", p.running_mean.size(), 1);
        if (p.running_var.size()) fn(static_cast<int>(i), "running_var", p.running_var.size(), 1);
    }
}

template <typename Scalar>
std::vector<Scalar> flatten_params(const ModelState<Scalar>& s) {
    std::vector<Scalar> out;
    for (const auto& p : s.params) {
        for (Eigen::Index r = 0; r < p.weight.rows(); ++r)
            for (Eigen::Index c = 0; c < p.weight.cols(); ++c) out.push_back(p.weight(r, c));
        out.insert(out.end(), p.bias.data(), p.bias.data() + p.bias.size());
        out.insert(out.end(), p.running_mean.data(), p.running_mean.data() + p.running_mean.size());
        out.insert(out.end(), p.running_var.data(), p.running_var.data() + p.running_var.size());
    }
    return out;
}

}  // namespace detail

template <typename Scalar>
std::string encode_checkpoint(const ModelSnapshot<Scalar>& model,
                              const nlohmann::json& metadata = nlohmann::json::object()) {
    const auto flat = detail::flatten_params(model.state());
    const std::size_t payload_bytes = flat.size() * sizeof(Scalar);
    Fnv1a h;
    h.update(flat.data(), payload_bytes);
    nlohmann::json tensors = nlohmann::json::array();
    std::size_t offset = 0;
    detail::for_each_tensor(model.state(), [&](int layer, const char* name, auto rows, auto cols) {
        tensors.push_back({{"layer", layer}, {"name", name}, {"shape", {rows, cols}}, {"offset", offset}});
        offset += static_cast<std::size_t>(rows * cols) * sizeof(Scalar);
    });
    nlohmann::json header = {{"format", "covarnav-checkpoint"},
                             {"version", std::string(model.version())},
                             {"dtype", dtype_name<Scalar>()},
                             {"architecture", model.architecture()},
                             {"tensors", tensors},
                             {"payload_bytes", payload_bytes},
                             {"checksum", h.hex()},
                             {"metadata", metadata}};
    const std::string hs = header.dump();
    std::string out(kCheckpointMagic, 8);
    const std::uint64_t len = hs.size();
    out.append(reinterpret_cast<const char*>(&len), 8);
    out += hs;
    out.append(reinterpret_cast<const char*>(flat.data()), payload_bytes);
    return out;
}

struct CheckpointHeader {
    nlohmann::json json;
    std::size_t payload_offset = 0;
};

inline CheckpointHeader parse_checkpoint_header(const std::string& bytes) {
    if (bytes.size() < 16 || std::memcmp(bytes.data(), kCheckpointMagic, 8) != 0)
        throw IntegrityError("not a covarnav checkpoint (bad magic)");
    std::uint64_t len = 0;
    std::memcpy(&len, bytes.data() + 8, 8);
    if (len > bytes.size() - 16) throw IntegrityError("checkpoint header truncated");
    CheckpointHeader h;
    try {
        h.json = nlohmann::json::parse(bytes.substr(16, len));
    } catch (const nlohmann::json::exception& e) {
        throw IntegrityError(std::string("checkpoint header is not valid JSON: ") + e.what());
    }
    h.payload_offset = 16 + len;
    return h;
}

template <typename Scalar>
ModelSnapshot<Scalar> decode_checkpoint(const std::string& bytes) {
    const auto header = parse_checkpoint_header(bytes);
    const auto& j = header.json;
    if (j.value("format", "") != "covarnav-checkpoint") throw IntegrityError("unknown checkpoint format");
    const auto version = j.value("version", "");
    if (version != ModelSnapshot<Scalar>::kVersion)
        throw VersionError("checkpoint version '" + version + "' != expected '" +
                           std::string(ModelSnapshot<Scalar>::kVersion) + "'");
    if (j.value("dtype", "") != dtype_name<Scalar>())
        throw VersionError("checkpoint dtype " + j.value("dtype", "?") + " cannot be loaded as " +
                           dtype_name<Scalar>());
    const std::size_t payload_bytes = j.at("payload_bytes").get<std::size_t>();
    if (bytes.size() - header.payload_offset != payload_bytes)
        throw IntegrityError("checkpoint payload size mismatch");
    std::vector<Scalar> flat(payload_bytes / sizeof(Scalar));
    std::memcpy(flat.data(), bytes.data() + header.payload_offset, payload_bytes);
    Fnv1a h;
    h.update(flat.data(), payload_bytes);
    if (h.hex() != j.at("checksum").get<std::string>())
        throw IntegrityError("checkpoint checksum mismatch (corrupt payload)");

    Architecture arch;
    try {
        arch = j.at("architecture").get<Architecture>();
    } catch (const nlohmann::json::exception& e) {
        throw IntegrityError(std::string("checkpoint architecture unreadable: ") + e.what());
    }
    auto state = initialize<Scalar>(arch, 0).mutable_copy();
    std::size_t k = 0;
    const auto take = [&](Scalar* dst, std::size_t n) {
        if (k + n > flat.size()) throw IntegrityError("checkpoint payload too short for architecture");
        std::copy(flat.begin() + k, flat.begin() + k + n, dst);
        k += n;
    };
    for (auto& p : state.params) {
        for (Eigen::Index r = 0; r < p.weight.rows(); ++r)
            for (Eigen::Index c = 0; c < p.weight.cols(); ++c) take(&p.weight(r, c), 1);
        take(p.bias.data(), p.bias.size());
        take(p.running_mean.data(), p.running_mean.size());
        take(p.running_var.data(), p.running_var.size());
    }
    if (k != flat.size()) throw IntegrityError("checkpoint payload longer than architecture needs");
    return ModelSnapshot<Scalar>(std::move(state));
}

template <typename Scalar>
void save_snapshot(const ModelSnapshot<Scalar>& model, const std::filesystem::path& path,
                   const nlohmann::json& metadata = nlohmann::json::object()) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot write checkpoint " + path.string());
    const auto bytes = encode_checkpoint(model, metadata);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

inline std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

template <typename Scalar>
ModelSnapshot<Scalar> load_snapshot(const std::filesystem::path& path) {
    return decode_checkpoint<Scalar>(read_file(path));
}

inline nlohmann::json checkpoint_metadata(const std::filesystem::path& path) {
    return parse_checkpoint_header(read_file(path)).json.value("metadata", nlohmann::json::object());
}

}  // namespace covarnav
