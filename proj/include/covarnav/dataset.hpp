#pragma once

// Labeled image datasets: in-memory representation, class partitions,
// the packed-array + index-JSON file format, and ingestion from image
// directories, CIFAR-10 binary batches, or the built-in procedural set.

#include "covarnav/architecture.hpp"
#include "covarnav/common.hpp"
#include "covarnav/network.hpp"

#include <json.hpp>

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <numeric>
#include <random>
#include <set>
#include <span>
#include <string>

namespace covarnav {

namespace fs = std::filesystem;

// Pixels are mapped from [0, 1] to this range: x = (p - 0.5) / 0.5.
inline constexpr float kInputMin = -1.0f;
inline constexpr float kInputMax = 1.0f;
inline constexpr int kDatasetFormatVersion = 1;

struct LabeledDataset {
    std::string partition = "D";  // D, D_f, D_r, D_ft, D_rt, D_hat_r, D_hat_f, ...
    Shape shape;
    int num_classes = 0;
    std::vector<std::string> class_names;
    std::vector<float> pixels;  // N * C * H * W
    std::vector<int> labels;
    bool synthetic = false;
    nlohmann::json extra = nlohmann::json::object();  // format-specific metadata

    int size() const { return static_cast<int>(labels.size()); }
    bool empty() const { return labels.empty(); }
    const float* sample(int i) const {
        return pixels.data() + static_cast<std::size_t>(i) * shape.size();
    }
    float* sample(int i) { return pixels.data() + static_cast<std::size_t>(i) * shape.size(); }

    void validate() const {
        if (num_classes < 2) throw ValidationError("dataset needs at least two classes");
        if (pixels.size() != labels.size() * static_cast<std::size_t>(shape.size()))
            throw ShapeError("dataset pixel count does not match sample count");
        for (int y : labels)
            if (y < 0 || y >= num_classes) throw ValidationError("dataset label out of range");
    }

    std::set<int> classes() const { return {labels.begin(), labels.end()}; }

    LabeledDataset subset(std::span<const int> indices, std::string tag) const {
        LabeledDataset out;
        out.partition = std::move(tag);
        out.shape = shape;
        out.num_classes = num_classes;
        out.class_names = class_names;
        out.synthetic = synthetic;
        out.pixels.reserve(indices.size() * shape.size());
        for (int i : indices) {
            out.pixels.insert(out.pixels.end(), sample(i), sample(i) + shape.size());
            out.labels.push_back(labels[i]);
        }
        return out;
    }

    template <typename Pred>
    LabeledDataset filter(Pred pred, std::string tag) const {
        std::vector<int> idx;
        for (int i = 0; i < size(); ++i)
            if (pred(labels[i])) idx.push_back(i);
        return subset(idx, std::move(tag));
    }

    template <typename Scalar>
    ImageBatch<Scalar> batch(std::span<const int> indices) const {
        ImageBatch<Scalar> b;
        b.images = Tensor<Scalar>(static_cast<int>(indices.size()), shape.channels, shape.height,
                                  shape.width);
        const int d = shape.size();
        for (std::size_t k = 0; k < indices.size(); ++k) {
            const float* src = sample(indices[k]);
            std::copy(src, src + d, b.images.sample(static_cast<int>(k)));
            b.labels.push_back(labels[indices[k]]);
        }
        return b;
    }

    template <typename Scalar>
    ImageBatch<Scalar> batch_range(int begin, int end) const {
        std::vector<int> idx(end - begin);
        std::iota(idx.begin(), idx.end(), begin);
        return batch<Scalar>(idx);
    }

    std::string fingerprint() const {
        Fnv1a h;
        h.update(pixels.data(), pixels.size() * sizeof(float));
        h.update(labels.data(), labels.size() * sizeof(int));
        return h.hex();
    }
};

inline LabeledDataset concatenate(const LabeledDataset& a, const LabeledDataset& b, std::string tag) {
    if (!(a.shape == b.shape) || a.num_classes != b.num_classes)
        throw ShapeError("cannot concatenate datasets with different shapes");
    LabeledDataset out = a;
    out.partition = std::move(tag);
    out.pixels.insert(out.pixels.end(), b.pixels.begin(), b.pixels.end());
    out.labels.insert(out.labels.end(), b.labels.begin(), b.labels.end());
    return out;
}

// The four evaluation partitions for one forget class.
struct Partitions {
    int forget_class = -1;
    LabeledDataset train;        // D
    LabeledDataset forget;       // D_f
    LabeledDataset retain;       // D_r
    LabeledDataset forget_test;  // D_ft
    LabeledDataset retain_test;  // D_rt
};

inline Partitions make_partitions(const LabeledDataset& train, const LabeledDataset& test,
                                  int forget_class) {
    train.validate();
    test.validate();
    if (forget_class < 0 || forget_class >= train.num_classes)
        throw ValidationError("forget class " + std::to_string(forget_class) + " outside [0, " +
                              std::to_string(train.num_classes) + ")");
    Partitions p;
    p.forget_class = forget_class;
    p.train = train;
    p.train.partition = "D";
    const auto is_f = [forget_class](int y) { return y == forget_class; };
    const auto not_f = [forget_class](int y) { return y != forget_class; };
    p.forget = train.filter(is_f, "D_f");
    p.retain = train.filter(not_f, "D_r");
    p.forget_test = test.filter(is_f, "D_ft");
    p.retain_test = test.filter(not_f, "D_rt");
    return p;
}

inline fs::path resolve_data_path(const fs::path& p) {
    if (p.is_absolute() || fs::exists(p)) return p;
    if (const char* root = std::getenv("COVARNAV_DATA_ROOT")) return fs::path(root) / p;
    return p;
}

// --- packed-array + index JSON -------------------------------------------------

inline void save_packed(const LabeledDataset& ds, const fs::path& index_path) {
    ds.validate();
    fs::path data_path = index_path;
    data_path.replace_extension(".f32");
    if (index_path.has_parent_path()) fs::create_directories(index_path.parent_path());
    {
        std::ofstream out(data_path, std::ios::binary);
        if (!out) throw Error("cannot write " + data_path.string());
        out.write(reinterpret_cast<const char*>(ds.pixels.data()),
                  static_cast<std::streamsize>(ds.pixels.size() * sizeof(float)));
    }
    Fnv1a h;
    h.update(ds.pixels.data(), ds.pixels.size() * sizeof(float));
    nlohmann::json j = {{"format", "covarnav-dataset"},
                        {"version", kDatasetFormatVersion},
                        {"partition", ds.partition},
                        {"shape", nlohmann::json::array({ds.size(), ds.shape.channels,
                                                         ds.shape.height, ds.shape.width})},
                        {"dtype", "float32"},
                        {"num_classes", ds.num_classes},
                        {"classes", ds.class_names},
                        {"synthetic", ds.synthetic},
                        {"data_file", data_path.filename().string()},
                        {"checksum", h.hex()},
                        {"labels", ds.labels}};
    for (const auto& [k, v] : ds.extra.items()) j[k] = v;
    std::ofstream out(index_path);
    if (!out) throw Error("cannot write " + index_path.string());
    out << j.dump(1) << '\n';
}

inline LabeledDataset load_packed(const fs::path& index_path_in) {
    const fs::path index_path = resolve_data_path(index_path_in);
    std::ifstream in(index_path);
    if (!in) throw Error("cannot open dataset index " + index_path.string());
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw IntegrityError("dataset index is not valid JSON: " + std::string(e.what()));
    }
    if (j.value("format", "") != "covarnav-dataset")
        throw VersionError("not a covarnav dataset index: " + index_path.string());
    if (j.value("version", -1) != kDatasetFormatVersion)
        throw VersionError("unsupported dataset format version");
    LabeledDataset ds;
    const auto shape = j.at("shape");
    const int n = shape.at(0).get<int>();
    ds.shape = {shape.at(1).get<int>(), shape.at(2).get<int>(), shape.at(3).get<int>()};
    ds.partition = j.value("partition", "D");
    ds.num_classes = j.at("num_classes").get<int>();
    ds.class_names = j.value("classes", std::vector<std::string>{});
    ds.synthetic = j.value("synthetic", false);
    ds.labels = j.at("labels").get<std::vector<int>>();
    if (static_cast<int>(ds.labels.size()) != n) throw IntegrityError("label count mismatch");
    for (const auto& [k, v] : j.items()) {
        static const std::set<std::string> known = {"format", "version",  "partition", "shape",
                                                    "dtype",  "num_classes", "classes", "synthetic",
                                                    "data_file", "checksum", "labels"};
        if (!known.count(k)) ds.extra[k] = v;
    }
    const fs::path data_path = index_path.parent_path() / j.at("data_file").get<std::string>();
    std::ifstream din(data_path, std::ios::binary);
    if (!din) throw Error("cannot open dataset payload " + data_path.string());
    ds.pixels.resize(static_cast<std::size_t>(n) * ds.shape.size());
    din.read(reinterpret_cast<char*>(ds.pixels.data()),
             static_cast<std::streamsize>(ds.pixels.size() * sizeof(float)));
    if (din.gcount() != static_cast<std::streamsize>(ds.pixels.size() * sizeof(float)))
        throw IntegrityError("dataset payload truncated");
    Fnv1a h;
    h.update(ds.pixels.data(), ds.pixels.size() * sizeof(float));
    if (j.contains("checksum") && j["checksum"].get<std::string>() != h.hex())
        throw IntegrityError("dataset payload checksum mismatch");
    ds.validate();
    return ds;
}

// --- directory of class-labeled netpbm images (root/<class>/*.ppm|*.pgm) -------

namespace detail {

inline std::vector<float> read_netpbm(const fs::path& path, Shape& shape) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open image " + path.string());
    std::string magic;
    in >> magic;
    if (magic != "P5" && magic != "P6") throw ValidationError("unsupported image format in " + path.string());
    auto next_int = [&in]() {
        int v;
        while (in >> std::ws && in.peek() == '#') in.ignore(1 << 20, '\n');
        in >> v;
        return v;
    };
    const int w = next_int(), h = next_int(), maxval = next_int();
    in.get();
    if (maxval <= 0 || maxval > 255) throw ValidationError("only 8-bit netpbm images are supported");
    const int c = magic == "P6" ? 3 : 1;
    std::vector<unsigned char> raw(static_cast<std::size_t>(w) * h * c);
    in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (in.gcount() != static_cast<std::streamsize>(raw.size()))
        throw IntegrityError("truncated image " + path.string());
    shape = {c, h, w};
    std::vector<float> px(raw.size());
    for (int ch = 0; ch < c; ++ch)
        for (int i = 0; i < w * h; ++i)
            px[ch * w * h + i] = (raw[i * c + ch] / float(maxval) - 0.5f) / 0.5f;
    return px;
}

}  // namespace detail

inline LabeledDataset load_image_dir(const fs::path& root_in, std::string partition = "D") {
    const fs::path root = resolve_data_path(root_in);
    if (!fs::is_directory(root)) throw ValidationError("image directory not found: " + root.string());
    std::vector<fs::path> class_dirs;
    for (const auto& e : fs::directory_iterator(root))
        if (e.is_directory()) class_dirs.push_back(e.path());
    std::sort(class_dirs.begin(), class_dirs.end());
    LabeledDataset ds;
    ds.partition = std::move(partition);
    ds.num_classes = static_cast<int>(class_dirs.size());
    bool first = true;
    for (int cls = 0; cls < ds.num_classes; ++cls) {
        ds.class_names.push_back(class_dirs[cls].filename().string());
        std::vector<fs::path> files;
        for (const auto& e : fs::directory_iterator(class_dirs[cls])) {
            const auto ext = e.path().extension().string();
            if (ext == ".ppm" || ext == ".pgm") files.push_back(e.path());
        }
        std::sort(files.begin(), files.end());
        for (const auto& f : files) {
            Shape s;
            auto px = detail::read_netpbm(f, s);
            if (first) ds.shape = s;
            else if (!(s == ds.shape)) throw ShapeError("image " + f.string() + " has a different shape");
            first = false;
            ds.pixels.insert(ds.pixels.end(), px.begin(), px.end());
            ds.labels.push_back(cls);
        }
    }
    ds.validate();
    return ds;
}

// --- CIFAR-10 binary batches (data_batch_{1..5}.bin / test_batch.bin) ----------

inline LabeledDataset load_cifar10_bin(const fs::path& dir_in, bool train, int per_class_limit = 0) {
    const fs::path dir = resolve_data_path(dir_in);
    std::vector<fs::path> files;
    if (train)
        for (int i = 1; i <= 5; ++i) files.push_back(dir / ("data_batch_" + std::to_string(i) + ".bin"));
    else
        files.push_back(dir / "test_batch.bin");
    LabeledDataset ds;
    ds.partition = "D";
    ds.shape = {3, 32, 32};
    ds.num_classes = 10;
    ds.class_names = {"airplane", "automobile", "bird", "cat", "deer",
                      "dog",      "frog",       "horse", "ship", "truck"};
    std::vector<int> per_class(10, 0);
    std::vector<unsigned char> rec(3073);
    for (const auto& f : files) {
        std::ifstream in(f, std::ios::binary);
        if (!in) throw ValidationError("CIFAR-10 batch not found: " + f.string());
        while (in.read(reinterpret_cast<char*>(rec.data()), 3073)) {
            const int y = rec[0];
            if (y > 9) throw IntegrityError("CIFAR-10 label out of range in " + f.string());
            if (per_class_limit > 0 && per_class[y] >= per_class_limit) continue;
            ++per_class[y];
            for (int i = 0; i < 3072; ++i) ds.pixels.push_back((rec[1 + i] / 255.0f - 0.5f) / 0.5f);
            ds.labels.push_back(y);
        }
    }
    ds.validate();
    return ds;
}

// --- procedural "glyphs" image set ---------------------------------------------
//
// Ten texture/shape classes rendered with random colors, geometry jitter and
// additive Gaussian noise. Class identity is carried only by the shape.

struct GlyphConfig {
    int per_class = 500;
    int image_size = 16;
    double noise = 0.3;
    std::uint64_t seed = 0;
    int num_classes = 10;
};

inline LabeledDataset make_glyphs(const GlyphConfig& cfg, std::string partition = "D") {
    if (cfg.num_classes < 2 || cfg.num_classes > 10)
        throw ValidationError("glyph set supports 2..10 classes");
    if (cfg.image_size < 8) throw ValidationError("glyph images must be at least 8x8");
    const int s = cfg.image_size;
    LabeledDataset ds;
    ds.partition = std::move(partition);
    ds.shape = {3, s, s};
    ds.num_classes = cfg.num_classes;
    ds.class_names = {"hstripes", "vstripes", "diag", "antidiag", "disk",
                      "ring",     "square",   "plus", "checker",  "xcross"};
    ds.class_names.resize(cfg.num_classes);
    ds.synthetic = false;
    ds.extra["generator"] = {{"name", "glyphs"},         {"per_class", cfg.per_class},
                             {"image_size", s},          {"noise", cfg.noise},
                             {"seed", cfg.seed}};
    std::vector<float> mask(static_cast<std::size_t>(s) * s);
    for (int idx = 0; idx < cfg.per_class * cfg.num_classes; ++idx) {
        const int cls = idx % cfg.num_classes;
        std::mt19937_64 rng(derive_seed(cfg.seed, idx));
        std::uniform_real_distribution<double> u(0.0, 1.0);
        std::normal_distribution<double> gauss(0.0, 1.0);
        const double period = 3.0 + 3.0 * u(rng);
        const double phase = u(rng) * period;
        const double cy = s / 2.0 + (u(rng) - 0.5) * s * 0.35;
        const double cx = s / 2.0 + (u(rng) - 0.5) * s * 0.35;
        const double radius = s * (0.18 + 0.14 * u(rng));
        const double thick = 1.0 + u(rng) * 1.2;
        for (int y = 0; y < s; ++y)
            for (int x = 0; x < s; ++x) {
                const double dy = y - cy, dx = x - cx;
                double m = 0;
                const auto stripe = [&](double t) {
                    return std::fmod(t + phase + 100 * period, period) < period / 2 ? 1.0 : 0.0;
                };
                switch (cls) {
                    case 0: m = stripe(y); break;
                    case 1: m = stripe(x); break;
                    case 2: m = stripe((x + y) / std::numbers::sqrt2); break;
                    case 3: m = stripe((x - y) / std::numbers::sqrt2); break;
                    case 4: m = std::hypot(dy, dx) <= radius ? 1 : 0; break;
                    case 5: m = std::abs(std::hypot(dy, dx) - radius) <= thick * 0.75 ? 1 : 0; break;
                    case 6: {
                        const double r = std::max(std::abs(dy), std::abs(dx));
                        m = std::abs(r - radius) <= thick * 0.6 ? 1 : 0;
                        break;
                    }
                    case 7: m = (std::abs(dy) <= thick * 0.7 || std::abs(dx) <= thick * 0.7) &&
                                        std::max(std::abs(dy), std::abs(dx)) <= radius * 1.3
                                    ? 1 : 0;
                        break;
                    case 8: {
                        const int cell = 2 + static_cast<int>(period) / 2;
                        m = ((static_cast<int>(y + phase) / cell + static_cast<int>(x + phase) / cell) % 2) ? 1 : 0;
                        break;
                    }
                    case 9: m = (std::abs(dy - dx) <= thick || std::abs(dy + dx) <= thick) &&
                                        std::max(std::abs(dy), std::abs(dx)) <= radius * 1.3
                                    ? 1 : 0;
                        break;
                }
                mask[y * s + x] = static_cast<float>(m);
            }
        double bg[3], fg[3];
        do {
            for (int c = 0; c < 3; ++c) {
                bg[c] = u(rng);
                fg[c] = u(rng);
            }
        } while (std::abs((fg[0] + fg[1] + fg[2]) - (bg[0] + bg[1] + bg[2])) < 0.6);
        for (int c = 0; c < 3; ++c)
            for (int i = 0; i < s * s; ++i) {
                double v = bg[c] + (fg[c] - bg[c]) * mask[i] + cfg.noise * gauss(rng);
                v = std::clamp(v, 0.0, 1.0);
                ds.pixels.push_back(static_cast<float>((v - 0.5) / 0.5));
            }
        ds.labels.push_back(cls);
    }
    ds.validate();
    return ds;
}

}  // namespace covarnav
