#pragma once

#include "covarnav/covarnav.hpp"

#include <gtest/gtest.h>

#include <random>

#include <unistd.h>

namespace covarnav::testing {

// K classes of C x S x S images: a class-specific random template plus noise,
// clamped to the input range.
inline LabeledDataset make_blobs(int per_class, int num_classes = 3, int channels = 1, int size = 6,
                                 std::uint64_t seed = 7, double noise = 0.2) {
    std::mt19937_64 tmpl_rng(1234);
    std::normal_distribution<float> g(0.f, 1.f);
    const int d = channels * size * size;
    std::vector<std::vector<float>> templates(num_classes, std::vector<float>(d));
    for (auto& t : templates)
        for (auto& v : t) v = 0.8f * std::tanh(g(tmpl_rng));
    std::mt19937_64 rng(seed);
    LabeledDataset ds;
    ds.partition = "D";
    ds.shape = {channels, size, size};
    ds.num_classes = num_classes;
    for (int c = 0; c < num_classes; ++c) ds.class_names.push_back("c" + std::to_string(c));
    for (int i = 0; i < per_class; ++i)
        for (int c = 0; c < num_classes; ++c) {
            for (int j = 0; j < d; ++j)
                ds.pixels.push_back(std::clamp(templates[c][j] + static_cast<float>(noise) * g(rng), kInputMin, kInputMax));
            ds.labels.push_back(c);
        }
    return ds;
}

inline Architecture tiny_arch(int num_classes = 3, int channels = 1, int size = 6) {
    return make_conv_net({channels, size, size}, num_classes, {4, 6});
}

template <typename Scalar = double>
ModelSnapshot<Scalar> tiny_model(std::uint64_t seed = 1, int num_classes = 3, int channels = 1, int size = 6) {
    return initialize<Scalar>(tiny_arch(num_classes, channels, size), seed);
}

// Initialized model with non-trivial batch-norm running statistics and affine terms.
template <typename Scalar = double>
ModelSnapshot<Scalar> perturbed_model(std::uint64_t seed = 1, int num_classes = 3, int channels = 1, int size = 6) {
    auto s = tiny_model<Scalar>(seed, num_classes, channels, size).mutable_copy();
    std::mt19937_64 rng(seed + 99);
    std::uniform_real_distribution<double> u(0.5, 1.5), v(-0.3, 0.3);
    for (std::size_t i = 0; i < s.params.size(); ++i) {
        if (s.arch.layers[i].kind != LayerKind::batch_norm) continue;
        auto& p = s.params[i];
        for (Eigen::Index c = 0; c < p.weight.size(); ++c) {
            p.weight(c) = Scalar(u(rng));
            p.bias(c) = Scalar(v(rng));
            p.running_mean(c) = Scalar(v(rng));
            p.running_var(c) = Scalar(u(rng));
        }
    }
    return ModelSnapshot<Scalar>(std::move(s));
}

template <typename Scalar = double>
Tensor<Scalar> random_images(int n, Shape shape, std::uint64_t seed, double scale = 0.5) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> g(0, scale);
    Tensor<Scalar> t(n, shape.channels, shape.height, shape.width);
    for (auto& v : t.data) v = Scalar(std::clamp(g(rng), -1.0, 1.0));
    return t;
}

inline double max_abs_diff(const MatrixXd& a, const MatrixXd& b) { return (a - b).cwiseAbs().maxCoeff(); }

// A scratch directory removed on destruction.
struct TempDir {
    std::filesystem::path path;
    TempDir() {
        static int counter = 0;
        path = std::filesystem::temp_directory_path() /
               ("covarnav_test_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
        std::filesystem::remove_all(path);
        std::filesystem::create_directories(path);
    }
    ~TempDir() { std::filesystem::remove_all(path); }
    std::filesystem::path operator/(const std::string& s) const { return path / s; }
};

}  // namespace covarnav::testing
