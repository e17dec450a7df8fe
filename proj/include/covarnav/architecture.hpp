#pragma once

// Layer descriptors and shape inference for the small conv nets the toolkit trains.

#include "covarnav/common.hpp"

#include <json.hpp>

#include <string>
#include <vector>

namespace covarnav {

struct Shape {
    int channels = 0;
    int height = 0;
    int width = 0;

    int size() const { return channels * height * width; }
    bool operator==(const Shape&) const = default;
};

enum class LayerKind { conv, linear, batch_norm, relu, max_pool, avg_pool, global_avg_pool };

inline std::string to_string(LayerKind k) {
    switch (k) {
        case LayerKind::conv: return "conv";
        case LayerKind::linear: return "linear";
        case LayerKind::batch_norm: return "batch_norm";
        case LayerKind::relu: return "relu";
        case LayerKind::max_pool: return "max_pool";
        case LayerKind::avg_pool: return "avg_pool";
        case LayerKind::global_avg_pool: return "global_avg_pool";
    }
    return "?";
}

inline LayerKind layer_kind_from_string(const std::string& s) {
    for (auto k : {LayerKind::conv, LayerKind::linear, LayerKind::batch_norm, LayerKind::relu,
                   LayerKind::max_pool, LayerKind::avg_pool, LayerKind::global_avg_pool})
        if (to_string(k) == s) return k;
    throw ValidationError("unknown layer kind '" + s + "'");
}

struct LayerSpec {
    LayerKind kind = LayerKind::relu;
    int in = 0;   // conv: input channels, linear: input features, bn: channels
    int out = 0;  // conv: output channels, linear: output features
    int kernel = 1;
    int stride = 1;
    int padding = 0;
    bool bias = false;

    static LayerSpec conv(int in, int out, int kernel, int stride = 1, int padding = 0,
                          bool bias = false) {
        return {LayerKind::conv, in, out, kernel, stride, padding, bias};
    }
    static LayerSpec linear(int in, int out, bool bias = true) {
        return {LayerKind::linear, in, out, 1, 1, 0, bias};
    }
    static LayerSpec batch_norm(int channels) {
        return {LayerKind::batch_norm, channels, channels, 1, 1, 0, false};
    }
    static LayerSpec relu() { return {LayerKind::relu}; }
    static LayerSpec max_pool(int k) { return {LayerKind::max_pool, 0, 0, k, k, 0, false}; }
    static LayerSpec avg_pool(int k) { return {LayerKind::avg_pool, 0, 0, k, k, 0, false}; }
    static LayerSpec global_avg_pool() { return {LayerKind::global_avg_pool}; }

    // Conv and linear layers carry a weight matrix whose input activations can be recorded.
    bool projectable() const { return kind == LayerKind::conv || kind == LayerKind::linear; }
    // Row dimension d_l of the layer-input columns.
    int input_dim() const { return kind == LayerKind::conv ? in * kernel * kernel : in; }

    bool operator==(const LayerSpec&) const = default;
};

struct Architecture {
    Shape input;
    int num_classes = 0;
    std::vector<LayerSpec> layers;

    bool operator==(const Architecture&) const = default;

    // Output shape of every layer; throws ShapeError if the chain is inconsistent.
    std::vector<Shape> output_shapes() const {
        if (input.size() <= 0) throw ShapeError("architecture input shape is empty");
        if (num_classes < 2) throw ShapeError("architecture needs at least two classes");
        std::vector<Shape> shapes;
        Shape cur = input;
        for (std::size_t i = 0; i < layers.size(); ++i) {
            const auto& l = layers[i];
            const auto where = "layer " + std::to_string(i) + " (" + to_string(l.kind) + "): ";
            switch (l.kind) {
                case LayerKind::conv: {
                    if (l.in != cur.channels)
                        throw ShapeError(where + "expects " + std::to_string(l.in) +
                                         " channels, got " + std::to_string(cur.channels));
                    const int ho = (cur.height + 2 * l.padding - l.kernel) / l.stride + 1;
                    const int wo = (cur.width + 2 * l.padding - l.kernel) / l.stride + 1;
                    if (l.kernel < 1 || l.stride < 1 || ho < 1 || wo < 1)
                        throw ShapeError(where + "invalid kernel geometry");
                    cur = {l.out, ho, wo};
                    break;
                }
                case LayerKind::linear:
                    if (l.in != cur.size())
                        throw ShapeError(where + "expects " + std::to_string(l.in) +
                                         " features, got " + std::to_string(cur.size()));
                    cur = {l.out, 1, 1};
                    break;
                case LayerKind::batch_norm:
                    if (l.in != cur.channels) throw ShapeError(where + "channel mismatch");
                    break;
                case LayerKind::relu: break;
                case LayerKind::max_pool:
                case LayerKind::avg_pool:
                    if (l.kernel < 1 || cur.height < l.kernel || cur.width < l.kernel)
                        throw ShapeError(where + "pool window larger than input");
                    cur = {cur.channels, cur.height / l.kernel, cur.width / l.kernel};
                    break;
                case LayerKind::global_avg_pool: cur = {cur.channels, 1, 1}; break;
            }
            shapes.push_back(cur);
        }
        if (cur.size() != num_classes)
            throw ShapeError("network output has " + std::to_string(cur.size()) +
                             " features but num_classes is " + std::to_string(num_classes));
        return shapes;
    }

    std::vector<int> projectable_layers() const {
        std::vector<int> ids;
        for (std::size_t i = 0; i < layers.size(); ++i)
            if (layers[i].projectable()) ids.push_back(static_cast<int>(i));
        return ids;
    }

    std::vector<int> batch_norm_layers() const {
        std::vector<int> ids;
        for (std::size_t i = 0; i < layers.size(); ++i)
            if (layers[i].kind == LayerKind::batch_norm) ids.push_back(static_cast<int>(i));
        return ids;
    }

    // Index of the classifier head (last linear layer); its input is the penultimate embedding.
    int head_layer() const {
        for (int i = static_cast<int>(layers.size()) - 1; i >= 0; --i)
            if (layers[i].kind == LayerKind::linear) return i;
        throw ShapeError("architecture has no linear head");
    }
};

// conv(3x3, pad 1) -> BN -> ReLU blocks, max-pool between blocks, global pool, linear head.
inline Architecture make_conv_net(Shape input, int num_classes, const std::vector<int>& channels,
                                  int pool_blocks = -1) {
    if (channels.empty()) throw ValidationError("conv net needs at least one block");
    if (pool_blocks < 0) pool_blocks = static_cast<int>(channels.size()) - 1;
    Architecture a;
    a.input = input;
    a.num_classes = num_classes;
    int in = input.channels;
    int size = std::min(input.height, input.width);
    for (std::size_t b = 0; b < channels.size(); ++b) {
        a.layers.push_back(LayerSpec::conv(in, channels[b], 3, 1, 1, false));
        a.layers.push_back(LayerSpec::batch_norm(channels[b]));
        a.layers.push_back(LayerSpec::relu());
        if (static_cast<int>(b) < pool_blocks && size >= 4) {
            a.layers.push_back(LayerSpec::max_pool(2));
            size /= 2;
        }
        in = channels[b];
    }
    a.layers.push_back(LayerSpec::global_avg_pool());
    a.layers.push_back(LayerSpec::linear(in, num_classes, true));
    a.output_shapes();
    return a;
}

inline void to_json(nlohmann::json& j, const Shape& s) {
    j = nlohmann::json::array({s.channels, s.height, s.width});
}
inline void from_json(const nlohmann::json& j, Shape& s) {
    s = {j.at(0).get<int>(), j.at(1).get<int>(), j.at(2).get<int>()};
}

inline void to_json(nlohmann::json& j, const LayerSpec& l) {
    j = {{"kind", to_string(l.kind)}, {"in", l.in},         {"out", l.out},
         {"kernel", l.kernel},        {"stride", l.stride}, {"padding", l.padding},
         {"bias", l.bias}};
}
inline void from_json(const nlohmann::json& j, LayerSpec& l) {
    l.kind = layer_kind_from_string(j.at("kind").get<std::string>());
    l.in = j.value("in", 0);
    l.out = j.value("out", 0);
    l.kernel = j.value("kernel", 1);
    l.stride = j.value("stride", 1);
    l.padding = j.value("padding", 0);
    l.bias = j.value("bias", false);
}

inline void to_json(nlohmann::json& j, const Architecture& a) {
    j = {{"input", a.input}, {"num_classes", a.num_classes}, {"layers", a.layers}};
}
inline void from_json(const nlohmann::json& j, Architecture& a) {
    a.input = j.at("input").get<Shape>();
    a.num_classes = j.at("num_classes").get<int>();
    a.layers = j.at("layers").get<std::vector<LayerSpec>>();
}

}  // namespace covarnav
