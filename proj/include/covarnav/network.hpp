#pragma once

// Classifier state, immutable snapshots, forward/backward passes and
// per-layer activation capture.
//
// Layer-input capture convention: for a linear layer the recorded column is
// the flattened input vector; for a conv layer it is the im2col patch column
// (in_channels * k * k rows, one column per output location per sample), so
// that the pre-activation is literally W * columns.

#include "covarnav/architecture.hpp"
#include "covarnav/common.hpp"

#include <algorithm>
#include <limits>
#include <memory>
#include <optional>
#include <random>
#include <span>
#include <utility>

namespace covarnav {

inline constexpr double kBatchNormEps = 1e-5;
inline constexpr double kBatchNormMomentum = 0.1;

template <typename Scalar>
struct LayerParams {
    Mat<Scalar> weight;  // conv: out x (in*k*k), linear: out x in, bn: gamma (C x 1)
    Vec<Scalar> bias;    // conv/linear bias (may be empty), bn: beta
    Vec<Scalar> running_mean;
    Vec<Scalar> running_var;
};

template <typename Scalar>
struct ModelState {
    Architecture arch;
    std::vector<LayerParams<Scalar>> params;
};

template <typename Scalar>
void check_consistent(const ModelState<Scalar>& s) {
    s.arch.output_shapes();
    if (s.params.size() != s.arch.layers.size())
        throw ShapeError("parameter list does not match layer count");
    for (std::size_t i = 0; i < s.arch.layers.size(); ++i) {
        const auto& l = s.arch.layers[i];
        const auto& p = s.params[i];
        const auto bad = [&](const char* what) {
            return ShapeError("layer " + std::to_string(i) + ": " + what);
        };
        switch (l.kind) {
            case LayerKind::conv:
            case LayerKind::linear:
                if (p.weight.rows() != l.out || p.weight.cols() != l.input_dim())
                    throw bad("weight shape inconsistent with architecture");
                if (p.bias.size() != (l.bias ? l.out : 0)) throw bad("bias shape inconsistent");
                break;
            case LayerKind::batch_norm:
                if (p.weight.rows() != l.in || p.weight.cols() != 1 || p.bias.size() != l.in ||
                    p.running_mean.size() != l.in || p.running_var.size() != l.in)
                    throw bad("batch-norm parameter shapes inconsistent");
                if ((p.running_var.array() < 0).any()) throw bad("negative running variance");
                break;
            default:
                if (p.weight.size() || p.bias.size()) throw bad("parameter-free layer has params");
        }
    }
}

// Immutable, shareable model. Updates go through mutable_copy() and a new snapshot.
template <typename Scalar>
class ModelSnapshot {
public:
    static constexpr std::string_view kVersion = "covarnav-model/1";

    explicit ModelSnapshot(ModelState<Scalar> state) {
        check_consistent(state);
        state_ = std::make_shared<const ModelState<Scalar>>(std::move(state));
    }

    const ModelState<Scalar>& state() const { return *state_; }
    const Architecture& architecture() const { return state_->arch; }
    int num_classes() const { return state_->arch.num_classes; }
    std::string_view version() const { return kVersion; }
    ModelState<Scalar> mutable_copy() const { return *state_; }

    // Bitwise equality of all parameters and running statistics.
    bool same_parameters(const ModelSnapshot& other) const {
        const auto& a = state_->params;
        const auto& b = other.state_->params;
        if (!(state_->arch == other.state_->arch) || a.size() != b.size()) return false;
        const auto eq = [](const auto& x, const auto& y) {
            return x.size() == y.size() &&
                   std::equal(x.data(), x.data() + x.size(), y.data());
        };
        for (std::size_t i = 0; i < a.size(); ++i)
            if (!eq(a[i].weight, b[i].weight) || !eq(a[i].bias, b[i].bias) ||
                !eq(a[i].running_mean, b[i].running_mean) ||
                !eq(a[i].running_var, b[i].running_var))
                return false;
        return true;
    }

private:
    std::shared_ptr<const ModelState<Scalar>> state_;
};

// Kaiming-normal conv weights, 1/sqrt(fan_in) linear weights, zero biases, identity BN.
template <typename Scalar>
ModelSnapshot<Scalar> initialize(const Architecture& arch, std::uint64_t seed) {
    arch.output_shapes();
    std::mt19937_64 rng(seed);
    ModelState<Scalar> s;
    s.arch = arch;
    s.params.resize(arch.layers.size());
    for (std::size_t i = 0; i < arch.layers.size(); ++i) {
        const auto& l = arch.layers[i];
        auto& p = s.params[i];
        if (l.projectable()) {
            const double fan_in = l.input_dim();
            const double stddev = l.kind == LayerKind::conv ? std::sqrt(2.0 / fan_in)
                                                            : std::sqrt(1.0 / fan_in);
            std::normal_distribution<double> dist(0.0, stddev);
            p.weight.resize(l.out, l.input_dim());
            // Row-major fill order so the draw sequence matches the on-disk layout.
            for (int r = 0; r < p.weight.rows(); ++r)
                for (int c = 0; c < p.weight.cols(); ++c) p.weight(r, c) = Scalar(dist(rng));
            p.bias = Vec<Scalar>::Zero(l.bias ? l.out : 0);
        } else if (l.kind == LayerKind::batch_norm) {
            p.weight = Mat<Scalar>::Ones(l.in, 1);
            p.bias = Vec<Scalar>::Zero(l.in);
            p.running_mean = Vec<Scalar>::Zero(l.in);
            p.running_var = Vec<Scalar>::Ones(l.in);
        }
    }
    return ModelSnapshot<Scalar>(std::move(s));
}

template <typename Scalar>
struct ImageBatch {
    Tensor<Scalar> images;
    std::vector<int> labels;  // empty when unlabeled

    int size() const { return images.n; }

    void validate(int num_classes) const {
        if (images.n < 1) throw ShapeError("image batch is empty");
        if (!labels.empty() && static_cast<int>(labels.size()) != images.n)
            throw ShapeError("label count does not match batch size");
        for (int y : labels)
            if (y < 0 || y >= num_classes)
                throw ValidationError("label " + std::to_string(y) + " outside [0, " +
                                      std::to_string(num_classes) + ")");
        if (!images.all_finite()) throw ValidationError("image batch contains non-finite values");
    }
};

enum class Mode { eval, train };

template <typename Scalar>
struct LayerCache {
    Mat<Scalar> columns;  // conv/linear layer-input columns
    Tensor<Scalar> input;
    Tensor<Scalar> normalized;
    Vec<Scalar> batch_mean, batch_var, inv_std;
    std::vector<int> argmax;
};

template <typename Scalar>
struct ForwardTape {
    Mode mode = Mode::eval;
    std::vector<LayerCache<Scalar>> layers;
    std::vector<Shape> in_shapes;
    Mat<Scalar> logits;  // batch x K
    Tensor<Scalar> head_input;
};

namespace detail {

template <typename Scalar>
Mat<Scalar> im2col(const Tensor<Scalar>& x, int k, int stride, int pad, int ho, int wo) {
    const int d = x.c * k * k;
    const int hw = ho * wo;
    Mat<Scalar> cols(d, static_cast<Eigen::Index>(x.n) * hw);
    for (int n = 0; n < x.n; ++n) {
        const Scalar* src = x.sample(n);
        for (int oy = 0; oy < ho; ++oy)
            for (int ox = 0; ox < wo; ++ox) {
                Scalar* col = cols.data() + (static_cast<Eigen::Index>(n) * hw + oy * wo + ox) * d;
                int r = 0;
                for (int c = 0; c < x.c; ++c)
                    for (int ky = 0; ky < k; ++ky) {
                        const int iy = oy * stride - pad + ky;
                        for (int kx = 0; kx < k; ++kx, ++r) {
                            const int ix = ox * stride - pad + kx;
                            col[r] = (iy >= 0 && iy < x.h && ix >= 0 && ix < x.w)
                                         ? src[(c * x.h + iy) * x.w + ix]
                                         : Scalar(0);
                        }
                    }
            }
    }
    return cols;
}

template <typename Scalar>
void col2im(const Mat<Scalar>& cols, Tensor<Scalar>& dx, int k, int stride, int pad, int ho,
            int wo) {
    const int d = dx.c * k * k;
    const int hw = ho * wo;
    for (int n = 0; n < dx.n; ++n) {
        Scalar* dst = dx.sample(n);
        for (int oy = 0; oy < ho; ++oy)
            for (int ox = 0; ox < wo; ++ox) {
                const Scalar* col =
                    cols.data() + (static_cast<Eigen::Index>(n) * hw + oy * wo + ox) * d;
                int r = 0;
                for (int c = 0; c < dx.c; ++c)
                    for (int ky = 0; ky < k; ++ky) {
                        const int iy = oy * stride - pad + ky;
                        for (int kx = 0; kx < k; ++kx, ++r) {
                            const int ix = ox * stride - pad + kx;
                            if (iy >= 0 && iy < dx.h && ix >= 0 && ix < dx.w)
                                dst[(c * dx.h + iy) * dx.w + ix] += col[r];
                        }
                    }
            }
    }
}

// (Cout x N*HW) column block -> NCHW tensor.
template <typename Scalar>
Tensor<Scalar> scatter_channels(const Mat<Scalar>& out, int n, int c, int h, int w) {
    Tensor<Scalar> y(n, c, h, w);
    const int hw = h * w;
    for (int i = 0; i < n; ++i)
        Eigen::Map<RowMat<Scalar>>(y.sample(i), c, hw) = out.middleCols(i * hw, hw);
    return y;
}

template <typename Scalar>
Mat<Scalar> gather_channels(const Tensor<Scalar>& y) {
    const int hw = y.h * y.w;
    Mat<Scalar> out(y.c, static_cast<Eigen::Index>(y.n) * hw);
    for (int i = 0; i < y.n; ++i)
        out.middleCols(i * hw, hw) = Eigen::Map<const RowMat<Scalar>>(y.sample(i), y.c, hw);
    return out;
}

template <typename Scalar>
void channel_stats(const Tensor<Scalar>& x, Vec<Scalar>& mean, Vec<Scalar>& var) {
    const int hw = x.h * x.w;
    const double m = static_cast<double>(x.n) * hw;
    mean.setZero(x.c);
    var.setZero(x.c);
    for (int c = 0; c < x.c; ++c) {
        double s = 0;
        for (int n = 0; n < x.n; ++n) {
            const Scalar* p = x.sample(n) + c * hw;
            for (int i = 0; i < hw; ++i) s += p[i];
        }
        const double mu = s / m;
        double v = 0;
        for (int n = 0; n < x.n; ++n) {
            const Scalar* p = x.sample(n) + c * hw;
            for (int i = 0; i < hw; ++i) v += (p[i] - mu) * (p[i] - mu);
        }
        mean[c] = Scalar(mu);
        var[c] = Scalar(v / m);
    }
}

}  // namespace detail

// Runs the network and records everything backward() needs. In train mode
// batch-norm normalizes with batch statistics; running statistics are NOT
// updated here (see update_running_stats).
template <typename Scalar>
ForwardTape<Scalar> forward_tape(const ModelState<Scalar>& state, const Tensor<Scalar>& x,
                                 Mode mode) {
    const auto& arch = state.arch;
    if (x.n < 1) throw ShapeError("forward needs a non-empty batch");
    if (x.c != arch.input.channels || x.h != arch.input.height || x.w != arch.input.width)
        throw ShapeError("batch shape (" + std::to_string(x.c) + "," + std::to_string(x.h) + "," +
                         std::to_string(x.w) + ") does not match architecture input (" +
                         std::to_string(arch.input.channels) + "," +
                         std::to_string(arch.input.height) + "," +
                         std::to_string(arch.input.width) + ")");
    ForwardTape<Scalar> tape;
    tape.mode = mode;
    tape.layers.resize(arch.layers.size());
    tape.in_shapes.resize(arch.layers.size());
    const int head = arch.head_layer();

    Tensor<Scalar> cur = x;
    for (std::size_t li = 0; li < arch.layers.size(); ++li) {
        const auto& l = arch.layers[li];
        const auto& p = state.params[li];
        auto& cache = tape.layers[li];
        tape.in_shapes[li] = {cur.c, cur.h, cur.w};
        if (static_cast<int>(li) == head) tape.head_input = cur;
        switch (l.kind) {
            case LayerKind::conv: {
                const int ho = (cur.h + 2 * l.padding - l.kernel) / l.stride + 1;
                const int wo = (cur.w + 2 * l.padding - l.kernel) / l.stride + 1;
                cache.columns = detail::im2col(cur, l.kernel, l.stride, l.padding, ho, wo);
                Mat<Scalar> out = p.weight * cache.columns;
                if (p.bias.size()) out.colwise() += p.bias;
                cur = detail::scatter_channels(out, cur.n, l.out, ho, wo);
                break;
            }
            case LayerKind::linear: {
                cache.columns = Eigen::Map<const Mat<Scalar>>(cur.data.data(), cur.sample_size(), cur.n);
                Mat<Scalar> out = p.weight * cache.columns;
                if (p.bias.size()) out.colwise() += p.bias;
                Tensor<Scalar> y(cur.n, l.out, 1, 1);
                Eigen::Map<Mat<Scalar>>(y.data.data(), l.out, cur.n) = out;
                cur = std::move(y);
                break;
            }
            case LayerKind::batch_norm: {
                detail::channel_stats(cur, cache.batch_mean, cache.batch_var);
                const int hw = cur.h * cur.w;
                cache.input = cur;
                const Vec<Scalar>& mean = mode == Mode::train ? cache.batch_mean : p.running_mean;
                const Vec<Scalar>& var = mode == Mode::train ? cache.batch_var : p.running_var;
                cache.inv_std = (var.array() + Scalar(kBatchNormEps)).rsqrt();
                if (mode == Mode::train) cache.normalized = Tensor<Scalar>(cur.n, cur.c, cur.h, cur.w);
                for (int n = 0; n < cur.n; ++n)
                    for (int c = 0; c < cur.c; ++c) {
                        Scalar* v = cur.sample(n) + c * hw;
                        const Scalar mu = mean[c], is = cache.inv_std[c];
                        const Scalar g = p.weight(c, 0), b = p.bias[c];
                        for (int i = 0; i < hw; ++i) {
                            const Scalar xh = (v[i] - mu) * is;
                            if (mode == Mode::train) cache.normalized.sample(n)[c * hw + i] = xh;
                            v[i] = g * xh + b;
                        }
                    }
                break;
            }
            case LayerKind::relu:
                cache.input = cur;
                for (auto& v : cur.data) v = v > 0 ? v : Scalar(0);
                break;
            case LayerKind::max_pool:
            case LayerKind::avg_pool: {
                const int k = l.kernel, ho = cur.h / k, wo = cur.w / k;
                Tensor<Scalar> y(cur.n, cur.c, ho, wo);
                const bool is_max = l.kind == LayerKind::max_pool;
                if (is_max) cache.argmax.assign(y.size(), 0);
                const Scalar inv = Scalar(1) / Scalar(k * k);
                std::size_t o = 0;
                for (int n = 0; n < cur.n; ++n)
                    for (int c = 0; c < cur.c; ++c)
                        for (int oy = 0; oy < ho; ++oy)
                            for (int ox = 0; ox < wo; ++ox, ++o) {
                                Scalar best = -std::numeric_limits<Scalar>::infinity(), sum = 0;
                                int best_idx = 0;
                                for (int ky = 0; ky < k; ++ky)
                                    for (int kx = 0; kx < k; ++kx) {
                                        const int idx =
                                            ((n * cur.c + c) * cur.h + oy * k + ky) * cur.w + ox * k + kx;
                                        const Scalar v = cur.data[idx];
                                        sum += v;
                                        if (v > best) {
                                            best = v;
                                            best_idx = idx;
                                        }
                                    }
                                if (is_max) {
                                    y.data[o] = best;
                                    cache.argmax[o] = best_idx;
                                } else {
                                    y.data[o] = sum * inv;
                                }
                            }
                cur = std::move(y);
                break;
            }
            case LayerKind::global_avg_pool: {
                const int hw = cur.h * cur.w;
                Tensor<Scalar> y(cur.n, cur.c, 1, 1);
                for (int n = 0; n < cur.n; ++n)
                    for (int c = 0; c < cur.c; ++c) {
                        const Scalar* v = cur.sample(n) + c * hw;
                        Scalar s = 0;
                        for (int i = 0; i < hw; ++i) s += v[i];
                        y.data[n * cur.c + c] = s / Scalar(hw);
                    }
                cur = std::move(y);
                break;
            }
        }
    }
    tape.logits = Eigen::Map<const Mat<Scalar>>(cur.data.data(), arch.num_classes, cur.n).transpose();
    return tape;
}

template <typename Scalar>
void update_running_stats(ModelState<Scalar>& state, const ForwardTape<Scalar>& tape,
                          double momentum = kBatchNormMomentum) {
    for (int li : state.arch.batch_norm_layers()) {
        const auto& cache = tape.layers[li];
        auto& p = state.params[li];
        const double m = static_cast<double>(cache.input.n) * cache.input.h * cache.input.w;
        const double unbias = m > 1 ? m / (m - 1) : 1.0;
        p.running_mean = (1 - momentum) * p.running_mean + momentum * cache.batch_mean;
        p.running_var = (1 - momentum) * p.running_var + (momentum * unbias) * cache.batch_var;
    }
}

// Gradient of an external loss with respect to the batch mean / variance of a
// batch-norm layer's input (used by the feature-statistics regularizer).
template <typename Scalar>
struct BatchStatGrad {
    Vec<Scalar> d_mean;
    Vec<Scalar> d_var;
};

template <typename Scalar>
struct Gradients {
    std::vector<LayerParams<Scalar>> layers;  // weight / bias slots only
    Tensor<Scalar> input;                     // filled when requested
};

template <typename Scalar>
Gradients<Scalar> backward(const ModelState<Scalar>& state, const ForwardTape<Scalar>& tape,
                           const Mat<Scalar>& dlogits, bool want_input_grad = false,
                           const std::vector<BatchStatGrad<Scalar>>* stat_grads = nullptr) {
    const auto& arch = state.arch;
    const int batch = static_cast<int>(dlogits.rows());
    Gradients<Scalar> g;
    g.layers.resize(arch.layers.size());

    Tensor<Scalar> dy(batch, arch.num_classes, 1, 1);
    Eigen::Map<Mat<Scalar>>(dy.data.data(), arch.num_classes, batch) = dlogits.transpose();

    for (int li = static_cast<int>(arch.layers.size()) - 1; li >= 0; --li) {
        const auto& l = arch.layers[li];
        const auto& p = state.params[li];
        const auto& cache = tape.layers[li];
        const Shape in = tape.in_shapes[li];
        const bool need_dx = li > 0 || want_input_grad;
        auto& gl = g.layers[li];
        Tensor<Scalar> dx;
        switch (l.kind) {
            case LayerKind::conv: {
                const Mat<Scalar> dout = detail::gather_channels(dy);
                gl.weight.noalias() = dout * cache.columns.transpose();
                gl.bias = l.bias ? Vec<Scalar>(dout.rowwise().sum()) : Vec<Scalar>();
                if (need_dx) {
                    const Mat<Scalar> dcols = p.weight.transpose() * dout;
                    dx = Tensor<Scalar>(batch, in.channels, in.height, in.width);
                    detail::col2im(dcols, dx, l.kernel, l.stride, l.padding, dy.h, dy.w);
                }
                break;
            }
            case LayerKind::linear: {
                const Eigen::Map<const Mat<Scalar>> dout(dy.data.data(), l.out, batch);
                gl.weight.noalias() = dout * cache.columns.transpose();
                gl.bias = l.bias ? Vec<Scalar>(dout.rowwise().sum()) : Vec<Scalar>();
                if (need_dx) {
                    dx = Tensor<Scalar>(batch, in.channels, in.height, in.width);
                    Eigen::Map<Mat<Scalar>>(dx.data.data(), l.in, batch).noalias() =
                        p.weight.transpose() * dout;
                }
                break;
            }
            case LayerKind::batch_norm: {
                const int hw = in.height * in.width;
                const double m = static_cast<double>(batch) * hw;
                gl.weight = Mat<Scalar>::Zero(in.channels, 1);
                gl.bias = Vec<Scalar>::Zero(in.channels);
                dx = Tensor<Scalar>(batch, in.channels, in.height, in.width);
                const bool train = tape.mode == Mode::train;
                const Vec<Scalar>& mean = train ? cache.batch_mean : p.running_mean;
                for (int c = 0; c < in.channels; ++c) {
                    const Scalar is = cache.inv_std[c], gamma = p.weight(c, 0), mu = mean[c];
                    double sum_dy = 0, sum_dy_xh = 0;
                    for (int n = 0; n < batch; ++n) {
                        const Scalar* d = dy.sample(n) + c * hw;
                        const Scalar* xin = cache.input.sample(n) + c * hw;
                        for (int i = 0; i < hw; ++i) {
                            const Scalar xh = train ? cache.normalized.sample(n)[c * hw + i]
                                                    : (xin[i] - mu) * is;
                            sum_dy += d[i];
                            sum_dy_xh += d[i] * xh;
                        }
                    }
                    gl.weight(c, 0) = Scalar(sum_dy_xh);
                    gl.bias[c] = Scalar(sum_dy);
                    for (int n = 0; n < batch; ++n) {
                        const Scalar* d = dy.sample(n) + c * hw;
                        Scalar* o = dx.sample(n) + c * hw;
                        if (train) {
                            const Scalar* xh = cache.normalized.sample(n) + c * hw;
                            const Scalar scale = gamma * is / Scalar(m);
                            for (int i = 0; i < hw; ++i)
                                o[i] = scale * (Scalar(m) * d[i] - Scalar(sum_dy) -
                                                xh[i] * Scalar(sum_dy_xh));
                        } else {
                            for (int i = 0; i < hw; ++i) o[i] = d[i] * gamma * is;
                        }
                    }
                }
                if (stat_grads && static_cast<std::size_t>(li) < stat_grads->size()) {
                    const auto& sg = (*stat_grads)[li];
                    if (sg.d_mean.size() || sg.d_var.size()) {
                        for (int c = 0; c < in.channels; ++c) {
                            const Scalar dm = sg.d_mean.size() ? sg.d_mean[c] / Scalar(m) : Scalar(0);
                            const Scalar dv =
                                sg.d_var.size() ? Scalar(2) * sg.d_var[c] / Scalar(m) : Scalar(0);
                            const Scalar mu = cache.batch_mean[c];
                            for (int n = 0; n < batch; ++n) {
                                const Scalar* xin = cache.input.sample(n) + c * hw;
                                Scalar* o = dx.sample(n) + c * hw;
                                for (int i = 0; i < hw; ++i) o[i] += dm + dv * (xin[i] - mu);
                            }
                        }
                    }
                }
                break;
            }
            case LayerKind::relu: {
                dx = std::move(dy);
                for (std::size_t i = 0; i < dx.data.size(); ++i)
                    if (!(cache.input.data[i] > 0)) dx.data[i] = 0;
                break;
            }
            case LayerKind::max_pool:
            case LayerKind::avg_pool: {
                dx = Tensor<Scalar>(batch, in.channels, in.height, in.width);
                if (l.kind == LayerKind::max_pool) {
                    for (std::size_t o = 0; o < dy.data.size(); ++o) dx.data[cache.argmax[o]] += dy.data[o];
                } else {
                    const int k = l.kernel;
                    const Scalar inv = Scalar(1) / Scalar(k * k);
                    std::size_t o = 0;
                    for (int n = 0; n < batch; ++n)
                        for (int c = 0; c < in.channels; ++c)
                            for (int oy = 0; oy < dy.h; ++oy)
                                for (int ox = 0; ox < dy.w; ++ox, ++o)
                                    for (int ky = 0; ky < k; ++ky)
                                        for (int kx = 0; kx < k; ++kx)
                                            dx.at(n, c, oy * k + ky, ox * k + kx) += dy.data[o] * inv;
                }
                break;
            }
            case LayerKind::global_avg_pool: {
                const int hw = in.height * in.width;
                dx = Tensor<Scalar>(batch, in.channels, in.height, in.width);
                for (int n = 0; n < batch; ++n)
                    for (int c = 0; c < in.channels; ++c) {
                        const Scalar v = dy.data[n * in.channels + c] / Scalar(hw);
                        Scalar* o = dx.sample(n) + c * hw;
                        for (int i = 0; i < hw; ++i) o[i] = v;
                    }
                break;
            }
        }
        if (!need_dx) break;
        dy = std::move(dx);
    }
    if (want_input_grad) g.input = std::move(dy);
    return g;
}

// Evaluation-mode logits (batch x K).
template <typename Scalar>
Mat<Scalar> forward(const ModelSnapshot<Scalar>& model, const Tensor<Scalar>& x) {
    return forward_tape(model.state(), x, Mode::eval).logits;
}

template <typename Scalar>
Mat<Scalar> forward(const ModelSnapshot<Scalar>& model, const ImageBatch<Scalar>& batch) {
    batch.validate(model.num_classes());
    return forward(model, batch.images);
}

template <typename Scalar>
struct ActivationRecord {
    int layer = -1;
    LayerKind kind = LayerKind::linear;
    Mat<Scalar> columns;  // d_l x (samples, or samples * output locations for conv)
};

template <typename Scalar>
struct ActivationCapture {
    Mat<Scalar> logits;
    std::vector<ActivationRecord<Scalar>> records;
};

template <typename Scalar>
ActivationCapture<Scalar> forward_with_activations(const ModelSnapshot<Scalar>& model,
                                                   const Tensor<Scalar>& x) {
    auto tape = forward_tape(model.state(), x, Mode::eval);
    ActivationCapture<Scalar> cap;
    cap.logits = std::move(tape.logits);
    for (int li : model.architecture().projectable_layers())
        cap.records.push_back({li, model.architecture().layers[li].kind,
                               std::move(tape.layers[li].columns)});
    return cap;
}

template <typename Scalar>
ActivationCapture<Scalar> forward_with_activations(const ModelSnapshot<Scalar>& model,
                                                   const ImageBatch<Scalar>& batch) {
    batch.validate(model.num_classes());
    return forward_with_activations(model, batch.images);
}

// Row-wise argmax with lowest-index tie-breaking.
template <typename Scalar>
std::vector<int> argmax_rows(const Mat<Scalar>& logits, int excluded = -1) {
    std::vector<int> out(logits.rows());
    for (Eigen::Index r = 0; r < logits.rows(); ++r) {
        int best = -1;
        for (Eigen::Index c = 0; c < logits.cols(); ++c) {
            if (c == excluded) continue;
            if (best < 0 || logits(r, c) > logits(r, best)) best = static_cast<int>(c);
        }
        out[r] = best;
    }
    return out;
}

}  // namespace covarnav
