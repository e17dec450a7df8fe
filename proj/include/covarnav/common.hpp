#pragma once

// Shared aliases, error types and small utilities used across the library.

#include <Eigen/Dense>

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

static_assert(std::endian::native == std::endian::little,
              "covarnav file formats assume a little-endian host");

namespace covarnav {

template <typename Scalar>
using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Scalar>
using RowMat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using Vec = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

using MatrixXd = Eigen::MatrixXd;
using VectorXd = Eigen::VectorXd;

// Base of every error the library throws on purpose.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
public:
    using Error::Error;
};
class VersionError : public Error {
public:
    using Error::Error;
};
class IntegrityError : public Error {
public:
    using Error::Error;
};
class ValidationError : public Error {
public:
    using Error::Error;
};
class TrainingError : public Error {
public:
    using Error::Error;
};
class AccessError : public Error {
public:
    using Error::Error;
};

// 64-bit FNV-1a. Used for checksums and fingerprints; not cryptographic.
class Fnv1a {
public:
    void update(const void* data, std::size_t size) {
        const auto* bytes = static_cast<const unsigned char*>(data);
        for (std::size_t i = 0; i < size; ++i) {
            hash_ ^= bytes[i];
            hash_ *= 0x100000001b3ULL;
        }
    }
    void update(std::string_view s) { update(s.data(), s.size()); }
    std::uint64_t digest() const { return hash_; }
    std::string hex() const {
        char buf[17];
        std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(hash_));
        return buf;
    }

private:
    std::uint64_t hash_ = 0xcbf29ce484222325ULL;
};

inline std::string fnv1a_hex(std::string_view s) {
    Fnv1a h;
    h.update(s);
    return h.hex();
}

// Derive a child seed from a parent seed and a stream index (splitmix64 finalizer).
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
    std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

// NCHW dense tensor. Batch axis first; a flattened feature vector is (n, f, 1, 1).
template <typename Scalar>
struct Tensor {
    int n = 0, c = 0, h = 0, w = 0;
    std::vector<Scalar> data;

    Tensor() = default;
    Tensor(int n_, int c_, int h_, int w_, Scalar fill = Scalar(0))
        : n(n_), c(c_), h(h_), w(w_),
          data(static_cast<std::size_t>(n_) * c_ * h_ * w_, fill) {}

    std::size_t size() const { return data.size(); }
    int sample_size() const { return c * h * w; }
    Scalar& at(int in, int ic, int iy, int ix) {
        return data[((static_cast<std::size_t>(in) * c + ic) * h + iy) * w + ix];
    }
    Scalar at(int in, int ic, int iy, int ix) const {
        return data[((static_cast<std::size_t>(in) * c + ic) * h + iy) * w + ix];
    }
    Scalar* sample(int in) { return data.data() + static_cast<std::size_t>(in) * sample_size(); }
    const Scalar* sample(int in) const {
        return data.data() + static_cast<std::size_t>(in) * sample_size();
    }
    bool all_finite() const {
        for (Scalar v : data)
            if (!std::isfinite(v)) return false;
        return true;
    }
};

}  // namespace covarnav
