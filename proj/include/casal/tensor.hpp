#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace casal {

/// Row-major dense matrix of 64-bit floats. Activations are stored one token per row.
using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVec = Eigen::Matrix<double, 1, Eigen::Dynamic>;

using TokenId = std::int32_t;
using Tokens = std::vector<TokenId>;

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Shape or dimension disagreement between tensors and the configuration.
class ShapeError : public Error {
public:
    using Error::Error;
};

/// Training produced a non-finite loss.
class DivergenceError : public Error {
public:
    using Error::Error;
};

inline bool all_finite(const Mat& m) { return m.allFinite(); }

inline void require_shape(const Mat& m, Eigen::Index rows, Eigen::Index cols, std::string_view what) {
    if (m.rows() != rows || m.cols() != cols) {
        throw ShapeError(std::string(what) + ": expected " + std::to_string(rows) + "x" + std::to_string(cols) +
                         ", got " + std::to_string(m.rows()) + "x" + std::to_string(m.cols()));
    }
}

// ----------------------------------------------------------------------------
// Deterministic randomness. Everything that draws random numbers goes through
// these helpers so results do not depend on the standard library's
// distribution implementations.

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

inline std::uint64_t fnv1a(std::string_view s, std::uint64_t h = 0xCBF29CE484222325ULL) {
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001B3ULL;
    }
    return h;
}

/// Sub-seed derived purely from (master seed, stage name, item id).
inline std::uint64_t derive_seed(std::uint64_t master, std::string_view stage, std::string_view item = {}) {
    std::uint64_t h = splitmix64(master);
    h = splitmix64(h ^ fnv1a(stage));
    h = splitmix64(h ^ fnv1a(item));
    return h;
}

/// Seeded std::mt19937_64 with portable uniform and normal draws (the standard distributions
/// are implementation-defined, the engine is not).
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(splitmix64(seed)) {}

    std::uint64_t next_u64() { return engine_(); }

    /// Uniform in [0, 1).
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    /// Uniform integer in [0, n).
    std::uint64_t below(std::uint64_t n) {
        if (n == 0) throw Error("Rng::below: empty range");
        const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
        std::uint64_t x;
        do {
            x = next_u64();
        } while (x >= limit);
        return x % n;
    }

    /// Standard normal via Box-Muller (no cached spare, so draws are position-independent).
    double normal() {
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
    }

    template <class T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::swap(v[i - 1], v[below(i)]);
        }
    }

private:
    std::mt19937_64 engine_;
};

// ----------------------------------------------------------------------------
// Content hashing (SHA-256, lowercase hex).

std::string sha256_hex(std::span<const unsigned char> bytes);
std::string sha256_hex(std::string_view text);

/// Hash of a matrix's shape and raw little-endian doubles.
std::string hash_matrix(const Mat& m);

}  // namespace casal
