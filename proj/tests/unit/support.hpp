#pragma once

#include "casal/casal_train.hpp"
#include "casal/model.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <unistd.h>

namespace casal::testing {

inline ModelConfig tiny_config(int vocab = 16, bool moe = false) {
    ModelConfig c;
    c.n_layer = 3;
    c.d_model = 8;
    c.d_attn = 8;
    c.n_heads = 2;
    c.d_ff = 12;
    c.n_ctx = 8;
    c.vocab_size = vocab;
    c.init_std = 0.3;
    if (moe) c.moe = MoeConfig{4, 2};
    return c;
}

/// Random model whose norm gains are perturbed away from one so that every tensor matters.
inline TransformerWeights random_weights(const ModelConfig& c, std::uint64_t seed = 0) {
    ModelConfig cc = c;
    cc.rng_seed = seed;
    TransformerWeights w = init_weights(cc);
    Rng rng(seed ^ 0x5eedULL);
    for_each_tensor(w, [&](const std::string& name, Mat& m) {
        if (name.find("norm") != std::string::npos) {
            for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = 1.0 + 0.2 * rng.normal();
        }
    });
    return w;
}

inline Mat random_mat(Eigen::Index r, Eigen::Index c, Rng& rng, double scale = 1.0) {
    Mat m(r, c);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = scale * rng.normal();
    return m;
}

/// Relative error with an absolute floor for near-zero gradients.
inline double rel_err(double a, double b, double floor = 1e-7) {
    return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

/// Central difference of f with respect to one matrix entry, restoring the entry afterwards.
inline double central_difference(double& x, double h, const std::function<double()>& f) {
    const double x0 = x;
    x = x0 + h;
    const double fp = f();
    x = x0 - h;
    const double fm = f();
    x = x0;
    return (fp - fm) / (2.0 * h);
}

/// Fresh scratch directory under the build tree, removed on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& name)
        : path_(std::filesystem::temp_directory_path() / ("casal_test_" + name + "_" + std::to_string(::getpid()))) {
        std::filesystem::remove_all(path_);
        std::filesystem::create_directories(path_);
    }
    ~TempDir() { std::filesystem::remove_all(path_); }
    const std::filesystem::path& path() const { return path_; }

private:
    std::filesystem::path path_;
};

}  // namespace casal::testing
