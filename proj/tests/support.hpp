#pragma once

#include "fet/nn/layers.hpp"
#include "fet/random.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <string>

#include <unistd.h>

namespace fet::testing {

struct GradCheck {
    double max_rel_error = 0.0;
    std::string worst;
    int checked = 0;
};

// Central finite differences against reverse-mode gradients. Each tensor is
// probed at up to `per_tensor` entries (all of them when it is small enough);
// relative error is |a - n| / max(|a|, |n|, 1e-5).
inline GradCheck grad_check(const nn::ParamList& params, const std::function<nn::Var()>& loss, int per_tensor = 24,
                            std::uint64_t seed = 0, double h = 1e-6) {
    nn::zero_grad(params);
    nn::backward(loss());
    std::vector<nn::Matrix> analytic;
    for (const auto& p : params) {
        nn::Matrix g = p.var.grad();
        if (g.size() == 0) g = nn::Matrix::Zero(p.var.rows(), p.var.cols());
        analytic.push_back(g);
    }
    GradCheck out;
    Rng rng(seed);
    nn::NoGradGuard guard;
    for (std::size_t t = 0; t < params.size(); ++t) {
        nn::Var v = params[t].var;
        const Eigen::Index n = v.mutable_value().size();
        std::vector<Eigen::Index> probe;
        if (n <= per_tensor) {
            for (Eigen::Index i = 0; i < n; ++i) probe.push_back(i);
        } else {
            std::uniform_int_distribution<Eigen::Index> pick(0, n - 1);
            for (int i = 0; i < per_tensor; ++i) probe.push_back(pick(rng));
        }
        for (Eigen::Index i : probe) {
            double& x = v.mutable_value().data()[i];
            const double saved = x;
            x = saved + h;
            const double up = loss().scalar();
            x = saved - h;
            const double down = loss().scalar();
            x = saved;
            const double numeric = (up - down) / (2 * h);
            const double a = analytic[t].data()[i];
            const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-5});
            ++out.checked;
            if (rel > out.max_rel_error) {
                out.max_rel_error = rel;
                out.worst = params[t].name + "[" + std::to_string(i) + "] analytic " + std::to_string(a) +
                            " numeric " + std::to_string(numeric);
            }
        }
    }
    return out;
}

// A fresh directory under the system temp dir, removed on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& tag) {
        static int counter = 0;
        path_ = std::filesystem::temp_directory_path() /
                ("fet_test_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
        std::filesystem::remove_all(path_);
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;
    const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& s) const { return path_ / s; }

private:
    std::filesystem::path path_;
};

}  // namespace fet::testing
