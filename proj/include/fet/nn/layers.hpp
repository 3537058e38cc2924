#pragma once

#include "fet/nn/autodiff.hpp"
#include "fet/random.hpp"

#include <string>
#include <vector>

namespace fet {
class TensorArchive;
}

namespace fet::nn {

struct NamedParam {
    std::string name;
    Var var;
};
using ParamList = std::vector<NamedParam>;

enum class Init {
    truncated_normal,  // std 0.02, cut at 2 std, zero bias
    fan_in_uniform,    // U(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weight and bias
};

Matrix truncated_normal(Eigen::Index rows, Eigen::Index cols, double stddev, Rng& rng);

class Linear {
public:
    Linear() = default;
    Linear(int in, int out, Rng& rng, Init init = Init::fan_in_uniform);

    Var forward(const Var& x) const;
    void collect(const std::string& prefix, ParamList& out) const;
    int in_features() const { return static_cast<int>(weight_.rows()); }
    int out_features() const { return static_cast<int>(weight_.cols()); }

private:
    Var weight_;  // in×out
    Var bias_;    // 1×out
};

class LayerNorm {
public:
    LayerNorm() = default;
    explicit LayerNorm(int dim, double eps = 1e-5);

    Var forward(const Var& x) const;
    void collect(const std::string& prefix, ParamList& out) const;

private:
    Var gamma_;
    Var beta_;
    double eps_ = 1e-5;
};

// Linear layers with GELU between them (none after the last).
class Mlp {
public:
    Mlp() = default;
    Mlp(const std::vector<int>& widths, Rng& rng, Init init = Init::fan_in_uniform);

    Var forward(const Var& x) const;
    void collect(const std::string& prefix, ParamList& out) const;

private:
    std::vector<Linear> layers_;
};

// Queries come from one token set, keys and values from another; both are
// projected to model_dim and the result is projected back to the query width.
class MultiHeadAttention {
public:
    MultiHeadAttention() = default;
    MultiHeadAttention(int query_dim, int kv_dim, int model_dim, int heads, Rng& rng);

    Var forward(const Var& query, const Var& kv, Eigen::Index mq, Eigen::Index mk) const;
    void collect(const std::string& prefix, ParamList& out) const;

private:
    Linear q_, k_, v_, o_;
    int heads_ = 1;
};

// Pre-norm encoder block: y = x + MSA(LN(x)); out = y + FFN(LN(y)).
class TransformerBlock {
public:
    TransformerBlock() = default;
    TransformerBlock(int dim, int heads, int ffn_dim, Rng& rng);

    Var forward(const Var& x, Eigen::Index tokens) const;
    void collect(const std::string& prefix, ParamList& out) const;

private:
    LayerNorm ln1_, ln2_;
    MultiHeadAttention attn_;
    Linear ff1_, ff2_;
};

class Adam {
public:
    Adam(ParamList params, double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);

    void zero_grad();
    void step();

private:
    ParamList params_;
    std::vector<Matrix> m_, v_;
    double lr_, beta1_, beta2_, eps_;
    long t_ = 0;
};

void zero_grad(const ParamList& params);
std::vector<Matrix> snapshot(const ParamList& params);
void restore(const ParamList& params, const std::vector<Matrix>& values);
bool all_finite(const ParamList& params);
std::size_t parameter_count(const ParamList& params);

void store_params(const ParamList& params, TensorArchive& archive);
// Throws NotFoundError/ShapeError when the archive does not match.
void load_params(const ParamList& params, const TensorArchive& archive);

}  // namespace fet::nn
