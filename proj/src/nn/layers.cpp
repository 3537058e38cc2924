#include "fet/nn/layers.hpp"

#include "fet/errors.hpp"
#include "fet/tensor_archive.hpp"

#include <cmath>

namespace fet::nn {

Matrix truncated_normal(Eigen::Index rows, Eigen::Index cols, double stddev, Rng& rng) {
    std::normal_distribution<double> dist(0.0, 1.0);
    Matrix m(rows, cols);
    for (Eigen::Index r = 0; r < rows; ++r) {
        for (Eigen::Index c = 0; c < cols; ++c) {
            double x;
            do {
                x = dist(rng);
            } while (std::abs(x) > 2.0);
            m(r, c) = stddev * x;
        }
    }
    return m;
}

Linear::Linear(int in, int out, Rng& rng, Init init) {
    if (init == Init::truncated_normal) {
        weight_ = parameter(truncated_normal(in, out, 0.02, rng));
        bias_ = parameter(Matrix::Zero(1, out));
    } else {
        const double bound = 1.0 / std::sqrt(static_cast<double>(in));
        std::uniform_real_distribution<double> dist(-bound, bound);
        Matrix w(in, out), b(1, out);
        for (int r = 0; r < in; ++r)
            for (int c = 0; c < out; ++c) w(r, c) = dist(rng);
        for (int c = 0; c < out; ++c) b(0, c) = dist(rng);
        weight_ = parameter(std::move(w));
        bias_ = parameter(std::move(b));
    }
}

Var Linear::forward(const Var& x) const { return add_row(matmul(x, weight_), bias_); }

void Linear::collect(const std::string& prefix, ParamList& out) const {
    out.push_back({prefix + ".weight", weight_});
    out.push_back({prefix + ".bias", bias_});
}

LayerNorm::LayerNorm(int dim, double eps)
    : gamma_(parameter(Matrix::Ones(1, dim))), beta_(parameter(Matrix::Zero(1, dim))), eps_(eps) {}

Var LayerNorm::forward(const Var& x) const { return layer_norm(x, gamma_, beta_, eps_); }

void LayerNorm::collect(const std::string& prefix, ParamList& out) const {
    out.push_back({prefix + ".gamma", gamma_});
    out.push_back({prefix + ".beta", beta_});
}

Mlp::Mlp(const std::vector<int>& widths, Rng& rng, Init init) {
    if (widths.size() < 2) throw ConfigError("Mlp needs at least input and output widths");
    for (std::size_t i = 0; i + 1 < widths.size(); ++i) layers_.emplace_back(widths[i], widths[i + 1], rng, init);
}

Var Mlp::forward(const Var& x) const {
    Var h = x;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
        h = layers_[i].forward(h);
        if (i + 1 < layers_.size()) h = gelu(h);
    }
    return h;
}

void Mlp::collect(const std::string& prefix, ParamList& out) const {
    for (std::size_t i = 0; i < layers_.size(); ++i) layers_[i].collect(prefix + "." + std::to_string(i), out);
}

MultiHeadAttention::MultiHeadAttention(int query_dim, int kv_dim, int model_dim, int heads, Rng& rng)
    : q_(query_dim, model_dim, rng, Init::truncated_normal),
      k_(kv_dim, model_dim, rng, Init::truncated_normal),
      v_(kv_dim, model_dim, rng, Init::truncated_normal),
      o_(model_dim, query_dim, rng, Init::truncated_normal),
      heads_(heads) {
    if (heads < 1 || model_dim % heads != 0) throw ConfigError("model_dim must be divisible by heads");
}

Var MultiHeadAttention::forward(const Var& query, const Var& kv, Eigen::Index mq, Eigen::Index mk) const {
    return o_.forward(attention(q_.forward(query), k_.forward(kv), v_.forward(kv), mq, mk, heads_));
}

void MultiHeadAttention::collect(const std::string& prefix, ParamList& out) const {
    q_.collect(prefix + ".q", out);
    k_.collect(prefix + ".k", out);
    v_.collect(prefix + ".v", out);
    o_.collect(prefix + ".o", out);
}

TransformerBlock::TransformerBlock(int dim, int heads, int ffn_dim, Rng& rng)
    : ln1_(dim),
      ln2_(dim),
      attn_(dim, dim, dim, heads, rng),
      ff1_(dim, ffn_dim, rng, Init::truncated_normal),
      ff2_(ffn_dim, dim, rng, Init::truncated_normal) {}

Var TransformerBlock::forward(const Var& x, Eigen::Index tokens) const {
    const Var h = ln1_.forward(x);
    const Var y = add(x, attn_.forward(h, h, tokens, tokens));
    return add(y, ff2_.forward(gelu(ff1_.forward(ln2_.forward(y)))));
}

void TransformerBlock::collect(const std::string& prefix, ParamList& out) const {
    ln1_.collect(prefix + ".ln1", out);
    attn_.collect(prefix + ".attn", out);
    ln2_.collect(prefix + ".ln2", out);
    ff1_.collect(prefix + ".ff1", out);
    ff2_.collect(prefix + ".ff2", out);
}

Adam::Adam(ParamList params, double lr, double beta1, double beta2, double eps)
    : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
    if (!(lr > 0.0)) throw ConfigError("learning rate must be positive");
    for (const auto& p : params_) {
        m_.push_back(Matrix::Zero(p.var.rows(), p.var.cols()));
        v_.push_back(Matrix::Zero(p.var.rows(), p.var.cols()));
    }
}

void Adam::zero_grad() { nn::zero_grad(params_); }

void Adam::step() {
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
        Var p = params_[i].var;
        if (p.grad().size() == 0) continue;
        m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * p.grad();
        v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * p.grad().cwiseAbs2();
        p.mutable_value().array() -= lr_ * (m_[i].array() / c1) / ((v_[i].array() / c2).sqrt() + eps_);
    }
}

void zero_grad(const ParamList& params) {
    for (auto p : params) p.var.grad().resize(0, 0);
}

std::vector<Matrix> snapshot(const ParamList& params) {
    std::vector<Matrix> out;
    out.reserve(params.size());
    for (const auto& p : params) out.push_back(p.var.value());
    return out;
}

void restore(const ParamList& params, const std::vector<Matrix>& values) {
    if (values.size() != params.size()) throw ShapeError("restore: snapshot size mismatch");
    for (std::size_t i = 0; i < params.size(); ++i) {
        Var p = params[i].var;
        p.mutable_value() = values[i];
    }
}

bool all_finite(const ParamList& params) {
    for (const auto& p : params)
        if (!p.var.value().allFinite()) return false;
    return true;
}

std::size_t parameter_count(const ParamList& params) {
    std::size_t n = 0;
    for (const auto& p : params) n += static_cast<std::size_t>(p.var.value().size());
    return n;
}

void store_params(const ParamList& params, TensorArchive& archive) {
    for (const auto& p : params) archive.put(p.name, p.var.value());
}

void load_params(const ParamList& params, const TensorArchive& archive) {
    for (auto p : params) {
        Matrix m = archive.matrix(p.name);
        if (m.rows() != p.var.rows() || m.cols() != p.var.cols())
            throw ShapeError("parameter '" + p.name + "' has shape " + std::to_string(m.rows()) + "x" +
                             std::to_string(m.cols()) + " in archive, expected " + std::to_string(p.var.rows()) +
                             "x" + std::to_string(p.var.cols()));
        p.var.mutable_value() = std::move(m);
    }
}

}  // namespace fet::nn
