#pragma once

#include "fet/nn/layers.hpp"
#include "fet/random.hpp"

#include <json.hpp>

#include <string>
#include <utility>
#include <vector>

namespace fet {

struct IfedConfig {
    int facial_width = 53;  // 53 on the encoder path, 56 on the decoder path
    int text_dim = 768;
    int model_dim = 64;
    int heads = 4;
    int n_facial_layers = 2;
    int n_text_layers = 1;
    int n_caft_layers = 1;
    int m_tokens = 2;
    bool use_positional_embedding = true;
    int expr_dim = 50;
    int pose_dim = 6;

    void validate() const;
    nlohmann::json to_json() const;
    static IfedConfig from_json(const nlohmann::json& j);
};

// Single-sample outputs: expr_cond is m×expr_dim, pose_cond m×pose_dim.
struct ConditionalVectors {
    Eigen::MatrixXd expr_cond;
    Eigen::MatrixXd pose_cond;
};

// Graph-level outputs for a batch stacked as (B*m) rows.
struct ConditionalVars {
    nn::Var expr_cond;
    nn::Var pose_cond;
};

// Dual-branch decomposer. Facial tokens arrive as (B*m)×facial_width, text as
// (B*L)×text_dim with L given per call; all batched entry points keep the
// stacked-rows layout so the same weights serve any batch size.
class Ifed {
public:
    Ifed() = default;
    Ifed(const IfedConfig& config, Rng& rng);

    const IfedConfig& config() const { return config_; }

    nn::Var facial_encoder(const nn::Var& x_f) const;
    nn::Var text_encoder(const nn::Var& x_t, Eigen::Index length) const;
    std::pair<nn::Var, nn::Var> caft(const nn::Var& f, const nn::Var& t) const;
    ConditionalVars fuse_and_decompose(const nn::Var& f, const nn::Var& t) const;
    ConditionalVars forward(const nn::Var& x_f, const nn::Var& x_t, Eigen::Index length) const;

    // Inference on one sample: x_f is m×facial_width, x_t is L×text_dim.
    ConditionalVectors forward(const Eigen::MatrixXd& x_f, const Eigen::MatrixXd& x_t) const;

    void collect(const std::string& prefix, nn::ParamList& out) const;

private:
    struct CaftLayer {
        nn::Linear h_f2t, h_t2f;  // project a branch into the other's width
        nn::MultiHeadAttention ca_f, ca_t;
        nn::Linear g_t2f, g_f2t;  // back-projections
        nn::Linear reduce_f, reduce_t;
    };

    void check_facial(const nn::Var& x) const;

    IfedConfig config_;
    nn::Linear f_in_, f_out_;
    std::vector<nn::TransformerBlock> f_blocks_;
    nn::Var f_pos_;
    nn::Linear p_t_, t_in_, t_out_;
    std::vector<nn::TransformerBlock> t_blocks_;
    nn::Var t_pos_;
    std::vector<CaftLayer> caft_;
    nn::LayerNorm ln_pool_, ln_t_, ln_f_;
    nn::Linear p_e_, p_p_;
};

}  // namespace fet
