#pragma once

#include "fet/dataset.hpp"
#include "fet/head_model.hpp"
#include "fet/ifed.hpp"
#include "fet/nn/layers.hpp"

#include <json.hpp>

#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace fet {

struct I2fetConfig {
    int expr_dim = 50;
    int pose_dim = 6;
    int latent_dim = 16;
    int hidden = 256;
    int m_tokens = 2;
    int text_dim = 768;
    int model_dim = 64;
    int heads = 4;
    int n_facial_layers = 2;
    int n_text_layers = 1;
    int n_caft_layers = 1;
    bool use_positional_embedding = true;
    // When false each IFED instance is replaced by linear maps of the pooled text.
    bool ifed_enabled = true;

    void validate() const;
    IfedConfig encoder_ifed() const;  // facial width expr_dim + 3 (jaw)
    IfedConfig decoder_ifed() const;  // facial width pose_dim + expr_dim
    nlohmann::json to_json() const;
    static I2fetConfig from_json(const nlohmann::json& j);
};

struct LatentSample {
    Eigen::MatrixXd mu;
    Eigen::MatrixXd sigma;
    Eigen::MatrixXd z;
    Eigen::MatrixXd z_tilde;
};

struct LossFlags {
    bool use_pose_loss = true;
    bool use_vertex_loss = true;
};

struct TrainConfig {
    int epochs = 200;
    int batch_size = 128;
    double learning_rate = 8e-4;
    std::uint64_t seed = 0;
    LossFlags flags;
    bool ifed_enabled = true;

    void validate() const;
    nlohmann::json to_json() const;
    static TrainConfig from_json(const nlohmann::json& j);
};

// A minibatch in stacked-row layout: sample b owns rows [b*m, (b+1)*m) of
// expr/pose and rows [b*L, (b+1)*L) of text.
struct I2fetBatch {
    Eigen::MatrixXd expr;   // (B*m)×expr_dim
    Eigen::MatrixXd pose;   // (B*m)×pose_dim
    Eigen::MatrixXd shape;  // B×n_shape, empty when unavailable
    Eigen::MatrixXd text;   // (B*L)×text_dim
    Eigen::Index length = 0;
    Eigen::Index size() const { return length > 0 ? text.rows() / length : 0; }
};

// Caches instruction embeddings by key so batches are assembled without re-embedding.
class EmbeddingCache {
public:
    explicit EmbeddingCache(const EmbeddingProvider& provider) : provider_(provider) {}
    const TextEmbedding& get(const std::string& key);
    const EmbeddingProvider& provider() const { return provider_; }

private:
    const EmbeddingProvider& provider_;
    std::map<std::string, TextEmbedding> table_;
};

I2fetBatch make_batch(const DatasetManifest& data, const std::vector<std::size_t>& indices, EmbeddingCache& cache);

struct LossBreakdown {
    nn::Var total;
    double l_e = 0, l_p = 0, l_v = 0;
    double mse_e = 0, kl_e = 0, mse_p = 0, kl_p = 0;
};

struct EncodeVars {
    nn::Var mu_e, logvar_e, mu_p, logvar_p;
};

struct DecodeVars {
    nn::Var expr;  // (B*m)×expr_dim
    nn::Var pose;  // (B*m)×pose_dim
};

class I2fetModel {
public:
    I2fetModel() = default;
    I2fetModel(const I2fetConfig& config, std::uint64_t seed);

    const I2fetConfig& config() const { return config_; }
    nn::ParamList parameters() const;

    // Graph-level pieces, batched.
    ConditionalVars encoder_condition(const nn::Var& x_f, const nn::Var& text, Eigen::Index length) const;
    EncodeVars encode(const nn::Var& expr, const nn::Var& pose, const nn::Var& text, Eigen::Index length) const;
    ConditionalVars decoder_condition(const nn::Var& z_e, const nn::Var& z_p, const nn::Var& text,
                                      Eigen::Index length) const;
    DecodeVars decode(const nn::Var& z_e, const nn::Var& z_p, const ConditionalVars& cond) const;

    // Single-sample API: e is m×expr_dim, theta m×pose_dim, x_t L×text_dim.
    std::pair<LatentSample, LatentSample> encode(const Eigen::MatrixXd& e, const Eigen::MatrixXd& theta,
                                                 const TextEmbedding& x_t, Rng& rng) const;
    ConditionalVectors decoder_condition(const Eigen::MatrixXd& z_tilde_e, const Eigen::MatrixXd& z_tilde_p,
                                         const TextEmbedding& x_t) const;
    AnchorPair decode(const Eigen::MatrixXd& z_tilde_e, const Eigen::MatrixXd& z_tilde_p,
                      const ConditionalVectors& cond) const;

    void save(const std::filesystem::path& dir) const;
    static I2fetModel load(const std::filesystem::path& dir);

private:
    struct LinearConditioner {
        nn::LayerNorm norm;
        nn::Linear expr, pose;
    };
    ConditionalVars linear_condition(const LinearConditioner& c, const nn::Var& text, Eigen::Index length) const;

    I2fetConfig config_;
    Ifed enc_ifed_, dec_ifed_;
    LinearConditioner enc_linear_, dec_linear_;
    nn::Mlp enc_e_, enc_p_;
    nn::Linear t_e_, t_p_;
    nn::Mlp dec_e_, dec_p_;
};

Eigen::MatrixXd reparameterize(const Eigen::MatrixXd& mu, const Eigen::MatrixXd& sigma, const Eigen::MatrixXd& z);

// 0.5 [ -Σ(log σ² + 1) + Σσ² + Σμ² ] over all elements.
double kl_term(const Eigen::MatrixXd& mu, const Eigen::MatrixXd& sigma);

// Mean squared error between the meshes of (shape, expr, pose) and (shape, expr_hat, pose_hat);
// differentiable in expr_hat and pose_hat.
nn::Var vertex_mse(const HeadModel& head, const Eigen::MatrixXd& shape, Eigen::Index tokens,
                   const Eigen::MatrixXd& expr, const Eigen::MatrixXd& pose, const nn::Var& expr_hat,
                   const nn::Var& pose_hat);

// Full objective on a batch; z draws come from `rng`. `head` may be null when the
// vertex loss is disabled.
LossBreakdown loss_total(const I2fetModel& model, const I2fetBatch& batch, const HeadModel* head,
                         const LossFlags& flags, Rng& rng);

struct EpochRecord {
    int epoch = 0;
    double train_total = 0, train_e = 0, train_p = 0, train_v = 0;
    double val_total = 0, val_e = 0, val_p = 0, val_v = 0;
};

struct TrainingLog {
    std::vector<EpochRecord> epochs;
    int best_epoch = 0;
    std::string to_csv() const;
    void write_csv(const std::filesystem::path& path) const;
};

using EpochCallback = std::function<void(const EpochRecord&)>;

TrainingLog train(I2fetModel& model, const DatasetManifest& data, const EmbeddingProvider& provider,
                  const HeadModel* head, const TrainConfig& config, const EpochCallback& on_epoch = {});

AnchorPair generate(const I2fetModel& model, const TextEmbedding& x_t, std::uint64_t rng_seed);

// One row per (sample, token): index, split, label, then μ_e and μ_p.
void export_latents(const I2fetModel& model, const DatasetManifest& data, const std::vector<std::size_t>& indices,
                    const EmbeddingProvider& provider, const std::filesystem::path& csv_path);

}  // namespace fet
