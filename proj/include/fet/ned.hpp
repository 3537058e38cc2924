#pragma once

#include "fet/head_model.hpp"
#include "fet/nn/layers.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <utility>
#include <vector>

namespace fet {

struct NedConfig {
    int expr_dim = 50;
    int pose_dim = 6;
    int latent_dim = 16;
    int epochs = 100;
    int batch_size = 64;
    double learning_rate = 1e-3;
    std::uint64_t seed = 0;

    void validate() const;
    nlohmann::json to_json() const;
    static NedConfig from_json(const nlohmann::json& j);
};

struct NeutralFace {
    Eigen::VectorXd expression;
    Eigen::VectorXd pose;
};

// Autoencoder over [e ‖ θ]: four FC layers into the latent, four out to each of
// expression and pose. A diagonal Gaussian fitted to the training latents
// drives generation.
class NedModel {
public:
    NedModel() = default;
    explicit NedModel(const NedConfig& config);

    const NedConfig& config() const { return config_; }
    nn::ParamList parameters() const;
    bool trained() const { return latent_mean_.size() > 0; }

    nn::Var encode(const nn::Var& x) const;
    std::pair<nn::Var, nn::Var> decode(const nn::Var& z) const;  // (expr, pose)

    Eigen::MatrixXd encode(const Eigen::MatrixXd& x) const;  // rows are [e ‖ θ]
    Eigen::MatrixXd reconstruct(const Eigen::MatrixXd& x) const;
    Eigen::MatrixXd decode(const Eigen::MatrixXd& z) const;  // rows are [e ‖ θ]

    const Eigen::VectorXd& latent_mean() const { return latent_mean_; }
    const Eigen::VectorXd& latent_std() const { return latent_std_; }
    void fit_latent_gaussian(const Eigen::MatrixXd& samples);

    void save(const std::filesystem::path& dir) const;
    static NedModel load(const std::filesystem::path& dir);

private:
    NedConfig config_;
    nn::Mlp encoder_, expr_decoder_, pose_decoder_;
    Eigen::VectorXd latent_mean_, latent_std_;
};

struct NedTrainLog {
    std::vector<double> epoch_mse;  // mean training reconstruction MSE per epoch
};

// samples: n × (expr_dim + pose_dim) rows of [e ‖ θ].
NedModel train_ned(const Eigen::MatrixXd& samples, const NedConfig& config, NedTrainLog* log = nullptr);

NeutralFace generate_neutral(const NedModel& model, std::uint64_t seed);

// The zero-expression neutral: e = 0, jaw = 0, global rotation kept.
NeutralFace flame_zero_neutral(const Eigen::VectorXd& pose, int expr_dim);

}  // namespace fet
