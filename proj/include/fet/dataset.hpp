#pragma once

#include "fet/text_embed.hpp"

#include <Eigen/Core>
#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace fet {

// The two anchor expressions of a transition, (e0, θ0) then (e1, θ1).
struct AnchorPair {
    Eigen::VectorXd e0, e1;
    Eigen::VectorXd theta0, theta1;
};

struct Sample {
    Instruction instruction;
    std::string embedding_key;
    std::string subject_id;
    Eigen::VectorXd shape;
    AnchorPair anchors;
    const std::string& label_from() const { return instruction.expr_from; }
    const std::string& label_to() const { return instruction.expr_to; }
};

enum class Split { unassigned, train, val, test };
const char* split_name(Split s);
Split parse_split(const std::string& name);

struct SyntheticGenConfig {
    ExpressionVocabulary vocab = ExpressionVocabulary::ck();
    int samples_per_pair = 50;
    int expr_dim = 50;
    int shape_dim = 100;
    int n_subjects = 20;
    // Class centers; generated from the seed when left empty (C×expr_dim, C×3).
    Eigen::MatrixXd expr_centers;
    Eigen::MatrixXd jaw_centers;
    double center_scale = 0.3;
    double jaw_center_scale = 0.1;
    double noise_std = 0.05;
    double global_pose_jitter_std = 0.02;
    double shape_std = 1.0;
    // Relative label frequency per class; missing labels default to 1.
    std::map<std::string, double> class_multipliers;
    nlohmann::json embedding = {{"provider", "hash"}, {"seed", 0}, {"length", 16}, {"dim", 64}};
    std::uint64_t seed = 0;

    nlohmann::json to_json() const;
    static SyntheticGenConfig from_json(const nlohmann::json& j);
};

struct DatasetManifest {
    ExpressionVocabulary vocab;
    int expr_dim = 50;
    int pose_dim = 6;
    int shape_dim = 100;
    std::vector<Sample> samples;
    std::vector<Split> splits;  // parallel to samples
    // Generator ground truth, empty for ingested data.
    Eigen::MatrixXd expr_centers;
    Eigen::MatrixXd jaw_centers;
    double noise_std = 0.0;
    nlohmann::json embedding;  // provider description
    nlohmann::json provenance;

    std::size_t size() const { return samples.size(); }
    std::vector<std::size_t> indices(Split s) const;
    bool has_centers() const { return expr_centers.rows() > 0; }
    void validate() const;
};

DatasetManifest generate_synthetic(const SyntheticGenConfig& config);

// Stratified by (label_from, label_to); every pair keeps at least one training sample.
DatasetManifest split(const DatasetManifest& manifest, double test_frac, double val_frac_of_train,
                      std::uint64_t seed);

std::map<std::string, int> class_histogram(const DatasetManifest& manifest);

// Per-pair sample counts realizing the class multipliers; exposed for tests.
std::vector<std::vector<int>> pair_counts(const SyntheticGenConfig& config);

// Layout: dir/dataset.json plus dir/tensors (archive with shape, e0, e1, theta0, theta1).
void save_dataset(const DatasetManifest& manifest, const std::filesystem::path& dir);
DatasetManifest load_params_dataset(const std::filesystem::path& dir);

// Embedding provider described by the manifest; lookup archives resolve relative to `base`.
std::unique_ptr<EmbeddingProvider> dataset_provider(const DatasetManifest& manifest,
                                                    const std::filesystem::path& base = {});

// Writes an embedding archive covering every instruction of the manifest.
void save_dataset_embeddings(const DatasetManifest& manifest, const EmbeddingProvider& provider,
                             const std::filesystem::path& dir);

// Synthetic neutral faces: [e ‖ θ] rows scattered around a known center along a
// few latent directions, so each row deviates from the center by about noise_std
// per coordinate.
struct NeutralSet {
    Eigen::MatrixXd params;  // n × (expr_dim + pose_dim)
    Eigen::VectorXd center;
    double noise_std = 0.05;
    int expr_dim = 50;
    int pose_dim = 6;
};
NeutralSet generate_neutral_samples(int n, int expr_dim, int pose_dim, double noise_std, std::uint64_t seed,
                                    int factors = 6);

}  // namespace fet
