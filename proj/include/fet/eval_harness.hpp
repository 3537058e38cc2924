#pragma once

#include "fet/dataset.hpp"
#include "fet/i2fet.hpp"
#include "fet/nn/layers.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

namespace fet {

// Classification features of one anchor: [e ‖ θ_jaw].
Eigen::VectorXd anchor_features(const Eigen::VectorXd& expression, const Eigen::VectorXd& pose);

class ExpressionClassifier {
public:
    virtual ~ExpressionClassifier() = default;
    virtual int predict(const Eigen::VectorXd& features) const = 0;
    virtual int n_classes() const = 0;
};

class NearestCenterOracle final : public ExpressionClassifier {
public:
    NearestCenterOracle(const Eigen::MatrixXd& expr_centers, const Eigen::MatrixXd& jaw_centers);
    explicit NearestCenterOracle(const DatasetManifest& manifest);
    int predict(const Eigen::VectorXd& features) const override;
    int n_classes() const override { return static_cast<int>(centers_.rows()); }

private:
    Eigen::MatrixXd centers_;
};

struct CBFocalConfig {
    double beta = 0.9999;
    double gamma = 2.0;
    std::vector<int> class_counts;
};

// (1-β)/(1-β^n) per class before normalization.
std::vector<double> effective_number_weights(const std::vector<int>& counts, double beta);
// Same weights rescaled to mean 1.
std::vector<double> class_balanced_weights(const std::vector<int>& counts, double beta);

double cb_focal_loss(const Eigen::MatrixXd& logits, const std::vector<int>& labels, const CBFocalConfig& cfg);
nn::Var cb_focal_loss(const nn::Var& logits, const std::vector<int>& labels, const std::vector<double>& weights,
                      double gamma);

enum class ClassifierLoss { cb_focal, cross_entropy };

struct ClassifierConfig {
    int hidden = 128;
    int epochs = 40;
    int batch_size = 64;
    double learning_rate = 1e-3;
    ClassifierLoss loss = ClassifierLoss::cb_focal;
    double beta = 0.9999;
    double gamma = 2.0;
    std::uint64_t seed = 0;
};

class ClassifierModel final : public ExpressionClassifier {
public:
    ClassifierModel() = default;
    ClassifierModel(int in_dim, int hidden, int n_classes, std::uint64_t seed);

    Eigen::MatrixXd logits(const Eigen::MatrixXd& features) const;
    nn::Var forward(const nn::Var& features) const { return mlp_.forward(features); }
    int predict(const Eigen::VectorXd& features) const override;
    int n_classes() const override { return n_classes_; }
    nn::ParamList parameters() const;

    void save(const std::filesystem::path& dir) const;
    static ClassifierModel load(const std::filesystem::path& dir);

private:
    nn::Mlp mlp_;
    int in_dim_ = 0, hidden_ = 0, n_classes_ = 0;
};

// Each sample contributes its two anchors as two labeled examples.
std::pair<Eigen::MatrixXd, std::vector<int>> classification_examples(const DatasetManifest& data,
                                                                     const std::vector<std::size_t>& indices);

ClassifierModel train_classifier(const Eigen::MatrixXd& features, const std::vector<int>& labels, int n_classes,
                                 const ClassifierConfig& cfg);
double classifier_accuracy(const ExpressionClassifier& c, const Eigen::MatrixXd& features, const std::vector<int>& labels);

using LabelPair = std::pair<int, int>;

// (acc1, acc2): per-label accuracy and per-sample both-correct accuracy.
std::pair<double, double> acc_metrics(const std::vector<LabelPair>& predictions, const std::vector<LabelPair>& truths);

// Geometric mean of recalls; callers drop classes without support beforehand.
double gmean(const std::vector<double>& recalls);

struct MetricsReport {
    double acc1 = 0, acc2 = 0, gmean = 0;
    Eigen::MatrixXi confusion;  // rows are true classes
    std::vector<double> per_class_recall;
    std::vector<int> support;

    nlohmann::json to_json(const ExpressionVocabulary& vocab) const;
    std::string confusion_csv(const ExpressionVocabulary& vocab) const;
};

MetricsReport metrics_report(const std::vector<LabelPair>& predictions, const std::vector<LabelPair>& truths,
                             int n_classes);

struct GenerationEval {
    MetricsReport generated;
    MetricsReport ground_truth;
};

// Generates anchors for every listed sample (seed derived from (seed, repeat, index)),
// classifies both, and scores them against the instruction labels.
GenerationEval evaluate_generation(const I2fetModel& model, const DatasetManifest& data,
                                   const std::vector<std::size_t>& indices, const EmbeddingProvider& provider,
                                   const ExpressionClassifier& classifier, std::uint64_t seed, int repeat = 0);

struct ExperimentResult {
    I2fetModel model;
    TrainingLog log;
    GenerationEval eval;
    double train_seconds = 0;
};

// Trains a fresh model (initialized from train.seed) and scores generation on the test split.
ExperimentResult run_experiment(const DatasetManifest& data, const EmbeddingProvider& provider, const HeadModel* head,
                                const I2fetConfig& model_config, const TrainConfig& train_config,
                                const ExpressionClassifier& classifier, std::uint64_t eval_seed,
                                const EpochCallback& on_epoch = {});

// Mean and population std of acc1/acc2/gmean across repeats.
nlohmann::json summarize_repeats(const std::vector<MetricsReport>& reports);

}  // namespace fet
