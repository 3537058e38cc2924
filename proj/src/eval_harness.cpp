#include "fet/eval_harness.hpp"

#include "fet/errors.hpp"
#include "fet/i2fet.hpp"
#include "fet/random.hpp"
#include "fet/tensor_archive.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <sstream>

namespace fet {

using nn::Var;

Eigen::VectorXd anchor_features(const Eigen::VectorXd& expression, const Eigen::VectorXd& pose) {
    if (pose.size() < 6) throw ShapeError("pose must hold global and jaw rotation");
    Eigen::VectorXd f(expression.size() + 3);
    f << expression, pose.segment(3, 3);
    return f;
}

NearestCenterOracle::NearestCenterOracle(const Eigen::MatrixXd& expr_centers, const Eigen::MatrixXd& jaw_centers) {
    if (expr_centers.rows() != jaw_centers.rows() || jaw_centers.cols() != 3 || expr_centers.rows() < 1)
        throw ShapeError("oracle centers must be C x E and C x 3");
    centers_.resize(expr_centers.rows(), expr_centers.cols() + 3);
    centers_ << expr_centers, jaw_centers;
}

NearestCenterOracle::NearestCenterOracle(const DatasetManifest& m) {
    if (!m.has_centers()) throw ValidationError("dataset carries no class centers for the oracle");
    *this = NearestCenterOracle(m.expr_centers, m.jaw_centers);
}

int NearestCenterOracle::predict(const Eigen::VectorXd& f) const {
    if (f.size() != centers_.cols()) throw ShapeError("oracle feature width mismatch");
    Eigen::Index best = 0;
    (centers_.rowwise() - f.transpose()).rowwise().squaredNorm().minCoeff(&best);
    return static_cast<int>(best);
}

std::vector<double> effective_number_weights(const std::vector<int>& counts, double beta) {
    if (!(beta >= 0.0 && beta < 1.0)) throw ConfigError("beta must lie in [0, 1)");
    std::vector<double> w;
    for (int n : counts) {
        if (n < 1) throw ConfigError("class counts must be positive");
        w.push_back((1.0 - beta) / (1.0 - std::pow(beta, n)));
    }
    return w;
}

std::vector<double> class_balanced_weights(const std::vector<int>& counts, double beta) {
    auto w = effective_number_weights(counts, beta);
    const double mean = std::accumulate(w.begin(), w.end(), 0.0) / static_cast<double>(w.size());
    for (auto& x : w) x /= mean;
    return w;
}

Var cb_focal_loss(const Var& logits, const std::vector<int>& labels, const std::vector<double>& weights, double gamma) {
    const Eigen::Index b = logits.rows(), c = logits.cols();
    if (static_cast<Eigen::Index>(labels.size()) != b) throw ShapeError("one label per logit row required");
    if (static_cast<Eigen::Index>(weights.size()) != c) throw ShapeError("one weight per class required");
    if (!(gamma >= 0.0)) throw ConfigError("gamma must be non-negative");
    for (int y : labels)
        if (y < 0 || y >= c) throw ValidationError("label " + std::to_string(y) + " out of range");

    Eigen::MatrixXd probs(b, c);
    Eigen::VectorXd logp(b);
    double total = 0.0;
    for (Eigen::Index i = 0; i < b; ++i) {
        const double mx = logits.value().row(i).maxCoeff();
        const Eigen::RowVectorXd ex = (logits.value().row(i).array() - mx).exp();
        const double s = ex.sum();
        probs.row(i) = ex / s;
        const int y = labels[static_cast<std::size_t>(i)];
        logp(i) = logits.value()(i, y) - mx - std::log(s);
        const double py = probs(i, y);
        total += weights[static_cast<std::size_t>(y)] * std::pow(1.0 - py, gamma) * -logp(i);
    }
    Eigen::MatrixXd out(1, 1);
    out(0, 0) = total / static_cast<double>(b);
    return nn::make_op(std::move(out), {logits}, [probs, logp, labels, weights, gamma](nn::Node& n) {
        const Eigen::Index b = probs.rows();
        Eigen::MatrixXd g(probs.rows(), probs.cols());
        for (Eigen::Index i = 0; i < b; ++i) {
            const int y = labels[static_cast<std::size_t>(i)];
            const double py = probs(i, y), q = 1.0 - py;
            // d/dz_j of w (1-p)^γ (-log p) = w [γ (1-p)^(γ-1) p log p - (1-p)^γ] (δ_jy - p_j)
            double focal_term = 0.0;
            if (gamma > 0.0 && q > 0.0) focal_term = gamma * std::pow(q, gamma - 1.0) * py * logp(i);
            const double coef = weights[static_cast<std::size_t>(y)] * (focal_term - std::pow(q, gamma));
            g.row(i) = -coef * probs.row(i);
            g(i, y) += coef;
        }
        n.parents[0]->accumulate(g * (n.grad(0, 0) / static_cast<double>(b)));
    });
}

double cb_focal_loss(const Eigen::MatrixXd& logits, const std::vector<int>& labels, const CBFocalConfig& cfg) {
    if (static_cast<Eigen::Index>(cfg.class_counts.size()) != logits.cols())
        throw ValidationError("class counts must cover every class");
    nn::NoGradGuard guard;
    return cb_focal_loss(nn::constant(logits), labels, class_balanced_weights(cfg.class_counts, cfg.beta), cfg.gamma)
        .scalar();
}

ClassifierModel::ClassifierModel(int in_dim, int hidden, int n_classes, std::uint64_t seed)
    : in_dim_(in_dim), hidden_(hidden), n_classes_(n_classes) {
    if (in_dim < 1 || hidden < 1 || n_classes < 2) throw ConfigError("classifier dims invalid");
    Rng rng(seed);
    mlp_ = nn::Mlp({in_dim, hidden, hidden, n_classes}, rng);
}

Eigen::MatrixXd ClassifierModel::logits(const Eigen::MatrixXd& features) const {
    if (features.cols() != in_dim_) throw ShapeError("classifier feature width mismatch");
    nn::NoGradGuard guard;
    return mlp_.forward(nn::constant(features)).value();
}

int ClassifierModel::predict(const Eigen::VectorXd& f) const {
    Eigen::Index best = 0;
    logits(f.transpose()).row(0).maxCoeff(&best);
    return static_cast<int>(best);
}

nn::ParamList ClassifierModel::parameters() const {
    nn::ParamList out;
    mlp_.collect("mlp", out);
    return out;
}

void ClassifierModel::save(const std::filesystem::path& dir) const {
    TensorArchive ar;
    nn::store_params(parameters(), ar);
    ar.meta() = {{"kind", "classifier"}, {"in_dim", in_dim_}, {"hidden", hidden_}, {"n_classes", n_classes_}};
    ar.save(dir);
}

ClassifierModel ClassifierModel::load(const std::filesystem::path& dir) {
    TensorArchive ar = TensorArchive::load(dir);
    if (ar.meta().value("kind", "") != "classifier") throw ValidationError(dir.string() + " is not a classifier");
    ClassifierModel m(ar.meta().at("in_dim"), ar.meta().at("hidden"), ar.meta().at("n_classes"), 0);
    nn::load_params(m.parameters(), ar);
    return m;
}

std::pair<Eigen::MatrixXd, std::vector<int>> classification_examples(const DatasetManifest& data,
                                                                     const std::vector<std::size_t>& indices) {
    Eigen::MatrixXd x(2 * static_cast<Eigen::Index>(indices.size()), data.expr_dim + 3);
    std::vector<int> y;
    Eigen::Index r = 0;
    for (auto i : indices) {
        const Sample& s = data.samples.at(i);
        x.row(r++) = anchor_features(s.anchors.e0, s.anchors.theta0).transpose();
        x.row(r++) = anchor_features(s.anchors.e1, s.anchors.theta1).transpose();
        y.push_back(data.vocab.index_of(s.label_from()));
        y.push_back(data.vocab.index_of(s.label_to()));
    }
    return {x, y};
}

ClassifierModel train_classifier(const Eigen::MatrixXd& features, const std::vector<int>& labels, int n_classes,
                                 const ClassifierConfig& cfg) {
    if (features.rows() == 0 || static_cast<Eigen::Index>(labels.size()) != features.rows())
        throw ValidationError("classifier needs a non-empty labeled set");
    if (cfg.epochs < 1 || cfg.batch_size < 1 || !(cfg.learning_rate > 0.0))
        throw ConfigError("classifier training settings must be positive");
    std::vector<int> counts(static_cast<std::size_t>(n_classes), 0);
    for (int y : labels) {
        if (y < 0 || y >= n_classes) throw ValidationError("label " + std::to_string(y) + " out of range");
        ++counts[static_cast<std::size_t>(y)];
    }
    if (std::count_if(counts.begin(), counts.end(), [](int c) { return c > 0; }) < 2)
        throw ValidationError("classifier needs examples from at least two classes");
    for (auto& c : counts) c = std::max(c, 1);
    std::vector<double> weights(static_cast<std::size_t>(n_classes), 1.0);
    double gamma = 0.0;
    if (cfg.loss == ClassifierLoss::cb_focal) {
        weights = class_balanced_weights(counts, cfg.beta);
        gamma = cfg.gamma;
    }

    ClassifierModel model(static_cast<int>(features.cols()), cfg.hidden, n_classes, derive_seed(cfg.seed, {0}));
    nn::ParamList params = model.parameters();
    nn::Adam opt(params, cfg.learning_rate);
    std::vector<Eigen::Index> order(static_cast<std::size_t>(features.rows()));
    std::iota(order.begin(), order.end(), 0);
    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        Rng rng(derive_seed(cfg.seed, {1, static_cast<std::uint64_t>(epoch)}));
        std::shuffle(order.begin(), order.end(), rng);
        for (std::size_t s = 0; s < order.size(); s += static_cast<std::size_t>(cfg.batch_size)) {
            const std::size_t e = std::min(order.size(), s + static_cast<std::size_t>(cfg.batch_size));
            Eigen::MatrixXd x(static_cast<Eigen::Index>(e - s), features.cols());
            std::vector<int> y;
            for (std::size_t k = s; k < e; ++k) {
                x.row(static_cast<Eigen::Index>(k - s)) = features.row(order[k]);
                y.push_back(labels[static_cast<std::size_t>(order[k])]);
            }
            opt.zero_grad();
            Var loss = cb_focal_loss(model.forward(nn::constant(x)), y, weights, gamma);
            if (!std::isfinite(loss.scalar()))
                throw TrainingDivergedError(epoch, "classifier loss became non-finite at epoch " + std::to_string(epoch));
            nn::backward(loss);
            opt.step();
        }
    }
    return model;
}

double classifier_accuracy(const ExpressionClassifier& c, const Eigen::MatrixXd& features, const std::vector<int>& labels) {
    if (features.rows() == 0 || static_cast<Eigen::Index>(labels.size()) != features.rows())
        throw ValidationError("accuracy needs a non-empty labeled set");
    int correct = 0;
    for (Eigen::Index i = 0; i < features.rows(); ++i)
        correct += c.predict(features.row(i).transpose()) == labels[static_cast<std::size_t>(i)];
    return static_cast<double>(correct) / static_cast<double>(features.rows());
}

std::pair<double, double> acc_metrics(const std::vector<LabelPair>& pred, const std::vector<LabelPair>& truth) {
    if (pred.size() != truth.size()) throw ValidationError("predictions and truths differ in length");
    if (pred.empty()) throw ValidationError("no predictions to score");
    int labels = 0, samples = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const bool a = pred[i].first == truth[i].first, b = pred[i].second == truth[i].second;
        labels += a + b;
        samples += a && b;
    }
    const double n = static_cast<double>(pred.size());
    return {labels / (2.0 * n), samples / n};
}

double gmean(const std::vector<double>& recalls) {
    if (recalls.empty()) throw ValidationError("G-mean of an empty recall vector");
    double log_sum = 0.0;
    for (double r : recalls) {
        if (!(r >= 0.0 && r <= 1.0)) throw DomainError("recall outside [0, 1]");
        if (r == 0.0) return 0.0;
        log_sum += std::log(r);
    }
    return std::exp(log_sum / static_cast<double>(recalls.size()));
}

MetricsReport metrics_report(const std::vector<LabelPair>& pred, const std::vector<LabelPair>& truth, int n_classes) {
    MetricsReport r;
    std::tie(r.acc1, r.acc2) = acc_metrics(pred, truth);
    r.confusion = Eigen::MatrixXi::Zero(n_classes, n_classes);
    auto tally = [&](int t, int p) {
        if (t < 0 || t >= n_classes || p < 0 || p >= n_classes) throw ValidationError("label out of range");
        ++r.confusion(t, p);
    };
    for (std::size_t i = 0; i < pred.size(); ++i) {
        tally(truth[i].first, pred[i].first);
        tally(truth[i].second, pred[i].second);
    }
    std::vector<double> present;
    for (int c = 0; c < n_classes; ++c) {
        const int sup = r.confusion.row(c).sum();
        r.support.push_back(sup);
        const double rec = sup > 0 ? static_cast<double>(r.confusion(c, c)) / sup : 0.0;
        r.per_class_recall.push_back(rec);
        if (sup > 0) present.push_back(rec);
    }
    r.gmean = gmean(present);
    return r;
}

nlohmann::json MetricsReport::to_json(const ExpressionVocabulary& vocab) const {
    nlohmann::json conf = nlohmann::json::array();
    for (Eigen::Index i = 0; i < confusion.rows(); ++i) {
        std::vector<int> row(confusion.cols());
        for (Eigen::Index j = 0; j < confusion.cols(); ++j) row[static_cast<std::size_t>(j)] = confusion(i, j);
        conf.push_back(row);
    }
    return {{"acc1", acc1},
            {"acc2", acc2},
            {"gmean", gmean},
            {"labels", vocab.labels()},
            {"per_class_recall", per_class_recall},
            {"support", support},
            {"confusion", conf}};
}

std::string MetricsReport::confusion_csv(const ExpressionVocabulary& vocab) const {
    std::ostringstream os;
    os << "true\\pred";
    for (const auto& l : vocab.labels()) os << ',' << l;
    os << '\n';
    for (Eigen::Index i = 0; i < confusion.rows(); ++i) {
        os << vocab.label(static_cast<int>(i));
        for (Eigen::Index j = 0; j < confusion.cols(); ++j) os << ',' << confusion(i, j);
        os << '\n';
    }
    return os.str();
}

GenerationEval evaluate_generation(const I2fetModel& model, const DatasetManifest& data,
                                   const std::vector<std::size_t>& indices, const EmbeddingProvider& provider,
                                   const ExpressionClassifier& classifier, std::uint64_t seed, int repeat) {
    if (indices.empty()) throw ValidationError("no samples to evaluate");
    if (classifier.n_classes() != data.vocab.size()) throw ValidationError("classifier and vocabulary disagree");
    EmbeddingCache cache(provider);
    std::vector<LabelPair> pred, gt_pred, truth;
    for (auto i : indices) {
        const Sample& s = data.samples.at(i);
        const AnchorPair a =
            generate(model, cache.get(s.embedding_key), derive_seed(seed, {static_cast<std::uint64_t>(repeat), i}));
        pred.emplace_back(classifier.predict(anchor_features(a.e0, a.theta0)),
                          classifier.predict(anchor_features(a.e1, a.theta1)));
        gt_pred.emplace_back(classifier.predict(anchor_features(s.anchors.e0, s.anchors.theta0)),
                             classifier.predict(anchor_features(s.anchors.e1, s.anchors.theta1)));
        truth.emplace_back(data.vocab.index_of(s.label_from()), data.vocab.index_of(s.label_to()));
    }
    return {metrics_report(pred, truth, data.vocab.size()), metrics_report(gt_pred, truth, data.vocab.size())};
}

ExperimentResult run_experiment(const DatasetManifest& data, const EmbeddingProvider& provider, const HeadModel* head,
                                const I2fetConfig& model_config, const TrainConfig& train_config,
                                const ExpressionClassifier& classifier, std::uint64_t eval_seed,
                                const EpochCallback& on_epoch) {
    I2fetConfig mc = model_config;
    mc.ifed_enabled = train_config.ifed_enabled;
    mc.expr_dim = data.expr_dim;
    mc.pose_dim = data.pose_dim;
    mc.text_dim = provider.dim();
    ExperimentResult r;
    r.model = I2fetModel(mc, derive_seed(train_config.seed, {0x1f2e}));
    const auto start = std::chrono::steady_clock::now();
    r.log = train(r.model, data, provider, head, train_config, on_epoch);
    r.train_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    r.eval = evaluate_generation(r.model, data, data.indices(Split::test), provider, classifier, eval_seed);
    return r;
}

nlohmann::json summarize_repeats(const std::vector<MetricsReport>& reports) {
    if (reports.empty()) throw ValidationError("no repeats to summarize");
    auto stat = [&](auto get) {
        double mean = 0.0;
        for (const auto& r : reports) mean += get(r);
        mean /= static_cast<double>(reports.size());
        double var = 0.0;
        for (const auto& r : reports) var += (get(r) - mean) * (get(r) - mean);
        return nlohmann::json{{"mean", mean}, {"std", std::sqrt(var / static_cast<double>(reports.size()))}};
    };
    return {{"repeats", reports.size()},
            {"acc1", stat([](const MetricsReport& r) { return r.acc1; })},
            {"acc2", stat([](const MetricsReport& r) { return r.acc2; })},
            {"gmean", stat([](const MetricsReport& r) { return r.gmean; })}};
}

}  // namespace fet
