#include "fet/ned.hpp"

#include "fet/errors.hpp"
#include "fet/random.hpp"
#include "fet/tensor_archive.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace fet {

using nn::Var;

void NedConfig::validate() const {
    if (expr_dim < 1 || pose_dim < 3 || latent_dim < 1) throw ConfigError("NED dims must be positive");
    if (epochs < 1 || batch_size < 1 || !(learning_rate > 0.0)) throw ConfigError("NED training settings must be positive");
}

nlohmann::json NedConfig::to_json() const {
    return {{"expr_dim", expr_dim}, {"pose_dim", pose_dim},     {"latent_dim", latent_dim},
            {"epochs", epochs},     {"batch_size", batch_size}, {"learning_rate", learning_rate},
            {"seed", seed}};
}

NedConfig NedConfig::from_json(const nlohmann::json& j) {
    NedConfig c;
    c.expr_dim = j.value("expr_dim", c.expr_dim);
    c.pose_dim = j.value("pose_dim", c.pose_dim);
    c.latent_dim = j.value("latent_dim", c.latent_dim);
    c.epochs = j.value("epochs", c.epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.seed = j.value("seed", c.seed);
    c.validate();
    return c;
}

NedModel::NedModel(const NedConfig& config) : config_(config) {
    config_.validate();
    Rng rng(derive_seed(config_.seed, {0}));
    const int in = config_.expr_dim + config_.pose_dim, l = config_.latent_dim;
    encoder_ = nn::Mlp({in, 128, 128, 64, l}, rng);
    expr_decoder_ = nn::Mlp({l, 64, 128, 128, config_.expr_dim}, rng);
    pose_decoder_ = nn::Mlp({l, 64, 128, 128, config_.pose_dim}, rng);
}

nn::ParamList NedModel::parameters() const {
    nn::ParamList out;
    encoder_.collect("encoder", out);
    expr_decoder_.collect("expr_decoder", out);
    pose_decoder_.collect("pose_decoder", out);
    return out;
}

Var NedModel::encode(const Var& x) const {
    if (x.cols() != config_.expr_dim + config_.pose_dim) throw ShapeError("NED input must be [e, theta] rows");
    return encoder_.forward(x);
}

std::pair<Var, Var> NedModel::decode(const Var& z) const {
    if (z.cols() != config_.latent_dim) throw ShapeError("NED latent width mismatch");
    return {expr_decoder_.forward(z), pose_decoder_.forward(z)};
}

Eigen::MatrixXd NedModel::encode(const Eigen::MatrixXd& x) const {
    nn::NoGradGuard guard;
    return encode(nn::constant(x)).value();
}

Eigen::MatrixXd NedModel::decode(const Eigen::MatrixXd& z) const {
    nn::NoGradGuard guard;
    auto [e, p] = decode(nn::constant(z));
    Eigen::MatrixXd out(z.rows(), config_.expr_dim + config_.pose_dim);
    out << e.value(), p.value();
    return out;
}

Eigen::MatrixXd NedModel::reconstruct(const Eigen::MatrixXd& x) const { return decode(encode(x)); }

void NedModel::fit_latent_gaussian(const Eigen::MatrixXd& samples) {
    const Eigen::MatrixXd z = encode(samples);
    latent_mean_ = z.colwise().mean().transpose();
    const Eigen::MatrixXd centered = z.rowwise() - latent_mean_.transpose();
    latent_std_ = (centered.colwise().squaredNorm() / static_cast<double>(z.rows())).cwiseSqrt().transpose();
}

void NedModel::save(const std::filesystem::path& dir) const {
    if (!trained()) throw StateError("NED model has no fitted latent distribution");
    TensorArchive ar;
    nn::store_params(parameters(), ar);
    ar.put("latent_mean", Eigen::MatrixXd(latent_mean_.transpose()));
    ar.put("latent_std", Eigen::MatrixXd(latent_std_.transpose()));
    ar.meta() = {{"kind", "ned"}, {"config", config_.to_json()}};
    ar.save(dir);
}

NedModel NedModel::load(const std::filesystem::path& dir) {
    TensorArchive ar = TensorArchive::load(dir);
    if (ar.meta().value("kind", "") != "ned") throw ValidationError(dir.string() + " is not a NED checkpoint");
    NedModel m(NedConfig::from_json(ar.meta().at("config")));
    nn::load_params(m.parameters(), ar);
    m.latent_mean_ = ar.matrix("latent_mean").row(0).transpose();
    m.latent_std_ = ar.matrix("latent_std").row(0).transpose();
    if (m.latent_mean_.size() != m.config_.latent_dim || m.latent_std_.size() != m.config_.latent_dim)
        throw ShapeError("NED latent statistics have the wrong width");
    return m;
}

NedModel train_ned(const Eigen::MatrixXd& samples, const NedConfig& config, NedTrainLog* log) {
    config.validate();
    if (samples.rows() < 2) throw ValidationError("NED training needs at least 2 samples");
    if (samples.cols() != config.expr_dim + config.pose_dim)
        throw ShapeError("NED samples must have expr_dim + pose_dim columns");
    if (!samples.allFinite()) throw ValidationError("NED samples contain non-finite values");

    NedModel model(config);
    nn::ParamList params = model.parameters();
    nn::Adam opt(params, config.learning_rate);
    std::vector<Eigen::Index> order(static_cast<std::size_t>(samples.rows()));
    std::iota(order.begin(), order.end(), 0);
    for (int epoch = 1; epoch <= config.epochs; ++epoch) {
        Rng rng(derive_seed(config.seed, {1, static_cast<std::uint64_t>(epoch)}));
        std::shuffle(order.begin(), order.end(), rng);
        double sum = 0.0;
        for (std::size_t s = 0; s < order.size(); s += static_cast<std::size_t>(config.batch_size)) {
            const std::size_t e = std::min(order.size(), s + static_cast<std::size_t>(config.batch_size));
            Eigen::MatrixXd x(static_cast<Eigen::Index>(e - s), samples.cols());
            for (std::size_t k = s; k < e; ++k) x.row(static_cast<Eigen::Index>(k - s)) = samples.row(order[k]);
            opt.zero_grad();
            auto [pe, pp] = model.decode(model.encode(nn::constant(x)));
            Var loss = nn::mse(nn::concat_cols({pe, pp}), x);
            if (!std::isfinite(loss.scalar()))
                throw TrainingDivergedError(epoch, "NED loss became non-finite at epoch " + std::to_string(epoch));
            nn::backward(loss);
            opt.step();
            sum += loss.scalar() * static_cast<double>(e - s);
        }
        if (log) log->epoch_mse.push_back(sum / static_cast<double>(order.size()));
    }
    model.fit_latent_gaussian(samples);
    return model;
}

NeutralFace generate_neutral(const NedModel& model, std::uint64_t seed) {
    if (!model.trained()) throw StateError("NED model is untrained");
    Rng rng(seed);
    const Eigen::Index l = model.latent_mean().size();
    Eigen::MatrixXd z = standard_normal(1, l, rng);
    z = (z.array() * model.latent_std().transpose().array() + model.latent_mean().transpose().array()).matrix();
    const Eigen::MatrixXd out = model.decode(z);
    const int e = model.config().expr_dim;
    return {out.row(0).head(e).transpose(), out.row(0).tail(model.config().pose_dim).transpose()};
}

NeutralFace flame_zero_neutral(const Eigen::VectorXd& pose, int expr_dim) {
    if (pose.size() < 6) throw ShapeError("pose must hold global and jaw rotation");
    NeutralFace n;
    n.expression = Eigen::VectorXd::Zero(expr_dim);
    n.pose = pose;
    n.pose.segment(3, 3).setZero();
    return n;
}

}  // namespace fet
