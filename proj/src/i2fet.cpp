#include "fet/i2fet.hpp"

#include "fet/errors.hpp"
#include "fet/random.hpp"
#include "fet/tensor_archive.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

namespace fet {

using nn::Var;
using nlohmann::json;

void I2fetConfig::validate() const {
    if (expr_dim < 1 || pose_dim < 3 || latent_dim < 1 || hidden < 1 || text_dim < 1)
        throw ConfigError("I2FET dims must be positive (pose_dim >= 3)");
    if (m_tokens != 2) throw ConfigError("I2FET generates anchor pairs; m_tokens must be 2");
    encoder_ifed().validate();
}

IfedConfig I2fetConfig::encoder_ifed() const {
    IfedConfig c;
    c.facial_width = expr_dim + 3;
    c.text_dim = text_dim;
    c.model_dim = model_dim;
    c.heads = heads;
    c.n_facial_layers = n_facial_layers;
    c.n_text_layers = n_text_layers;
    c.n_caft_layers = n_caft_layers;
    c.m_tokens = m_tokens;
    c.use_positional_embedding = use_positional_embedding;
    c.expr_dim = expr_dim;
    c.pose_dim = pose_dim;
    return c;
}

IfedConfig I2fetConfig::decoder_ifed() const {
    IfedConfig c = encoder_ifed();
    c.facial_width = pose_dim + expr_dim;
    return c;
}

json I2fetConfig::to_json() const {
    return {{"expr_dim", expr_dim},
            {"pose_dim", pose_dim},
            {"latent_dim", latent_dim},
            {"hidden", hidden},
            {"m_tokens", m_tokens},
            {"text_dim", text_dim},
            {"model_dim", model_dim},
            {"heads", heads},
            {"n_facial_layers", n_facial_layers},
            {"n_text_layers", n_text_layers},
            {"n_caft_layers", n_caft_layers},
            {"use_positional_embedding", use_positional_embedding},
            {"ifed_enabled", ifed_enabled}};
}

I2fetConfig I2fetConfig::from_json(const json& j) {
    I2fetConfig c;
    c.expr_dim = j.value("expr_dim", c.expr_dim);
    c.pose_dim = j.value("pose_dim", c.pose_dim);
    c.latent_dim = j.value("latent_dim", c.latent_dim);
    c.hidden = j.value("hidden", c.hidden);
    c.m_tokens = j.value("m_tokens", c.m_tokens);
    c.text_dim = j.value("text_dim", c.text_dim);
    c.model_dim = j.value("model_dim", c.model_dim);
    c.heads = j.value("heads", c.heads);
    c.n_facial_layers = j.value("n_facial_layers", c.n_facial_layers);
    c.n_text_layers = j.value("n_text_layers", c.n_text_layers);
    c.n_caft_layers = j.value("n_caft_layers", c.n_caft_layers);
    c.use_positional_embedding = j.value("use_positional_embedding", c.use_positional_embedding);
    c.ifed_enabled = j.value("ifed_enabled", c.ifed_enabled);
    c.validate();
    return c;
}

void TrainConfig::validate() const {
    if (epochs < 1 || batch_size < 1 || !(learning_rate > 0.0) || !std::isfinite(learning_rate))
        throw ConfigError("epochs, batch_size and learning_rate must be positive");
}

json TrainConfig::to_json() const {
    return {{"epochs", epochs},
            {"batch_size", batch_size},
            {"learning_rate", learning_rate},
            {"seed", seed},
            {"use_pose_loss", flags.use_pose_loss},
            {"use_vertex_loss", flags.use_vertex_loss},
            {"ifed_enabled", ifed_enabled}};
}

TrainConfig TrainConfig::from_json(const json& j) {
    TrainConfig c;
    c.epochs = j.value("epochs", c.epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.seed = j.value("seed", c.seed);
    c.flags.use_pose_loss = j.value("use_pose_loss", c.flags.use_pose_loss);
    c.flags.use_vertex_loss = j.value("use_vertex_loss", c.flags.use_vertex_loss);
    c.ifed_enabled = j.value("ifed_enabled", c.ifed_enabled);
    c.validate();
    return c;
}

const TextEmbedding& EmbeddingCache::get(const std::string& key) {
    auto it = table_.find(key);
    if (it != table_.end()) return it->second;
    TextEmbedding t = provider_.embed(key);
    if (t.rows() != provider_.length() || t.cols() != provider_.dim())
        throw ShapeError("embedding for \"" + key + "\" has unexpected shape");
    return table_.emplace(key, std::move(t)).first->second;
}

I2fetBatch make_batch(const DatasetManifest& data, const std::vector<std::size_t>& indices, EmbeddingCache& cache) {
    if (indices.empty()) throw ValidationError("empty batch");
    const auto b = static_cast<Eigen::Index>(indices.size());
    const Eigen::Index len = cache.provider().length(), dim = cache.provider().dim();
    I2fetBatch batch;
    batch.length = len;
    batch.expr.resize(2 * b, data.expr_dim);
    batch.pose.resize(2 * b, data.pose_dim);
    batch.text.resize(b * len, dim);
    bool has_shape = true;
    for (auto i : indices) has_shape = has_shape && data.samples.at(i).shape.size() == data.shape_dim;
    if (has_shape) batch.shape.resize(b, data.shape_dim);
    for (Eigen::Index k = 0; k < b; ++k) {
        const Sample& s = data.samples.at(indices[static_cast<std::size_t>(k)]);
        batch.expr.row(2 * k) = s.anchors.e0.transpose();
        batch.expr.row(2 * k + 1) = s.anchors.e1.transpose();
        batch.pose.row(2 * k) = s.anchors.theta0.transpose();
        batch.pose.row(2 * k + 1) = s.anchors.theta1.transpose();
        batch.text.middleRows(k * len, len) = cache.get(s.embedding_key);
        if (has_shape) batch.shape.row(k) = s.shape.transpose();
    }
    return batch;
}

I2fetModel::I2fetModel(const I2fetConfig& config, std::uint64_t seed) : config_(config) {
    config_.validate();
    Rng rng(seed);
    const int e = config_.expr_dim, p = config_.pose_dim, l = config_.latent_dim, h = config_.hidden;
    if (config_.ifed_enabled) {
        enc_ifed_ = Ifed(config_.encoder_ifed(), rng);
        dec_ifed_ = Ifed(config_.decoder_ifed(), rng);
    } else {
        // Same pooled-text normalization as the decomposer, so the comparison isolates the fusion itself.
        const int dt = config_.text_dim;
        enc_linear_ = {nn::LayerNorm(dt), nn::Linear(dt, e, rng), nn::Linear(dt, p, rng)};
        dec_linear_ = {nn::LayerNorm(dt), nn::Linear(dt, e, rng), nn::Linear(dt, p, rng)};
    }
    enc_e_ = nn::Mlp({2 * e, h, h, 2 * l}, rng);
    enc_p_ = nn::Mlp({2 * p, h, h, 2 * l}, rng);
    t_e_ = nn::Linear(l, e, rng);
    t_p_ = nn::Linear(l, p, rng);
    dec_e_ = nn::Mlp({l + e, h, h, e}, rng);
    dec_p_ = nn::Mlp({l + p, h, h, p}, rng);
}

nn::ParamList I2fetModel::parameters() const {
    nn::ParamList out;
    if (config_.ifed_enabled) {
        enc_ifed_.collect("enc_ifed", out);
        dec_ifed_.collect("dec_ifed", out);
    } else {
        enc_linear_.norm.collect("enc_cond.norm", out);
        enc_linear_.expr.collect("enc_cond.expr", out);
        enc_linear_.pose.collect("enc_cond.pose", out);
        dec_linear_.norm.collect("dec_cond.norm", out);
        dec_linear_.expr.collect("dec_cond.expr", out);
        dec_linear_.pose.collect("dec_cond.pose", out);
    }
    enc_e_.collect("enc_e", out);
    enc_p_.collect("enc_p", out);
    t_e_.collect("t_e", out);
    t_p_.collect("t_p", out);
    dec_e_.collect("dec_e", out);
    dec_p_.collect("dec_p", out);
    return out;
}

ConditionalVars I2fetModel::linear_condition(const LinearConditioner& c, const Var& text, Eigen::Index length) const {
    if (length < 1 || text.rows() % length != 0 || text.cols() != config_.text_dim)
        throw ShapeError("text input must be (B*L)x" + std::to_string(config_.text_dim));
    Var pooled = nn::repeat_rows(nn::group_mean_rows(text, length), config_.m_tokens);
    pooled = c.norm.forward(pooled);
    return {c.expr.forward(pooled), c.pose.forward(pooled)};
}

ConditionalVars I2fetModel::encoder_condition(const Var& x_f, const Var& text, Eigen::Index length) const {
    if (config_.ifed_enabled) return enc_ifed_.forward(x_f, text, length);
    return linear_condition(enc_linear_, text, length);
}

EncodeVars I2fetModel::encode(const Var& expr, const Var& pose, const Var& text, Eigen::Index length) const {
    if (expr.cols() != config_.expr_dim || pose.cols() != config_.pose_dim || expr.rows() != pose.rows() ||
        expr.rows() % config_.m_tokens != 0)
        throw ShapeError("encode expects (B*m)x" + std::to_string(config_.expr_dim) + " and (B*m)x" +
                         std::to_string(config_.pose_dim));
    if (length < 1 || text.rows() != expr.rows() / config_.m_tokens * length)
        throw ShapeError("encode: text rows do not match the batch");
    // Only the jaw carries expression identity; the facial branch sees [e, θ_jaw].
    Var x_f = nn::concat_cols({expr, nn::slice_cols(pose, config_.pose_dim - 3, 3)});
    ConditionalVars cond = encoder_condition(x_f, text, length);
    const int l = config_.latent_dim;
    Var he = enc_e_.forward(nn::concat_cols({expr, cond.expr_cond}));
    Var hp = enc_p_.forward(nn::concat_cols({pose, cond.pose_cond}));
    return {nn::slice_cols(he, 0, l), nn::slice_cols(he, l, l), nn::slice_cols(hp, 0, l), nn::slice_cols(hp, l, l)};
}

ConditionalVars I2fetModel::decoder_condition(const Var& z_e, const Var& z_p, const Var& text,
                                              Eigen::Index length) const {
    if (z_e.cols() != config_.latent_dim || z_p.cols() != config_.latent_dim || z_e.rows() != z_p.rows())
        throw ShapeError("latents must be (B*m)x" + std::to_string(config_.latent_dim));
    if (config_.ifed_enabled) {
        Var x_f = nn::concat_cols({t_p_.forward(z_p), t_e_.forward(z_e)});
        return dec_ifed_.forward(x_f, text, length);
    }
    return linear_condition(dec_linear_, text, length);
}

DecodeVars I2fetModel::decode(const Var& z_e, const Var& z_p, const ConditionalVars& cond) const {
    if (z_e.rows() != cond.expr_cond.rows() || z_p.rows() != cond.pose_cond.rows())
        throw ShapeError("decode: latent and condition rows differ");
    return {dec_e_.forward(nn::concat_cols({z_e, cond.expr_cond})),
            dec_p_.forward(nn::concat_cols({z_p, cond.pose_cond}))};
}

std::pair<LatentSample, LatentSample> I2fetModel::encode(const Eigen::MatrixXd& e, const Eigen::MatrixXd& theta,
                                                         const TextEmbedding& x_t, Rng& rng) const {
    if (e.rows() != config_.m_tokens) throw ShapeError("encode expects one sample of m rows");
    nn::NoGradGuard guard;
    EncodeVars v = encode(nn::constant(e), nn::constant(theta), nn::constant(x_t), x_t.rows());
    auto sample = [&](const Var& mu, const Var& logvar) {
        LatentSample s;
        s.mu = mu.value();
        s.sigma = (0.5 * logvar.value().array()).exp().matrix();
        s.z = standard_normal(s.mu.rows(), s.mu.cols(), rng);
        s.z_tilde = reparameterize(s.mu, s.sigma, s.z);
        return s;
    };
    LatentSample le = sample(v.mu_e, v.logvar_e);
    LatentSample lp = sample(v.mu_p, v.logvar_p);
    return {std::move(le), std::move(lp)};
}

ConditionalVectors I2fetModel::decoder_condition(const Eigen::MatrixXd& z_tilde_e, const Eigen::MatrixXd& z_tilde_p,
                                                 const TextEmbedding& x_t) const {
    if (z_tilde_e.rows() != config_.m_tokens) throw ShapeError("decoder_condition expects one sample of m rows");
    nn::NoGradGuard guard;
    auto c = decoder_condition(nn::constant(z_tilde_e), nn::constant(z_tilde_p), nn::constant(x_t), x_t.rows());
    return {c.expr_cond.value(), c.pose_cond.value()};
}

AnchorPair I2fetModel::decode(const Eigen::MatrixXd& z_tilde_e, const Eigen::MatrixXd& z_tilde_p,
                              const ConditionalVectors& cond) const {
    if (z_tilde_e.rows() != config_.m_tokens) throw ShapeError("decode expects one sample of m rows");
    nn::NoGradGuard guard;
    DecodeVars d = decode(nn::constant(z_tilde_e), nn::constant(z_tilde_p),
                          ConditionalVars{nn::constant(cond.expr_cond), nn::constant(cond.pose_cond)});
    AnchorPair a;
    a.e0 = d.expr.value().row(0).transpose();
    a.e1 = d.expr.value().row(1).transpose();
    a.theta0 = d.pose.value().row(0).transpose();
    a.theta1 = d.pose.value().row(1).transpose();
    return a;
}

void I2fetModel::save(const std::filesystem::path& dir) const {
    TensorArchive ar;
    nn::store_params(parameters(), ar);
    ar.meta() = {{"kind", "i2fet"}, {"config", config_.to_json()}};
    ar.save(dir);
}

I2fetModel I2fetModel::load(const std::filesystem::path& dir) {
    TensorArchive ar = TensorArchive::load(dir);
    if (ar.meta().value("kind", "") != "i2fet") throw ValidationError(dir.string() + " is not an I2FET checkpoint");
    I2fetModel model(I2fetConfig::from_json(ar.meta().at("config")), 0);
    nn::load_params(model.parameters(), ar);
    return model;
}

Eigen::MatrixXd reparameterize(const Eigen::MatrixXd& mu, const Eigen::MatrixXd& sigma, const Eigen::MatrixXd& z) {
    if (mu.rows() != sigma.rows() || mu.cols() != sigma.cols() || mu.rows() != z.rows() || mu.cols() != z.cols())
        throw ShapeError("reparameterize: mu, sigma and z must share a shape");
    return sigma.cwiseProduct(z) + mu;
}

double kl_term(const Eigen::MatrixXd& mu, const Eigen::MatrixXd& sigma) {
    if (mu.rows() != sigma.rows() || mu.cols() != sigma.cols()) throw ShapeError("kl_term: shape mismatch");
    if (!((sigma.array() > 0.0).all())) throw DomainError("kl_term: sigma must be strictly positive");
    const Eigen::ArrayXXd s2 = sigma.array().square();
    return 0.5 * (-(s2.log() + 1.0).sum() + s2.sum() + mu.array().square().sum());
}

Var vertex_mse(const HeadModel& head, const Eigen::MatrixXd& shape, Eigen::Index tokens, const Eigen::MatrixXd& expr,
               const Eigen::MatrixXd& pose, const Var& expr_hat, const Var& pose_hat) {
    const Eigen::Index rows = expr.rows();
    if (shape.rows() * tokens != rows || expr_hat.rows() != rows || pose_hat.rows() != rows ||
        pose.rows() != rows || shape.cols() != head.n_shape() || expr.cols() != head.n_expr() ||
        expr_hat.cols() != head.n_expr() || pose.cols() != head.pose_dim || pose_hat.cols() != head.pose_dim)
        throw ShapeError("vertex loss: batch does not match the head model dimensions");
    const double count = static_cast<double>(rows) * head.n_vertices() * 3;
    auto diffs = std::make_shared<std::vector<Eigen::MatrixXd>>();
    diffs->reserve(static_cast<std::size_t>(rows));
    double total = 0.0;
    for (Eigen::Index r = 0; r < rows; ++r) {
        const Eigen::VectorXd phi = shape.row(r / tokens).transpose();
        Eigen::MatrixXd v = skin_vertices(head, phi, expr.row(r).transpose(), pose.row(r).transpose());
        Eigen::MatrixXd vh =
            skin_vertices(head, phi, expr_hat.value().row(r).transpose(), pose_hat.value().row(r).transpose());
        diffs->push_back(vh - v);
        total += diffs->back().squaredNorm();
    }
    Eigen::MatrixXd out(1, 1);
    out(0, 0) = total / count;
    return nn::make_op(std::move(out), {expr_hat, pose_hat}, [&head, shape, tokens, count, diffs](nn::Node& n) {
        auto& pe = *n.parents[0];
        auto& pp = *n.parents[1];
        const double g = n.grad(0, 0) * 2.0 / count;
        Eigen::MatrixXd ge = Eigen::MatrixXd::Zero(pe.value.rows(), pe.value.cols());
        Eigen::MatrixXd gp = Eigen::MatrixXd::Zero(pp.value.rows(), pp.value.cols());
        for (Eigen::Index r = 0; r < pe.value.rows(); ++r) {
            auto sg = skin_vertices_vjp(head, shape.row(r / tokens).transpose(), pe.value.row(r).transpose(),
                                        pp.value.row(r).transpose(), g * (*diffs)[static_cast<std::size_t>(r)]);
            ge.row(r) = sg.expression.transpose();
            gp.row(r) = sg.pose.transpose();
        }
        pe.accumulate(ge);
        pp.accumulate(gp);
    });
}

LossBreakdown loss_total(const I2fetModel& model, const I2fetBatch& batch, const HeadModel* head,
                         const LossFlags& flags, Rng& rng) {
    const auto& cfg = model.config();
    const Eigen::Index b = batch.size();
    if (b < 1) throw ValidationError("empty batch");
    if (flags.use_vertex_loss && (head == nullptr || batch.shape.rows() != b))
        throw ConfigError("vertex loss needs a head model and a shape vector for every sample");

    Var expr = nn::constant(batch.expr), pose = nn::constant(batch.pose), text = nn::constant(batch.text);
    EncodeVars enc = model.encode(expr, pose, text, batch.length);
    const Eigen::Index rows = batch.expr.rows();
    Var z_e = nn::constant(standard_normal(rows, cfg.latent_dim, rng));
    Var z_p = nn::constant(standard_normal(rows, cfg.latent_dim, rng));
    Var zt_e = nn::add(nn::hadamard(nn::exp(nn::scale(enc.logvar_e, 0.5)), z_e), enc.mu_e);
    Var zt_p = nn::add(nn::hadamard(nn::exp(nn::scale(enc.logvar_p, 0.5)), z_p), enc.mu_p);
    DecodeVars dec = model.decode(zt_e, zt_p, model.decoder_condition(zt_e, zt_p, text, batch.length));

    // KL is summed over a sample's latent entries and averaged over the batch.
    const double inv_b = 1.0 / static_cast<double>(b);
    Var mse_e = nn::mse(dec.expr, batch.expr);
    Var kl_e = nn::scale(nn::kl_divergence(enc.mu_e, enc.logvar_e), inv_b);
    Var l_e = nn::add(mse_e, kl_e);
    Var mse_p = nn::mse(dec.pose, batch.pose);
    Var kl_p = nn::scale(nn::kl_divergence(enc.mu_p, enc.logvar_p), inv_b);
    Var l_p = nn::add(mse_p, kl_p);

    LossBreakdown out;
    out.mse_e = mse_e.scalar();
    out.kl_e = kl_e.scalar();
    out.mse_p = mse_p.scalar();
    out.kl_p = kl_p.scalar();
    out.l_e = l_e.scalar();
    out.l_p = l_p.scalar();
    Var total = l_e;
    if (flags.use_pose_loss) total = nn::add(total, l_p);
    if (flags.use_vertex_loss) {
        Var l_v = vertex_mse(*head, batch.shape, cfg.m_tokens, batch.expr, batch.pose, dec.expr, dec.pose);
        out.l_v = l_v.scalar();
        total = nn::add(total, l_v);
    }
    out.total = total;
    return out;
}

std::string TrainingLog::to_csv() const {
    std::ostringstream os;
    os.precision(17);
    os << "epoch,train_total,train_e,train_p,train_v,val_total,val_e,val_p,val_v\n";
    for (const auto& r : epochs)
        os << r.epoch << ',' << r.train_total << ',' << r.train_e << ',' << r.train_p << ',' << r.train_v << ','
           << r.val_total << ',' << r.val_e << ',' << r.val_p << ',' << r.val_v << '\n';
    return os.str();
}

void TrainingLog::write_csv(const std::filesystem::path& path) const {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path.string());
    out << to_csv();
    if (!out) throw IoError("failed writing " + path.string());
}

namespace {

struct Totals {
    double total = 0, e = 0, p = 0, v = 0, weight = 0;
    void add(const LossBreakdown& l, double w) {
        total += l.total.scalar() * w;
        e += l.l_e * w;
        p += l.l_p * w;
        v += l.l_v * w;
        weight += w;
    }
};

std::vector<std::vector<std::size_t>> chunk(const std::vector<std::size_t>& idx, int size) {
    std::vector<std::vector<std::size_t>> out;
    for (std::size_t s = 0; s < idx.size(); s += static_cast<std::size_t>(size))
        out.emplace_back(idx.begin() + static_cast<long>(s),
                         idx.begin() + static_cast<long>(std::min(idx.size(), s + static_cast<std::size_t>(size))));
    return out;
}

}  // namespace

TrainingLog train(I2fetModel& model, const DatasetManifest& data, const EmbeddingProvider& provider,
                  const HeadModel* head, const TrainConfig& config, const EpochCallback& on_epoch) {
    config.validate();
    if (config.ifed_enabled != model.config().ifed_enabled)
        throw ConfigError("training config and model disagree on whether IFED is enabled");
    if (data.expr_dim != model.config().expr_dim || data.pose_dim != model.config().pose_dim)
        throw ConfigError("dataset dims do not match the model");
    if (provider.dim() != model.config().text_dim) throw ConfigError("embedding width does not match the model");
    if (config.flags.use_vertex_loss && head == nullptr) throw ConfigError("vertex loss needs a head model");

    std::vector<std::size_t> train_idx = data.indices(Split::train);
    if (train_idx.empty()) train_idx = data.indices(Split::unassigned);
    if (train_idx.empty()) throw ValidationError("dataset has no training samples");
    const std::vector<std::size_t> val_idx = data.indices(Split::val);

    EmbeddingCache cache(provider);
    std::vector<I2fetBatch> val_batches;
    for (const auto& c : chunk(val_idx, config.batch_size)) val_batches.push_back(make_batch(data, c, cache));

    nn::ParamList params = model.parameters();
    nn::Adam opt(params, config.learning_rate);
    TrainingLog log;
    double best = std::numeric_limits<double>::infinity();
    std::vector<nn::Matrix> best_weights = nn::snapshot(params);

    for (int epoch = 1; epoch <= config.epochs; ++epoch) {
        const auto ep = static_cast<std::uint64_t>(epoch);
        std::vector<std::size_t> order = train_idx;
        Rng shuffle_rng(derive_seed(config.seed, {ep, 0xFFFFFFFFULL}));
        std::shuffle(order.begin(), order.end(), shuffle_rng);

        Totals tr;
        const auto batches = chunk(order, config.batch_size);
        for (std::size_t bi = 0; bi < batches.size(); ++bi) {
            I2fetBatch batch = make_batch(data, batches[bi], cache);
            Rng rng(derive_seed(config.seed, {ep, bi}));
            opt.zero_grad();
            LossBreakdown l = loss_total(model, batch, head, config.flags, rng);
            if (!std::isfinite(l.total.scalar()))
                throw TrainingDivergedError(epoch, "training loss became non-finite");
            nn::backward(l.total);
            opt.step();
            if (!nn::all_finite(params))
                throw TrainingDivergedError(epoch, "parameters became non-finite");
            tr.add(l, static_cast<double>(batch.size()));
        }

        Totals va;
        {
            nn::NoGradGuard guard;
            for (std::size_t bi = 0; bi < val_batches.size(); ++bi) {
                // Same noise every epoch so validation curves are comparable.
                Rng rng(derive_seed(config.seed, {~0ULL, bi}));
                va.add(loss_total(model, val_batches[bi], head, config.flags, rng),
                       static_cast<double>(val_batches[bi].size()));
            }
        }

        EpochRecord rec;
        rec.epoch = epoch;
        rec.train_total = tr.total / tr.weight;
        rec.train_e = tr.e / tr.weight;
        rec.train_p = tr.p / tr.weight;
        rec.train_v = tr.v / tr.weight;
        if (va.weight > 0) {
            rec.val_total = va.total / va.weight;
            rec.val_e = va.e / va.weight;
            rec.val_p = va.p / va.weight;
            rec.val_v = va.v / va.weight;
            if (!std::isfinite(rec.val_total))
                throw TrainingDivergedError(epoch, "validation loss became non-finite at epoch " + std::to_string(epoch));
        }
        log.epochs.push_back(rec);
        const double score = va.weight > 0 ? rec.val_total : rec.train_total;
        if (score < best) {
            best = score;
            best_weights = nn::snapshot(params);
            log.best_epoch = epoch;
        }
        if (on_epoch) on_epoch(rec);
    }
    nn::restore(params, best_weights);
    return log;
}

AnchorPair generate(const I2fetModel& model, const TextEmbedding& x_t, std::uint64_t rng_seed) {
    const auto& cfg = model.config();
    Rng rng(rng_seed);
    // Prior sampling: z̃ = z.
    Eigen::MatrixXd z_e = standard_normal(cfg.m_tokens, cfg.latent_dim, rng);
    Eigen::MatrixXd z_p = standard_normal(cfg.m_tokens, cfg.latent_dim, rng);
    return model.decode(z_e, z_p, model.decoder_condition(z_e, z_p, x_t));
}

void export_latents(const I2fetModel& model, const DatasetManifest& data, const std::vector<std::size_t>& indices,
                    const EmbeddingProvider& provider, const std::filesystem::path& csv_path) {
    std::ofstream out(csv_path);
    if (!out) throw IoError("cannot write " + csv_path.string());
    out.precision(9);
    const int l = model.config().latent_dim;
    out << "sample,split,token,label";
    for (int k = 0; k < l; ++k) out << ",mu_e_" << k;
    for (int k = 0; k < l; ++k) out << ",mu_p_" << k;
    out << '\n';
    EmbeddingCache cache(provider);
    nn::NoGradGuard guard;
    for (auto i : indices) {
        I2fetBatch b = make_batch(data, {i}, cache);
        EncodeVars v = model.encode(nn::constant(b.expr), nn::constant(b.pose), nn::constant(b.text), b.length);
        const Sample& s = data.samples[i];
        for (int t = 0; t < 2; ++t) {
            out << i << ',' << split_name(data.splits[i]) << ',' << t << ',' << (t == 0 ? s.label_from() : s.label_to());
            for (int k = 0; k < l; ++k) out << ',' << v.mu_e.value()(t, k);
            for (int k = 0; k < l; ++k) out << ',' << v.mu_p.value()(t, k);
            out << '\n';
        }
    }
    if (!out) throw IoError("failed writing " + csv_path.string());
}

}  // namespace fet
