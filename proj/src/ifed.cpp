#include "fet/ifed.hpp"

#include "fet/errors.hpp"

namespace fet {

using nn::Init;
using nn::Var;

void IfedConfig::validate() const {
    if (facial_width < 1 || text_dim < 1 || model_dim < 1 || expr_dim < 1 || pose_dim < 1)
        throw ConfigError("IFED widths must be positive");
    if (heads < 1 || model_dim % heads != 0) throw ConfigError("IFED model_dim must be divisible by heads");
    if (n_facial_layers < 1 || n_text_layers < 1 || n_caft_layers < 1 || m_tokens < 1)
        throw ConfigError("IFED layer and token counts must be >= 1");
}

nlohmann::json IfedConfig::to_json() const {
    return {{"facial_width", facial_width},
            {"text_dim", text_dim},
            {"model_dim", model_dim},
            {"heads", heads},
            {"n_facial_layers", n_facial_layers},
            {"n_text_layers", n_text_layers},
            {"n_caft_layers", n_caft_layers},
            {"m_tokens", m_tokens},
            {"use_positional_embedding", use_positional_embedding},
            {"expr_dim", expr_dim},
            {"pose_dim", pose_dim}};
}

IfedConfig IfedConfig::from_json(const nlohmann::json& j) {
    IfedConfig c;
    c.facial_width = j.value("facial_width", c.facial_width);
    c.text_dim = j.value("text_dim", c.text_dim);
    c.model_dim = j.value("model_dim", c.model_dim);
    c.heads = j.value("heads", c.heads);
    c.n_facial_layers = j.value("n_facial_layers", c.n_facial_layers);
    c.n_text_layers = j.value("n_text_layers", c.n_text_layers);
    c.n_caft_layers = j.value("n_caft_layers", c.n_caft_layers);
    c.m_tokens = j.value("m_tokens", c.m_tokens);
    c.use_positional_embedding = j.value("use_positional_embedding", c.use_positional_embedding);
    c.expr_dim = j.value("expr_dim", c.expr_dim);
    c.pose_dim = j.value("pose_dim", c.pose_dim);
    c.validate();
    return c;
}

Ifed::Ifed(const IfedConfig& config, Rng& rng) : config_(config) {
    config_.validate();
    const int wf = config_.facial_width, dt = config_.text_dim, d = config_.model_dim, h = config_.heads;
    const auto tn = Init::truncated_normal;

    f_in_ = nn::Linear(wf, d, rng, tn);
    for (int i = 0; i < config_.n_facial_layers; ++i) f_blocks_.emplace_back(d, h, 4 * d, rng);
    f_out_ = nn::Linear(d, wf, rng, tn);
    f_pos_ = nn::parameter(nn::truncated_normal(config_.m_tokens, d, 0.02, rng));

    ln_pool_ = nn::LayerNorm(dt);
    p_t_ = nn::Linear(dt, dt, rng, tn);
    t_in_ = nn::Linear(dt, d, rng, tn);
    for (int i = 0; i < config_.n_text_layers; ++i) t_blocks_.emplace_back(d, h, 4 * d, rng);
    t_out_ = nn::Linear(d, dt, rng, tn);
    t_pos_ = nn::parameter(nn::truncated_normal(config_.m_tokens, d, 0.02, rng));

    for (int i = 0; i < config_.n_caft_layers; ++i) {
        CaftLayer l;
        l.h_f2t = nn::Linear(wf, dt, rng, tn);
        l.h_t2f = nn::Linear(dt, wf, rng, tn);
        l.ca_f = nn::MultiHeadAttention(dt, dt, d, h, rng);
        l.ca_t = nn::MultiHeadAttention(wf, wf, d, h, rng);
        l.g_t2f = nn::Linear(dt, wf, rng, tn);
        l.g_f2t = nn::Linear(wf, dt, rng, tn);
        l.reduce_f = nn::Linear(2 * wf, wf, rng, tn);
        l.reduce_t = nn::Linear(2 * dt, dt, rng, tn);
        caft_.push_back(std::move(l));
    }

    ln_t_ = nn::LayerNorm(dt);
    ln_f_ = nn::LayerNorm(wf);
    p_e_ = nn::Linear(dt + wf, config_.expr_dim, rng, tn);
    p_p_ = nn::Linear(dt + wf, config_.pose_dim, rng, tn);
}

void Ifed::check_facial(const Var& x) const {
    if (x.cols() != config_.facial_width || x.rows() % config_.m_tokens != 0)
        throw ShapeError("IFED facial input must be (B*" + std::to_string(config_.m_tokens) + ")x" +
                         std::to_string(config_.facial_width) + ", got " + std::to_string(x.rows()) + "x" +
                         std::to_string(x.cols()));
}

Var Ifed::facial_encoder(const Var& x_f) const {
    check_facial(x_f);
    Var h = f_in_.forward(x_f);
    if (config_.use_positional_embedding) h = nn::add_tiled(h, f_pos_);
    for (const auto& b : f_blocks_) h = b.forward(h, config_.m_tokens);
    return f_out_.forward(h);
}

Var Ifed::text_encoder(const Var& x_t, Eigen::Index length) const {
    if (length < 1 || x_t.cols() != config_.text_dim || x_t.rows() % length != 0)
        throw ShapeError("IFED text input must be (B*L)x" + std::to_string(config_.text_dim));
    Var pooled = nn::repeat_rows(nn::group_mean_rows(x_t, length), config_.m_tokens);
    Var h = t_in_.forward(p_t_.forward(ln_pool_.forward(pooled)));
    if (config_.use_positional_embedding) h = nn::add_tiled(h, t_pos_);
    for (const auto& b : t_blocks_) h = b.forward(h, config_.m_tokens);
    return t_out_.forward(h);
}

std::pair<Var, Var> Ifed::caft(const Var& f, const Var& t) const {
    check_facial(f);
    if (t.cols() != config_.text_dim || t.rows() != f.rows()) throw ShapeError("CAFT inputs disagree in shape");
    const Eigen::Index m = config_.m_tokens;
    Var xf = f, xt = t;
    for (const auto& l : caft_) {
        // Facial side: its tokens, moved to text width, query themselves and the text tokens.
        Var yf = l.h_f2t.forward(xf);
        Var af = nn::add(l.ca_f.forward(yf, nn::group_concat_rows(yf, m, xt, m), m, 2 * m), yf);
        Var of = l.reduce_f.forward(nn::concat_cols({l.g_t2f.forward(af), xf}));

        Var yt = l.h_t2f.forward(xt);
        Var at = nn::add(l.ca_t.forward(yt, nn::group_concat_rows(yt, m, xf, m), m, 2 * m), yt);
        Var ot = l.reduce_t.forward(nn::concat_cols({l.g_f2t.forward(at), xt}));
        xf = of;
        xt = ot;
    }
    return {xf, xt};
}

ConditionalVars Ifed::fuse_and_decompose(const Var& f, const Var& t) const {
    check_facial(f);
    if (t.cols() != config_.text_dim || t.rows() != f.rows()) throw ShapeError("fusion inputs disagree in shape");
    Var fused = nn::concat_cols({ln_t_.forward(t), ln_f_.forward(f)});
    return {p_e_.forward(fused), p_p_.forward(fused)};
}

ConditionalVars Ifed::forward(const Var& x_f, const Var& x_t, Eigen::Index length) const {
    Var f = facial_encoder(x_f);
    Var t = text_encoder(x_t, length);
    auto [of, ot] = caft(f, t);
    return fuse_and_decompose(of, ot);
}

ConditionalVectors Ifed::forward(const Eigen::MatrixXd& x_f, const Eigen::MatrixXd& x_t) const {
    if (x_f.rows() != config_.m_tokens) throw ShapeError("IFED expects one sample of m facial tokens");
    nn::NoGradGuard guard;
    auto out = forward(nn::constant(x_f), nn::constant(x_t), x_t.rows());
    return {out.expr_cond.value(), out.pose_cond.value()};
}

void Ifed::collect(const std::string& prefix, nn::ParamList& out) const {
    f_in_.collect(prefix + ".facial.in", out);
    for (std::size_t i = 0; i < f_blocks_.size(); ++i) f_blocks_[i].collect(prefix + ".facial.block" + std::to_string(i), out);
    f_out_.collect(prefix + ".facial.out", out);
    out.push_back({prefix + ".facial.pos", f_pos_});
    ln_pool_.collect(prefix + ".text.ln_pool", out);
    p_t_.collect(prefix + ".text.proj", out);
    t_in_.collect(prefix + ".text.in", out);
    for (std::size_t i = 0; i < t_blocks_.size(); ++i) t_blocks_[i].collect(prefix + ".text.block" + std::to_string(i), out);
    t_out_.collect(prefix + ".text.out", out);
    out.push_back({prefix + ".text.pos", t_pos_});
    for (std::size_t i = 0; i < caft_.size(); ++i) {
        const auto& l = caft_[i];
        const std::string p = prefix + ".caft" + std::to_string(i);
        l.h_f2t.collect(p + ".h_f2t", out);
        l.h_t2f.collect(p + ".h_t2f", out);
        l.ca_f.collect(p + ".ca_f", out);
        l.ca_t.collect(p + ".ca_t", out);
        l.g_t2f.collect(p + ".g_t2f", out);
        l.g_f2t.collect(p + ".g_f2t", out);
        l.reduce_f.collect(p + ".reduce_f", out);
        l.reduce_t.collect(p + ".reduce_t", out);
    }
    ln_t_.collect(prefix + ".fuse.ln_t", out);
    ln_f_.collect(prefix + ".fuse.ln_f", out);
    p_e_.collect(prefix + ".p_e", out);
    p_p_.collect(prefix + ".p_p", out);
}

}  // namespace fet
