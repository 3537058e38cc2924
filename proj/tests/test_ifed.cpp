#include "fet/errors.hpp"
#include "fet/ifed.hpp"
#include "support.hpp"

#include <doctest.h>

using namespace fet;
using namespace fet::nn;
using fet::testing::grad_check;

namespace {

IfedConfig small_config() {
    IfedConfig c;
    c.facial_width = 5;
    c.text_dim = 6;
    c.model_dim = 4;
    c.heads = 2;
    c.n_facial_layers = 2;
    c.n_text_layers = 1;
    c.n_caft_layers = 2;
    c.expr_dim = 3;
    c.pose_dim = 2;
    return c;
}

struct Fixture {
    IfedConfig config = small_config();
    Rng rng{42};
    Ifed ifed{config, rng};
    Eigen::Index batch = 2, length = 3;
    Var x_f = parameter(standard_normal(batch * config.m_tokens, config.facial_width, rng));
    Var x_t = parameter(standard_normal(batch * length, config.text_dim, rng));
    Var f = parameter(standard_normal(batch * config.m_tokens, config.facial_width, rng));
    Var t = parameter(standard_normal(batch * config.m_tokens, config.text_dim, rng));

    ParamList params(std::vector<NamedParam> extra) const {
        ParamList ps;
        ifed.collect("ifed", ps);
        for (auto& e : extra) ps.push_back(e);
        return ps;
    }
    Var weigh(const Var& y, std::uint64_t seed) const {
        Rng r(seed);
        return sum(hadamard(y, constant(standard_normal(y.rows(), y.cols(), r))));
    }
};

void expect_grads(const ParamList& ps, const std::function<Var()>& f) {
    const auto r = grad_check(ps, f, 30);
    INFO(r.worst);
    CHECK(r.max_rel_error < 1e-4);
}

}  // namespace

TEST_CASE("facial encoder gradient check") {
    Fixture fx;
    expect_grads(fx.params({{"x_f", fx.x_f}}), [&] { return fx.weigh(fx.ifed.facial_encoder(fx.x_f), 1); });
}

TEST_CASE("text encoder gradient check") {
    Fixture fx;
    expect_grads(fx.params({{"x_t", fx.x_t}}),
                 [&] { return fx.weigh(fx.ifed.text_encoder(fx.x_t, fx.length), 2); });
}

TEST_CASE("cross-attention fusion gradient check through both outputs") {
    Fixture fx;
    expect_grads(fx.params({{"f", fx.f}, {"t", fx.t}}), [&] {
        auto [of, ot] = fx.ifed.caft(fx.f, fx.t);
        return fx.weigh(of, 3) + fx.weigh(ot, 4);
    });
}

TEST_CASE("fusion and decomposition gradient check") {
    Fixture fx;
    expect_grads(fx.params({{"f", fx.f}, {"t", fx.t}}), [&] {
        auto out = fx.ifed.fuse_and_decompose(fx.f, fx.t);
        return fx.weigh(out.expr_cond, 5) + fx.weigh(out.pose_cond, 6);
    });
}

TEST_CASE("end-to-end decomposer gradient check") {
    Fixture fx;
    expect_grads(fx.params({{"x_f", fx.x_f}, {"x_t", fx.x_t}}), [&] {
        auto out = fx.ifed.forward(fx.x_f, fx.x_t, fx.length);
        return fx.weigh(out.expr_cond, 7) + fx.weigh(out.pose_cond, 8);
    });
}

TEST_CASE("every parameter receives a finite, nonzero gradient") {
    Fixture fx;
    ParamList ps = fx.params({});
    zero_grad(ps);
    auto out = fx.ifed.forward(fx.x_f, fx.x_t, fx.length);
    backward(fx.weigh(out.expr_cond, 9) + fx.weigh(out.pose_cond, 10));
    for (const auto& p : ps) {
        INFO(p.name);
        REQUIRE(p.var.grad().size() == p.var.value().size());
        CHECK(p.var.grad().allFinite());
        CHECK(p.var.grad().cwiseAbs().maxCoeff() > 0);
    }
}

TEST_CASE("full-width shapes") {
    IfedConfig c;  // 53 facial, 768 text
    Rng rng(1);
    const Ifed ifed(c, rng);
    const Eigen::MatrixXd x_f = standard_normal(2, 53, rng);
    const Eigen::MatrixXd x_t = standard_normal(77, 768, rng);
    NoGradGuard g;
    CHECK(ifed.facial_encoder(constant(x_f)).rows() == 2);
    CHECK(ifed.facial_encoder(constant(x_f)).cols() == 53);
    const Var t = ifed.text_encoder(constant(x_t), 77);
    CHECK(t.rows() == 2);
    CHECK(t.cols() == 768);
    auto [of, ot] = ifed.caft(constant(x_f), t);
    CHECK(of.rows() == 2);
    CHECK(of.cols() == 53);
    CHECK(ot.cols() == 768);
    const ConditionalVectors out = ifed.forward(x_f, x_t);
    CHECK(out.expr_cond.rows() == 2);
    CHECK(out.expr_cond.cols() == 50);
    CHECK(out.pose_cond.rows() == 2);
    CHECK(out.pose_cond.cols() == 6);
    CHECK(out.expr_cond.allFinite());
    CHECK(ifed.forward(x_f, x_t).expr_cond == out.expr_cond);
}

TEST_CASE("output shape contract across configurations") {
    for (int wf : {53, 56})
        for (int dt : {8, 64})
            for (int m : {1, 2, 3}) {
                IfedConfig c = small_config();
                c.facial_width = wf;
                c.text_dim = dt;
                c.m_tokens = m;
                c.expr_dim = 50;
                c.pose_dim = 6;
                c.n_caft_layers = 1 + m % 2;
                Rng rng(static_cast<std::uint64_t>(wf * 100 + dt + m));
                const Ifed ifed(c, rng);
                const ConditionalVectors out = ifed.forward(standard_normal(m, wf, rng), standard_normal(5, dt, rng));
                CHECK(out.expr_cond.rows() == m);
                CHECK(out.expr_cond.cols() == 50);
                CHECK(out.pose_cond.rows() == m);
                CHECK(out.pose_cond.cols() == 6);
                CHECK(out.expr_cond.allFinite());
                CHECK(out.pose_cond.allFinite());
            }
}

TEST_CASE("zero text input stays finite") {
    Fixture fx;
    NoGradGuard g;
    const Var t = fx.ifed.text_encoder(constant(Eigen::MatrixXd::Zero(6, 6)), 3);
    CHECK(t.value().allFinite());
}

TEST_CASE("scaling the facial fusion input only moves outputs through the LN epsilon") {
    IfedConfig c;
    Rng rng(3);
    const Ifed ifed(c, rng);
    NoGradGuard g;
    const Eigen::MatrixXd f = standard_normal(2, 53, rng), t = standard_normal(2, 768, rng);
    const auto a = ifed.fuse_and_decompose(constant(f), constant(t));
    const auto b = ifed.fuse_and_decompose(constant(10.0 * f), constant(t));
    CHECK((a.expr_cond.value() - b.expr_cond.value()).cwiseAbs().maxCoeff() < 1e-4);
    CHECK((a.pose_cond.value() - b.pose_cond.value()).cwiseAbs().maxCoeff() < 1e-4);
}

TEST_CASE("positional embedding distinguishes token order") {
    IfedConfig c = small_config();
    Rng rng(5);
    const Ifed ifed(c, rng);
    NoGradGuard g;
    Eigen::MatrixXd same(2, c.facial_width);
    same.row(0) = standard_normal(1, c.facial_width, rng);
    same.row(1) = same.row(0);
    const auto out = ifed.forward(same, standard_normal(3, c.text_dim, rng));
    CHECK((out.expr_cond.row(0) - out.expr_cond.row(1)).norm() > 1e-6);

    c.use_positional_embedding = false;
    Rng rng2(5);
    const Ifed plain(c, rng2);
    const auto out2 = plain.forward(same, standard_normal(3, c.text_dim, rng2));
    CHECK((out2.expr_cond.row(0) - out2.expr_cond.row(1)).norm() < 1e-12);
}

TEST_CASE("batched forward equals per-sample forward") {
    Fixture fx;
    NoGradGuard g;
    const auto batched = fx.ifed.forward(constant(fx.x_f.value()), constant(fx.x_t.value()), fx.length);
    for (Eigen::Index b = 0; b < fx.batch; ++b) {
        const auto one = fx.ifed.forward(Eigen::MatrixXd(fx.x_f.value().middleRows(2 * b, 2)),
                                         Eigen::MatrixXd(fx.x_t.value().middleRows(3 * b, 3)));
        CHECK((one.expr_cond - batched.expr_cond.value().middleRows(2 * b, 2)).cwiseAbs().maxCoeff() < 1e-12);
    }
}

TEST_CASE("config validation and input checks") {
    IfedConfig c;
    c.heads = 5;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = IfedConfig{};
    c.n_caft_layers = 0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    CHECK(IfedConfig::from_json(IfedConfig{}.to_json()).to_json() == IfedConfig{}.to_json());

    Fixture fx;
    NoGradGuard g;
    CHECK_THROWS_AS(fx.ifed.facial_encoder(constant(Eigen::MatrixXd::Zero(3, 5))), ShapeError);
    CHECK_THROWS_AS(fx.ifed.text_encoder(constant(Eigen::MatrixXd::Zero(6, 7)), 3), ShapeError);
    CHECK_THROWS_AS(fx.ifed.forward(Eigen::MatrixXd::Zero(4, 5), Eigen::MatrixXd::Zero(3, 6)), ShapeError);
}
