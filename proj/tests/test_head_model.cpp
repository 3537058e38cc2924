#include "fet/errors.hpp"
#include "fet/head_model.hpp"
#include "lbs_oracle.hpp"
#include "support.hpp"

#include <doctest.h>

#include <fstream>
#include <sstream>

using namespace fet;
using fet::testing::TempDir;

namespace {

double max_pairwise_distance_change(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
    double worst = 0;
    for (Eigen::Index i = 0; i < a.rows(); ++i)
        for (Eigen::Index j = i + 1; j < a.rows(); ++j)
            worst = std::max(worst, std::abs((a.row(i) - a.row(j)).norm() - (b.row(i) - b.row(j)).norm()));
    return worst;
}

}  // namespace

TEST_CASE("synth_model is seeded and structurally valid") {
    const HeadModel a = synth_model(8, 10, 50, 2, 7);
    const HeadModel b = synth_model(8, 10, 50, 2, 7);
    CHECK(a.base_vertices == b.base_vertices);
    CHECK(a.shape_basis == b.shape_basis);
    CHECK(a.expr_basis == b.expr_basis);
    CHECK(a.skin_weights == b.skin_weights);
    CHECK(a.joint_regressor == b.joint_regressor);
    for (Eigen::Index i = 0; i < a.skin_weights.rows(); ++i) {
        CHECK(a.skin_weights.row(i).sum() == doctest::Approx(1.0).epsilon(1e-6));
        CHECK(a.skin_weights.row(i).minCoeff() >= 0.0);
    }
    CHECK(a.base_vertices.rowwise().norm().maxCoeff() <= 1.0);
    CHECK(synth_model(8, 10, 50, 2, 8).base_vertices != a.base_vertices);
}

TEST_CASE("full-size synthetic model has 5023 vertices") {
    const HeadModel m = synth_model(5023, 100, 50, 2, 1);
    CHECK(m.base_vertices.rows() == 5023);
    CHECK(m.base_vertices.cols() == 3);
    CHECK(m.shape_basis.rows() == 3 * 5023);
}

TEST_CASE("synth_model rejects degenerate sizes") {
    CHECK_THROWS_AS(synth_model(3, 10, 50, 2, 0), ConfigError);
    CHECK_THROWS_AS(synth_model(8, 10, 50, 1, 0), ConfigError);
}

TEST_CASE("zero parameters reproduce the base mesh exactly") {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        const HeadModel m = synth_model(12, 6, 9, 3, seed);
        CHECK(compute_vertices(m, FaceParams::zeros(m)) == m.base_vertices);
        CHECK(reconstruct_head(m, FaceParams::zeros(m)) == m.base_vertices);
    }
}

TEST_CASE("a single expression coefficient adds its scaled basis column") {
    const HeadModel m = synth_model(8, 10, 50, 2, 3);
    for (int k : {0, 17, 49}) {
        FaceParams p = FaceParams::zeros(m);
        p.expression(k) = 2.5;
        const Eigen::MatrixXd v = compute_vertices(m, p);
        for (int i = 0; i < m.n_vertices(); ++i)
            for (int c = 0; c < 3; ++c)
                CHECK(v(i, c) == doctest::Approx(m.base_vertices(i, c) + 2.5 * m.expr_basis(3 * i + c, k)).epsilon(1e-12));
    }
}

TEST_CASE("blendshapes superpose at identity pose") {
    const HeadModel m = synth_model(10, 8, 12, 2, 4);
    Rng rng(11);
    for (int trial = 0; trial < 20; ++trial) {
        FaceParams a = testing::random_params(m, rng, 0.0), b = testing::random_params(m, rng, 0.0);
        FaceParams sum = FaceParams::zeros(m);
        sum.shape = a.shape + b.shape;
        sum.expression = a.expression + b.expression;
        const Eigen::MatrixXd base = m.base_vertices;
        const Eigen::MatrixXd lhs = compute_vertices(m, sum) - base;
        const Eigen::MatrixXd rhs = (compute_vertices(m, a) - base) + (compute_vertices(m, b) - base);
        CHECK((lhs - rhs).cwiseAbs().maxCoeff() < 1e-9);
    }
}

TEST_CASE("skinning matches the per-vertex brute-force oracle") {
    Rng rng(2024);
    double worst = 0;
    for (int trial = 0; trial < 100; ++trial) {
        const int n = 4 + trial % 13;
        const HeadModel m = synth_model(n, 5, 7, 2 + trial % 3, static_cast<std::uint64_t>(trial));
        const FaceParams p = testing::random_params(m, rng, 0.8);
        worst = std::max(worst, (compute_vertices(m, p) - testing::brute_force_lbs(m, p)).cwiseAbs().maxCoeff());
    }
    CHECK(worst < 1e-6);
}

TEST_CASE("posing the root alone moves a root-bound mesh rigidly") {
    HeadModel m = synth_model(12, 4, 6, 2, 5);
    m.skin_weights.setZero();
    m.skin_weights.col(0).setOnes();
    Rng rng(3);
    FaceParams p = testing::random_params(m, rng, 0.0);
    const Eigen::MatrixXd unposed = compute_vertices(m, p);
    p.pose.head<3>() = Eigen::Vector3d(0.4, -0.9, 0.3);
    const Eigen::MatrixXd posed = compute_vertices(m, p);
    CHECK(max_pairwise_distance_change(unposed, posed) < 1e-6);
    CHECK((unposed - posed).norm() > 1e-3);
}

TEST_CASE("reconstruct_head equals compute_vertices bit for bit") {
    const HeadModel m = synth_model(16, 10, 20, 2, 9);
    Rng rng(1);
    for (int i = 0; i < 10; ++i) {
        const FaceParams p = testing::random_params(m, rng);
        CHECK(reconstruct_head(m, p) == compute_vertices(m, p));
    }
}

TEST_CASE("compute_vertices rejects mis-sized or non-finite parameters") {
    const HeadModel m = synth_model(8, 10, 50, 2, 0);
    FaceParams p = FaceParams::zeros(m);
    p.expression.resize(49);
    CHECK_THROWS_AS(compute_vertices(m, p), ShapeError);
    p = FaceParams::zeros(m);
    p.pose(4) = std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS_AS(compute_vertices(m, p), DomainError);
}

TEST_CASE("rodrigues agrees with AngleAxis and stays finite near zero") {
    Rng rng(5);
    for (int i = 0; i < 50; ++i) {
        const Eigen::Vector3d aa = standard_normal(3, 1, rng);
        const Eigen::Matrix3d expect = Eigen::AngleAxisd(aa.norm(), aa.normalized()).toRotationMatrix();
        CHECK((rodrigues(aa) - expect).cwiseAbs().maxCoeff() < 1e-12);
    }
    const Eigen::Vector3d tiny(1e-10, -2e-10, 5e-11);
    const Eigen::Matrix3d r = rodrigues(tiny);
    CHECK(r.allFinite());
    CHECK((r - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff() < 1e-9);
    CHECK(rodrigues(Eigen::Vector3d::Zero()) == Eigen::Matrix3d::Identity());
}

TEST_CASE("rodrigues jacobian matches finite differences") {
    Rng rng(8);
    for (const double scale : {1.0, 1e-3}) {
        for (int t = 0; t < 10; ++t) {
            const Eigen::Vector3d aa = scale * Eigen::Vector3d(standard_normal(3, 1, rng));
            std::array<Eigen::Matrix3d, 3> jac;
            rodrigues(aa, jac);
            for (int k = 0; k < 3; ++k) {
                Eigen::Vector3d up = aa, down = aa;
                up(k) += 1e-6;
                down(k) -= 1e-6;
                const Eigen::Matrix3d fd = (rodrigues(up) - rodrigues(down)) / 2e-6;
                CHECK((fd - jac[k]).cwiseAbs().maxCoeff() < 1e-7);
            }
        }
    }
}

TEST_CASE("skinning VJP matches finite differences") {
    const HeadModel m = synth_model(8, 5, 7, 3, 12);
    Rng rng(13);
    const FaceParams p = testing::random_params(m, rng, 0.6);
    const Eigen::MatrixXd w = standard_normal(m.n_vertices(), 3, rng);
    auto f = [&](const Eigen::VectorXd& s, const Eigen::VectorXd& e, const Eigen::VectorXd& th) {
        return skin_vertices(m, s, e, th).cwiseProduct(w).sum();
    };
    const SkinningGradient g = skin_vertices_vjp(m, p.shape, p.expression, p.pose, w);
    const double h = 1e-6;
    auto check_block = [&](Eigen::VectorXd base, const Eigen::VectorXd& grad, int which) {
        for (Eigen::Index i = 0; i < base.size(); ++i) {
            Eigen::VectorXd up = base, down = base;
            up(i) += h;
            down(i) -= h;
            double fu, fd;
            if (which == 0) {
                fu = f(up, p.expression, p.pose), fd = f(down, p.expression, p.pose);
            } else if (which == 1) {
                fu = f(p.shape, up, p.pose), fd = f(p.shape, down, p.pose);
            } else {
                fu = f(p.shape, p.expression, up), fd = f(p.shape, p.expression, down);
            }
            const double num = (fu - fd) / (2 * h);
            CHECK(std::abs(num - grad(i)) / std::max({std::abs(num), std::abs(grad(i)), 1e-5}) < 1e-4);
        }
    };
    check_block(p.shape, g.shape, 0);
    check_block(p.expression, g.expression, 1);
    check_block(p.pose, g.pose, 2);
}

TEST_CASE("OBJ export writes the exact text format") {
    TempDir dir("obj");
    Eigen::MatrixXd v(3, 3);
    v << 0, 0, 0, 1, 0, 0, 0, 1, 0;
    export_obj(v, {{0, 1, 2}}, dir / "tri.obj");
    std::ifstream in(dir / "tri.obj");
    std::vector<std::string> lines;
    for (std::string line; std::getline(in, line);)
        if (!line.empty() && line[0] != '#') lines.push_back(line);
    REQUIRE(lines.size() == 4);
    CHECK(lines[0] == "v 0.000000 0.000000 0.000000");
    CHECK(lines[1] == "v 1.000000 0.000000 0.000000");
    CHECK(lines[2] == "v 0.000000 1.000000 0.000000");
    CHECK(lines[3] == "f 1 2 3");
    const ObjMesh back = parse_obj(dir / "tri.obj");
    CHECK(back.vertices.rows() == 3);
    CHECK(back.faces.size() == 1);
    CHECK(back.faces[0] == Triangle{0, 1, 2});
}

TEST_CASE("OBJ round trip of a full-size mesh") {
    TempDir dir("obj_big");
    const HeadModel m = synth_model(5023, 4, 4, 2, 2);
    Rng rng(4);
    const Eigen::MatrixXd v = compute_vertices(m, testing::random_params(m, rng));
    export_obj(v, m.faces, dir / "head.obj");
    std::ifstream in(dir / "head.obj");
    int v_lines = 0;
    for (std::string line; std::getline(in, line);) v_lines += line.rfind("v ", 0) == 0;
    CHECK(v_lines == 5023);
    const ObjMesh back = parse_obj(dir / "head.obj");
    CHECK(back.vertices.rows() == 5023);
    CHECK(back.faces == m.faces);
    CHECK((back.vertices - v).cwiseAbs().maxCoeff() < 1e-6);
}

TEST_CASE("parse_obj reports malformed files") {
    TempDir dir("obj_bad");
    std::ofstream(dir / "bad.obj") << "v 0 0 0\nv 1 0\n";
    CHECK_THROWS_AS(parse_obj(dir / "bad.obj"), ParseError);
    std::ofstream(dir / "bad_face.obj") << "v 0 0 0\nf 1 2 3\n";
    CHECK_THROWS_AS(parse_obj(dir / "bad_face.obj"), ParseError);
    CHECK_THROWS_AS(parse_obj(dir / "missing.obj"), IoError);
}

TEST_CASE("head model archive round trip") {
    TempDir dir("head");
    const HeadModel m = synth_model(9, 6, 5, 3, 21);
    save_head_model(m, dir / "head");
    const HeadModel back = load_head_model(dir / "head");
    CHECK(back.joint_parents == m.joint_parents);
    CHECK(back.faces == m.faces);
    CHECK(back.pose_dim == m.pose_dim);
    // float32 storage
    CHECK((back.expr_basis - m.expr_basis).cwiseAbs().maxCoeff() < 1e-7);
    CHECK((back.base_vertices - m.base_vertices).cwiseAbs().maxCoeff() < 1e-6);
}
