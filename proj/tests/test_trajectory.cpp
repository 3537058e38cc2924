#include "fet/dataset.hpp"
#include "fet/errors.hpp"
#include "fet/ned.hpp"
#include "fet/trajectory.hpp"
#include "support.hpp"

#include <doctest.h>

#include <Eigen/SVD>

#include <fstream>

using namespace fet;
using fet::testing::TempDir;

namespace {

struct Setup {
    HeadModel model = synth_model(10, 6, 50, 2, 3);
    FaceParams source = FaceParams::zeros(model);
    Rng rng{17};

    Setup() {
        source.shape = standard_normal(6, 1, rng);
        source.camera = Eigen::Vector3d(1.5, 0.1, -0.2);
        source.expression = 0.2 * Eigen::VectorXd(standard_normal(50, 1, rng));
    }
    ExpressionAnchor anchor(double pose_scale = 0.1) {
        return {0.3 * Eigen::VectorXd(standard_normal(50, 1, rng)),
                pose_scale * Eigen::VectorXd(standard_normal(6, 1, rng))};
    }
};

ExpressionFrame frame_with(const FaceParams& base, const Eigen::VectorXd& e, const Eigen::VectorXd& th) {
    ExpressionFrame f{base, FrameRole::anchor};
    f.params.expression = e;
    f.params.pose = th;
    return f;
}

}  // namespace

TEST_CASE("interpolation endpoints are exact copies") {
    Setup s;
    const auto a = s.anchor(), b = s.anchor();
    const ExpressionFrame l = frame_with(s.source, a.expression, a.pose), n = frame_with(s.source, b.expression, b.pose);
    const ExpressionFrame at1 = interpolate(l, n, 1.0), at0 = interpolate(l, n, 0.0);
    CHECK(at1.params.expression == l.params.expression);
    CHECK(at1.params.pose == l.params.pose);
    CHECK(at0.params.expression == n.params.expression);
    CHECK(at0.params.pose == n.params.pose);
    CHECK(at0.params.shape == s.source.shape);
    CHECK(at0.params.camera == s.source.camera);
}

TEST_CASE("interpolation midpoint and weights") {
    Setup s;
    Eigen::VectorXd el = Eigen::VectorXd::Zero(50), en = Eigen::VectorXd::Zero(50);
    el(0) = 1.0;
    en(1) = 1.0;
    const ExpressionFrame mid =
        interpolate(frame_with(s.source, el, Eigen::VectorXd::Zero(6)), frame_with(s.source, en, Eigen::VectorXd::Zero(6)), 0.5);
    Eigen::VectorXd expect = Eigen::VectorXd::Zero(50);
    expect(0) = expect(1) = 0.5;
    CHECK(mid.params.expression == expect);

    for (int trial = 0; trial < 20; ++trial) {
        const auto a = s.anchor(1.0), b = s.anchor(1.0);
        const ExpressionFrame q = interpolate(frame_with(s.source, a.expression, a.pose),
                                              frame_with(s.source, b.expression, b.pose), 0.25);
        for (Eigen::Index i = 0; i < 50; ++i)
            CHECK(std::abs(q.params.expression(i) - (0.25 * a.expression(i) + 0.75 * b.expression(i))) < 1e-12);
        for (Eigen::Index i = 0; i < 6; ++i)
            CHECK(std::abs(q.params.pose(i) - (0.25 * a.pose(i) + 0.75 * b.pose(i))) < 1e-12);
    }
}

TEST_CASE("interpolation is affine in delta") {
    Setup s;
    const auto a = s.anchor(), b = s.anchor();
    const ExpressionFrame l = frame_with(s.source, a.expression, a.pose), n = frame_with(s.source, b.expression, b.pose);
    Rng rng(2);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int i = 0; i < 50; ++i) {
        const double d1 = u(rng), d2 = u(rng), t = u(rng);
        const double d = t * d1 + (1 - t) * d2;
        const Eigen::VectorXd lhs = interpolate(l, n, d).params.expression;
        const Eigen::VectorXd rhs =
            t * interpolate(l, n, d1).params.expression + (1 - t) * interpolate(l, n, d2).params.expression;
        CHECK((lhs - rhs).cwiseAbs().maxCoeff() < 1e-12);
    }
}

TEST_CASE("interpolation preconditions") {
    Setup s;
    const auto a = s.anchor();
    const ExpressionFrame l = frame_with(s.source, a.expression, a.pose);
    CHECK_THROWS_AS(interpolate(l, l, 1.5), DomainError);
    CHECK_THROWS_AS(interpolate(l, l, -0.1), DomainError);
    CHECK_THROWS_AS(interpolate(l, l, std::nan("")), DomainError);
    ExpressionFrame other = l;
    other.params.shape(0) += 1.0;
    CHECK_THROWS_AS(interpolate(l, other, 0.5), ValidationError);
    other = l;
    other.params.camera(1) = 9.0;
    CHECK_THROWS_AS(interpolate(l, other, 0.5), ValidationError);
}

TEST_CASE("trajectory frame arithmetic") {
    Setup s;
    const std::vector<ExpressionAnchor> two = {s.anchor(), s.anchor()};
    const Trajectory t = build_trajectory(s.source, two, 10);
    CHECK(t.frames.size() == 23);
    CHECK(t.anchor_indices == std::vector<int>{0, 11, 22});
    CHECK(t.frames[0].role == FrameRole::source);
    CHECK(t.frames[5].role == FrameRole::interpolated);
    CHECK(t.frames[11].params.expression == two[0].expression);
    CHECK(t.frames[22].params.pose == two[1].pose);

    const Trajectory zero = build_trajectory(s.source, two, 0);
    REQUIRE(zero.frames.size() == 3);
    CHECK(zero.frames[0].params.expression == s.source.expression);
    CHECK(zero.frames[1].params.expression == two[0].expression);
    CHECK(zero.frames[2].params.expression == two[1].expression);

    for (int n = 1; n <= 4; ++n)
        for (int f : {0, 1, 3, 7}) {
            std::vector<ExpressionAnchor> as;
            for (int i = 0; i < n; ++i) as.push_back(s.anchor());
            const Trajectory tr = build_trajectory(s.source, as, f);
            CHECK(tr.frames.size() == static_cast<std::size_t>((n + 1) + n * f));
        }
    CHECK_THROWS_AS(build_trajectory(s.source, {}, 3), ValidationError);
    CHECK_THROWS_AS(build_trajectory(s.source, two, -1), ConfigError);
}

TEST_CASE("segments are linear in frame index with constant shape and camera") {
    Setup s;
    const Trajectory t = build_trajectory(s.source, {s.anchor(), s.anchor()}, 6);
    for (std::size_t seg = 0; seg + 1 < t.anchor_indices.size(); ++seg) {
        const int a = t.anchor_indices[seg], b = t.anchor_indices[seg + 1];
        const Eigen::VectorXd step = t.frames[a + 1].params.expression - t.frames[a].params.expression;
        const Eigen::VectorXd pstep = t.frames[a + 1].params.pose - t.frames[a].params.pose;
        for (int k = a + 1; k < b; ++k) {
            CHECK((t.frames[k + 1].params.expression - t.frames[k].params.expression - step).cwiseAbs().maxCoeff() < 1e-10);
            CHECK((t.frames[k + 1].params.pose - t.frames[k].params.pose - pstep).cwiseAbs().maxCoeff() < 1e-10);
        }
    }
    for (const auto& f : t.frames) {
        CHECK(f.params.shape == s.source.shape);
        CHECK(f.params.camera == s.source.camera);
    }
}

TEST_CASE("meshes follow the frames") {
    Setup s;
    // Identity pose so vertex motion is linear in e with the basis as Lipschitz map.
    ExpressionAnchor a = s.anchor(0.0), b = s.anchor(0.0);
    const int f = 10;
    const Trajectory t = build_trajectory(s.source, {a, b}, f);
    const auto meshes = meshes_for(t, s.model);
    CHECK(meshes.size() == 23);
    CHECK(meshes[0] == compute_vertices(s.model, s.source));

    Trajectory dup = t;
    dup.frames[3] = dup.frames[2];
    const auto dup_meshes = meshes_for(dup, s.model);
    CHECK(dup_meshes[3] == dup_meshes[2]);

    double lipschitz = 0;
    for (int i = 0; i < s.model.n_vertices(); ++i) {
        Eigen::JacobiSVD<Eigen::MatrixXd> svd(s.model.expr_basis.middleRows(3 * i, 3));
        lipschitz = std::max(lipschitz, svd.singularValues()(0));
    }
    for (std::size_t seg = 0; seg + 1 < t.anchor_indices.size(); ++seg) {
        const int lo = t.anchor_indices[seg], hi = t.anchor_indices[seg + 1];
        const double span = (t.frames[hi].params.expression - t.frames[lo].params.expression).norm();
        const double bound = lipschitz * span / (f + 1) + 1e-12;
        for (int k = lo; k < hi; ++k) {
            const double move = (meshes[k + 1] - meshes[k]).rowwise().norm().maxCoeff();
            CHECK(move <= bound);
        }
    }
}

TEST_CASE("neutral insertion orders anchors and is seeded") {
    const NeutralSet set = generate_neutral_samples(200, 50, 6, 0.05, 8);
    NedConfig cfg;
    cfg.epochs = 100;
    const NedModel ned = train_ned(set.params, cfg);
    Setup s;
    const std::vector<ExpressionAnchor> two = {s.anchor(), s.anchor()};
    const Trajectory t = insert_neutral(s.source, two, 5, ned, 3);
    CHECK(t.frames.size() == 19);
    REQUIRE(t.anchor_indices == std::vector<int>{0, 6, 12, 18});
    CHECK(t.frames[6].params.expression == two[0].expression);
    CHECK(t.frames[12].role == FrameRole::neutral);
    CHECK(t.frames[18].params.expression == two[1].expression);
    const Eigen::VectorXd neutral = t.frames[12].params.expression;
    const double rms = std::sqrt((neutral - set.center.head(50)).squaredNorm() / 50.0);
    CHECK(rms <= 3.0 * set.noise_std);
    CHECK(insert_neutral(s.source, two, 5, ned, 3).frames[12].params.expression == neutral);
    CHECK(insert_neutral(s.source, two, 5, ned, 4).frames[12].params.expression != neutral);
    CHECK_THROWS_AS(insert_neutral(s.source, {two[0]}, 5, ned, 3), ValidationError);
}

TEST_CASE("trajectory JSON and OBJ sequence round trips") {
    TempDir dir("traj");
    Setup s;
    const Trajectory t = build_trajectory(s.source, {s.anchor(), s.anchor()}, 3);
    const Trajectory back = trajectory_from_json(nlohmann::json::parse(trajectory_to_json(t).dump()));
    REQUIRE(back.frames.size() == t.frames.size());
    CHECK(back.anchor_indices == t.anchor_indices);
    CHECK(back.frames_per_segment == 3);
    for (std::size_t i = 0; i < t.frames.size(); ++i) {
        CHECK(back.frames[i].role == t.frames[i].role);
        CHECK(back.frames[i].params.expression == t.frames[i].params.expression);
        CHECK(back.frames[i].params.camera == t.frames[i].params.camera);
    }
    CHECK(write_obj_sequence(t, s.model, dir / "objs") == 9);
    CHECK(std::filesystem::exists(dir / "objs" / "frame_0000.obj"));
    CHECK(std::filesystem::exists(dir / "objs" / "frame_0008.obj"));
    const ObjMesh m = parse_obj(dir / "objs" / "frame_0004.obj");
    CHECK((m.vertices - compute_vertices(s.model, t.frames[4].params)).cwiseAbs().maxCoeff() < 1e-6);
    CHECK(role_name(parse_role("neutral")) == std::string("neutral"));
    CHECK_THROWS_AS(parse_role("bogus"), ValidationError);
}

TEST_CASE("face parameter files") {
    TempDir dir("params");
    Setup s;
    std::ofstream(dir / "partial.json") << R"({"expression": [)" << std::string(49 * 2, ' ') << "0.5"
                                        << [] {
                                               std::string r;
                                               for (int i = 0; i < 49; ++i) r += ",0";
                                               return r;
                                           }()
                                        << "]}";
    const FaceParams p = load_face_params(dir / "partial.json", s.model);
    CHECK(p.expression(0) == 0.5);
    CHECK(p.shape == Eigen::VectorXd::Zero(6));
    CHECK(p.pose == Eigen::VectorXd::Zero(6));
    std::ofstream(dir / "short.json") << R"({"pose": [0, 0, 0]})";
    CHECK_THROWS_AS(load_face_params(dir / "short.json", s.model), ValidationError);
    std::ofstream(dir / "broken.json") << "{";
    CHECK_THROWS_AS(load_face_params(dir / "broken.json", s.model), ParseError);
    CHECK_THROWS_AS(load_face_params(dir / "absent.json", s.model), IoError);
    const FaceParams rt = face_params_from_json(face_params_to_json(s.source));
    CHECK(rt.expression == s.source.expression);
    CHECK(rt.camera == s.source.camera);
}
