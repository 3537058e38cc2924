#include "fet/head_model.hpp"

#include "fet/errors.hpp"
#include "fet/random.hpp"
#include "fet/tensor_archive.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>

namespace fet {
namespace {

Eigen::Matrix3d skew(const Eigen::Vector3d& v) {
    Eigen::Matrix3d k;
    k << 0.0, -v.z(), v.y(), v.z(), 0.0, -v.x(), -v.y(), v.x(), 0.0;
    return k;
}

// Blended rest mesh V_b + Sφ + Be as N×3.
Eigen::MatrixXd blend_rest(const HeadModel& model, const Eigen::VectorXd& shape, const Eigen::VectorXd& expression) {
    Eigen::VectorXd offsets = model.shape_basis * shape + model.expr_basis * expression;
    Eigen::MatrixXd rest = model.base_vertices;
    for (int i = 0; i < model.n_vertices(); ++i)
        for (int c = 0; c < 3; ++c) rest(i, c) += offsets(3 * i + c);
    return rest;
}

// Per-joint state of the kinematic chain, shared by forward and VJP.
struct Chain {
    Eigen::MatrixXd joints;                    // J×3 rest joint locations
    std::vector<Eigen::Matrix3d> local;        // R_j
    std::vector<std::array<Eigen::Matrix3d, 3>> local_jac;
    std::vector<Eigen::Matrix3d> global_rot;   // Rg_j
    std::vector<Eigen::Vector3d> global_trans; // tg_j
    std::vector<Eigen::Vector3d> offset;       // tg_j - J_j, accumulated without cancellation
};

Chain build_chain(const HeadModel& model, const Eigen::MatrixXd& rest, const Eigen::VectorXd& pose, bool with_jacobian) {
    const int n_joints = model.n_joints();
    const int n_posed = static_cast<int>(pose.size()) / 3;
    Chain ch;
    ch.joints = model.joint_regressor * rest;
    ch.local.resize(n_joints, Eigen::Matrix3d::Identity());
    ch.local_jac.resize(n_joints);
    ch.global_rot.resize(n_joints);
    ch.global_trans.resize(n_joints);
    ch.offset.resize(n_joints);
    for (int j = 0; j < n_joints; ++j) {
        if (j < n_posed) {
            const Eigen::Vector3d aa = pose.segment<3>(3 * j);
            ch.local[j] = with_jacobian ? rodrigues(aa, ch.local_jac[j]) : rodrigues(aa);
        } else if (with_jacobian) {
            for (auto& m : ch.local_jac[j]) m.setZero();
        }
        const Eigen::Vector3d jl = ch.joints.row(j).transpose();
        const int p = model.joint_parents[j];
        if (p < 0) {
            ch.global_rot[j] = ch.local[j];
            ch.global_trans[j] = jl;
            ch.offset[j].setZero();
        } else {
            const Eigen::Vector3d jp = ch.joints.row(p).transpose();
            ch.global_rot[j] = ch.global_rot[p] * ch.local[j];
            ch.global_trans[j] = ch.global_rot[p] * (jl - jp) + ch.global_trans[p];
            ch.offset[j] = (ch.global_rot[p] - Eigen::Matrix3d::Identity()) * (jl - jp) + ch.offset[p];
        }
    }
    return ch;
}

void check_params(const HeadModel& model, const FaceParams& params) {
    auto check = [](const Eigen::VectorXd& v, int expected, const char* name) {
        if (v.size() != expected)
            throw ShapeError(std::string(name) + " has length " + std::to_string(v.size()) + ", model expects " +
                             std::to_string(expected));
        if (!v.allFinite()) throw DomainError(std::string(name) + " contains non-finite values");
    };
    check(params.shape, model.n_shape(), "shape");
    check(params.expression, model.n_expr(), "expression");
    check(params.pose, model.pose_dim, "pose");
    if (!params.camera.allFinite()) throw DomainError("camera contains non-finite values");
}

}  // namespace

void HeadModel::validate() const {
    const int n = n_vertices();
    if (base_vertices.cols() != 3) throw ConfigError("base_vertices must be N×3");
    if (shape_basis.rows() != 3 * n || expr_basis.rows() != 3 * n)
        throw ConfigError("blendshape bases must have 3N rows");
    const int j = n_joints();
    if (joint_regressor.rows() != j || joint_regressor.cols() != n) throw ConfigError("joint_regressor must be J×N");
    if (skin_weights.rows() != n || skin_weights.cols() != j) throw ConfigError("skin_weights must be N×J");
    if (pose_dim % 3 != 0 || pose_dim / 3 > j) throw ConfigError("pose_dim must be 3 × (number of posed joints ≤ J)");
    for (int k = 0; k < j; ++k) {
        const int p = joint_parents[k];
        if (p >= k || p < -1) throw ConfigError("joint_parents must list each parent before its child");
    }
    for (int i = 0; i < n; ++i) {
        if ((skin_weights.row(i).array() < 0.0).any()) throw ConfigError("negative skin weight");
        if (std::abs(skin_weights.row(i).sum() - 1.0) > 1e-6) throw ConfigError("skin weights must sum to 1");
    }
    for (const auto& f : faces)
        for (int idx : f)
            if (idx < 0 || idx >= n) throw ConfigError("face index out of range");
}

FaceParams FaceParams::zeros(const HeadModel& model) {
    return FaceParams{Eigen::VectorXd::Zero(model.n_shape()), Eigen::VectorXd::Zero(model.n_expr()),
                      Eigen::VectorXd::Zero(model.pose_dim), Eigen::VectorXd::Zero(3)};
}

Eigen::Matrix3d rodrigues(const Eigen::Vector3d& axis_angle) {
    const double t = axis_angle.norm();
    const Eigen::Matrix3d k = skew(axis_angle);
    double a, b;
    if (t < 1e-8) {
        a = 1.0 - t * t / 6.0;
        b = 0.5 - t * t / 24.0;
    } else {
        const double s = std::sin(0.5 * t) / t;
        a = std::sin(t) / t;
        b = 2.0 * s * s;
    }
    return Eigen::Matrix3d::Identity() + a * k + b * k * k;
}

Eigen::Matrix3d rodrigues(const Eigen::Vector3d& axis_angle, std::array<Eigen::Matrix3d, 3>& jacobian) {
    const double t = axis_angle.norm();
    const double t2 = t * t;
    const Eigen::Matrix3d k = skew(axis_angle);
    const Eigen::Matrix3d k2 = k * k;
    double a, b, da_over_t, db_over_t;
    if (t < 1e-2) {
        a = 1.0 - t2 / 6.0 + t2 * t2 / 120.0;
        b = 0.5 - t2 / 24.0 + t2 * t2 / 720.0;
        da_over_t = -1.0 / 3.0 + t2 / 30.0 - t2 * t2 / 840.0;
        db_over_t = -1.0 / 12.0 + t2 / 180.0 - t2 * t2 / 6720.0;
    } else {
        const double sn = std::sin(t), cs = std::cos(t), sh = std::sin(0.5 * t);
        const double one_minus_cos = 2.0 * sh * sh;
        a = sn / t;
        b = one_minus_cos / t2;
        da_over_t = (t * cs - sn) / (t2 * t);
        db_over_t = (t * sn - 2.0 * one_minus_cos) / (t2 * t2);
    }
    for (int i = 0; i < 3; ++i) {
        const Eigen::Matrix3d e = skew(Eigen::Vector3d::Unit(i));
        jacobian[i] = axis_angle(i) * (da_over_t * k + db_over_t * k2) + a * e + b * (e * k + k * e);
    }
    return Eigen::Matrix3d::Identity() + a * k + b * k2;
}

HeadModel synth_model(int n_vertices, int n_shape, int n_expr, int n_joints, std::uint64_t seed) {
    if (n_vertices < 4) throw ConfigError("synth_model: n_vertices must be >= 4");
    if (n_joints < 2) throw ConfigError("synth_model: n_joints must be >= 2");
    if (n_shape < 1 || n_expr < 1) throw ConfigError("synth_model: basis widths must be >= 1");

    Rng rng(derive_seed(seed, {0x4ead}));
    std::uniform_real_distribution<double> uni(-1.0, 1.0);
    std::uniform_real_distribution<double> unit(0.0, 1.0);

    HeadModel m;
    m.base_vertices.resize(n_vertices, 3);
    for (int i = 0; i < n_vertices; ++i) {
        Eigen::Vector3d p;
        do {
            p = Eigen::Vector3d(uni(rng), uni(rng), uni(rng));
        } while (p.squaredNorm() > 1.0);
        m.base_vertices.row(i) = p.transpose();
    }
    m.shape_basis = 0.01 * standard_normal(3 * n_vertices, n_shape, rng);
    m.expr_basis = 0.01 * standard_normal(3 * n_vertices, n_expr, rng);

    for (int i = 1; i + 1 < n_vertices; ++i) m.faces.push_back({0, i, i + 1});

    m.joint_regressor.resize(n_joints, n_vertices);
    for (int j = 0; j < n_joints; ++j) {
        for (int i = 0; i < n_vertices; ++i) m.joint_regressor(j, i) = unit(rng);
        m.joint_regressor.row(j) /= m.joint_regressor.row(j).sum();
    }

    // Softmax-normalized logits: non-negative rows summing to one.
    Eigen::MatrixXd logits = 2.0 * standard_normal(n_vertices, n_joints, rng);
    m.skin_weights.resize(n_vertices, n_joints);
    for (int i = 0; i < n_vertices; ++i) {
        Eigen::RowVectorXd w = (logits.row(i).array() - logits.row(i).maxCoeff()).exp();
        m.skin_weights.row(i) = w / w.sum();
    }

    m.joint_parents.resize(n_joints);
    for (int j = 0; j < n_joints; ++j) m.joint_parents[j] = j - 1;
    m.pose_dim = 6;
    m.validate();
    return m;
}

VertexArray skin_vertices(const HeadModel& model, const Eigen::VectorXd& shape, const Eigen::VectorXd& expression,
                          const Eigen::VectorXd& pose) {
    const Eigen::MatrixXd rest = blend_rest(model, shape, expression);
    const Chain ch = build_chain(model, rest, pose, false);
    // Displacement form, v + Σ_j w_j ((Rg_j - I)(v - J_j) + tg_j - J_j), so an
    // identity pose returns the rest mesh bit for bit.
    VertexArray disp = VertexArray::Zero(model.n_vertices(), 3);
    for (int j = 0; j < model.n_joints(); ++j) {
        const Eigen::Matrix3d m = ch.global_rot[j] - Eigen::Matrix3d::Identity();
        if (m.isZero(0.0) && ch.offset[j].isZero(0.0)) continue;
        Eigen::MatrixXd moved = rest;
        moved.rowwise() -= ch.joints.row(j);
        moved = moved * m.transpose();
        moved.rowwise() += ch.offset[j].transpose();
        disp += (moved.array().colwise() * model.skin_weights.col(j).array()).matrix();
    }
    return rest + disp;
}

SkinningGradient skin_vertices_vjp(const HeadModel& model, const Eigen::VectorXd& shape,
                                   const Eigen::VectorXd& expression, const Eigen::VectorXd& pose,
                                   const Eigen::MatrixXd& grad_vertices) {
    const int n_joints = model.n_joints();
    const Eigen::MatrixXd rest = blend_rest(model, shape, expression);
    const Chain ch = build_chain(model, rest, pose, true);

    Eigen::MatrixXd d_rest = Eigen::MatrixXd::Zero(model.n_vertices(), 3);
    Eigen::MatrixXd d_joints = Eigen::MatrixXd::Zero(n_joints, 3);
    std::vector<Eigen::Matrix3d> d_grot(n_joints);
    std::vector<Eigen::Vector3d> d_gtrans(n_joints);

    // v'_i = Σ_j w_ij (Rg_j v_i + tg_j - Rg_j J_j)
    for (int j = 0; j < n_joints; ++j) {
        const Eigen::Matrix3d& r = ch.global_rot[j];
        const Eigen::MatrixXd weighted = (grad_vertices.array().colwise() * model.skin_weights.col(j).array()).matrix();
        const Eigen::Matrix3d d_rot = weighted.transpose() * rest;
        const Eigen::Vector3d d_trans = weighted.colwise().sum().transpose();
        d_rest += weighted * r;
        const Eigen::Vector3d jl = ch.joints.row(j).transpose();
        d_grot[j] = d_rot - d_trans * jl.transpose();
        d_gtrans[j] = d_trans;
        d_joints.row(j) -= (r.transpose() * d_trans).transpose();
    }

    Eigen::VectorXd d_pose = Eigen::VectorXd::Zero(pose.size());
    const int n_posed = static_cast<int>(pose.size()) / 3;
    for (int j = n_joints - 1; j >= 0; --j) {
        const int p = model.joint_parents[j];
        Eigen::Matrix3d d_local;
        if (p < 0) {
            d_local = d_grot[j];
            d_joints.row(j) += d_gtrans[j].transpose();
        } else {
            const Eigen::Matrix3d& rp = ch.global_rot[p];
            const Eigen::Vector3d offset = (ch.joints.row(j) - ch.joints.row(p)).transpose();
            d_grot[p] += d_grot[j] * ch.local[j].transpose() + d_gtrans[j] * offset.transpose();
            d_local = rp.transpose() * d_grot[j];
            const Eigen::Vector3d d_offset = rp.transpose() * d_gtrans[j];
            d_joints.row(j) += d_offset.transpose();
            d_joints.row(p) -= d_offset.transpose();
            d_gtrans[p] += d_gtrans[j];
        }
        if (j < n_posed)
            for (int k = 0; k < 3; ++k) d_pose(3 * j + k) = (d_local.array() * ch.local_jac[j][k].array()).sum();
    }

    d_rest += model.joint_regressor.transpose() * d_joints;
    Eigen::VectorXd flat(3 * model.n_vertices());
    for (int i = 0; i < model.n_vertices(); ++i)
        for (int c = 0; c < 3; ++c) flat(3 * i + c) = d_rest(i, c);

    return SkinningGradient{model.shape_basis.transpose() * flat, model.expr_basis.transpose() * flat, d_pose};
}

VertexArray compute_vertices(const HeadModel& model, const FaceParams& params) {
    check_params(model, params);
    return skin_vertices(model, params.shape, params.expression, params.pose);
}

VertexArray reconstruct_head(const HeadModel& model, const FaceParams& params) {
    return compute_vertices(model, params);
}

void export_obj(const VertexArray& vertices, const std::vector<Triangle>& faces, const std::filesystem::path& path) {
    if (vertices.cols() != 3) throw ShapeError("export_obj: vertices must be N×3");
    const auto n = vertices.rows();
    for (const auto& f : faces)
        for (int idx : f)
            if (idx < 0 || idx >= n)
                throw ShapeError("export_obj: face index " + std::to_string(idx) + " out of range for " +
                                 std::to_string(n) + " vertices");
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path.string());
    char line[128];
    for (Eigen::Index i = 0; i < n; ++i) {
        std::snprintf(line, sizeof(line), "v %.6f %.6f %.6f\n", vertices(i, 0), vertices(i, 1), vertices(i, 2));
        out << line;
    }
    for (const auto& f : faces) out << "f " << f[0] + 1 << ' ' << f[1] + 1 << ' ' << f[2] + 1 << '\n';
    if (!out) throw IoError("write failed for " + path.string());
}

ObjMesh parse_obj(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path.string());
    std::vector<Eigen::Vector3d> verts;
    ObjMesh mesh;
    std::vector<int> face_lines;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        std::istringstream ss(line);
        std::string tag;
        if (!(ss >> tag) || tag[0] == '#') continue;
        if (tag == "v") {
            Eigen::Vector3d v;
            if (!(ss >> v.x() >> v.y() >> v.z()))
                throw ParseError(path.string() + ":" + std::to_string(line_no) + ": malformed vertex");
            verts.push_back(v);
        } else if (tag == "f") {
            Triangle t;
            for (int k = 0; k < 3; ++k) {
                std::string tok;
                if (!(ss >> tok)) throw ParseError(path.string() + ":" + std::to_string(line_no) + ": malformed face");
                try {
                    t[k] = std::stoi(tok.substr(0, tok.find('/'))) - 1;
                } catch (const std::exception&) {
                    throw ParseError(path.string() + ":" + std::to_string(line_no) + ": bad face index '" + tok + "'");
                }
            }
            mesh.faces.push_back(t);
            face_lines.push_back(line_no);
        }
    }
    for (std::size_t f = 0; f < mesh.faces.size(); ++f)
        for (int idx : mesh.faces[f])
            if (idx < 0 || idx >= static_cast<int>(verts.size()))
                throw ParseError(path.string() + ":" + std::to_string(face_lines[f]) + ": face index " +
                                 std::to_string(idx + 1) + " out of range");
    mesh.vertices.resize(static_cast<Eigen::Index>(verts.size()), 3);
    for (std::size_t i = 0; i < verts.size(); ++i) mesh.vertices.row(static_cast<Eigen::Index>(i)) = verts[i].transpose();
    return mesh;
}

void save_head_model(const HeadModel& model, const std::filesystem::path& dir) {
    TensorArchive ar;
    const std::int64_t n = model.n_vertices();
    ar.put("base_vertices", model.base_vertices);
    auto put3 = [&](const std::string& name, const Eigen::MatrixXd& basis) {
        std::vector<double> data(static_cast<std::size_t>(basis.size()));
        for (Eigen::Index r = 0; r < basis.rows(); ++r)
            for (Eigen::Index c = 0; c < basis.cols(); ++c)
                data[static_cast<std::size_t>(r * basis.cols() + c)] = basis(r, c);
        ar.put(name, {n, 3, basis.cols()}, std::move(data));
    };
    put3("shape_basis", model.shape_basis);
    put3("expr_basis", model.expr_basis);
    std::vector<double> faces;
    for (const auto& f : model.faces) faces.insert(faces.end(), f.begin(), f.end());
    ar.put("faces", {static_cast<std::int64_t>(model.faces.size()), 3}, std::move(faces), TensorArchive::DType::int32);
    ar.put("joint_regressor", model.joint_regressor);
    ar.put("skin_weights", model.skin_weights);
    ar.put_ints("joint_parents", model.joint_parents);
    ar.meta() = {{"kind", "head_model"},
                 {"pose_dim", model.pose_dim},
                 {"n_vertices", model.n_vertices()},
                 {"n_shape", model.n_shape()},
                 {"n_expr", model.n_expr()},
                 {"n_joints", model.n_joints()}};
    ar.save(dir);
}

HeadModel load_head_model(const std::filesystem::path& dir) {
    const TensorArchive ar = TensorArchive::load(dir);
    HeadModel m;
    m.base_vertices = ar.matrix("base_vertices");
    m.shape_basis = ar.matrix("shape_basis");
    m.expr_basis = ar.matrix("expr_basis");
    const auto faces = ar.ints("faces");
    if (faces.size() % 3 != 0) throw ParseError(dir.string() + ": faces tensor is not F×3");
    for (std::size_t i = 0; i < faces.size(); i += 3) m.faces.push_back({faces[i], faces[i + 1], faces[i + 2]});
    m.joint_regressor = ar.matrix("joint_regressor");
    m.skin_weights = ar.matrix("skin_weights");
    m.joint_parents = ar.ints("joint_parents");
    m.pose_dim = ar.meta().value("pose_dim", 6);
    // float32 storage perturbs the normalization slightly; restore it.
    for (Eigen::Index i = 0; i < m.skin_weights.rows(); ++i) m.skin_weights.row(i) /= m.skin_weights.row(i).sum();
    m.validate();
    return m;
}

}  // namespace fet
