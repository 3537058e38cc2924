#pragma once

#include <Eigen/Core>

#include <array>
#include <cstdint>
#include <filesystem>
#include <vector>

namespace fet {

using Triangle = std::array<int, 3>;

// N×3 vertex positions in meters.
using VertexArray = Eigen::MatrixXd;

// FLAME-style parametric head: rest mesh, identity and expression
// blendshapes, and a skinned joint hierarchy.
//
// Blendshape bases are stored flattened: row 3*i + c holds coordinate c of
// vertex i, one column per coefficient.
struct HeadModel {
    Eigen::MatrixXd base_vertices;    // N×3
    Eigen::MatrixXd shape_basis;      // 3N×M
    Eigen::MatrixXd expr_basis;       // 3N×K
    std::vector<Triangle> faces;
    Eigen::MatrixXd joint_regressor;  // J×N
    Eigen::MatrixXd skin_weights;     // N×J
    std::vector<int> joint_parents;   // -1 marks a root
    int pose_dim = 6;                 // posed joints × 3, axis-angle radians

    int n_vertices() const { return static_cast<int>(base_vertices.rows()); }
    int n_shape() const { return static_cast<int>(shape_basis.cols()); }
    int n_expr() const { return static_cast<int>(expr_basis.cols()); }
    int n_joints() const { return static_cast<int>(joint_parents.size()); }

    // Throws ConfigError when any structural invariant is violated.
    void validate() const;
};

struct FaceParams {
    Eigen::VectorXd shape;       // φ
    Eigen::VectorXd expression;  // e
    Eigen::VectorXd pose;        // θ: global rotation (3) then jaw (3)
    Eigen::VectorXd camera;      // c

    static FaceParams zeros(const HeadModel& model);
};

HeadModel synth_model(int n_vertices, int n_shape, int n_expr, int n_joints, std::uint64_t seed);

// V(φ, e, θ) = W(V_b + Sφ + Be, θ). Joints are regressed from the blended
// rest mesh; pose correctives are not applied.
VertexArray compute_vertices(const HeadModel& model, const FaceParams& params);

// Head-mesh reconstruction for a trajectory frame. No hair/shoulder
// deformation term, so this is the blendshape + skinning output.
VertexArray reconstruct_head(const HeadModel& model, const FaceParams& params);

// Unchecked core of compute_vertices, used by the training loss.
VertexArray skin_vertices(const HeadModel& model, const Eigen::VectorXd& shape, const Eigen::VectorXd& expression,
                          const Eigen::VectorXd& pose);

struct SkinningGradient {
    Eigen::VectorXd shape;
    Eigen::VectorXd expression;
    Eigen::VectorXd pose;
};

// Vector-Jacobian product of skin_vertices: given dL/dV (N×3) returns dL/dφ,
// dL/de and dL/dθ.
SkinningGradient skin_vertices_vjp(const HeadModel& model, const Eigen::VectorXd& shape,
                                   const Eigen::VectorXd& expression, const Eigen::VectorXd& pose,
                                   const Eigen::MatrixXd& grad_vertices);

// Axis-angle to rotation matrix; second-order Taylor expansion below 1e-8 rad.
Eigen::Matrix3d rodrigues(const Eigen::Vector3d& axis_angle);

// Same, plus the three partial derivatives dR/dθ_k.
Eigen::Matrix3d rodrigues(const Eigen::Vector3d& axis_angle, std::array<Eigen::Matrix3d, 3>& jacobian);

void export_obj(const VertexArray& vertices, const std::vector<Triangle>& faces, const std::filesystem::path& path);

struct ObjMesh {
    VertexArray vertices;
    std::vector<Triangle> faces;  // zero-based
};

ObjMesh parse_obj(const std::filesystem::path& path);

void save_head_model(const HeadModel& model, const std::filesystem::path& dir);
HeadModel load_head_model(const std::filesystem::path& dir);

}  // namespace fet
