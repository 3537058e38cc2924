#pragma once

#include "fet/head_model.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace fet {

class NedModel;

enum class FrameRole { source, anchor, interpolated, neutral };
const char* role_name(FrameRole r);
FrameRole parse_role(const std::string& name);

struct ExpressionFrame {
    FaceParams params;
    FrameRole role = FrameRole::anchor;
};

struct Trajectory {
    std::vector<ExpressionFrame> frames;
    std::vector<int> anchor_indices;  // includes the source frame at 0
    int frames_per_segment = 0;
};

struct ExpressionAnchor {
    Eigen::VectorXd expression;
    Eigen::VectorXd pose;
};

// e and θ blended as δ·l + (1-δ)·n; shape and camera come from frame_l.
ExpressionFrame interpolate(const ExpressionFrame& frame_l, const ExpressionFrame& frame_n, double delta);

Trajectory build_trajectory(const FaceParams& source, const std::vector<ExpressionAnchor>& anchors, int frames_per_segment);

// Inserts an NED neutral between each consecutive pair of expression anchors.
Trajectory insert_neutral(const FaceParams& source, const std::vector<ExpressionAnchor>& anchors,
                          int frames_per_segment, const NedModel& ned, std::uint64_t seed);

std::vector<VertexArray> meshes_for(const Trajectory& traj, const HeadModel& model);

nlohmann::json trajectory_to_json(const Trajectory& traj);
Trajectory trajectory_from_json(const nlohmann::json& j);
// Writes frame_%04d.obj for every frame; returns the number written.
int write_obj_sequence(const Trajectory& traj, const HeadModel& model, const std::filesystem::path& dir);

nlohmann::json face_params_to_json(const FaceParams& p);
FaceParams face_params_from_json(const nlohmann::json& j);
// Missing fields default to zeros sized for `model`; present fields must match it.
FaceParams load_face_params(const std::filesystem::path& path, const HeadModel& model);

}  // namespace fet
