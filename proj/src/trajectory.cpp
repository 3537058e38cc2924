#include "fet/trajectory.hpp"

#include "fet/errors.hpp"
#include "fet/ned.hpp"
#include "fet/random.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>

namespace fet {

namespace {

using nlohmann::json;

json vec_json(const Eigen::VectorXd& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

Eigen::VectorXd json_vec(const json& j) {
    const auto v = j.get<std::vector<double>>();
    return Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

struct AnchorSpec {
    ExpressionAnchor anchor;
    FrameRole role;
};

Trajectory assemble(const FaceParams& source, const std::vector<AnchorSpec>& anchors, int f) {
    if (anchors.empty()) throw ValidationError("trajectory needs at least one anchor");
    if (f < 0) throw ConfigError("frames per segment must be >= 0");
    Trajectory t;
    t.frames_per_segment = f;
    t.frames.push_back({source, FrameRole::source});
    t.anchor_indices.push_back(0);
    for (const auto& a : anchors) {
        if (a.anchor.expression.size() != source.expression.size() || a.anchor.pose.size() != source.pose.size())
            throw ShapeError("anchor dims do not match the source parameters");
        ExpressionFrame next{source, a.role};
        next.params.expression = a.anchor.expression;
        next.params.pose = a.anchor.pose;
        const ExpressionFrame prev = t.frames.back();
        for (int k = 1; k <= f; ++k)
            t.frames.push_back(interpolate(prev, next, 1.0 - static_cast<double>(k) / (f + 1)));
        t.anchor_indices.push_back(static_cast<int>(t.frames.size()));
        t.frames.push_back(next);
    }
    return t;
}

}  // namespace

const char* role_name(FrameRole r) {
    switch (r) {
        case FrameRole::source: return "source";
        case FrameRole::anchor: return "anchor";
        case FrameRole::interpolated: return "interpolated";
        default: return "neutral";
    }
}

FrameRole parse_role(const std::string& name) {
    if (name == "source") return FrameRole::source;
    if (name == "anchor") return FrameRole::anchor;
    if (name == "interpolated") return FrameRole::interpolated;
    if (name == "neutral") return FrameRole::neutral;
    throw ValidationError("unknown frame role '" + name + "'");
}

ExpressionFrame interpolate(const ExpressionFrame& l, const ExpressionFrame& n, double delta) {
    if (!(delta >= 0.0 && delta <= 1.0)) throw DomainError("interpolation weight must lie in [0, 1]");
    if (l.params.shape.size() != n.params.shape.size() || l.params.shape != n.params.shape)
        throw ValidationError("interpolated frames must share the shape vector");
    if (l.params.camera.size() != n.params.camera.size() || l.params.camera != n.params.camera)
        throw ValidationError("interpolated frames must share the camera");
    if (l.params.expression.size() != n.params.expression.size() || l.params.pose.size() != n.params.pose.size())
        throw ShapeError("interpolated frames disagree in dims");
    ExpressionFrame out{l.params, FrameRole::interpolated};
    if (delta == 0.0) {
        out.params.expression = n.params.expression;
        out.params.pose = n.params.pose;
    } else if (delta != 1.0) {
        out.params.expression = delta * l.params.expression + (1.0 - delta) * n.params.expression;
        out.params.pose = delta * l.params.pose + (1.0 - delta) * n.params.pose;
    }
    return out;
}

Trajectory build_trajectory(const FaceParams& source, const std::vector<ExpressionAnchor>& anchors, int f) {
    std::vector<AnchorSpec> specs;
    for (const auto& a : anchors) specs.push_back({a, FrameRole::anchor});
    return assemble(source, specs, f);
}

Trajectory insert_neutral(const FaceParams& source, const std::vector<ExpressionAnchor>& anchors, int f,
                          const NedModel& ned, std::uint64_t seed) {
    if (anchors.size() < 2) throw ValidationError("neutral insertion needs at least two anchors");
    std::vector<AnchorSpec> specs;
    for (std::size_t i = 0; i < anchors.size(); ++i) {
        if (i > 0) {
            NeutralFace n = generate_neutral(ned, derive_seed(seed, {i}));
            specs.push_back({{n.expression, n.pose}, FrameRole::neutral});
        }
        specs.push_back({anchors[i], FrameRole::anchor});
    }
    return assemble(source, specs, f);
}

std::vector<VertexArray> meshes_for(const Trajectory& traj, const HeadModel& model) {
    std::vector<VertexArray> out;
    out.reserve(traj.frames.size());
    for (const auto& f : traj.frames) out.push_back(reconstruct_head(model, f.params));
    return out;
}

json face_params_to_json(const FaceParams& p) {
    return {{"shape", vec_json(p.shape)},
            {"expression", vec_json(p.expression)},
            {"pose", vec_json(p.pose)},
            {"camera", vec_json(p.camera)}};
}

FaceParams face_params_from_json(const json& j) {
    FaceParams p;
    try {
        if (j.contains("shape")) p.shape = json_vec(j.at("shape"));
        if (j.contains("expression")) p.expression = json_vec(j.at("expression"));
        if (j.contains("pose")) p.pose = json_vec(j.at("pose"));
        if (j.contains("camera")) p.camera = json_vec(j.at("camera"));
    } catch (const json::exception& e) {
        throw ParseError(std::string("face parameters: ") + e.what());
    }
    return p;
}

FaceParams load_face_params(const std::filesystem::path& path, const HeadModel& model) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path.string());
    json j;
    try {
        j = json::parse(in);
    } catch (const json::parse_error& e) {
        throw ParseError(path.string() + ": " + e.what());
    }
    FaceParams p = face_params_from_json(j);
    FaceParams z = FaceParams::zeros(model);
    auto fill = [&](Eigen::VectorXd& v, const Eigen::VectorXd& d, const char* name) {
        if (v.size() == 0)
            v = d;
        else if (v.size() != d.size())
            throw ValidationError(path.string() + ": '" + name + "' has " + std::to_string(v.size()) +
                                  " entries, expected " + std::to_string(d.size()));
        if (!v.allFinite()) throw ValidationError(path.string() + ": '" + name + "' has non-finite entries");
    };
    fill(p.shape, z.shape, "shape");
    fill(p.expression, z.expression, "expression");
    fill(p.pose, z.pose, "pose");
    fill(p.camera, z.camera, "camera");
    return p;
}

json trajectory_to_json(const Trajectory& traj) {
    json frames = json::array();
    for (std::size_t i = 0; i < traj.frames.size(); ++i) {
        json f = face_params_to_json(traj.frames[i].params);
        f["index"] = i;
        f["role"] = role_name(traj.frames[i].role);
        frames.push_back(f);
    }
    return {{"frames_per_segment", traj.frames_per_segment},
            {"anchor_indices", traj.anchor_indices},
            {"frame_count", traj.frames.size()},
            {"frames", frames}};
}

Trajectory trajectory_from_json(const json& j) {
    Trajectory t;
    try {
        t.frames_per_segment = j.at("frames_per_segment").get<int>();
        t.anchor_indices = j.at("anchor_indices").get<std::vector<int>>();
        for (const auto& f : j.at("frames")) t.frames.push_back({face_params_from_json(f), parse_role(f.at("role"))});
    } catch (const json::exception& e) {
        throw ParseError(std::string("trajectory: ") + e.what());
    }
    return t;
}

int write_obj_sequence(const Trajectory& traj, const HeadModel& model, const std::filesystem::path& dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
    const auto meshes = meshes_for(traj, model);
    for (std::size_t i = 0; i < meshes.size(); ++i) {
        char name[32];
        std::snprintf(name, sizeof name, "frame_%04zu.obj", i);
        export_obj(meshes[i], model.faces, dir / name);
    }
    return static_cast<int>(meshes.size());
}

}  // namespace fet
