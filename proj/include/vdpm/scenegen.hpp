#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "vdpm/dpm.hpp"
#include "vdpm/geometry.hpp"
#include "vdpm/rng.hpp"

namespace vdpm {

/// Rigid motion as a function of absolute time. Position follows one of three
/// families; orientation spins at constant angular velocity, which traces the
/// shortest great-circle path between any two of its samples.
struct Trajectory {
    enum class Kind { kConstant, kLinear, kSinusoidal };

    Kind kind = Kind::kConstant;
    Eigen::Vector3d base_position = Eigen::Vector3d::Zero();
    Eigen::Vector3d velocity = Eigen::Vector3d::Zero();
    Eigen::Vector3d amplitude = Eigen::Vector3d::Zero();
    double omega = 0.0;
    double phase = 0.0;
    Eigen::Quaterniond base_rotation = Eigen::Quaterniond::Identity();
    Eigen::Vector3d angular_velocity = Eigen::Vector3d::Zero();

    Rigid pose(double t) const;
    bool is_static() const;
};

/// Rigid body as a bag of surface samples with per-point color.
struct RigidBody {
    std::vector<Eigen::Vector3d> points;
    std::vector<Eigen::Vector3d> albedo;
    Trajectory trajectory;
};

/// A sampled 4D scene: moving bodies over a static background point set.
/// Scene points carry stable integer ids (bodies first, then background) so
/// exact correspondences and positions at any time are recoverable.
struct SceneSpec {
    std::vector<RigidBody> objects;
    std::vector<Eigen::Vector3d> background_points;
    std::vector<Eigen::Vector3d> background_albedo;
    bool static_flag = false;

    int64_t total_points() const;
    Eigen::Vector3d point_world(int64_t id, double t) const;
    const Eigen::Vector3d& point_albedo(int64_t id) const;
};

struct CameraPath {
    Intrinsics intrinsics;
    std::function<Rigid(double)> cam_to_world;

    Rigid world_to_camera(double t) const { return invert(cam_to_world(t)); }
};

/// Generator knobs. Objects stay inside the object region for every time in
/// [0, time_span) by construction (center + radius + motion budget), and the
/// whole scene stays inside the workspace cube.
struct SceneGenConfig {
    int height = 32, width = 32;
    int min_objects = 1, max_objects = 3;
    int min_points_per_object = 200, max_points_per_object = 800;
    int background_points = 2000;

    double workspace_half_extent = 4.0;
    double object_region_half_extent = 2.0;
    double min_object_radius = 0.2, max_object_radius = 0.5;
    double floor_y = -0.5;
    double floor_ripple = 0.15;

    double min_speed = 0.1, max_speed = 0.5;
    double max_spin = 1.5;
    double time_span = 2.0;
    bool allow_constant = true, allow_linear = true, allow_sinusoidal = true;
    /// Forces constant zero-spin trajectories (the camera may still move).
    bool force_static = false;

    double cam_distance_min = 4.5, cam_distance_max = 5.5;
    double cam_elevation_min_deg = 20.0, cam_elevation_max_deg = 50.0;
    double cam_speed_max = 0.3;
    double fov_x_deg = 70.0;
    double target_jitter = 0.3;

    void validate() const;
};

/// One rendered N-frame sample: images, cameras, exact maps and the per-pixel
/// scene-point ids that make every other ground truth derivable.
struct Snippet {
    int height = 0, width = 0;
    std::vector<std::vector<float>> images;   // N buffers, channel-major 3*H*W
    std::vector<double> timestamps;
    std::vector<Intrinsics> intrinsics;       // per frame
    std::vector<Rigid> world_to_cam;          // per frame
    std::vector<PointMap> gt_time_variant;    // map i at its own time, camera-0 frame
    std::vector<std::vector<int32_t>> surface_ids; // N buffers, H*W, -1 = empty pixel
    uint64_t rng_seed = 0;

    int frame_count() const { return static_cast<int>(timestamps.size()); }
};

/// Deterministic function of the seed.
SceneSpec sample_scene(uint64_t seed, const SceneGenConfig& config);

/// Camera on a shell looking near the origin, optionally drifting linearly.
CameraPath sample_camera(uint64_t seed, const SceneGenConfig& config);

/// Point-splat render with a z-buffer; nearest point wins each pixel, its
/// albedo becomes the pixel color, empty pixels are zero and invalid.
Snippet render_snippet(const SceneSpec& scene, const CameraPath& path,
                       const std::vector<double>& timestamps);

/// Map of frame i evaluated at time index j: each pixel's scene point moved to
/// its position at t_j, expressed in camera-0 coordinates. Validity comes from
/// frame i alone; the point is defined even if it left the view by t_j.
PointMap gt_pointmap(const SceneSpec& scene, const Snippet& snippet, int i, int j);

/// Exact correspondences between frames i and i2 via shared scene-point ids;
/// pairs are (linear pixel in i, linear pixel in i2), row-major in i. The
/// paired points coincide at every time index, not just one.
std::vector<std::pair<size_t, size_t>> gt_correspondences(const Snippet& snippet, int i,
                                                          int i2);

/// Full target set for a snippet at reference time index j.
DpmSet make_gt_dpm_set(const SceneSpec& scene, const Snippet& snippet, int j);

/// Scene + camera + render in one call; timestamps are frame_count steps of
/// dt starting at 0.
Snippet make_snippet(uint64_t seed, const SceneGenConfig& config, int frame_count,
                     double dt = 0.1);

/// As make_snippet but with an explicit timestamp vector.
Snippet make_snippet_at(uint64_t seed, const SceneGenConfig& config,
                        const std::vector<double>& timestamps);

/// The scene a snippet was rendered from (same seed, same config).
SceneSpec scene_of(const Snippet& snippet, const SceneGenConfig& config);

} // namespace vdpm
