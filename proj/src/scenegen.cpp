#include "vdpm/scenegen.hpp"

#include <cmath>
#include <limits>
#include <string>
#include <unordered_map>

namespace vdpm {

namespace {

Eigen::Vector3d random_unit_vector(Rng& rng) {
    while (true) {
        const Eigen::Vector3d v(rng.normal(), rng.normal(), rng.normal());
        const double n = v.norm();
        if (n > 1e-9) return v / n;
    }
}

Eigen::Quaterniond random_rotation(Rng& rng) {
    while (true) {
        const Eigen::Vector4d v(rng.normal(), rng.normal(), rng.normal(), rng.normal());
        const double n = v.norm();
        if (n > 1e-9) return Eigen::Quaterniond(v(0) / n, v(1) / n, v(2) / n, v(3) / n);
    }
}

} // namespace

Rigid Trajectory::pose(double t) const {
    Eigen::Vector3d p = base_position;
    switch (kind) {
        case Kind::kConstant: break;
        case Kind::kLinear: p += velocity * t; break;
        case Kind::kSinusoidal: p += amplitude * std::sin(omega * t + phase); break;
    }
    Eigen::Quaterniond q = base_rotation;
    const double spin = angular_velocity.norm();
    if (spin > 0.0) {
        const Eigen::AngleAxisd aa(spin * t, angular_velocity / spin);
        q = Eigen::Quaterniond(aa) * q;
    }
    return Rigid(q, p);
}

bool Trajectory::is_static() const {
    return kind == Kind::kConstant && angular_velocity.isZero(0.0);
}

int64_t SceneSpec::total_points() const {
    int64_t n = static_cast<int64_t>(background_points.size());
    for (const RigidBody& obj : objects) n += static_cast<int64_t>(obj.points.size());
    return n;
}

Eigen::Vector3d SceneSpec::point_world(int64_t id, double t) const {
    int64_t offset = 0;
    for (const RigidBody& obj : objects) {
        const int64_t n = static_cast<int64_t>(obj.points.size());
        if (id < offset + n) return obj.trajectory.pose(t)(obj.points[id - offset]);
        offset += n;
    }
    return background_points[id - offset];
}

const Eigen::Vector3d& SceneSpec::point_albedo(int64_t id) const {
    int64_t offset = 0;
    for (const RigidBody& obj : objects) {
        const int64_t n = static_cast<int64_t>(obj.points.size());
        if (id < offset + n) return obj.albedo[id - offset];
        offset += n;
    }
    return background_albedo[id - offset];
}

void SceneGenConfig::validate() const {
    if (height < 1 || width < 1) throw ConfigError("scenegen: image size must be positive");
    if (min_objects < 0 || max_objects < min_objects)
        throw ConfigError("scenegen: empty object count range");
    if (min_points_per_object < 1 || max_points_per_object < min_points_per_object)
        throw ConfigError("scenegen: empty per-object point count range");
    if (background_points < 0) throw ConfigError("scenegen: negative background point count");
    if (!(min_object_radius > 0.0) || max_object_radius < min_object_radius)
        throw ConfigError("scenegen: empty object radius range");
    if (!(workspace_half_extent > 0.0) || !(object_region_half_extent > 0.0) ||
        object_region_half_extent > workspace_half_extent)
        throw ConfigError("scenegen: object region must fit inside the workspace");
    if (min_speed < 0.0 || max_speed < min_speed)
        throw ConfigError("scenegen: empty speed range");
    if (max_spin < 0.0) throw ConfigError("scenegen: negative spin bound");
    if (!(time_span > 0.0)) throw ConfigError("scenegen: time span must be positive");
    if (!force_static && !allow_constant && !allow_linear && !allow_sinusoidal)
        throw ConfigError("scenegen: no trajectory family allowed");
    if (object_region_half_extent - max_object_radius - max_speed * time_span <= 0.0)
        throw ConfigError("scenegen: motion budget exceeds the object region");
    if (!(cam_distance_min > 0.0) || cam_distance_max < cam_distance_min)
        throw ConfigError("scenegen: empty camera distance range");
    if (cam_elevation_min_deg < -89.0 || cam_elevation_max_deg > 89.0 ||
        cam_elevation_max_deg < cam_elevation_min_deg)
        throw ConfigError("scenegen: camera elevation range must be within (-89, 89)");
    if (cam_speed_max < 0.0) throw ConfigError("scenegen: negative camera speed bound");
    if (!(fov_x_deg > 0.0) || !(fov_x_deg < 180.0))
        throw ConfigError("scenegen: fov must be in (0, 180) degrees");
    if (target_jitter < 0.0) throw ConfigError("scenegen: negative target jitter");
}

SceneSpec sample_scene(uint64_t seed, const SceneGenConfig& config) {
    config.validate();
    Rng rng(seed);
    SceneSpec scene;

    std::vector<Trajectory::Kind> kinds;
    if (config.force_static || config.allow_constant) kinds.push_back(Trajectory::Kind::kConstant);
    if (!config.force_static && config.allow_linear) kinds.push_back(Trajectory::Kind::kLinear);
    if (!config.force_static && config.allow_sinusoidal)
        kinds.push_back(Trajectory::Kind::kSinusoidal);

    const int n_obj =
        static_cast<int>(rng.uniform_int(config.min_objects, config.max_objects));
    for (int o = 0; o < n_obj; ++o) {
        RigidBody body;
        const double radius = rng.uniform(config.min_object_radius, config.max_object_radius);
        const int n_pts = static_cast<int>(
            rng.uniform_int(config.min_points_per_object, config.max_points_per_object));
        body.points.reserve(n_pts);
        for (int p = 0; p < n_pts; ++p) body.points.push_back(radius * random_unit_vector(rng));

        // Smooth position-correlated color: each channel is a sinusoid over
        // the body frame, so surface location is recoverable from appearance.
        Eigen::Matrix3d freq;
        Eigen::Vector3d phase;
        for (int c = 0; c < 3; ++c) {
            freq.row(c) = (rng.uniform(1.5, 3.5) * random_unit_vector(rng)).transpose();
            phase(c) = rng.uniform(0.0, 2.0 * M_PI);
        }
        body.albedo.reserve(n_pts);
        for (const Eigen::Vector3d& p : body.points) {
            Eigen::Vector3d a;
            for (int c = 0; c < 3; ++c) a(c) = 0.5 + 0.5 * std::sin(freq.row(c).dot(p) + phase(c));
            body.albedo.push_back(a);
        }

        Trajectory& traj = body.trajectory;
        traj.kind = kinds[static_cast<size_t>(rng.uniform_int(0, static_cast<int64_t>(kinds.size()) - 1))];
        traj.base_rotation = random_rotation(rng);
        if (!config.force_static)
            traj.angular_velocity = rng.uniform(0.0, config.max_spin) * random_unit_vector(rng);

        Eigen::Vector3d motion_bound = Eigen::Vector3d::Zero();
        if (traj.kind == Trajectory::Kind::kLinear) {
            traj.velocity =
                rng.uniform(config.min_speed, config.max_speed) * random_unit_vector(rng);
            motion_bound = (traj.velocity * config.time_span).cwiseAbs();
        } else if (traj.kind == Trajectory::Kind::kSinusoidal) {
            traj.omega = rng.uniform(1.0, 2.5);
            traj.phase = rng.uniform(0.0, 2.0 * M_PI);
            const double peak_speed = rng.uniform(config.min_speed, config.max_speed);
            traj.amplitude = (peak_speed / traj.omega) * random_unit_vector(rng);
            motion_bound = traj.amplitude.cwiseAbs();
        }

        for (int axis = 0; axis < 3; ++axis) {
            const double hi = config.object_region_half_extent - radius - motion_bound(axis);
            double lo = -hi;
            if (axis == 1) lo = std::min(std::max(lo, config.floor_y + radius), hi);
            traj.base_position(axis) = rng.uniform(lo, hi);
        }
        scene.objects.push_back(std::move(body));
    }

    // Background: a gently rippled floor sheet spanning the workspace, with
    // smooth color over (x, z) like the objects.
    Eigen::Vector2d ripple_freq(rng.uniform(0.5, 1.2), rng.uniform(0.5, 1.2));
    Eigen::Vector2d ripple_phase(rng.uniform(0.0, 2.0 * M_PI), rng.uniform(0.0, 2.0 * M_PI));
    Eigen::Matrix<double, 3, 2> bg_freq;
    Eigen::Vector3d bg_phase;
    for (int c = 0; c < 3; ++c) {
        const double ang = rng.uniform(0.0, 2.0 * M_PI);
        bg_freq.row(c) = rng.uniform(0.4, 1.0) * Eigen::Vector2d(std::cos(ang), std::sin(ang)).transpose();
        bg_phase(c) = rng.uniform(0.0, 2.0 * M_PI);
    }
    scene.background_points.reserve(config.background_points);
    scene.background_albedo.reserve(config.background_points);
    for (int p = 0; p < config.background_points; ++p) {
        const double x = rng.uniform(-config.workspace_half_extent, config.workspace_half_extent);
        const double z = rng.uniform(-config.workspace_half_extent, config.workspace_half_extent);
        const double y = config.floor_y +
                         config.floor_ripple * std::sin(ripple_freq(0) * x + ripple_phase(0)) *
                             std::sin(ripple_freq(1) * z + ripple_phase(1));
        scene.background_points.emplace_back(x, y, z);
        const Eigen::Vector2d xz(x, z);
        Eigen::Vector3d a;
        for (int c = 0; c < 3; ++c) a(c) = 0.5 + 0.5 * std::sin(bg_freq.row(c).dot(xz) + bg_phase(c));
        scene.background_albedo.push_back(a);
    }

    scene.static_flag = true;
    for (const RigidBody& obj : scene.objects)
        if (!obj.trajectory.is_static()) scene.static_flag = false;
    return scene;
}

CameraPath sample_camera(uint64_t seed, const SceneGenConfig& config) {
    config.validate();
    Rng rng(seed);
    const double dist = rng.uniform(config.cam_distance_min, config.cam_distance_max);
    const double elev =
        rng.uniform(config.cam_elevation_min_deg, config.cam_elevation_max_deg) * M_PI / 180.0;
    const double azim = rng.uniform(0.0, 2.0 * M_PI);
    const Eigen::Vector3d eye0(dist * std::cos(elev) * std::cos(azim), dist * std::sin(elev),
                               dist * std::cos(elev) * std::sin(azim));
    Eigen::Vector3d target;
    for (int axis = 0; axis < 3; ++axis)
        target(axis) = rng.uniform(-config.target_jitter, config.target_jitter);
    const Eigen::Vector3d vel = rng.uniform(0.0, config.cam_speed_max) * random_unit_vector(rng);
    const Eigen::Vector3d up(0.0, 1.0, 0.0);

    CameraPath path;
    path.intrinsics =
        Intrinsics::from_fov(config.fov_x_deg * M_PI / 180.0, config.width, config.height);
    path.cam_to_world = [eye0, vel, target, up](double t) {
        return look_at(eye0 + t * vel, target, up);
    };
    return path;
}

Snippet render_snippet(const SceneSpec& scene, const CameraPath& path,
                       const std::vector<double>& timestamps) {
    if (timestamps.empty()) throw ConfigError("render_snippet: no timestamps");
    const Intrinsics& cam = path.intrinsics;
    const int h = cam.height, w = cam.width;
    const int n = static_cast<int>(timestamps.size());
    const int64_t total = scene.total_points();

    Snippet snip;
    snip.height = h;
    snip.width = w;
    snip.timestamps = timestamps;
    snip.images.assign(n, std::vector<float>(static_cast<size_t>(3) * h * w, 0.0f));
    snip.surface_ids.assign(n, std::vector<int32_t>(static_cast<size_t>(h) * w, -1));
    snip.intrinsics.assign(n, cam);
    snip.world_to_cam.reserve(n);
    for (int i = 0; i < n; ++i) snip.world_to_cam.push_back(path.world_to_camera(timestamps[i]));

    std::vector<Eigen::Vector3d> world(total);
    for (int i = 0; i < n; ++i) {
        const double t = timestamps[i];
        for (int64_t id = 0; id < total; ++id) world[id] = scene.point_world(id, t);
        const std::vector<Projection> proj = project(cam, snip.world_to_cam[i], world);

        std::vector<double> zbuf(static_cast<size_t>(h) * w,
                                 std::numeric_limits<double>::infinity());
        std::vector<int32_t>& ids = snip.surface_ids[i];
        for (int64_t id = 0; id < total; ++id) {
            const Projection& pr = proj[id];
            if (!pr.valid) continue;
            const long col = std::lround(pr.pixel.x());
            const long row = std::lround(pr.pixel.y());
            if (col < 0 || col >= w || row < 0 || row >= h) continue;
            const size_t px = static_cast<size_t>(row) * w + col;
            if (pr.depth < zbuf[px]) {
                zbuf[px] = pr.depth;
                ids[px] = static_cast<int32_t>(id);
            }
        }
        std::vector<float>& img = snip.images[i];
        for (size_t px = 0; px < ids.size(); ++px) {
            if (ids[px] < 0) continue;
            const Eigen::Vector3d& a = scene.point_albedo(ids[px]);
            for (int c = 0; c < 3; ++c)
                img[static_cast<size_t>(c) * h * w + px] = static_cast<float>(a(c));
        }
    }
    snip.gt_time_variant.reserve(n);
    for (int i = 0; i < n; ++i) snip.gt_time_variant.push_back(gt_pointmap(scene, snip, i, i));
    return snip;
}

PointMap gt_pointmap(const SceneSpec& scene, const Snippet& snippet, int i, int j) {
    const int n = snippet.frame_count();
    if (i < 0 || i >= n || j < 0 || j >= n)
        throw ConfigError("gt_pointmap: frame index out of range");
    PointMap map(snippet.height, snippet.width, i, j, 0);
    const Rigid& pose0 = snippet.world_to_cam[0];
    const double t = snippet.timestamps[j];
    const std::vector<int32_t>& ids = snippet.surface_ids[i];
    for (size_t px = 0; px < ids.size(); ++px) {
        if (ids[px] < 0) continue;
        map.points[px] = pose0(scene.point_world(ids[px], t));
        map.valid[px] = 1;
    }
    return map;
}

std::vector<std::pair<size_t, size_t>> gt_correspondences(const Snippet& snippet, int i,
                                                          int i2) {
    const int n = snippet.frame_count();
    if (i < 0 || i >= n || i2 < 0 || i2 >= n)
        throw ConfigError("gt_correspondences: frame index out of range");
    // A scene point occupies at most one pixel per frame (one splat), so the
    // id -> pixel map of a frame is injective.
    std::unordered_map<int32_t, size_t> where;
    const std::vector<int32_t>& ids2 = snippet.surface_ids[i2];
    for (size_t px = 0; px < ids2.size(); ++px)
        if (ids2[px] >= 0) where.emplace(ids2[px], px);

    std::vector<std::pair<size_t, size_t>> pairs;
    const std::vector<int32_t>& ids1 = snippet.surface_ids[i];
    for (size_t px = 0; px < ids1.size(); ++px) {
        if (ids1[px] < 0) continue;
        const auto it = where.find(ids1[px]);
        if (it != where.end()) pairs.emplace_back(px, it->second);
    }
    return pairs;
}

DpmSet make_gt_dpm_set(const SceneSpec& scene, const Snippet& snippet, int j) {
    const int n = snippet.frame_count();
    if (j < 0 || j >= n) throw ConfigError("make_gt_dpm_set: reference index out of range");
    DpmSet set;
    set.timestamps = snippet.timestamps;
    set.reference_time_index = j;
    set.time_variant = snippet.gt_time_variant;
    set.time_invariant.reserve(n);
    for (int i = 0; i < n; ++i) {
        if (i == j)
            set.time_invariant.push_back(set.time_variant[j]);
        else
            set.time_invariant.push_back(gt_pointmap(scene, snippet, i, j));
    }
    return set;
}

Snippet make_snippet(uint64_t seed, const SceneGenConfig& config, int frame_count, double dt) {
    std::vector<double> ts(static_cast<size_t>(frame_count));
    for (int i = 0; i < frame_count; ++i) ts[i] = i * dt;
    return make_snippet_at(seed, config, ts);
}

Snippet make_snippet_at(uint64_t seed, const SceneGenConfig& config,
                        const std::vector<double>& timestamps) {
    const SceneSpec scene = sample_scene(hash_seed(seed, 1), config);
    const CameraPath path = sample_camera(hash_seed(seed, 2), config);
    Snippet snip = render_snippet(scene, path, timestamps);
    snip.rng_seed = seed;
    return snip;
}

SceneSpec scene_of(const Snippet& snippet, const SceneGenConfig& config) {
    return sample_scene(hash_seed(snippet.rng_seed, 1), config);
}

} // namespace vdpm
