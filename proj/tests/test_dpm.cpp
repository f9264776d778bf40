#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <set>

#include "vdpm/dpm.hpp"
#include "vdpm/rng.hpp"
#include "vdpm/scenegen.hpp"

using namespace vdpm;

namespace {

PointMap random_map(Rng& rng, int h, int w, int src, int time, double valid_p = 0.8) {
    PointMap m(h, w, src, time);
    for (size_t i = 0; i < m.size(); ++i) {
        m.points[i] = Eigen::Vector3d(rng.uniform(-3, 3), rng.uniform(-3, 3), rng.uniform(1, 5));
        m.valid[i] = rng.bernoulli(valid_p) ? 1 : 0;
    }
    return m;
}

/// Single linear-moving object over a static floor, watched by a fixed
/// identity-rotation camera: every ground-truth quantity is hand-computable.
struct LinearScene {
    SceneSpec scene;
    CameraPath path;
    Eigen::Vector3d velocity;

    explicit LinearScene(uint64_t seed, const Eigen::Vector3d& v) : velocity(v) {
        Rng rng(seed);
        RigidBody body;
        for (int i = 0; i < 400; ++i) {
            Eigen::Vector3d p(rng.normal(), rng.normal(), rng.normal());
            body.points.push_back(0.8 * p.normalized());
            body.albedo.push_back(Eigen::Vector3d(0.5, 0.5, 0.5));
        }
        body.trajectory.kind = Trajectory::Kind::kLinear;
        body.trajectory.velocity = v;
        scene.objects.push_back(body);
        for (int i = 0; i < 1500; ++i) {
            scene.background_points.emplace_back(rng.uniform(-3, 3), rng.uniform(-3, 3),
                                                 rng.uniform(2.5, 3.5));
            scene.background_albedo.emplace_back(0.2, 0.3, 0.4);
        }
        scene.static_flag = false;

        path.intrinsics = Intrinsics::from_fov(70.0 * M_PI / 180.0, 32, 32);
        // Camera sits behind the scene on -z with identity rotation, so
        // camera-0 coordinates differ from world only by a translation.
        const Rigid cam_to_world(Eigen::Quaterniond::Identity(), Eigen::Vector3d(0, 0, -5));
        path.cam_to_world = [cam_to_world](double) { return cam_to_world; };
    }
};

} // namespace

TEST_CASE("scene flow of a map with itself is zero") {
    Rng rng(21);
    const PointMap a = random_map(rng, 8, 8, 2, 0);
    const FlowGrid flow = scene_flow(a, a);
    for (size_t i = 0; i < a.size(); ++i) {
        CHECK(flow.flow[i].norm() == 0.0);
        CHECK(flow.valid[i] == a.valid[i]);
    }
}

TEST_CASE("scene flow of a linearly moving object is v * dt, zero on background") {
    const Eigen::Vector3d v(0.3, -0.1, 0.2);
    const LinearScene ls(100, v);
    const std::vector<double> ts = {0.0, 0.4};
    const Snippet snip = render_snippet(ls.scene, ls.path, ts);

    const PointMap a = gt_pointmap(ls.scene, snip, 0, 0);
    const PointMap b = gt_pointmap(ls.scene, snip, 0, 1);
    const FlowGrid flow = scene_flow(a, b);

    const int64_t object_points = static_cast<int64_t>(ls.scene.objects[0].points.size());
    int on_object = 0, on_background = 0;
    for (size_t px = 0; px < a.size(); ++px) {
        if (!flow.valid[px]) continue;
        if (snip.surface_ids[0][px] < object_points) {
            CHECK((flow.flow[px] - v * 0.4).norm() < 1e-12);
            ++on_object;
        } else {
            CHECK(flow.flow[px].norm() == 0.0);
            ++on_background;
        }
    }
    CHECK(on_object > 10);
    CHECK(on_background > 100);
}

TEST_CASE("scene flow rejects maps from different source frames") {
    Rng rng(22);
    const PointMap a = random_map(rng, 4, 4, 0, 0);
    const PointMap b = random_map(rng, 4, 4, 1, 1);
    CHECK_THROWS_AS(scene_flow(a, b), MismatchError);
}

TEST_CASE("scene flow is additive over time indices") {
    const LinearScene ls(101, Eigen::Vector3d(0.2, 0.1, -0.3));
    const std::vector<double> ts = {0.0, 0.3, 0.9};
    const Snippet snip = render_snippet(ls.scene, ls.path, ts);
    const PointMap p0 = gt_pointmap(ls.scene, snip, 0, 0);
    const PointMap p1 = gt_pointmap(ls.scene, snip, 0, 1);
    const PointMap p2 = gt_pointmap(ls.scene, snip, 0, 2);
    const FlowGrid f02 = scene_flow(p0, p2);
    const FlowGrid f01 = scene_flow(p0, p1);
    const FlowGrid f12 = scene_flow(p1, p2);
    for (size_t px = 0; px < p0.size(); ++px) {
        if (!f02.valid[px]) continue;
        CHECK((f02.flow[px] - (f01.flow[px] + f12.flow[px])).norm() < 1e-12);
    }
}

TEST_CASE("correspond maps every valid pixel to itself at eps 0") {
    Rng rng(23);
    const PointMap a = random_map(rng, 8, 8, 0, 0);
    const auto pairs = correspond(a, a, 0.0);
    size_t n_valid = 0;
    for (size_t i = 0; i < a.size(); ++i) n_valid += a.valid[i] ? 1 : 0;
    REQUIRE(pairs.size() == n_valid);
    for (const auto& [u, v] : pairs) CHECK(u == v);
}

TEST_CASE("correspond rejects maps at different time indices") {
    Rng rng(24);
    const PointMap a = random_map(rng, 4, 4, 0, 0);
    const PointMap b = random_map(rng, 4, 4, 1, 1);
    CHECK_THROWS_AS(correspond(a, b, 0.1), MismatchError);
}

TEST_CASE("correspond matches the oracle correspondences exactly on 20 scenes") {
    SceneGenConfig config;
    for (uint64_t seed = 0; seed < 20; ++seed) {
        const Snippet snip = make_snippet(seed, config, 2);
        const SceneSpec scene = scene_of(snip, config);
        const int j = static_cast<int>(seed % 2);
        const PointMap qa = gt_pointmap(scene, snip, 0, j);
        const PointMap qb = gt_pointmap(scene, snip, 1, j);

        const auto predicted = correspond(qa, qb, 1e-6);
        const auto oracle = gt_correspondences(snip, 0, 1);
        const std::set<std::pair<size_t, size_t>> pred_set(predicted.begin(), predicted.end());
        const std::set<std::pair<size_t, size_t>> gt_set(oracle.begin(), oracle.end());
        CHECK(pred_set == gt_set); // precision = recall = 1
        CHECK(!gt_set.empty());
    }
}

TEST_CASE("correspond is symmetric on oracle data") {
    SceneGenConfig config;
    const Snippet snip = make_snippet(33, config, 2);
    const SceneSpec scene = scene_of(snip, config);
    const PointMap qa = gt_pointmap(scene, snip, 0, 0);
    const PointMap qb = gt_pointmap(scene, snip, 1, 0);
    const auto ab = correspond(qa, qb, 1e-6);
    auto ba = correspond(qb, qa, 1e-6);
    std::set<std::pair<size_t, size_t>> flipped;
    for (const auto& [v, u] : ba) flipped.emplace(u, v);
    CHECK(std::set<std::pair<size_t, size_t>>(ab.begin(), ab.end()) == flipped);
}

TEST_CASE("normalize: single point at (0,0,3) becomes (0,0,1) with scale 3") {
    PointMap m(1, 1, 0, 0);
    m.points[0] = Eigen::Vector3d(0, 0, 3);
    m.valid[0] = 1;
    std::vector<PointMap> maps = {m};
    const double scale = normalize_unit_mean_dist(maps);
    CHECK(scale == doctest::Approx(3.0));
    CHECK((maps[0].points[0] - Eigen::Vector3d(0, 0, 1)).norm() < 1e-12);
}

TEST_CASE("normalize: hand-computed scale for two points") {
    PointMap m(1, 2, 0, 0);
    m.points[0] = Eigen::Vector3d(2, 0, 0);
    m.points[1] = Eigen::Vector3d(0, 4, 0);
    m.valid = {1, 1};
    std::vector<PointMap> maps = {m};
    const double scale = normalize_unit_mean_dist(maps);
    CHECK(scale == doctest::Approx(3.0));
    CHECK((maps[0].points[0] - Eigen::Vector3d(2.0 / 3, 0, 0)).norm() < 1e-12);
    CHECK((maps[0].points[1] - Eigen::Vector3d(0, 4.0 / 3, 0)).norm() < 1e-12);
}

TEST_CASE("normalize is idempotent and invertible") {
    Rng rng(25);
    std::vector<PointMap> maps = {random_map(rng, 8, 8, 0, 0), random_map(rng, 8, 8, 1, 1)};
    const std::vector<PointMap> original = maps;
    const double scale = normalize_unit_mean_dist(maps);

    std::vector<PointMap> again = maps;
    const double scale2 = normalize_unit_mean_dist(again);
    CHECK(scale2 == doctest::Approx(1.0).epsilon(1e-9));

    for (size_t k = 0; k < maps.size(); ++k)
        for (size_t i = 0; i < maps[k].size(); ++i)
            CHECK((maps[k].points[i] * scale - original[k].points[i]).norm() < 1e-7);
}

TEST_CASE("normalize rejects empty and degenerate sets") {
    PointMap none(2, 2, 0, 0); // all pixels invalid
    std::vector<PointMap> maps = {none};
    CHECK_THROWS_AS(normalize_unit_mean_dist(maps), DegenerateError);

    PointMap origin(1, 1, 0, 0);
    origin.valid[0] = 1; // point stays (0,0,0)
    std::vector<PointMap> zero = {origin};
    CHECK_THROWS_AS(normalize_unit_mean_dist(zero), DegenerateError);
}

TEST_CASE("distinct map count is 2N-1") {
    CHECK(count_distinct_maps(1) == 1);
    CHECK(count_distinct_maps(2) == 3);
    CHECK(count_distinct_maps(10) == 19);
    CHECK_THROWS_AS(count_distinct_maps(0), ConfigError);
}

TEST_CASE("static scenes make the time-invariant set equal the time-variant set") {
    SceneGenConfig config;
    config.force_static = true;
    for (uint64_t seed = 40; seed < 44; ++seed) {
        const Snippet snip = make_snippet(seed, config, 3);
        const SceneSpec scene = scene_of(snip, config);
        CHECK(scene.static_flag);
        for (int j = 0; j < 3; ++j) {
            const DpmSet set = make_gt_dpm_set(scene, snip, j);
            set.check();
            for (int i = 0; i < 3; ++i)
                for (size_t px = 0; px < set.time_variant[i].size(); ++px)
                    CHECK(set.time_invariant[i].points[px] == set.time_variant[i].points[px]);
        }
    }
}

TEST_CASE("fuse at reference time: single frame returns its valid points") {
    SceneGenConfig config;
    const Snippet snip = make_snippet(50, config, 1);
    const SceneSpec scene = scene_of(snip, config);
    const DpmSet set = make_gt_dpm_set(scene, snip, 0);
    const FusedCloud cloud = fuse_at_reference_time(set);
    size_t n_valid = 0;
    for (const uint8_t v : snip.gt_time_variant[0].valid) n_valid += v ? 1 : 0;
    CHECK(cloud.points.size() == n_valid);
    CHECK(cloud.confidence.size() == n_valid);
}

TEST_CASE("fuse at reference time: co-visible moving points coincide at the reference time") {
    SceneGenConfig config;
    const Snippet snip = make_snippet(51, config, 3);
    const SceneSpec scene = scene_of(snip, config);
    CHECK_FALSE(scene.static_flag);
    const int j = 1;
    const DpmSet set = make_gt_dpm_set(scene, snip, j);

    int moving_checked = 0;
    const auto pairs = gt_correspondences(snip, 0, 2);
    for (const auto& [u, v] : pairs) {
        // Same surface point seen from frames 0 and 2: identical at t_j.
        CHECK((set.time_invariant[0].points[u] - set.time_invariant[2].points[v]).norm() < 1e-6);
        const double moved = (set.time_variant[0].points[u] - set.time_invariant[0].points[u]).norm();
        if (moved > 1e-3) ++moving_checked;
    }
    CHECK(moving_checked > 0); // the scene genuinely moved between t_0 and t_j
}

TEST_CASE("map set accepts shuffled (non-monotone) timestamps") {
    SceneGenConfig config;
    const SceneSpec scene = sample_scene(60, config);
    const CameraPath path = sample_camera(61, config);
    const Snippet snip = render_snippet(scene, path, {0.4, 0.0, 0.2});
    const DpmSet set = make_gt_dpm_set(scene, snip, 2);
    set.check();
    // Map i at time index k matches a monotone render of the same scene at
    // the same absolute times.
    const Snippet mono = render_snippet(scene, path, {0.0, 0.2, 0.4});
    const PointMap shuffled = gt_pointmap(scene, snip, 1, 0);  // frame at t=0, eval at t=0.4
    const PointMap straight = gt_pointmap(scene, mono, 0, 2);  // frame at t=0, eval at t=0.4
    REQUIRE(shuffled.size() == straight.size());
    int compared = 0;
    for (size_t px = 0; px < shuffled.size(); ++px) {
        if (!shuffled.valid[px] || !straight.valid[px]) continue;
        if (snip.surface_ids[1][px] != mono.surface_ids[0][px]) continue;
        // Same pixel, same surface point, same target time: but camera-0
        // differs between the two renders (different first timestamp), so
        // compare in world coordinates.
        const Eigen::Vector3d a = invert(snip.world_to_cam[0])(shuffled.points[px]);
        const Eigen::Vector3d b = invert(mono.world_to_cam[0])(straight.points[px]);
        CHECK((a - b).norm() < 1e-9);
        ++compared;
    }
    CHECK(compared > 50);
}

TEST_CASE("map set check rejects inconsistent metadata") {
    SceneGenConfig config;
    const Snippet snip = make_snippet(70, config, 2);
    const SceneSpec scene = scene_of(snip, config);
    DpmSet set = make_gt_dpm_set(scene, snip, 0);
    set.time_invariant[1].time_index = 1; // should be the reference index 0
    CHECK_THROWS_AS(set.check(), MismatchError);
    set = make_gt_dpm_set(scene, snip, 0);
    set.reference_time_index = 5;
    CHECK_THROWS_AS(set.check(), ConfigError);
    set = make_gt_dpm_set(scene, snip, 0);
    set.time_variant[0].viewpoint_index = 1;
    CHECK_THROWS_AS(set.check(), MismatchError);
}
