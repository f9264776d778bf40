#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "vdpm/geometry.hpp"
#include "vdpm/rng.hpp"

using namespace vdpm;

namespace {

Rigid random_rigid(Rng& rng) {
    Eigen::Quaterniond q(rng.normal(), rng.normal(), rng.normal(), rng.normal());
    return Rigid(q, Eigen::Vector3d(rng.uniform(-2, 2), rng.uniform(-2, 2), rng.uniform(-2, 2)));
}

Eigen::Vector3d random_point(Rng& rng, double extent = 2.0) {
    return Eigen::Vector3d(rng.uniform(-extent, extent), rng.uniform(-extent, extent),
                           rng.uniform(-extent, extent));
}

Similarity random_similarity(Rng& rng) {
    return Similarity(std::exp(rng.uniform(-1.0, 1.0)), random_rigid(rng));
}

} // namespace

TEST_CASE("rigid quaternion stays unit with w >= 0") {
    Rng rng(11);
    for (int i = 0; i < 100; ++i) {
        const Rigid T = random_rigid(rng);
        CHECK(std::abs(T.rotation().norm() - 1.0) < 1e-9);
        CHECK(T.rotation().w() >= 0.0);
        const Rigid I = invert(T);
        CHECK(std::abs(I.rotation().norm() - 1.0) < 1e-9);
        CHECK(I.rotation().w() >= 0.0);
    }
}

TEST_CASE("compose with identity and with inverse") {
    Rng rng(12);
    const Rigid T = random_rigid(rng);
    const Rigid id;

    const Rigid left = compose(id, T);
    CHECK((left.translation() - T.translation()).norm() < 1e-12);
    CHECK(std::abs(std::abs(left.rotation().dot(T.rotation())) - 1.0) < 1e-12);

    const Rigid round = compose(T, invert(T));
    for (int i = 0; i < 100; ++i) {
        const Eigen::Vector3d p = random_point(rng);
        CHECK((round(p) - p).norm() < 1e-9);
    }
}

TEST_CASE("compose equals sequential application") {
    Rng rng(13);
    const Rigid a = random_rigid(rng);
    const Rigid b = random_rigid(rng);
    const Rigid ab = compose(a, b);
    for (int i = 0; i < 100; ++i) {
        const Eigen::Vector3d p = random_point(rng);
        CHECK((ab(p) - a(b(p))).norm() < 1e-9);
    }
}

TEST_CASE("transform identity and pure translation") {
    const Rigid id;
    const Eigen::Vector3d p(0.3, -1.2, 4.0);
    CHECK((id(p) - p).norm() == 0.0);

    const Rigid trans(Eigen::Quaterniond::Identity(), Eigen::Vector3d(1, 2, 3));
    CHECK((trans(Eigen::Vector3d::Zero()) - Eigen::Vector3d(1, 2, 3)).norm() == 0.0);
}

TEST_CASE("similarity: scale 2 with 90 degree z rotation sends (1,0,0) to (0,2,0)") {
    const Eigen::Quaterniond q(Eigen::AngleAxisd(M_PI / 2.0, Eigen::Vector3d::UnitZ()));
    const Similarity S(2.0, Rigid(q, Eigen::Vector3d::Zero()));
    const Eigen::Vector3d out = S(Eigen::Vector3d(1, 0, 0));
    CHECK((out - Eigen::Vector3d(0, 2, 0)).norm() < 1e-12);
}

TEST_CASE("similarity inverse and composition") {
    Rng rng(14);
    for (int i = 0; i < 50; ++i) {
        const Similarity S = random_similarity(rng);
        const Similarity round = compose(invert(S), S);
        const Similarity both = compose(S, random_similarity(rng));
        CHECK(both.scale() > 0.0);
        for (int k = 0; k < 5; ++k) {
            const Eigen::Vector3d p = random_point(rng);
            CHECK((round(p) - p).norm() < 1e-9);
        }
    }
    CHECK_THROWS_AS(Similarity(0.0, Rigid()), DegenerateError);
    CHECK_THROWS_AS(Similarity(-1.0, Rigid()), DegenerateError);
}

TEST_CASE("similarity composition equals sequential application") {
    Rng rng(15);
    const Similarity a = random_similarity(rng);
    const Similarity b = random_similarity(rng);
    const Similarity ab = compose(a, b);
    for (int i = 0; i < 100; ++i) {
        const Eigen::Vector3d p = random_point(rng);
        CHECK((ab(p) - a(b(p))).norm() < 1e-9);
    }
}

TEST_CASE("project puts an optical-axis point at the principal point") {
    const Intrinsics cam(40.0, 41.0, 15.5, 16.5, 32, 34);
    const Rigid pose; // camera at origin looking down +z
    const auto out = project(cam, pose, {Eigen::Vector3d(0, 0, 3.0)});
    REQUIRE(out.size() == 1);
    CHECK(out[0].valid);
    CHECK(out[0].depth == doctest::Approx(3.0));
    CHECK(out[0].pixel.x() == doctest::Approx(15.5));
    CHECK(out[0].pixel.y() == doctest::Approx(16.5));
}

TEST_CASE("project flags non-positive and near-plane depths invalid") {
    const Intrinsics cam(40.0, 40.0, 15.5, 15.5, 32, 32);
    const Rigid pose;
    const auto out = project(cam, pose,
                             {Eigen::Vector3d(0, 0, 0), Eigen::Vector3d(1, 1, -2),
                              Eigen::Vector3d(0, 0, 5e-5), Eigen::Vector3d(0, 0, 2e-4)});
    CHECK_FALSE(out[0].valid);
    CHECK_FALSE(out[1].valid);
    CHECK_FALSE(out[2].valid); // inside the near plane
    CHECK(out[3].valid);
}

TEST_CASE("unproject then project round-trips pixel centers and depths") {
    Rng rng(15);
    const Intrinsics cam = Intrinsics::from_fov(70.0 * M_PI / 180.0, 16, 12);
    const Rigid pose = random_rigid(rng);
    std::vector<double> depth(16 * 12);
    for (double& d : depth) d = rng.uniform(0.5, 6.0);
    depth[5] = -1.0; // invalid pixel
    depth[6] = 0.0;  // invalid pixel

    const PointGrid grid = unproject(cam, pose, depth, 12, 16);
    CHECK_FALSE(grid.valid[5]);
    CHECK_FALSE(grid.valid[6]);

    const auto proj = project(cam, pose, grid.points);
    for (int r = 0; r < 12; ++r) {
        for (int c = 0; c < 16; ++c) {
            const size_t i = grid.at(r, c);
            if (!grid.valid[i]) continue;
            REQUIRE(proj[i].valid);
            CHECK(std::abs(proj[i].pixel.x() - c) < 1e-6);
            CHECK(std::abs(proj[i].pixel.y() - r) < 1e-6);
            CHECK(std::abs(proj[i].depth - depth[i]) < 1e-6);
        }
    }
}

TEST_CASE("unproject rejects a depth buffer of the wrong size") {
    const Intrinsics cam(40, 40, 7.5, 7.5, 16, 16);
    CHECK_THROWS_AS(unproject(cam, Rigid(), std::vector<double>(10), 16, 16), ShapeError);
}

TEST_CASE("umeyama recovers identity from equal point sets") {
    Rng rng(16);
    std::vector<Eigen::Vector3d> pts;
    for (int i = 0; i < 20; ++i) pts.push_back(random_point(rng));
    const Similarity S = umeyama_align(pts, pts, true);
    CHECK(S.scale() == doctest::Approx(1.0).epsilon(1e-9));
    CHECK(rotation_angle_rad(S.rigid()) < 1e-9);
    CHECK(S.rigid().translation().norm() < 1e-9);
}

TEST_CASE("umeyama recovers a known similarity within 1e-6") {
    Rng rng(17);
    for (int trial = 0; trial < 20; ++trial) {
        const Similarity gt = random_similarity(rng);
        std::vector<Eigen::Vector3d> src, dst;
        for (int i = 0; i < 30; ++i) {
            src.push_back(random_point(rng));
            dst.push_back(gt(src.back()));
        }
        const Similarity rec = umeyama_align(src, dst, true);
        CHECK(std::abs(rec.scale() - gt.scale()) < 1e-6 * gt.scale());
        for (int i = 0; i < 30; ++i) CHECK((rec(src[i]) - dst[i]).norm() < 1e-6);
    }
}

TEST_CASE("umeyama without scale freezes scale at 1") {
    Rng rng(18);
    const Similarity gt(2.0, random_rigid(rng));
    std::vector<Eigen::Vector3d> src, dst;
    for (int i = 0; i < 25; ++i) {
        src.push_back(random_point(rng));
        dst.push_back(gt(src.back()));
    }
    const Similarity rec = umeyama_align(src, dst, false);
    CHECK(rec.scale() == 1.0);
}

TEST_CASE("umeyama rejects degenerate input") {
    std::vector<Eigen::Vector3d> two = {{0, 0, 0}, {1, 0, 0}};
    CHECK_THROWS_AS(umeyama_align(two, two, true), DegenerateError);

    std::vector<Eigen::Vector3d> line, line_dst;
    for (int i = 0; i < 10; ++i) {
        line.emplace_back(i, 2.0 * i, -i);
        line_dst.emplace_back(i + 1, 2.0 * i, -i);
    }
    CHECK_THROWS_AS(umeyama_align(line, line_dst, true), DegenerateError);

    std::vector<Eigen::Vector3d> same(5, Eigen::Vector3d(1, 2, 3));
    CHECK_THROWS_AS(umeyama_align(same, same, true), DegenerateError);

    std::vector<Eigen::Vector3d> four(4, Eigen::Vector3d::Zero());
    CHECK_THROWS_AS(umeyama_align(four, std::vector<Eigen::Vector3d>(3), true), ShapeError);
}

TEST_CASE("umeyama rotation determinant stays +1 under reflection-inducing noise") {
    Rng rng(19);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<Eigen::Vector3d> src, dst;
        for (int i = 0; i < 12; ++i) {
            src.push_back(random_point(rng));
            // Mirror + noise: the closest orthogonal map would be a
            // reflection without the sign correction.
            Eigen::Vector3d m = src.back();
            m.x() = -m.x();
            dst.push_back(m + 0.01 * random_point(rng));
        }
        const Similarity rec = umeyama_align(src, dst, true);
        CHECK(rec.rigid().rotation_matrix().determinant() == doctest::Approx(1.0).epsilon(1e-9));
    }
}

TEST_CASE("rotation angle is stable near identity and exact at 90 degrees") {
    const Eigen::Quaterniond tiny(Eigen::AngleAxisd(1e-8, Eigen::Vector3d::UnitX()));
    CHECK(rotation_angle_rad(Rigid(tiny, Eigen::Vector3d::Zero())) ==
          doctest::Approx(1e-8).epsilon(1e-6));
    const Eigen::Quaterniond quarter(Eigen::AngleAxisd(M_PI / 2, Eigen::Vector3d::UnitY()));
    CHECK(rotation_angle_rad(Rigid(quarter, Eigen::Vector3d::Zero())) ==
          doctest::Approx(M_PI / 2));
}

TEST_CASE("look_at places the target on the optical axis") {
    const Eigen::Vector3d eye(3, 2, 1), target(0.2, -0.1, 0.3);
    const Rigid c2w = look_at(eye, target, Eigen::Vector3d::UnitY());
    CHECK(std::abs(c2w.rotation_matrix().determinant() - 1.0) < 1e-9);

    const Rigid w2c = invert(c2w);
    const Eigen::Vector3d t_cam = w2c(target);
    CHECK(std::abs(t_cam.x()) < 1e-9);
    CHECK(std::abs(t_cam.y()) < 1e-9);
    CHECK(t_cam.z() == doctest::Approx((eye - target).norm()));
    CHECK((w2c(eye)).norm() < 1e-9);

    CHECK_THROWS_AS(look_at(eye, eye, Eigen::Vector3d::UnitY()), DegenerateError);
    CHECK_THROWS_AS(look_at(Eigen::Vector3d(0, 5, 0), Eigen::Vector3d::Zero(),
                            Eigen::Vector3d::UnitY()),
                    DegenerateError);
}

TEST_CASE("intrinsics validate their invariants") {
    CHECK_THROWS_AS(Intrinsics(0.0, 40.0, 10, 10, 32, 32), ConfigError);
    CHECK_THROWS_AS(Intrinsics(40.0, 40.0, 32.0, 10, 32, 32), ConfigError);
    CHECK_THROWS_AS(Intrinsics(40.0, 40.0, 10, -1.0, 32, 32), ConfigError);
    const Intrinsics cam = Intrinsics::from_fov(1.2, 64, 48);
    CHECK(cam.fov_x() == doctest::Approx(1.2));
    CHECK(cam.cx == doctest::Approx(31.5));
}
