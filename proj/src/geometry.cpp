#include "vdpm/geometry.hpp"

#include <cmath>
#include <string>

namespace vdpm {

Rigid compose(const Rigid& a, const Rigid& b) {
    return Rigid(a.rotation() * b.rotation(),
                 a.rotation() * b.translation() + a.translation());
}

Rigid invert(const Rigid& T) {
    const Eigen::Quaterniond qi = T.rotation().conjugate();
    return Rigid(qi, -(qi * T.translation()));
}

Similarity compose(const Similarity& a, const Similarity& b) {
    // a(b(p)) = s_a R_a (s_b R_b p + t_b) + t_a.
    const double s = a.scale() * b.scale();
    const Eigen::Quaterniond q = a.rigid().rotation() * b.rigid().rotation();
    const Eigen::Vector3d t =
        a.scale() * (a.rigid().rotation() * b.rigid().translation()) + a.rigid().translation();
    return Similarity(s, Rigid(q, t));
}

Similarity invert(const Similarity& S) {
    const double si = 1.0 / S.scale();
    const Rigid ri = invert(S.rigid());
    return Similarity(si, Rigid(ri.rotation(), si * ri.translation()));
}

Intrinsics::Intrinsics(double fx_, double fy_, double cx_, double cy_, int w, int h)
    : fx(fx_), fy(fy_), cx(cx_), cy(cy_), width(w), height(h) {
    if (!(fx > 0.0) || !(fy > 0.0))
        throw ConfigError("intrinsics: focal lengths must be positive");
    if (!(cx >= 0.0 && cx < width) || !(cy >= 0.0 && cy < height))
        throw ConfigError("intrinsics: principal point outside image");
}

Intrinsics Intrinsics::from_fov(double fov_x, int w, int h) {
    if (!(fov_x > 0.0) || !(fov_x < M_PI))
        throw ConfigError("intrinsics: fov must be in (0, pi)");
    const double f = 0.5 * w / std::tan(0.5 * fov_x);
    return Intrinsics(f, f, 0.5 * (w - 1), 0.5 * (h - 1), w, h);
}

double Intrinsics::fov_x() const { return 2.0 * std::atan2(0.5 * width, fx); }

std::vector<Projection> project(const Intrinsics& cam, const Rigid& world_to_cam,
                                const std::vector<Eigen::Vector3d>& pts_world) {
    std::vector<Projection> out(pts_world.size());
    for (size_t i = 0; i < pts_world.size(); ++i) {
        const Eigen::Vector3d q = world_to_cam(pts_world[i]);
        Projection& pr = out[i];
        pr.depth = q.z();
        if (q.z() <= kNearPlane) {
            pr.valid = false;
            continue;
        }
        pr.pixel.x() = cam.fx * q.x() / q.z() + cam.cx;
        pr.pixel.y() = cam.fy * q.y() / q.z() + cam.cy;
        pr.valid = true;
    }
    return out;
}

PointGrid unproject(const Intrinsics& cam, const Rigid& world_to_cam,
                    const std::vector<double>& depth, int height, int width) {
    if (depth.size() != static_cast<size_t>(height) * width)
        throw ShapeError("unproject: depth map has " + std::to_string(depth.size()) +
                         " entries, expected " + std::to_string(height) + "x" +
                         std::to_string(width));
    const Rigid cam_to_world = invert(world_to_cam);
    PointGrid grid(height, width);
    for (int r = 0; r < height; ++r) {
        for (int c = 0; c < width; ++c) {
            const size_t idx = grid.at(r, c);
            const double d = depth[idx];
            if (!(d > 0.0) || !std::isfinite(d)) continue;
            const Eigen::Vector3d ray((c - cam.cx) / cam.fx, (r - cam.cy) / cam.fy, 1.0);
            grid.points[idx] = cam_to_world(d * ray);
            grid.valid[idx] = 1;
        }
    }
    return grid;
}

Similarity umeyama_align(const std::vector<Eigen::Vector3d>& src,
                         const std::vector<Eigen::Vector3d>& dst, bool with_scale) {
    const size_t n = src.size();
    if (n != dst.size())
        throw ShapeError("umeyama_align: " + std::to_string(n) + " source vs " +
                         std::to_string(dst.size()) + " destination points");
    if (n < 3)
        throw DegenerateError("umeyama_align: need at least 3 correspondences, got " +
                              std::to_string(n));

    Eigen::Vector3d mu_src = Eigen::Vector3d::Zero();
    Eigen::Vector3d mu_dst = Eigen::Vector3d::Zero();
    for (size_t i = 0; i < n; ++i) {
        mu_src += src[i];
        mu_dst += dst[i];
    }
    mu_src /= static_cast<double>(n);
    mu_dst /= static_cast<double>(n);

    Eigen::Matrix3d sigma = Eigen::Matrix3d::Zero();
    double var_src = 0.0;
    for (size_t i = 0; i < n; ++i) {
        const Eigen::Vector3d ds = src[i] - mu_src;
        const Eigen::Vector3d dd = dst[i] - mu_dst;
        sigma += dd * ds.transpose();
        var_src += ds.squaredNorm();
    }
    sigma /= static_cast<double>(n);
    var_src /= static_cast<double>(n);
    if (!(var_src > 0.0))
        throw DegenerateError("umeyama_align: source points are coincident");

    Eigen::JacobiSVD<Eigen::Matrix3d> svd(sigma, Eigen::ComputeFullU | Eigen::ComputeFullV);
    const Eigen::Vector3d d = svd.singularValues();
    // Rotation is only determined when the correspondences span at least a
    // plane, i.e. the cross-covariance has rank >= 2.
    if (!(d(1) > 1e-12 * std::max(d(0), 1e-300)))
        throw DegenerateError("umeyama_align: rank-deficient covariance (collinear points)");

    Eigen::Vector3d s_diag = Eigen::Vector3d::Ones();
    if (svd.matrixU().determinant() * svd.matrixV().determinant() < 0.0) s_diag(2) = -1.0;

    const Eigen::Matrix3d R =
        svd.matrixU() * s_diag.asDiagonal() * svd.matrixV().transpose();
    const double scale = with_scale ? d.dot(s_diag) / var_src : 1.0;
    if (!(scale > 0.0))
        throw DegenerateError("umeyama_align: non-positive recovered scale");
    const Eigen::Vector3d t = mu_dst - scale * (R * mu_src);
    return Similarity(scale, Rigid(Eigen::Quaterniond(R), t));
}

double rotation_angle_rad(const Rigid& T) {
    const Eigen::Quaterniond& q = T.rotation();
    const double vec = std::sqrt(q.x() * q.x() + q.y() * q.y() + q.z() * q.z());
    return 2.0 * std::atan2(vec, std::abs(q.w()));
}

Rigid look_at(const Eigen::Vector3d& eye, const Eigen::Vector3d& target,
              const Eigen::Vector3d& up) {
    const Eigen::Vector3d fwd = target - eye;
    if (fwd.norm() < 1e-12)
        throw DegenerateError("look_at: eye and target coincide");
    const Eigen::Vector3d z = fwd.normalized();
    Eigen::Vector3d x = z.cross(up);
    if (x.norm() < 1e-9)
        throw DegenerateError("look_at: view direction parallel to up");
    x.normalize();
    const Eigen::Vector3d y = z.cross(x);
    Eigen::Matrix3d r;
    r.col(0) = x;
    r.col(1) = y;
    r.col(2) = z;
    return Rigid::from_matrix(r, eye);
}

} // namespace vdpm
