#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <vector>

#include "vdpm/errors.hpp"

namespace vdpm {

/// SE(3) transform stored as unit quaternion + translation. The quaternion is
/// kept normalized with w >= 0 so every rotation has a unique representative.
class Rigid {
public:
    Rigid() : q_(1.0, 0.0, 0.0, 0.0), t_(Eigen::Vector3d::Zero()) {}

    Rigid(const Eigen::Quaterniond& q, const Eigen::Vector3d& t) : q_(q), t_(t) {
        canonicalize();
    }

    static Rigid from_matrix(const Eigen::Matrix3d& r, const Eigen::Vector3d& t) {
        return Rigid(Eigen::Quaterniond(r), t);
    }

    const Eigen::Quaterniond& rotation() const { return q_; }
    const Eigen::Vector3d& translation() const { return t_; }
    Eigen::Matrix3d rotation_matrix() const { return q_.toRotationMatrix(); }

    /// Quaternion components in (w, x, y, z) order.
    Eigen::Vector4d quat_wxyz() const {
        return Eigen::Vector4d(q_.w(), q_.x(), q_.y(), q_.z());
    }

    Eigen::Vector3d operator()(const Eigen::Vector3d& p) const { return q_ * p + t_; }

private:
    void canonicalize() {
        q_.normalize();
        if (q_.w() < 0.0) q_.coeffs() = -q_.coeffs();
    }

    Eigen::Quaterniond q_;
    Eigen::Vector3d t_;
};

Rigid compose(const Rigid& a, const Rigid& b);
Rigid invert(const Rigid& T);

/// Sim(3): uniform positive scale followed by a rigid transform.
class Similarity {
public:
    Similarity() : scale_(1.0) {}

    Similarity(double scale, const Rigid& rigid) : scale_(scale), rigid_(rigid) {
        if (!(scale_ > 0.0))
            throw DegenerateError("similarity scale must be positive");
    }

    double scale() const { return scale_; }
    const Rigid& rigid() const { return rigid_; }

    Eigen::Vector3d operator()(const Eigen::Vector3d& p) const {
        return rigid_(scale_ * p);
    }

private:
    double scale_;
    Rigid rigid_;
};

Similarity compose(const Similarity& a, const Similarity& b);
Similarity invert(const Similarity& S);

/// Pinhole camera. Pixel coordinates index sample centers, so the principal
/// point of a centered camera is ((w-1)/2, (h-1)/2).
struct Intrinsics {
    double fx = 1.0, fy = 1.0;
    double cx = 0.0, cy = 0.0;
    int width = 1, height = 1;

    Intrinsics() = default;
    Intrinsics(double fx_, double fy_, double cx_, double cy_, int w, int h);

    /// Centered camera from a horizontal field of view in radians.
    static Intrinsics from_fov(double fov_x, int w, int h);

    double fov_x() const;
};

struct Projection {
    Eigen::Vector2d pixel = Eigen::Vector2d::Zero();
    double depth = 0.0;
    bool valid = false;
};

/// Grid of 3D points with validity; geometry-level carrier that higher layers
/// wrap with indexing metadata.
struct PointGrid {
    int height = 0, width = 0;
    std::vector<Eigen::Vector3d> points;
    std::vector<uint8_t> valid;

    PointGrid() = default;
    PointGrid(int h, int w)
        : height(h), width(w),
          points(static_cast<size_t>(h) * w, Eigen::Vector3d::Zero()),
          valid(static_cast<size_t>(h) * w, 0) {}

    size_t at(int row, int col) const {
        return static_cast<size_t>(row) * width + col;
    }
};

/// Points behind or within the near plane get the invalid flag, not an error.
inline constexpr double kNearPlane = 1e-4;

std::vector<Projection> project(const Intrinsics& cam, const Rigid& world_to_cam,
                                const std::vector<Eigen::Vector3d>& pts_world);

/// Depth map to world-frame points; non-positive depth marks the pixel invalid.
PointGrid unproject(const Intrinsics& cam, const Rigid& world_to_cam,
                    const std::vector<double>& depth, int height, int width);

/// Least-squares Similarity minimizing sum ||S(src_i) - dst_i||^2 (closed-form
/// SVD solution with determinant sign correction). Needs >= 3 correspondences
/// spanning at least a plane.
Similarity umeyama_align(const std::vector<Eigen::Vector3d>& src,
                         const std::vector<Eigen::Vector3d>& dst, bool with_scale);

/// Rotation angle in radians, numerically stable near identity.
double rotation_angle_rad(const Rigid& T);

/// Camera-to-world pose looking from eye toward target, x right and y down in
/// the image, +z forward.
Rigid look_at(const Eigen::Vector3d& eye, const Eigen::Vector3d& target,
              const Eigen::Vector3d& up);

} // namespace vdpm
