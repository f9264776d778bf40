#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "vdpm/geometry.hpp"

namespace vdpm {

/// Grid of 3D points attached to the pixels of source frame i, expressing
/// where each observed surface point sits at time index j, in the coordinate
/// frame of viewpoint k. Points stay defined even when the surface moves out
/// of view at time j; validity only records whether the pixel observed a
/// surface in frame i.
struct PointMap {
    int height = 0, width = 0;
    std::vector<Eigen::Vector3d> points;
    std::vector<uint8_t> valid;
    std::vector<double> confidence;
    int source_frame = 0;
    int time_index = 0;
    int viewpoint_index = 0;

    PointMap() = default;
    PointMap(int h, int w, int src, int time, int viewpoint = 0)
        : height(h), width(w),
          points(static_cast<size_t>(h) * w, Eigen::Vector3d::Zero()),
          valid(static_cast<size_t>(h) * w, 0),
          confidence(static_cast<size_t>(h) * w, 1.0),
          source_frame(src), time_index(time), viewpoint_index(viewpoint) {}

    /// Wraps a geometric point grid; confidence is 1 (exact reference data).
    static PointMap from_grid(const PointGrid& grid, int src, int time, int viewpoint = 0);

    size_t at(int row, int col) const {
        return static_cast<size_t>(row) * width + col;
    }
    size_t size() const { return static_cast<size_t>(height) * width; }

    /// Throws if the buffers disagree with the grid shape or confidence is
    /// non-positive on a valid pixel.
    void check() const;
};

/// The maps a model predicts for an N-frame snippet: the time-variant set
/// (map i at its own time t_i) and the time-invariant set (every map at the
/// shared reference time t_j). Entry j appears in both sets and denotes the
/// same map, so the distinct count is 2N-1.
struct DpmSet {
    std::vector<double> timestamps;
    int reference_time_index = 0;
    std::vector<PointMap> time_variant;
    std::vector<PointMap> time_invariant;

    int frame_count() const { return static_cast<int>(timestamps.size()); }
    void check() const;
};

struct FlowGrid {
    int height = 0, width = 0;
    std::vector<Eigen::Vector3d> flow;
    std::vector<uint8_t> valid;
};

/// Per-pixel motion between two maps that share pixels (same source frame and
/// viewpoint): flow(u) = b(u) - a(u). Invalid pixels carry zero flow.
FlowGrid scene_flow(const PointMap& a, const PointMap& b);

/// Pixel pairs (u, v) whose points coincide within eps, both in linear
/// row-major indices. Maps must share time index and viewpoint, since only
/// then does 3D proximity mean "same surface point". Each u takes its nearest
/// v; exact ties go to the smaller v.
std::vector<std::pair<size_t, size_t>> correspond(const PointMap& a, const PointMap& b,
                                                  double eps);

/// Joint rescale of all maps so the mean distance of valid points to the
/// origin is 1. Returns the applied scale (divide by it to normalize,
/// multiply to undo).
double normalize_unit_mean_dist(std::vector<PointMap>& maps);

/// DpmSet variant: the scale statistic counts each distinct map once (the
/// duplicated reference entry contributes a single time).
double normalize_unit_mean_dist(DpmSet& set);

int count_distinct_maps(int num_frames);

struct FusedCloud {
    std::vector<Eigen::Vector3d> points;
    std::vector<double> confidence;
};

/// All valid points of the time-invariant set concatenated: a full scene
/// snapshot at the reference time, seen from viewpoint 0.
FusedCloud fuse_at_reference_time(const DpmSet& set);

} // namespace vdpm
