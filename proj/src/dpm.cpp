#include "vdpm/dpm.hpp"

#include <cmath>
#include <limits>
#include <string>

namespace vdpm {

PointMap PointMap::from_grid(const PointGrid& grid, int src, int time, int viewpoint) {
    PointMap map(grid.height, grid.width, src, time, viewpoint);
    map.points = grid.points;
    map.valid = grid.valid;
    return map;
}

void PointMap::check() const {
    const size_t n = size();
    if (points.size() != n || valid.size() != n || confidence.size() != n)
        throw ShapeError("point map: buffer sizes disagree with " + std::to_string(height) +
                         "x" + std::to_string(width) + " grid");
    for (size_t i = 0; i < n; ++i)
        if (valid[i] && !(confidence[i] > 0.0))
            throw DegenerateError("point map: non-positive confidence on a valid pixel");
}

void DpmSet::check() const {
    const int n = frame_count();
    if (n < 1) throw ConfigError("map set: need at least one frame");
    if (reference_time_index < 0 || reference_time_index >= n)
        throw ConfigError("map set: reference time index out of range");
    if (static_cast<int>(time_variant.size()) != n ||
        static_cast<int>(time_invariant.size()) != n)
        throw ShapeError("map set: expected " + std::to_string(n) + " maps per set");
    for (int i = 0; i < n; ++i) {
        time_variant[i].check();
        time_invariant[i].check();
        if (time_variant[i].source_frame != i || time_variant[i].time_index != i)
            throw MismatchError("map set: time-variant entry " + std::to_string(i) +
                                " has wrong indices");
        if (time_invariant[i].source_frame != i ||
            time_invariant[i].time_index != reference_time_index)
            throw MismatchError("map set: time-invariant entry " + std::to_string(i) +
                                " has wrong indices");
        if (time_variant[i].viewpoint_index != 0 || time_invariant[i].viewpoint_index != 0)
            throw MismatchError("map set: all maps must use viewpoint 0");
    }
}

FlowGrid scene_flow(const PointMap& a, const PointMap& b) {
    if (a.source_frame != b.source_frame || a.viewpoint_index != b.viewpoint_index)
        throw MismatchError("scene_flow: maps must share source frame and viewpoint");
    if (a.height != b.height || a.width != b.width)
        throw ShapeError("scene_flow: grid shapes differ");
    FlowGrid out;
    out.height = a.height;
    out.width = a.width;
    out.flow.assign(a.size(), Eigen::Vector3d::Zero());
    out.valid.assign(a.size(), 0);
    for (size_t i = 0; i < a.size(); ++i) {
        if (!a.valid[i] || !b.valid[i]) continue;
        out.flow[i] = b.points[i] - a.points[i];
        out.valid[i] = 1;
    }
    return out;
}

std::vector<std::pair<size_t, size_t>> correspond(const PointMap& a, const PointMap& b,
                                                  double eps) {
    if (a.time_index != b.time_index || a.viewpoint_index != b.viewpoint_index)
        throw MismatchError("correspond: maps must share time index and viewpoint");
    std::vector<size_t> b_valid;
    b_valid.reserve(b.size());
    for (size_t v = 0; v < b.size(); ++v)
        if (b.valid[v]) b_valid.push_back(v);

    std::vector<std::pair<size_t, size_t>> out;
    for (size_t u = 0; u < a.size(); ++u) {
        if (!a.valid[u]) continue;
        double best = std::numeric_limits<double>::infinity();
        size_t best_v = 0;
        bool found = false;
        for (const size_t v : b_valid) {
            const double d = (a.points[u] - b.points[v]).norm();
            if (d < best) {
                best = d;
                best_v = v;
                found = true;
            }
        }
        if (found && best <= eps) out.emplace_back(u, best_v);
    }
    return out;
}

double normalize_unit_mean_dist(std::vector<PointMap>& maps) {
    double sum = 0.0;
    size_t count = 0;
    for (const PointMap& m : maps) {
        for (size_t i = 0; i < m.size(); ++i) {
            if (!m.valid[i]) continue;
            sum += m.points[i].norm();
            ++count;
        }
    }
    if (count == 0) throw DegenerateError("normalize: no valid points in the set");
    const double scale = sum / static_cast<double>(count);
    if (!(scale > 0.0)) throw DegenerateError("normalize: all points at the origin");
    for (PointMap& m : maps)
        for (size_t i = 0; i < m.size(); ++i) m.points[i] /= scale;
    return scale;
}

double normalize_unit_mean_dist(DpmSet& set) {
    set.check();
    double sum = 0.0;
    size_t count = 0;
    auto accumulate = [&](const PointMap& m) {
        for (size_t i = 0; i < m.size(); ++i) {
            if (!m.valid[i]) continue;
            sum += m.points[i].norm();
            ++count;
        }
    };
    for (const PointMap& m : set.time_variant) accumulate(m);
    for (int i = 0; i < set.frame_count(); ++i)
        if (i != set.reference_time_index) accumulate(set.time_invariant[i]);
    if (count == 0) throw DegenerateError("normalize: no valid points in the set");
    const double scale = sum / static_cast<double>(count);
    if (!(scale > 0.0)) throw DegenerateError("normalize: all points at the origin");
    auto apply = [scale](PointMap& m) {
        for (size_t i = 0; i < m.size(); ++i) m.points[i] /= scale;
    };
    for (PointMap& m : set.time_variant) apply(m);
    for (PointMap& m : set.time_invariant) apply(m);
    return scale;
}

int count_distinct_maps(int num_frames) {
    if (num_frames < 1)
        throw ConfigError("count_distinct_maps: frame count must be >= 1, got " +
                          std::to_string(num_frames));
    return 2 * num_frames - 1;
}

FusedCloud fuse_at_reference_time(const DpmSet& set) {
    set.check();
    FusedCloud cloud;
    for (const PointMap& m : set.time_invariant) {
        for (size_t i = 0; i < m.size(); ++i) {
            if (!m.valid[i]) continue;
            cloud.points.push_back(m.points[i]);
            cloud.confidence.push_back(m.confidence[i]);
        }
    }
    return cloud;
}

} // namespace vdpm
