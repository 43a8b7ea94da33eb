#pragma once

#include <cmath>
#include <stdexcept>
#include <utility>
#include <vector>

namespace ewip {

/// One piece of the reference: at t_end the reference equals x_target,
/// reached by a linear ramp from the previous segment's target.
struct TrajectorySegment {
  double t_start = 0.0;
  double t_end = 0.0;
  double x_target = 0.0;
};

struct ReferenceTrajectory {
  std::vector<TrajectorySegment> segments;
  double z_ref = 0.475;  ///< constant bob-height reference [m]

  /// Point-to-point task: hold the origin for 3 s, ramp to 2 m over the
  /// next 4 s, hold the destination for 3 s.
  static ReferenceTrajectory point_to_point(double z_reference = 0.475) {
    ReferenceTrajectory traj;
    traj.segments = {{0.0, 3.0, 0.0}, {3.0, 7.0, 2.0}, {7.0, 10.0, 2.0}};
    traj.z_ref = z_reference;
    return traj;
  }

  void validate() const {
    if (segments.empty()) throw std::invalid_argument("trajectory: no segments");
    double prev_end = segments.front().t_start;
    for (const auto& seg : segments) {
      if (!(seg.t_end > seg.t_start))
        throw std::invalid_argument("trajectory: segment must have positive duration");
      if (std::abs(seg.t_start - prev_end) > 1e-12)
        throw std::invalid_argument("trajectory: segments must be contiguous in time");
      prev_end = seg.t_end;
    }
  }

  double start_time() const { return segments.front().t_start; }
  double duration() const { return segments.back().t_end - segments.front().t_start; }

  /// Reference (x_ref, z_ref) at time t. Times past either end clamp to the
  /// boundary value.
  std::pair<double, double> at(double t) const {
    if (segments.empty()) throw std::invalid_argument("trajectory: no segments");
    if (t <= segments.front().t_start) return {segments.front().x_target, z_ref};
    double segment_start_value = segments.front().x_target;
    for (const auto& seg : segments) {
      if (t <= seg.t_end) {
        const double alpha = (t - seg.t_start) / (seg.t_end - seg.t_start);
        return {segment_start_value + alpha * (seg.x_target - segment_start_value), z_ref};
      }
      segment_start_value = seg.x_target;
    }
    return {segments.back().x_target, z_ref};
  }
};

inline std::pair<double, double> reference_at(double t, const ReferenceTrajectory& traj) {
  return traj.at(t);
}

}  // namespace ewip
