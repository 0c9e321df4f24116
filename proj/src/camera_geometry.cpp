#include "ac3d/camera_geometry.hpp"

#include <Eigen/Dense>
#include <Eigen/SVD>
#include <algorithm>
#include <cmath>
#include <numbers>

namespace ac3d::geometry {

void Intrinsics::validate() const {
  if (!(fx > 0.0) || !(fy > 0.0)) throw GeometryError("intrinsics: focal lengths must be positive");
  if (!(cx > 0.0 && cx < 1.0) || !(cy > 0.0 && cy < 1.0))
    throw GeometryError("intrinsics: principal point must lie inside (0, 1)");
}

Extrinsics Extrinsics::inverse() const {
  Extrinsics inv;
  inv.rotation = rotation.transpose();
  inv.translation = -inv.rotation * translation;
  return inv;
}

Extrinsics Extrinsics::operator*(const Extrinsics& rhs) const {
  Extrinsics out;
  out.rotation = rotation * rhs.rotation;
  out.translation = rotation * rhs.translation + translation;
  return out;
}

Eigen::Matrix3d project_to_rotation(const Eigen::Matrix3d& m) {
  Eigen::JacobiSVD<Eigen::Matrix3d> svd(m, Eigen::ComputeFullU | Eigen::ComputeFullV);
  return svd.matrixU() * svd.matrixV().transpose();
}

CameraTrajectory build_trajectory(const tensorio::TrajectoryFile& raw) {
  if (raw.frames.empty()) throw GeometryError("trajectory has no frames");
  CameraTrajectory traj;
  traj.frames.reserve(raw.frames.size());
  for (std::size_t f = 0; f < raw.frames.size(); ++f) {
    const auto& rec = raw.frames[f];
    const std::string where = "frame " + std::to_string(f) + ": ";
    CameraFrame frame;
    frame.timestamp = rec.timestamp;
    frame.intrinsics = {rec.fx, rec.fy, rec.cx, rec.cy};
    try {
      frame.intrinsics.validate();
    } catch (const GeometryError& e) {
      throw GeometryError(where + e.what());
    }

    Eigen::Matrix3d r;
    Eigen::Vector3d t;
    for (int row = 0; row < 3; ++row) {
      for (int col = 0; col < 3; ++col) r(row, col) = rec.extrinsic[row * 4 + col];
      t(row) = rec.extrinsic[row * 4 + 3];
    }
    if (r.determinant() < 0.0) throw GeometryError(where + "rotation is a reflection (det < 0)");
    const double drift = (r.transpose() * r - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff();
    if (drift > kMaxRotationDrift)
      throw GeometryError(where + "rotation drift " + std::to_string(drift) + " exceeds 1e-3");
    frame.extrinsics.rotation = drift > 0.0 ? project_to_rotation(r) : r;
    frame.extrinsics.translation = t;
    traj.frames.push_back(frame);
  }
  return traj;
}

tensorio::TrajectoryFile to_trajectory_file(const CameraTrajectory& traj, const std::string& source_id) {
  tensorio::TrajectoryFile file;
  file.source_id = source_id;
  for (const auto& frame : traj.frames) {
    tensorio::TrajectoryRecord rec;
    rec.timestamp = frame.timestamp;
    rec.fx = frame.intrinsics.fx;
    rec.fy = frame.intrinsics.fy;
    rec.cx = frame.intrinsics.cx;
    rec.cy = frame.intrinsics.cy;
    for (int row = 0; row < 3; ++row) {
      for (int col = 0; col < 3; ++col) rec.extrinsic[row * 4 + col] = frame.extrinsics.rotation(row, col);
      rec.extrinsic[row * 4 + 3] = frame.extrinsics.translation(row);
    }
    file.frames.push_back(rec);
  }
  return file;
}

CameraTrajectory normalize_to_first(const CameraTrajectory& traj) {
  if (traj.frames.empty()) throw GeometryError("trajectory has no frames");
  const Extrinsics first_inv = traj.frames.front().extrinsics.inverse();
  CameraTrajectory out = traj;
  for (auto& frame : out.frames) frame.extrinsics = frame.extrinsics * first_inv;
  out.frames.front().extrinsics = Extrinsics{};
  return out;
}

PluckerVolume plucker_volume(const CameraTrajectory& traj, std::size_t height, std::size_t width) {
  if (traj.frames.empty()) throw GeometryError("trajectory has no frames");
  if (height == 0 || width == 0) throw GeometryError("plucker_volume: empty image");
  PluckerVolume vol{Tensor({traj.size(), height, width, 6})};
  auto out = vol.values.data();
  std::size_t k = 0;
  for (const auto& frame : traj.frames) {
    const auto& intr = frame.intrinsics;
    const Eigen::Matrix3d cam_to_world = frame.extrinsics.rotation.transpose();
    const Eigen::Vector3d origin = frame.extrinsics.camera_center();
    for (std::size_t v = 0; v < height; ++v) {
      const double y = ((static_cast<double>(v) + 0.5) / static_cast<double>(height) - intr.cy) / intr.fy;
      for (std::size_t u = 0; u < width; ++u) {
        const double x = ((static_cast<double>(u) + 0.5) / static_cast<double>(width) - intr.cx) / intr.fx;
        const Eigen::Vector3d d = (cam_to_world * Eigen::Vector3d(x, y, 1.0)).normalized();
        const Eigen::Vector3d m = origin.cross(d);
        for (int c = 0; c < 3; ++c) out[k + c] = static_cast<float>(d(c));
        for (int c = 0; c < 3; ++c) out[k + 3 + c] = static_cast<float>(m(c));
        k += 6;
      }
    }
  }
  return vol;
}

Eigen::Matrix3d rotation_x(double a) {
  Eigen::Matrix3d r;
  r << 1, 0, 0, 0, std::cos(a), -std::sin(a), 0, std::sin(a), std::cos(a);
  return r;
}

Eigen::Matrix3d rotation_y(double a) {
  Eigen::Matrix3d r;
  r << std::cos(a), 0, std::sin(a), 0, 1, 0, -std::sin(a), 0, std::cos(a);
  return r;
}

Eigen::Matrix3d rotation_z(double a) {
  Eigen::Matrix3d r;
  r << std::cos(a), -std::sin(a), 0, std::sin(a), std::cos(a), 0, 0, 0, 1;
  return r;
}

Eigen::Matrix3d compose_euler(double pitch, double yaw, double roll) {
  return rotation_z(roll) * rotation_y(yaw) * rotation_x(pitch);
}

namespace {

double wrap_angle(double a) {
  // atan2 can return exactly -pi; the target range is (-pi, pi].
  return a <= -std::numbers::pi ? a + 2.0 * std::numbers::pi : a;
}

}  // namespace

Eigen::Vector3d decompose_euler(const Eigen::Matrix3d& r) {
  const double cos_yaw = std::hypot(r(0, 0), r(1, 0));
  if (cos_yaw < 1e-6) throw GeometryError("euler decomposition is degenerate near gimbal lock");
  const double yaw = std::atan2(-r(2, 0), cos_yaw);
  const double pitch = std::atan2(r(2, 1), r(2, 2));
  const double roll = std::atan2(r(1, 0), r(0, 0));
  return {wrap_angle(pitch), wrap_angle(yaw), wrap_angle(roll)};
}

EulerPoseTargets euler_targets(const CameraTrajectory& traj) {
  const CameraTrajectory rel = normalize_to_first(traj);
  EulerPoseTargets targets{Tensor({rel.size(), 6})};
  for (std::size_t f = 0; f < rel.size(); ++f) {
    const auto& e = rel.frames[f].extrinsics;
    const Eigen::Vector3d angles = f == 0 ? Eigen::Vector3d::Zero() : decompose_euler(e.rotation);
    for (int i = 0; i < 3; ++i) {
      targets.values.at(f, i) = static_cast<float>(angles(i));
      targets.values.at(f, 3 + i) = static_cast<float>(e.translation(i));
    }
  }
  return targets;
}

CameraTrajectory trajectory_from_targets(std::span<const double> rows, std::size_t frames,
                                         const Intrinsics& intrinsics) {
  if (rows.size() != frames * 6) throw GeometryError("pose rows must have 6 entries per frame");
  CameraTrajectory traj;
  for (std::size_t f = 0; f < frames; ++f) {
    const double* p = rows.data() + 6 * f;
    CameraFrame frame;
    frame.intrinsics = intrinsics;
    frame.timestamp = static_cast<double>(f);
    frame.extrinsics.rotation = compose_euler(p[0], p[1], p[2]);
    frame.extrinsics.translation = Eigen::Vector3d(p[3], p[4], p[5]);
    traj.frames.push_back(frame);
  }
  return traj;
}

double rotation_error(const CameraTrajectory& a, const CameraTrajectory& b) {
  if (a.size() != b.size() || a.size() == 0)
    throw GeometryError("rotation_error: trajectories differ in length");
  double total = 0.0;
  for (std::size_t f = 0; f < a.size(); ++f) {
    const Eigen::Matrix3d rel = a.frames[f].extrinsics.rotation * b.frames[f].extrinsics.rotation.transpose();
    total += std::acos(std::clamp((rel.trace() - 1.0) / 2.0, -1.0, 1.0));
  }
  return total / static_cast<double>(a.size());
}

namespace {

std::vector<Eigen::Vector3d> max_norm_scaled(const CameraTrajectory& traj) {
  std::vector<Eigen::Vector3d> ts;
  double max_norm = 0.0;
  for (const auto& frame : traj.frames) {
    ts.push_back(frame.extrinsics.translation);
    max_norm = std::max(max_norm, ts.back().norm());
  }
  if (max_norm >= 1e-8)
    for (auto& t : ts) t /= max_norm;
  return ts;
}

}  // namespace

double translation_error(const CameraTrajectory& a, const CameraTrajectory& b) {
  if (a.size() != b.size() || a.size() == 0)
    throw GeometryError("translation_error: trajectories differ in length");
  const auto ta = max_norm_scaled(a);
  const auto tb = max_norm_scaled(b);
  double total = 0.0;
  for (std::size_t f = 0; f < ta.size(); ++f) total += (ta[f] - tb[f]).norm();
  return total / static_cast<double>(ta.size());
}

}  // namespace ac3d::geometry
