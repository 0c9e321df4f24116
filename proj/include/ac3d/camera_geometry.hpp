#pragma once

#include <Eigen/Core>
#include <vector>

#include "ac3d/error.hpp"
#include "ac3d/tensorio.hpp"

namespace ac3d::geometry {

/// Pinhole intrinsics normalized by image width (fx, cx) and height (fy, cy).
struct Intrinsics {
  double fx = 1.0;
  double fy = 1.0;
  double cx = 0.5;
  double cy = 0.5;

  void validate() const;
};

/// World-to-camera rigid transform: x_cam = rotation * x_world + translation.
struct Extrinsics {
  Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();
  Eigen::Vector3d translation = Eigen::Vector3d::Zero();

  Eigen::Vector3d camera_center() const { return -rotation.transpose() * translation; }
  Extrinsics inverse() const;
  Extrinsics operator*(const Extrinsics& rhs) const;
};

struct CameraFrame {
  Intrinsics intrinsics;
  Extrinsics extrinsics;
  double timestamp = 0.0;
};

struct CameraTrajectory {
  std::vector<CameraFrame> frames;

  std::size_t size() const { return frames.size(); }
};

/// Per-pixel Plücker rays, dims [F, H, W, 6] laid out as (d, o x d).
struct PluckerVolume {
  Tensor values;

  std::size_t frames() const { return values.dim(0); }
  std::size_t height() const { return values.dim(1); }
  std::size_t width() const { return values.dim(2); }
};

/// Relative pose targets, dims [F, 6] = (pitch, yaw, roll, tx, ty, tz).
struct EulerPoseTargets {
  Tensor values;
};

class GeometryError : public DataError {
 public:
  using DataError::DataError;
};

/// Largest rotation drift (max |R^T R - I| entry) repaired by projection.
inline constexpr double kMaxRotationDrift = 1e-3;

CameraTrajectory build_trajectory(const tensorio::TrajectoryFile& raw);
tensorio::TrajectoryFile to_trajectory_file(const CameraTrajectory& traj, const std::string& source_id);

/// Nearest orthonormal matrix in the Frobenius sense (U V^T of the SVD).
Eigen::Matrix3d project_to_rotation(const Eigen::Matrix3d& m);

CameraTrajectory normalize_to_first(const CameraTrajectory& traj);

PluckerVolume plucker_volume(const CameraTrajectory& traj, std::size_t height, std::size_t width);

Eigen::Matrix3d rotation_x(double angle);
Eigen::Matrix3d rotation_y(double angle);
Eigen::Matrix3d rotation_z(double angle);

/// R = Rz(roll) * Ry(yaw) * Rx(pitch).
Eigen::Matrix3d compose_euler(double pitch, double yaw, double roll);
/// Inverse of compose_euler; throws GeometryError near gimbal lock (|cos yaw| < 1e-6).
Eigen::Vector3d decompose_euler(const Eigen::Matrix3d& r);

EulerPoseTargets euler_targets(const CameraTrajectory& traj);

/// Rebuilds a trajectory from [F, 6] pose rows (as produced by euler_targets).
CameraTrajectory trajectory_from_targets(std::span<const double> rows, std::size_t frames,
                                         const Intrinsics& intrinsics = {});

double rotation_error(const CameraTrajectory& a, const CameraTrajectory& b);
double translation_error(const CameraTrajectory& a, const CameraTrajectory& b);

}  // namespace ac3d::geometry
