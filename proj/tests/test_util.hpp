#pragma once

#include <Eigen/Geometry>
#include <filesystem>
#include <random>
#include <string>

#include "ac3d/camera_geometry.hpp"

namespace ac3d::testing {

/// Fresh scratch directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static std::mt19937_64 rng(std::random_device{}());
    path_ = std::filesystem::temp_directory_path() / ("ac3d_" + tag + "_" + std::to_string(rng()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

inline Eigen::Matrix3d random_rotation(std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  Eigen::Quaterniond q(n(rng), n(rng), n(rng), n(rng));
  return q.normalized().toRotationMatrix();
}

inline geometry::Extrinsics random_extrinsics(std::mt19937_64& rng, double spread = 2.0) {
  std::uniform_real_distribution<double> u(-spread, spread);
  geometry::Extrinsics e;
  e.rotation = random_rotation(rng);
  e.translation = Eigen::Vector3d(u(rng), u(rng), u(rng));
  return e;
}

inline geometry::Intrinsics random_intrinsics(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> f(0.5, 2.0), c(0.3, 0.7);
  return {f(rng), f(rng), c(rng), c(rng)};
}

inline geometry::CameraTrajectory random_trajectory(std::mt19937_64& rng, std::size_t frames) {
  geometry::CameraTrajectory traj;
  for (std::size_t f = 0; f < frames; ++f)
    traj.frames.push_back({random_intrinsics(rng), random_extrinsics(rng), static_cast<double>(f)});
  return traj;
}

}  // namespace ac3d::testing
