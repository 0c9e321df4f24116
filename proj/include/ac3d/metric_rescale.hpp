#pragma once

#include <Eigen/Core>
#include <vector>

#include "ac3d/camera_geometry.hpp"
#include "ac3d/tensorio.hpp"

namespace ac3d::rescale {

struct DepthPair {
  double reconstruction = 0.0;  // d_c, arbitrary scene units
  double metric = 0.0;          // d_m, meters
};

/// Pairs pooled over frames. `frame_offsets` holds the start index of each
/// frame's group (size = frames + 1), so per-frame grouping survives pooling.
struct DepthPairSet {
  std::vector<DepthPair> pairs;
  std::vector<std::size_t> frame_offsets;

  void add_frame(std::span<const DepthPair> frame_pairs);
};

struct ScaleSolution {
  double lambda_hat = 1.0;
  double objective_value = 0.0;  // mean |lambda * d_c - d_m| over the pairs used
  std::size_t pair_count = 0;
};

enum class Weighting {
  kPooled,    // every pair counts equally
  kPerFrame,  // each frame's mean residual counts equally
};

class RescaleError : public DataError {
 public:
  using DataError::DataError;
};

/// Weighted median of `values` with nonnegative `weights`: the smallest value
/// whose cumulative weight reaches half the total (lower median on ties).
double weighted_median(std::span<const double> values, std::span<const double> weights);

/// Mean absolute residual of `lambda` under the given weighting.
double l1_objective(const DepthPairSet& set, double lambda, Weighting weighting = Weighting::kPooled);

/// Exact L1 minimizer: weighted median of d_m/d_c with weights d_c (scaled by
/// 1/frame size under kPerFrame). Non-finite or non-positive pairs are dropped.
ScaleSolution solve_scale(const DepthPairSet& set, Weighting weighting = Weighting::kPooled);

geometry::CameraTrajectory rescale_trajectory(const geometry::CameraTrajectory& traj, const ScaleSolution& sol);

/// Splats points (world coordinates) into an [H, W] depth map; 0 marks no hit.
Tensor render_sparse_depth(std::span<const Eigen::Vector3d> points, const geometry::CameraFrame& cam,
                           std::size_t height, std::size_t width);

/// Pairs every nonzero pixel of `sparse` with the matching metric depth.
std::vector<DepthPair> pair_depths(const Tensor& sparse, std::span<const float> metric);

}  // namespace ac3d::rescale
