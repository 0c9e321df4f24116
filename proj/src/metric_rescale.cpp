#include "ac3d/metric_rescale.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace ac3d::rescale {

void DepthPairSet::add_frame(std::span<const DepthPair> frame_pairs) {
  if (frame_offsets.empty()) frame_offsets.push_back(pairs.size());
  pairs.insert(pairs.end(), frame_pairs.begin(), frame_pairs.end());
  frame_offsets.push_back(pairs.size());
}

double weighted_median(std::span<const double> values, std::span<const double> weights) {
  if (values.size() != weights.size() || values.empty())
    throw RescaleError("weighted_median: empty or mismatched input");
  std::vector<std::size_t> order(values.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return values[a] < values[b] || (values[a] == values[b] && a < b);
  });
  const double total = std::accumulate(weights.begin(), weights.end(), 0.0);
  if (!(total > 0.0)) throw RescaleError("weighted_median: total weight is zero");
  double cumulative = 0.0;
  for (std::size_t i : order) {
    cumulative += weights[i];
    if (cumulative >= 0.5 * total) return values[i];
  }
  return values[order.back()];
}

namespace {

bool usable(const DepthPair& p) {
  return std::isfinite(p.reconstruction) && std::isfinite(p.metric) && p.reconstruction > 0.0 && p.metric > 0.0;
}

// Frame groups of the set; a set without offsets is one group.
std::vector<std::pair<std::size_t, std::size_t>> groups(const DepthPairSet& set) {
  std::vector<std::pair<std::size_t, std::size_t>> out;
  if (set.frame_offsets.size() < 2) {
    out.emplace_back(0, set.pairs.size());
    return out;
  }
  for (std::size_t g = 0; g + 1 < set.frame_offsets.size(); ++g)
    out.emplace_back(set.frame_offsets[g], set.frame_offsets[g + 1]);
  return out;
}

}  // namespace

double l1_objective(const DepthPairSet& set, double lambda, Weighting weighting) {
  double total = 0.0;
  double norm = 0.0;
  for (auto [begin, end] : groups(set)) {
    double group_sum = 0.0;
    std::size_t group_count = 0;
    for (std::size_t i = begin; i < end; ++i) {
      const auto& p = set.pairs[i];
      if (!usable(p)) continue;
      group_sum += std::abs(lambda * p.reconstruction - p.metric);
      ++group_count;
    }
    if (group_count == 0) continue;
    if (weighting == Weighting::kPooled) {
      total += group_sum;
      norm += static_cast<double>(group_count);
    } else {
      total += group_sum / static_cast<double>(group_count);
      norm += 1.0;
    }
  }
  if (norm == 0.0) throw RescaleError("no usable depth pairs");
  return total / norm;
}

ScaleSolution solve_scale(const DepthPairSet& set, Weighting weighting) {
  std::vector<double> ratios;
  std::vector<double> weights;
  for (auto [begin, end] : groups(set)) {
    const std::size_t first = ratios.size();
    for (std::size_t i = begin; i < end; ++i) {
      const auto& p = set.pairs[i];
      if (!usable(p)) continue;
      ratios.push_back(p.metric / p.reconstruction);
      weights.push_back(p.reconstruction);
    }
    if (weighting == Weighting::kPerFrame && ratios.size() > first) {
      const double inv = 1.0 / static_cast<double>(ratios.size() - first);
      for (std::size_t i = first; i < weights.size(); ++i) weights[i] *= inv;
    }
  }
  if (ratios.empty()) throw RescaleError("no usable depth pairs after filtering");

  ScaleSolution sol;
  sol.lambda_hat = weighted_median(ratios, weights);
  sol.objective_value = l1_objective(set, sol.lambda_hat, weighting);
  sol.pair_count = ratios.size();
  return sol;
}

geometry::CameraTrajectory rescale_trajectory(const geometry::CameraTrajectory& traj, const ScaleSolution& sol) {
  if (!(sol.lambda_hat > 0.0) || !std::isfinite(sol.lambda_hat))
    throw RescaleError("rescale_trajectory: lambda must be positive and finite");
  geometry::CameraTrajectory out = traj;
  for (auto& frame : out.frames) frame.extrinsics.translation *= sol.lambda_hat;
  return out;
}

Tensor render_sparse_depth(std::span<const Eigen::Vector3d> points, const geometry::CameraFrame& cam,
                           std::size_t height, std::size_t width) {
  if (points.empty()) throw RescaleError("render_sparse_depth: no points");
  Tensor depth({height, width}, 0.0f);
  const auto& k = cam.intrinsics;
  for (const auto& p : points) {
    const Eigen::Vector3d pc = cam.extrinsics.rotation * p + cam.extrinsics.translation;
    if (!(pc.z() > 0.0)) continue;
    const double u = (k.fx * pc.x() / pc.z() + k.cx) * static_cast<double>(width);
    const double v = (k.fy * pc.y() / pc.z() + k.cy) * static_cast<double>(height);
    if (!(u >= 0.0 && v >= 0.0 && u < static_cast<double>(width) && v < static_cast<double>(height))) continue;
    float& px = depth.at(static_cast<std::size_t>(v), static_cast<std::size_t>(u));
    const auto z = static_cast<float>(pc.z());
    if (px == 0.0f || z < px) px = z;
  }
  return depth;
}

std::vector<DepthPair> pair_depths(const Tensor& sparse, std::span<const float> metric) {
  if (metric.size() != sparse.size()) throw RescaleError("pair_depths: depth maps differ in size");
  std::vector<DepthPair> out;
  const auto s = sparse.data();
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[i] == 0.0f) continue;
    const DepthPair p{s[i], metric[i]};
    if (usable(p)) out.push_back(p);
  }
  return out;
}

}  // namespace ac3d::rescale
