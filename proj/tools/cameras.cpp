#include <vector>

#include "ac3d/camera_geometry.hpp"
#include "ac3d/metric_rescale.hpp"
#include "ac3d/tensorio.hpp"
#include "cli_common.hpp"

namespace ac3d::cli {

namespace {

geometry::CameraTrajectory load_trajectory(const std::filesystem::path& path) {
  return geometry::build_trajectory(tensorio::parse_trajectory(path));
}

void parse_cmd(CLI::App& app) {
  struct Opts {
    std::filesystem::path input, out;
  };
  auto o = std::make_shared<Opts>();
  auto* cmd = app.add_subcommand("cameras-parse", "Validate a trajectory file and list its cameras as CSV");
  cmd->add_option("trajectory", o->input, "Trajectory text file")->required();
  cmd->add_option("--out", o->out, "CSV destination (stdout when omitted)");
  cmd->callback([o] {
    const auto traj = load_trajectory(o->input);
    Output out(o->out);
    auto& s = out.stream();
    s << "frame,timestamp,fx,fy,cx,cy,center_x,center_y,center_z\n";
    for (std::size_t f = 0; f < traj.size(); ++f) {
      const auto& c = traj.frames[f];
      const Eigen::Vector3d centre = c.extrinsics.camera_center();
      s << f << ',' << fmt(c.timestamp) << ',' << fmt(c.intrinsics.fx) << ',' << fmt(c.intrinsics.fy) << ','
        << fmt(c.intrinsics.cx) << ',' << fmt(c.intrinsics.cy) << ',' << fmt(centre.x()) << ',' << fmt(centre.y())
        << ',' << fmt(centre.z()) << '\n';
    }
    out.close();
  });
}

void plucker_cmd(CLI::App& app) {
  struct Opts {
    std::filesystem::path input, out, targets;
    std::size_t height = 32, width = 32;
    bool raw = false;
  };
  auto o = std::make_shared<Opts>();
  auto* cmd = app.add_subcommand("cameras-plucker", "Per-pixel Plücker volume [F, H, W, 6] of a trajectory");
  cmd->add_option("trajectory", o->input, "Trajectory text file")->required();
  cmd->add_option("--out", o->out, "Output TNSR file")->required();
  cmd->add_option("--height", o->height, "Image height in pixels")->capture_default_str();
  cmd->add_option("--width", o->width, "Image width in pixels")->capture_default_str();
  cmd->add_flag("--raw", o->raw, "Skip normalization to the first camera");
  cmd->add_option("--targets", o->targets, "Also write Euler pose targets [F, 6] to this TNSR file");
  cmd->callback([o] {
    if (o->height == 0 || o->width == 0) throw UsageError("--height and --width must be positive");
    auto traj = load_trajectory(o->input);
    if (!o->raw) traj = geometry::normalize_to_first(traj);
    tensorio::write_tensor(geometry::plucker_volume(traj, o->height, o->width).values, o->out);
    if (!o->targets.empty()) tensorio::write_tensor(geometry::euler_targets(traj).values, o->targets);
  });
}

void rescale_cmd(CLI::App& app) {
  struct Opts {
    std::filesystem::path input, points, depth, out;
    std::string weighting = "pooled";
  };
  auto o = std::make_shared<Opts>();
  auto* cmd = app.add_subcommand("cameras-rescale", "Metric scale from sparse points and metric depth maps");
  cmd->add_option("trajectory", o->input, "Trajectory text file")->required();
  cmd->add_option("--points", o->points, "TNSR [N, 3] reconstruction points in scene units")->required();
  cmd->add_option("--depth", o->depth, "TNSR [F, H, W] metric depth per frame")->required();
  cmd->add_option("--out", o->out, "Rescaled trajectory file")->required();
  cmd->add_option("--weighting", o->weighting, "Residual weighting")
      ->check(CLI::IsMember({"pooled", "per-frame"}))
      ->capture_default_str();
  cmd->callback([o] {
    const auto raw = tensorio::parse_trajectory(o->input);
    const auto traj = geometry::build_trajectory(raw);
    const Tensor pts = tensorio::read_tensor(o->points);
    const Tensor depth = tensorio::read_tensor(o->depth);
    if (pts.rank() != 2 || pts.dim(1) != 3) throw DataError(o->points.string() + ": points must be [N, 3]");
    if (depth.rank() != 3 || depth.dim(0) != traj.size())
      throw DataError(o->depth.string() + ": depth must be [F, H, W] with one map per camera");
    std::vector<Eigen::Vector3d> points;
    for (std::size_t i = 0; i < pts.dim(0); ++i) points.emplace_back(pts.at(i, 0), pts.at(i, 1), pts.at(i, 2));
    const std::size_t H = depth.dim(1), W = depth.dim(2);
    rescale::DepthPairSet set;
    for (std::size_t f = 0; f < traj.size(); ++f) {
      const Tensor sparse = rescale::render_sparse_depth(points, traj.frames[f], H, W);
      const auto pairs = rescale::pair_depths(sparse, depth.data().subspan(f * H * W, H * W));
      set.add_frame(pairs);
    }
    const auto weighting = o->weighting == "pooled" ? rescale::Weighting::kPooled : rescale::Weighting::kPerFrame;
    const auto sol = rescale::solve_scale(set, weighting);
    tensorio::write_trajectory(
        geometry::to_trajectory_file(rescale::rescale_trajectory(traj, sol), raw.source_id), o->out);
    Output out({});
    out.stream() << "lambda=" << fmt(sol.lambda_hat) << "\nobjective=" << fmt(sol.objective_value)
                 << "\npairs=" << sol.pair_count << '\n';
    out.close();
  });
}

void score_cmd(CLI::App& app) {
  struct Opts {
    std::filesystem::path predicted, reference;
    bool normalize = false;
  };
  auto o = std::make_shared<Opts>();
  auto* cmd = app.add_subcommand("cameras-score", "Rotation and normalized translation error between trajectories");
  cmd->add_option("predicted", o->predicted, "Trajectory file to score")->required();
  cmd->add_option("reference", o->reference, "Reference trajectory file")->required();
  cmd->add_flag("--normalize", o->normalize, "Express both trajectories relative to their first camera first");
  cmd->callback([o] {
    auto a = load_trajectory(o->predicted);
    auto b = load_trajectory(o->reference);
    if (o->normalize) {
      a = geometry::normalize_to_first(a);
      b = geometry::normalize_to_first(b);
    }
    Output out({});
    out.stream() << "rot_err=" << fmt(geometry::rotation_error(a, b))
                 << "\ntrans_err=" << fmt(geometry::translation_error(a, b)) << '\n';
    out.close();
  });
}

}  // namespace

void register_cameras(CLI::App& app, Globals&) {
  parse_cmd(app);
  plucker_cmd(app);
  rescale_cmd(app);
  score_cmd(app);
}

}  // namespace ac3d::cli
