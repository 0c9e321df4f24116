#pragma once

#include <Eigen/Core>
#include <array>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "ac3d/camera_geometry.hpp"
#include "ac3d/error.hpp"
#include "ac3d/flow_spectral.hpp"
#include "ac3d/tensorio.hpp"

namespace ac3d::synth {

enum class Mode { kCameraMotion, kSceneMotion, kBoth, kStatic };

std::string mode_name(Mode m);  // camera-motion, scene-motion, both, static
Mode parse_mode(const std::string& name);

class SynthError : public DataError {
 public:
  using DataError::DataError;
};

/// Textured disc lying on the background plane. Positions and velocities are
/// in pixels of the identity view (origin at the principal point).
struct Sprite {
  double x = 0.0, y = 0.0;
  double vx = 0.0, vy = 0.0;  // px per frame
  double radius = 4.0;
  std::array<double, 3> color{0.0, 0.0, 0.0};
};

struct SceneSpec {
  Mode mode = Mode::kStatic;
  std::uint64_t texture_seed = 0;
  double yaw_rate = 0.0;                                   // rad per frame, camera-to-world R_y
  Eigen::Vector3d velocity = Eigen::Vector3d::Zero();      // camera centre, world units per frame
  std::vector<Sprite> sprites;
  std::size_t frames = 17, height = 32, width = 32;
  double depth = 10.0;  // plane z in world units
  geometry::Intrinsics intrinsics;

  /// Throws SynthError when the mode invariants or sizes do not hold.
  void validate() const;
};

struct SynthClip {
  SceneSpec spec;
  Tensor video;                          // [F, 3, H, W] in [-1, 1]
  geometry::CameraTrajectory trajectory;  // world-to-camera per frame
  std::vector<flow::FlowField> gt_flow;  // F - 1 consecutive pairs
  std::string caption;
  std::vector<int> caption_tokens;
};

SynthClip render_clip(const SceneSpec& spec);

/// Random scene parameters for a mode at the given size.
SceneSpec random_spec(Mode mode, std::mt19937_64& rng, std::size_t frames = 17, std::size_t height = 32,
                      std::size_t width = 32);

/// Word vocabulary of the caption templates; index 0 is the null token.
const std::vector<std::string>& vocabulary();
std::vector<int> tokenize(const std::string& caption);
std::string caption_for(const SceneSpec& spec);

/// Mode proportions, e.g. {camera-motion: 0.75, static: 0.25}.
using Mix = std::map<Mode, double>;
Mix parse_mix(const std::string& text);  // "camera=0.75,static=0.25"

/// Largest-remainder allocation of n clips over the mix (ties go to the
/// earlier mode).
std::map<Mode, std::size_t> allocate(std::size_t n, const Mix& mix);

struct DatasetOptions {
  std::size_t frames = 17, height = 32, width = 32;
};

/// Deterministic per seed; clip i is rendered from a seed derived from (seed, i).
std::vector<SynthClip> make_dataset(std::size_t n_clips, const Mix& mix, std::uint64_t seed,
                                    const DatasetOptions& opts = {});

/// Writes clip_XXXX.video.tnsr, clip_XXXX.flow.tnsr ([F-1, H, W, 2]),
/// clip_XXXX.traj.txt and manifest.csv into `dir`.
void write_dataset(const std::vector<SynthClip>& clips, const std::filesystem::path& dir);
void write_manifest(const std::vector<SynthClip>& clips, std::ostream& out);

struct ManifestRow {
  std::string clip_id;
  Mode mode = Mode::kStatic;
  double yaw_rate = 0.0;
  std::vector<int> tokens;
};
std::vector<ManifestRow> read_manifest(const std::filesystem::path& path);

/// A clip read back from a dataset directory.
struct StoredClip {
  ManifestRow row;
  Tensor video;
  geometry::CameraTrajectory trajectory;
};
/// Reads manifest.csv and the video and trajectory of every listed clip.
std::vector<StoredClip> read_dataset(const std::filesystem::path& dir);

}  // namespace ac3d::synth
