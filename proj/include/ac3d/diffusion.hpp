#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <map>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "ac3d/autograd.hpp"
#include "ac3d/camera_geometry.hpp"
#include "ac3d/error.hpp"
#include "ac3d/tensorio.hpp"

namespace ac3d::diffusion {

using Mat = ag::Mat;
using Rng = std::mt19937_64;

class DiffusionError : public DataError {
 public:
  using DataError::DataError;
};

enum class FeedbackMode {
  kCameraQueries,  // camera tokens attend to the main-branch video tokens
  kVideoQueries,   // video tokens attend to camera tokens; the result is injected
};

struct ModelConfig {
  std::size_t n_blocks = 8;
  std::size_t d_main = 256;
  std::size_t n_heads = 4;
  std::size_t patch = 2;
  std::size_t temporal_compress = 4;
  std::size_t d_cam = 64;
  std::size_t cam_heads = 4;
  std::size_t cam_conv_channels = 32;
  std::vector<std::size_t> cam_inject_blocks = {1, 2};  // 1-based
  std::array<std::size_t, 3> rope_split = {2, 1, 1};   // temporal : vertical : horizontal
  double rope_base = 10000.0;
  std::size_t vocab = 64;
  std::size_t mlp_ratio = 4;
  std::size_t time_embed_dim = 64;
  std::size_t frames = 17;
  std::size_t height = 32;
  std::size_t width = 32;
  std::size_t channels = 3;
  FeedbackMode feedback = FeedbackMode::kCameraQueries;

  /// First quarter of the blocks (at least one).
  static std::vector<std::size_t> default_inject_blocks(std::size_t n_blocks);
  /// Throws UsageError on inconsistent settings.
  void validate() const;

  std::size_t grid_h() const { return height / patch; }
  std::size_t grid_w() const { return width / patch; }
  std::size_t tokens() const { return frames * grid_h() * grid_w(); }
  std::size_t patch_dim() const { return channels * patch * patch; }
  std::size_t compressed_frames() const { return (frames + temporal_compress - 1) / temporal_compress; }
};

struct NoiseSchedule {
  enum class Kind { kLogitNormal, kTruncatedNormal };
  Kind kind = Kind::kLogitNormal;
  double loc = 0.0;
  double scale = 1.0;
  double lo = 0.0;
  double hi = 1.0;

  static NoiseSchedule logit_normal(double loc = 0.0, double scale = 1.0);
  static NoiseSchedule truncated_normal(double loc = 0.8, double scale = 0.075, double lo = 0.6, double hi = 1.0);
  void validate() const;
};

/// t in (0, 1] for logit-normal, [lo, hi] for truncated normal (by rejection).
double sample_noise_level(const NoiseSchedule& sched, Rng& rng);

struct GuidanceWeights {
  double w_y = 0.0;  // text
  double w_c = 0.0;  // camera
};

/// Noise-level interval in which camera conditioning is supplied.
struct Gate {
  double lo = 0.6;
  double hi = 1.0;
  void validate() const;
  bool contains(double t) const { return t >= lo && t <= hi; }
};

/// Conditioning of one forward pass. Empty text means the null token.
struct Conditioning {
  std::vector<int> text;
  const geometry::PluckerVolume* plucker = nullptr;
};

/// Per-block activations of the main branch, [d_main, F, H/p, W/p].
using ActivationTap = std::function<void(std::size_t block, const Tensor& features)>;

class Model {
 public:
  Model(const ModelConfig& cfg, std::uint64_t seed);

  const ModelConfig& config() const { return cfg_; }

  std::vector<ag::Parameter*> parameters();
  std::vector<const ag::Parameter*> parameters() const;
  std::vector<ag::Parameter*> backbone_parameters();
  std::vector<ag::Parameter*> camera_parameters();
  ag::Parameter& parameter(const std::string& name);
  static bool is_camera_parameter(const std::string& name);

  /// Velocity prediction in token space on a tape; x_tokens is tokens x patch_dim.
  ag::Var forward(ag::Tape& tape, const Mat& x_tokens, double t, const Conditioning& cond,
                  const ActivationTap* tap = nullptr);
  /// Inference convenience: video [F, C, H, W] in, velocity [F, C, H, W] out.
  Tensor velocity(const Tensor& x_t, double t, const Conditioning& cond, const ActivationTap* tap = nullptr);
  Mat velocity_tokens(const Mat& x_tokens, double t, const Conditioning& cond);

  /// Compressed camera tokens, rows ordered (j, py, px), before any camera block.
  ag::Var encode_camera(ag::Tape& tape, const geometry::PluckerVolume& plucker);
  Mat encode_camera(const geometry::PluckerVolume& plucker);

  Mat patchify(const Tensor& video) const;
  Tensor unpatchify(const Mat& tokens) const;

 private:
  struct Linear {
    ag::Parameter* w = nullptr;
    ag::Parameter* b = nullptr;
  };
  struct Attention {
    Linear q, k, v, o;
    ag::Parameter* q_gain = nullptr;
    ag::Parameter* k_gain = nullptr;
  };
  struct MainBlock {
    Linear text_q, text_k, text_v, text_o;
    Attention self;
    Linear mlp1, mlp2, mod;
  };
  struct CameraBlock {
    Attention self;
    Attention feedback;  // q from camera tokens, k/v from video tokens (or the reverse)
    Linear mlp1, mlp2, mod;
    Linear inject;
  };

  ag::Parameter* add_param(const std::string& name, Eigen::Index rows, Eigen::Index cols, double stddev);
  Linear add_linear(const std::string& name, std::size_t in, std::size_t out, bool zero = false);
  Attention add_attention(const std::string& name, std::size_t d_q, std::size_t d_kv, std::size_t d,
                          std::size_t heads);
  ag::Var apply(ag::Tape& tape, const Linear& l, ag::Var x);
  ag::Var attend(ag::Tape& tape, const Attention& a, ag::Var xq, ag::Var xkv, std::size_t heads,
                 const ag::RopeTable* rope_q, const ag::RopeTable* rope_k);
  ag::Var time_embedding(ag::Tape& tape, double t);

  ModelConfig cfg_;
  Rng init_rng_;
  std::vector<std::unique_ptr<ag::Parameter>> params_;
  std::map<std::string, ag::Parameter*> by_name_;

  Linear in_proj_, time1_, time2_, final_mod_, final_out_;
  ag::Parameter* text_embed_ = nullptr;
  std::vector<MainBlock> blocks_;
  std::array<Linear, 3> conv_;
  Linear cam_proj_;
  std::map<std::size_t, CameraBlock> cam_blocks_;  // keyed by 1-based main block

  ag::RopeTable rope_video_, rope_cam_, rope_video_cam_;
  std::array<ag::GatherMap, 3> conv_maps_;
  ag::GatherMap cam_patch_map_;
  ag::GatherMap cam_repeat_;
};

/// Rotary tables for 3D positions (one row per token).
ag::RopeTable make_rope_table(const std::vector<std::array<double, 3>>& positions, std::size_t head_dim,
                              const std::array<std::size_t, 3>& split, double base);
/// Token positions (f, py, px) of the video grid.
std::vector<std::array<double, 3>> video_positions(const ModelConfig& cfg);
/// Token positions of the compressed camera grid: (c j + (c - 1) / 2, py, px)
/// for compression c, i.e. the centre of the frames a camera token covers.
std::vector<std::array<double, 3>> camera_positions(const ModelConfig& cfg);

/// x_t = (1 - t) x0 + t eps and the velocity target eps - x0.
struct FlowPair {
  Mat x_t;
  Mat target;
};
FlowPair make_flow_pair(const Mat& x0, double t, Rng& rng);

/// Training example; video in [-1, 1].
struct BatchSample {
  Tensor video;  // [F, C, H, W]
  std::vector<int> text_tokens;
  std::optional<geometry::PluckerVolume> plucker;
};

struct DropoutConfig {
  double text = 0.1;
  double camera = 0.1;
};

/// Loss node for one sample at noise level t; conditioning dropped at random.
ag::Var rectified_flow_loss(ag::Tape& tape, Model& model, const BatchSample& sample, double t, Rng& rng,
                            const DropoutConfig& dropout = {}, bool use_camera = true,
                            bool loss_normalization = false);

/// (1 + w_y + w_c) s_yc - w_y s_c - w_c s_y.
Mat combine_guidance(const Mat& s_yc, const Mat& s_c, const Mat& s_y, const GuidanceWeights& g);
/// Text-only guidance (1 + w_y) s_y - w_y s_null.
Mat combine_text_guidance(const Mat& s_y, const Mat& s_null, double w_y);

/// Guided velocity in token space. With camera_active false (or no Plücker
/// input) the camera is dropped from every pass.
Mat guided_velocity(Model& model, const Mat& x_tokens, double t, const Conditioning& cond,
                    const GuidanceWeights& g, bool camera_active);

struct SampleOptions {
  std::size_t steps = 40;
  GuidanceWeights guidance;
  Gate gate;
  bool keep_predictions = false;
};

struct SampleResult {
  Tensor video;                          // [F, C, H, W]
  std::map<double, Tensor> predictions;  // t -> x0 prediction x_t - t v; t = 0 holds the final video
};

/// Deterministic Euler integration from t = 1 to t = 0.
SampleResult sample(Model& model, const geometry::CameraTrajectory* trajectory, const std::vector<int>& text,
                    const SampleOptions& opts, Rng& rng);

/// Main-branch activations of every block (tap order) for `video` noised to
/// level t with fresh noise from `rng`.
std::vector<Tensor> capture_activations(Model& model, const Tensor& video, double t, const Conditioning& cond,
                                        Rng& rng);

enum class Phase { kBackbone, kCamera };

struct OptimizerConfig {
  double lr = 1e-4;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::size_t warmup = 0;
  double min_lr_ratio = 0.0;
  double grad_clip = 1.0;  // global norm; 0 disables
};

struct TrainConfig {
  Phase phase = Phase::kBackbone;
  std::size_t steps = 200;
  std::size_t batch_size = 4;
  OptimizerConfig optimizer;
  NoiseSchedule schedule;
  DropoutConfig dropout;
  bool loss_normalization = false;
  std::uint64_t seed = 0;
};

struct LossRecord {
  std::size_t step = 0;
  double loss = 0.0;
  double t_mean = 0.0;
};

/// Learning rate at a 0-based step: linear warmup then cosine decay.
double learning_rate(const OptimizerConfig& opt, std::size_t step, std::size_t total);

/// Decoupled-weight-decay Adam over a fixed parameter list.
class AdamW {
 public:
  AdamW(std::vector<ag::Parameter*> params, OptimizerConfig cfg);
  void step(double lr);
  std::size_t steps_taken() const { return t_; }

 private:
  std::vector<ag::Parameter*> params_;
  std::vector<Mat> m_, v_;
  OptimizerConfig cfg_;
  std::size_t t_ = 0;
};

/// Raised on a non-finite loss; the model holds the last good parameters.
class DivergenceError : public DiffusionError {
 public:
  DivergenceError(std::size_t step, const std::string& msg) : DiffusionError(msg), step_(step) {}
  std::size_t step() const { return step_; }

 private:
  std::size_t step_;
};

using StepCallback = std::function<void(const LossRecord&)>;

/// Phase kBackbone updates the backbone only and never supplies the camera;
/// phase kCamera leaves every backbone parameter untouched.
std::vector<LossRecord> train(Model& model, const std::vector<BatchSample>& data, const TrainConfig& cfg,
                              const StepCallback& on_step = {});

void write_loss_csv(const std::vector<LossRecord>& log, std::ostream& out);

/// params.bin (concatenated TNSR records), manifest.txt (name dims offset file)
/// and config.txt in `dir`.
void save_checkpoint(const Model& model, const std::filesystem::path& dir);
Model load_checkpoint(const std::filesystem::path& dir);

/// Flat key=value text; unknown keys are rejected.
void write_model_config(const ModelConfig& cfg, std::ostream& out);
ModelConfig read_model_config(std::istream& in, const std::string& origin = "config");
/// Applies one key=value override to a config.
void set_config_value(ModelConfig& cfg, const std::string& key, const std::string& value);

}  // namespace ac3d::diffusion
