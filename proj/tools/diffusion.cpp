#include <cstdio>
#include <fstream>
#include <random>
#include <vector>

#include "ac3d/camera_geometry.hpp"
#include "ac3d/diffusion.hpp"
#include "ac3d/synth.hpp"
#include "ac3d/tensorio.hpp"
#include "cli_common.hpp"

namespace ac3d::cli {

namespace {

using namespace ac3d::diffusion;

diffusion::Rng seeded_rng(std::uint64_t seed, std::size_t index) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(index)};
  return diffusion::Rng(seq);
}

ModelConfig build_config(const std::filesystem::path& file, const std::vector<std::string>& overrides,
                         const std::vector<synth::StoredClip>& clips) {
  ModelConfig cfg;
  if (!file.empty()) {
    std::ifstream in(file);
    if (!in) throw UsageError("cannot open config " + file.string());
    cfg = read_model_config(in, file.string());
  } else {
    // Without a config file the video size follows the data.
    const auto& dims = clips.front().video.dims();
    cfg.frames = dims[0];
    cfg.channels = dims[1];
    cfg.height = dims[2];
    cfg.width = dims[3];
  }
  for (const auto& kv : overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw UsageError("--set expects key=value, got '" + kv + "'");
    set_config_value(cfg, kv.substr(0, eq), kv.substr(eq + 1));
  }
  cfg.validate();
  return cfg;
}

void train_cmd(CLI::App& app, Globals& g) {
  struct Opts {
    std::filesystem::path data, out, init, config;
    std::vector<std::string> overrides;
    std::string phase = "backbone";
    std::string schedule;
    TrainConfig train;
  };
  auto o = std::make_shared<Opts>();
  o->train.optimizer.lr = 1e-3;
  auto* cmd = app.add_subcommand("train", "Train the toy video model on a synth dataset");
  cmd->add_option("--data", o->data, "Dataset directory written by synth-gen")->required()->check(
      CLI::ExistingDirectory);
  cmd->add_option("--out", o->out, "Checkpoint directory (loss.csv is written alongside)")->required();
  auto* init = cmd->add_option("--init", o->init, "Start from this checkpoint")->check(CLI::ExistingDirectory);
  cmd->add_option("--config", o->config, "Model config file (key=value lines)")->excludes(init);
  cmd->add_option("--set", o->overrides, "Model config override key=value (repeatable)")->excludes(init);
  cmd->add_option("--phase", o->phase, "backbone: text-only pretraining; camera: camera branch only")
      ->check(CLI::IsMember({"backbone", "camera"}))
      ->capture_default_str();
  cmd->add_option("--steps", o->train.steps, "Optimizer steps")->capture_default_str()->check(CLI::PositiveNumber);
  cmd->add_option("--batch", o->train.batch_size, "Clips per step")->capture_default_str()->check(
      CLI::PositiveNumber);
  cmd->add_option("--lr", o->train.optimizer.lr, "Peak learning rate")->capture_default_str()->check(
      CLI::PositiveNumber);
  cmd->add_option("--warmup", o->train.optimizer.warmup, "Linear warmup steps")->capture_default_str();
  cmd->add_option("--min-lr-ratio", o->train.optimizer.min_lr_ratio, "Final learning rate as a fraction of peak")
      ->capture_default_str()
      ->check(CLI::Range(0.0, 1.0));
  cmd->add_option("--weight-decay", o->train.optimizer.weight_decay, "Decoupled weight decay")
      ->capture_default_str()
      ->check(CLI::NonNegativeNumber);
  cmd->add_option("--grad-clip", o->train.optimizer.grad_clip, "Global gradient norm clip (0 disables)")
      ->capture_default_str()
      ->check(CLI::NonNegativeNumber);
  cmd->add_option("--schedule", o->schedule,
                  "Noise-level sampler (default: logit-normal for backbone, truncated-normal for camera)")
      ->check(CLI::IsMember({"logit-normal", "truncated-normal"}));
  cmd->add_option("--text-dropout", o->train.dropout.text, "Probability of dropping the caption")
      ->capture_default_str()
      ->check(CLI::Range(0.0, 1.0));
  cmd->add_option("--camera-dropout", o->train.dropout.camera, "Probability of dropping the camera")
      ->capture_default_str()
      ->check(CLI::Range(0.0, 1.0));
  cmd->add_flag("--loss-normalization", o->train.loss_normalization, "Divide the loss by 1 + mean squared signal");
  cmd->callback([o, &g] {
    const auto clips = synth::read_dataset(o->data);
    if (clips.empty()) throw DataError(o->data.string() + ": empty dataset");

    const bool camera = o->phase == "camera";
    std::optional<Model> model;
    if (!o->init.empty())
      model.emplace(load_checkpoint(o->init));
    else
      model.emplace(build_config(o->config, o->overrides, clips), stage_seed(g.seed, "model-init"));
    const auto& cfg = model->config();

    std::vector<BatchSample> data;
    data.reserve(clips.size());
    for (const auto& c : clips)
      data.push_back({c.video, c.row.tokens,
                      geometry::plucker_volume(geometry::normalize_to_first(c.trajectory), cfg.height, cfg.width)});

    TrainConfig tc = o->train;
    tc.phase = camera ? Phase::kCamera : Phase::kBackbone;
    const std::string sched = o->schedule.empty() ? (camera ? "truncated-normal" : "logit-normal") : o->schedule;
    tc.schedule = sched == "logit-normal" ? NoiseSchedule::logit_normal() : NoiseSchedule::truncated_normal();
    tc.seed = stage_seed(g.seed, "train-" + o->phase);

    const auto log = train(*model, data, tc);
    save_checkpoint(*model, o->out);
    Output loss(o->out / "loss.csv");
    write_loss_csv(log, loss.stream());
    loss.close();
    Output out({});
    out.stream() << "steps=" << log.size() << "\nfinal_loss=" << fmt(log.empty() ? 0.0 : log.back().loss) << '\n';
    out.close();
  });
}

void sample_cmd(CLI::App& app, Globals& g) {
  struct Opts {
    std::filesystem::path checkpoint, out, trajectory;
    std::string caption;
    std::size_t count = 1;
    SampleOptions sample;
  };
  auto o = std::make_shared<Opts>();
  o->sample.steps = 20;
  auto* cmd = app.add_subcommand("sample", "Generate videos from a checkpoint");
  cmd->add_option("--checkpoint", o->checkpoint, "Checkpoint directory")->required()->check(CLI::ExistingDirectory);
  cmd->add_option("--out", o->out, "Output directory for sample_s*.tnsr")->required();
  cmd->add_option("--trajectory", o->trajectory, "Camera trajectory file to follow")->check(CLI::ExistingFile);
  cmd->add_option("--caption", o->caption, "Caption in the synth vocabulary (empty = null text)");
  cmd->add_option("--count", o->count, "Number of videos")->capture_default_str()->check(CLI::PositiveNumber);
  cmd->add_option("--steps", o->sample.steps, "Euler steps")->capture_default_str()->check(CLI::PositiveNumber);
  cmd->add_option("--w-y", o->sample.guidance.w_y, "Text guidance weight")->capture_default_str();
  cmd->add_option("--w-c", o->sample.guidance.w_c, "Camera guidance weight")->capture_default_str();
  cmd->add_option("--gate-lo", o->sample.gate.lo, "Lowest noise level that receives the camera")
      ->capture_default_str();
  cmd->add_option("--gate-hi", o->sample.gate.hi, "Highest noise level that receives the camera")
      ->capture_default_str();
  cmd->add_flag("--keep-predictions", o->sample.keep_predictions,
                "Also write the clean-video prediction of every step as pred_t<t>_s<index>.tnsr");
  cmd->callback([o, &g] {
    o->sample.gate.validate();
    std::vector<int> tokens;
    try {
      tokens = synth::tokenize(o->caption);
    } catch (const synth::SynthError& e) {
      throw UsageError(e.what());
    }
    auto model = load_checkpoint(o->checkpoint);
    std::optional<geometry::CameraTrajectory> traj;
    if (!o->trajectory.empty())
      traj = geometry::build_trajectory(tensorio::parse_trajectory(o->trajectory));

    std::filesystem::create_directories(o->out);
    const std::uint64_t seed = stage_seed(g.seed, "sample");
    char name[64];
    for (std::size_t s = 0; s < o->count; ++s) {
      auto rng = seeded_rng(seed, s);
      const auto result = diffusion::sample(model, traj ? &*traj : nullptr, tokens, o->sample, rng);
      std::snprintf(name, sizeof name, "sample_s%04zu.tnsr", s);
      tensorio::write_tensor(result.video, o->out / name);
      for (const auto& [t, pred] : result.predictions) {
        std::snprintf(name, sizeof name, "pred_t%.4f_s%04zu.tnsr", t, s);
        tensorio::write_tensor(pred, o->out / name);
      }
    }
  });
}

}  // namespace

void register_diffusion(CLI::App& app, Globals& g) {
  train_cmd(app, g);
  sample_cmd(app, g);
}

}  // namespace ac3d::cli
