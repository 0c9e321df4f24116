#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

#include "ac3d/diffusion.hpp"

namespace ac3d::diffusion {

using ag::Tape;
using ag::Var;

NoiseSchedule NoiseSchedule::logit_normal(double loc, double scale) {
  return {Kind::kLogitNormal, loc, scale, 0.0, 1.0};
}

NoiseSchedule NoiseSchedule::truncated_normal(double loc, double scale, double lo, double hi) {
  return {Kind::kTruncatedNormal, loc, scale, lo, hi};
}

void NoiseSchedule::validate() const {
  if (!std::isfinite(loc) || !std::isfinite(scale) || scale < 0.0) throw UsageError("noise schedule: bad loc/scale");
  if (kind == Kind::kTruncatedNormal) {
    if (!(lo >= 0.0 && lo <= hi && hi <= 1.0)) throw UsageError("noise schedule: need 0 <= lo <= hi <= 1");
    if (scale == 0.0 && (loc < lo || loc > hi)) throw UsageError("noise schedule: degenerate loc outside [lo, hi]");
  }
}

double sample_noise_level(const NoiseSchedule& sched, Rng& rng) {
  sched.validate();
  std::normal_distribution<double> normal(0.0, 1.0);
  if (sched.kind == NoiseSchedule::Kind::kLogitNormal) {
    const double t = 1.0 / (1.0 + std::exp(-(sched.loc + sched.scale * normal(rng))));
    return std::clamp(t, 1e-6, 1.0);
  }
  if (sched.scale == 0.0) return sched.loc;
  for (int attempt = 0; attempt < 1'000'000; ++attempt) {
    const double t = sched.loc + sched.scale * normal(rng);
    if (t >= sched.lo && t <= sched.hi) return t;
  }
  throw DiffusionError("truncated normal: rejection sampling did not converge");
}

void Gate::validate() const {
  if (!(lo >= 0.0 && lo <= hi && hi <= 1.0)) throw UsageError("gate must satisfy 0 <= lo <= hi <= 1");
}

FlowPair make_flow_pair(const Mat& x0, double t, Rng& rng) {
  if (!(t > 0.0 && t <= 1.0)) throw DiffusionError("noise level must lie in (0, 1]");
  std::normal_distribution<double> normal(0.0, 1.0);
  Mat eps(x0.rows(), x0.cols());
  for (Eigen::Index c = 0; c < eps.cols(); ++c)
    for (Eigen::Index r = 0; r < eps.rows(); ++r) eps(r, c) = normal(rng);
  return {(1.0 - t) * x0 + t * eps, eps - x0};
}

Var rectified_flow_loss(Tape& tape, Model& model, const BatchSample& sample, double t, Rng& rng,
                        const DropoutConfig& dropout, bool use_camera, bool loss_normalization) {
  const Mat x0 = model.patchify(sample.video);
  const FlowPair pair = make_flow_pair(x0, t, rng);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const bool drop_text = u(rng) < dropout.text;
  const bool drop_camera = u(rng) < dropout.camera;
  Conditioning cond;
  if (!drop_text) cond.text = sample.text_tokens;
  if (use_camera && !drop_camera && sample.plucker) cond.plucker = &*sample.plucker;
  Var loss = ag::mse(model.forward(tape, pair.x_t, t, cond), pair.target);
  if (loss_normalization) loss = ag::scale(loss, 1.0 / (1.0 + x0.squaredNorm() / static_cast<double>(x0.size())));
  return loss;
}

std::vector<Tensor> capture_activations(Model& model, const Tensor& video, double t, const Conditioning& cond,
                                        Rng& rng) {
  const FlowPair pair = make_flow_pair(model.patchify(video), t, rng);
  std::vector<Tensor> out;
  const ActivationTap tap = [&out](std::size_t, const Tensor& features) { out.push_back(features); };
  model.velocity(model.unpatchify(pair.x_t), t, cond, &tap);
  return out;
}

Mat combine_guidance(const Mat& s_yc, const Mat& s_c, const Mat& s_y, const GuidanceWeights& g) {
  return (1.0 + g.w_y + g.w_c) * s_yc - g.w_y * s_c - g.w_c * s_y;
}

Mat combine_text_guidance(const Mat& s_y, const Mat& s_null, double w_y) { return (1.0 + w_y) * s_y - w_y * s_null; }

Mat guided_velocity(Model& model, const Mat& x_tokens, double t, const Conditioning& cond, const GuidanceWeights& g,
                    bool camera_active) {
  if (!std::isfinite(g.w_y) || !std::isfinite(g.w_c)) throw UsageError("guidance weights must be finite");
  const Conditioning text_only{cond.text, nullptr};
  if (camera_active && cond.plucker) {
    const Mat s_yc = model.velocity_tokens(x_tokens, t, cond);
    if (g.w_y == 0.0 && g.w_c == 0.0) return s_yc;
    const Mat zero = Mat::Zero(s_yc.rows(), s_yc.cols());
    const Mat s_c = g.w_y != 0.0 ? model.velocity_tokens(x_tokens, t, {{}, cond.plucker}) : zero;
    const Mat s_y = g.w_c != 0.0 ? model.velocity_tokens(x_tokens, t, text_only) : zero;
    return combine_guidance(s_yc, s_c, s_y, g);
  }
  const Mat s_y = model.velocity_tokens(x_tokens, t, text_only);
  if (g.w_y == 0.0) return s_y;
  return combine_text_guidance(s_y, model.velocity_tokens(x_tokens, t, {}), g.w_y);
}

SampleResult sample(Model& model, const geometry::CameraTrajectory* trajectory, const std::vector<int>& text,
                    const SampleOptions& opts, Rng& rng) {
  opts.gate.validate();
  if (opts.steps == 0) throw UsageError("sample: steps must be at least 1");
  const ModelConfig& cfg = model.config();
  std::optional<geometry::PluckerVolume> plucker;
  if (trajectory) {
    if (trajectory->size() != cfg.frames) throw DiffusionError("trajectory length does not match the frame count");
    plucker = geometry::plucker_volume(geometry::normalize_to_first(*trajectory), cfg.height, cfg.width);
  }
  Conditioning cond{text, plucker ? &*plucker : nullptr};

  std::normal_distribution<double> normal(0.0, 1.0);
  Mat x(static_cast<Eigen::Index>(cfg.tokens()), static_cast<Eigen::Index>(cfg.patch_dim()));
  for (Eigen::Index c = 0; c < x.cols(); ++c)
    for (Eigen::Index r = 0; r < x.rows(); ++r) x(r, c) = normal(rng);

  SampleResult result;
  const double n = static_cast<double>(opts.steps);
  for (std::size_t i = 0; i < opts.steps; ++i) {
    const double t = 1.0 - static_cast<double>(i) / n;
    const double t_next = 1.0 - static_cast<double>(i + 1) / n;
    const bool active = cond.plucker && opts.gate.contains(t);
    const Mat v = guided_velocity(model, x, t, cond, opts.guidance, active);
    if (opts.keep_predictions) result.predictions.emplace(t, model.unpatchify(x - t * v));
    x -= (t - t_next) * v;
  }
  result.video = model.unpatchify(x);
  if (opts.keep_predictions) result.predictions.emplace(0.0, result.video);
  return result;
}

double learning_rate(const OptimizerConfig& opt, std::size_t step, std::size_t total) {
  if (opt.warmup > 0 && step < opt.warmup)
    return opt.lr * static_cast<double>(step + 1) / static_cast<double>(opt.warmup);
  const std::size_t span = total > opt.warmup ? total - opt.warmup : 1;
  const double progress = std::min(1.0, static_cast<double>(step - std::min(step, opt.warmup)) / static_cast<double>(span));
  const double cosine = 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
  return opt.lr * (opt.min_lr_ratio + (1.0 - opt.min_lr_ratio) * cosine);
}

AdamW::AdamW(std::vector<ag::Parameter*> params, OptimizerConfig cfg) : params_(std::move(params)), cfg_(cfg) {
  for (const auto* p : params_) {
    m_.push_back(Mat::Zero(p->value.rows(), p->value.cols()));
    v_.push_back(Mat::Zero(p->value.rows(), p->value.cols()));
  }
}

void AdamW::step(double lr) {
  ++t_;
  const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    ag::Parameter& p = *params_[i];
    m_[i] = cfg_.beta1 * m_[i] + (1.0 - cfg_.beta1) * p.grad;
    v_[i] = cfg_.beta2 * v_[i] + (1.0 - cfg_.beta2) * p.grad.cwiseAbs2();
    p.value *= 1.0 - lr * cfg_.weight_decay;
    p.value.array() -= lr * (m_[i].array() / c1) / ((v_[i].array() / c2).sqrt() + cfg_.eps);
  }
}

std::vector<LossRecord> train(Model& model, const std::vector<BatchSample>& data, const TrainConfig& cfg,
                              const StepCallback& on_step) {
  if (data.empty()) throw DiffusionError("train: empty dataset");
  if (cfg.batch_size == 0) throw UsageError("train: batch_size must be positive");
  cfg.schedule.validate();
  const bool camera_phase = cfg.phase == Phase::kCamera;
  auto trainable = camera_phase ? model.camera_parameters() : model.backbone_parameters();
  auto frozen = camera_phase ? model.backbone_parameters() : model.camera_parameters();
  if (trainable.empty()) throw DiffusionError("train: no trainable parameters in this phase");

  struct FreezeGuard {
    std::vector<ag::Parameter*> params;
    explicit FreezeGuard(std::vector<ag::Parameter*> p) : params(std::move(p)) {
      for (auto* q : params) q->frozen = true;
    }
    ~FreezeGuard() {
      for (auto* q : params) q->frozen = false;
    }
  } guard(frozen);
  for (auto* p : trainable) p->frozen = false;

  AdamW opt(trainable, cfg.optimizer);
  Rng rng(cfg.seed);
  std::vector<std::size_t> order(data.size());
  std::size_t cursor = order.size();
  std::vector<LossRecord> log;
  const double inv_batch = 1.0 / static_cast<double>(cfg.batch_size);

  for (std::size_t step = 0; step < cfg.steps; ++step) {
    for (auto* p : trainable) p->zero_grad();
    double loss_sum = 0.0, t_sum = 0.0;
    for (std::size_t b = 0; b < cfg.batch_size; ++b) {
      if (cursor == order.size()) {
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      const BatchSample& s = data[order[cursor++]];
      const double t = sample_noise_level(cfg.schedule, rng);
      Tape tape;
      const Var loss = rectified_flow_loss(tape, model, s, t, rng, cfg.dropout, camera_phase, cfg.loss_normalization);
      const double value = loss.value()(0, 0);
      if (!std::isfinite(value))
        throw DivergenceError(step + 1, "non-finite loss at step " + std::to_string(step + 1));
      tape.backward(ag::scale(loss, inv_batch));
      loss_sum += value;
      t_sum += t;
    }
    double norm2 = 0.0;
    for (auto* p : trainable) norm2 += p->grad.squaredNorm();
    if (!std::isfinite(norm2))
      throw DivergenceError(step + 1, "non-finite gradient at step " + std::to_string(step + 1));
    if (cfg.optimizer.grad_clip > 0.0 && std::sqrt(norm2) > cfg.optimizer.grad_clip) {
      const double s = cfg.optimizer.grad_clip / std::sqrt(norm2);
      for (auto* p : trainable) p->grad *= s;
    }
    opt.step(learning_rate(cfg.optimizer, step, cfg.steps));
    LossRecord rec{step + 1, loss_sum * inv_batch, t_sum * inv_batch};
    log.push_back(rec);
    if (on_step) on_step(rec);
  }
  return log;
}

void write_loss_csv(const std::vector<LossRecord>& log, std::ostream& out) {
  out << "step,loss,t_mean\n";
  out.precision(9);
  for (const auto& r : log) out << r.step << ',' << r.loss << ',' << r.t_mean << '\n';
}

namespace {

std::string join_blocks(const std::vector<std::size_t>& blocks) {
  if (blocks.empty()) return "none";
  std::string s;
  for (std::size_t i = 0; i < blocks.size(); ++i) s += (i ? "," : "") + std::to_string(blocks[i]);
  return s;
}

std::size_t parse_size(const std::string& key, const std::string& v) {
  std::size_t pos = 0;
  unsigned long long x = 0;
  try {
    if (!v.empty() && v[0] == '-') throw std::invalid_argument("negative");
    x = std::stoull(v, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos == 0 || pos != v.size()) throw UsageError("config: " + key + " expects a non-negative integer, got '" + v + "'");
  return static_cast<std::size_t>(x);
}

double parse_double(const std::string& key, const std::string& v) {
  std::size_t pos = 0;
  double x = 0;
  try {
    x = std::stod(v, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos == 0 || pos != v.size()) throw UsageError("config: " + key + " expects a number, got '" + v + "'");
  return x;
}

}  // namespace

void set_config_value(ModelConfig& cfg, const std::string& key, const std::string& value) {
  if (key == "n_blocks") cfg.n_blocks = parse_size(key, value);
  else if (key == "d_main") cfg.d_main = parse_size(key, value);
  else if (key == "n_heads") cfg.n_heads = parse_size(key, value);
  else if (key == "patch") cfg.patch = parse_size(key, value);
  else if (key == "temporal_compress") cfg.temporal_compress = parse_size(key, value);
  else if (key == "d_cam") cfg.d_cam = parse_size(key, value);
  else if (key == "cam_heads") cfg.cam_heads = parse_size(key, value);
  else if (key == "cam_conv_channels") cfg.cam_conv_channels = parse_size(key, value);
  else if (key == "cam_inject_blocks") {
    cfg.cam_inject_blocks.clear();
    if (value != "none") {
      std::stringstream ss(value);
      std::string item;
      while (std::getline(ss, item, ',')) cfg.cam_inject_blocks.push_back(parse_size(key, item));
    }
  } else if (key == "rope_split") {
    std::stringstream ss(value);
    std::string item;
    std::size_t i = 0;
    while (std::getline(ss, item, ':')) {
      if (i >= 3) throw UsageError("config: rope_split expects a:b:c");
      cfg.rope_split[i++] = parse_size(key, item);
    }
    if (i != 3) throw UsageError("config: rope_split expects a:b:c");
  } else if (key == "rope_base") cfg.rope_base = parse_double(key, value);
  else if (key == "vocab") cfg.vocab = parse_size(key, value);
  else if (key == "mlp_ratio") cfg.mlp_ratio = parse_size(key, value);
  else if (key == "time_embed_dim") cfg.time_embed_dim = parse_size(key, value);
  else if (key == "frames") cfg.frames = parse_size(key, value);
  else if (key == "height") cfg.height = parse_size(key, value);
  else if (key == "width") cfg.width = parse_size(key, value);
  else if (key == "channels") cfg.channels = parse_size(key, value);
  else if (key == "feedback") {
    if (value == "camera_queries") cfg.feedback = FeedbackMode::kCameraQueries;
    else if (value == "video_queries") cfg.feedback = FeedbackMode::kVideoQueries;
    else throw UsageError("config: feedback must be camera_queries or video_queries");
  } else {
    throw UsageError("config: unknown key '" + key + "'");
  }
}

void write_model_config(const ModelConfig& cfg, std::ostream& out) {
  out << "n_blocks=" << cfg.n_blocks << '\n'
      << "d_main=" << cfg.d_main << '\n'
      << "n_heads=" << cfg.n_heads << '\n'
      << "patch=" << cfg.patch << '\n'
      << "temporal_compress=" << cfg.temporal_compress << '\n'
      << "d_cam=" << cfg.d_cam << '\n'
      << "cam_heads=" << cfg.cam_heads << '\n'
      << "cam_conv_channels=" << cfg.cam_conv_channels << '\n'
      << "cam_inject_blocks=" << join_blocks(cfg.cam_inject_blocks) << '\n'
      << "rope_split=" << cfg.rope_split[0] << ':' << cfg.rope_split[1] << ':' << cfg.rope_split[2] << '\n'
      << "rope_base=" << cfg.rope_base << '\n'
      << "vocab=" << cfg.vocab << '\n'
      << "mlp_ratio=" << cfg.mlp_ratio << '\n'
      << "time_embed_dim=" << cfg.time_embed_dim << '\n'
      << "frames=" << cfg.frames << '\n'
      << "height=" << cfg.height << '\n'
      << "width=" << cfg.width << '\n'
      << "channels=" << cfg.channels << '\n'
      << "feedback=" << (cfg.feedback == FeedbackMode::kCameraQueries ? "camera_queries" : "video_queries") << '\n';
}

ModelConfig read_model_config(std::istream& in, const std::string& origin) {
  ModelConfig cfg;
  bool inject_given = false;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos || line[first] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw UsageError(origin + ":" + std::to_string(lineno) + ": expected key=value");
    auto trim = [](std::string s) {
      const auto a = s.find_first_not_of(" \t\r"), b = s.find_last_not_of(" \t\r");
      return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
    };
    const std::string key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
    try {
      set_config_value(cfg, key, value);
    } catch (const UsageError& e) {
      throw UsageError(origin + ":" + std::to_string(lineno) + ": " + e.what());
    }
    inject_given = inject_given || key == "cam_inject_blocks";
  }
  if (!inject_given) cfg.cam_inject_blocks = ModelConfig::default_inject_blocks(cfg.n_blocks);
  cfg.validate();
  return cfg;
}

void save_checkpoint(const Model& model, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::ofstream bin(dir / "params.bin", std::ios::binary);
  std::ofstream manifest(dir / "manifest.txt");
  if (!bin || !manifest) throw DiffusionError("cannot write checkpoint in " + dir.string());
  std::uint64_t offset = 0;
  for (const ag::Parameter* p : model.parameters()) {
    Tensor t({static_cast<std::size_t>(p->value.rows()), static_cast<std::size_t>(p->value.cols())});
    for (Eigen::Index r = 0; r < p->value.rows(); ++r)
      for (Eigen::Index c = 0; c < p->value.cols(); ++c)
        t.at(static_cast<std::size_t>(r), static_cast<std::size_t>(c)) = static_cast<float>(p->value(r, c));
    tensorio::write_tensor(t, bin);
    manifest << p->name << ' ' << p->value.rows() << 'x' << p->value.cols() << ' ' << offset << " params.bin\n";
    offset += tensorio::encoded_size(t);
  }
  std::ofstream cfg(dir / "config.txt");
  write_model_config(model.config(), cfg);
  if (!bin || !manifest || !cfg) throw DiffusionError("failed writing checkpoint in " + dir.string());
}

Model load_checkpoint(const std::filesystem::path& dir) {
  std::ifstream cfg_in(dir / "config.txt");
  if (!cfg_in) throw DiffusionError("missing " + (dir / "config.txt").string());
  Model model(read_model_config(cfg_in, (dir / "config.txt").string()), 0);
  std::ifstream manifest(dir / "manifest.txt");
  if (!manifest) throw DiffusionError("missing " + (dir / "manifest.txt").string());
  std::string name, dims, file;
  std::uint64_t offset = 0;
  std::size_t loaded = 0;
  while (manifest >> name >> dims >> offset >> file) {
    std::ifstream bin(dir / file, std::ios::binary);
    if (!bin) throw DiffusionError("missing checkpoint file " + (dir / file).string());
    bin.seekg(static_cast<std::streamoff>(offset));
    const Tensor t = tensorio::read_tensor(bin, (dir / file).string());
    ag::Parameter& p = model.parameter(name);
    if (t.rank() != 2 || t.dim(0) != static_cast<std::size_t>(p.value.rows()) ||
        t.dim(1) != static_cast<std::size_t>(p.value.cols()))
      throw DiffusionError("checkpoint shape mismatch for " + name);
    for (Eigen::Index r = 0; r < p.value.rows(); ++r)
      for (Eigen::Index c = 0; c < p.value.cols(); ++c)
        p.value(r, c) = t.at(static_cast<std::size_t>(r), static_cast<std::size_t>(c));
    ++loaded;
  }
  if (loaded != model.parameters().size())
    throw DiffusionError("checkpoint lists " + std::to_string(loaded) + " of " +
                         std::to_string(model.parameters().size()) + " parameters");
  return model;
}

}  // namespace ac3d::diffusion
