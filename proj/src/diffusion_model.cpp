#include <algorithm>
#include <cmath>
#include <numbers>
#include <set>

#include "ac3d/diffusion.hpp"

namespace ac3d::diffusion {

using ag::Tape;
using ag::Var;

std::vector<std::size_t> ModelConfig::default_inject_blocks(std::size_t n_blocks) {
  std::vector<std::size_t> out;
  for (std::size_t b = 1; b <= std::max<std::size_t>(1, n_blocks / 4) && b <= n_blocks; ++b) out.push_back(b);
  return out;
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& msg) { throw UsageError("model config: " + msg); };
  if (n_blocks == 0) fail("n_blocks must be positive");
  if (n_heads == 0 || d_main % n_heads != 0) fail("d_main must be divisible by n_heads");
  if (cam_heads == 0 || d_cam % cam_heads != 0) fail("d_cam must be divisible by cam_heads");
  const std::size_t split = rope_split[0] + rope_split[1] + rope_split[2];
  if (rope_split[0] == 0 || rope_split[1] == 0 || rope_split[2] == 0) fail("rope_split entries must be positive");
  for (std::size_t dh : {d_main / n_heads, d_cam / cam_heads})
    if (dh % (2 * split) != 0) fail("head width must be divisible by 2 * sum(rope_split)");
  if (patch == 0 || height % patch != 0 || width % patch != 0) fail("patch must divide height and width");
  if (temporal_compress != 4) fail("temporal_compress must be 4 (two stride-2 stages)");
  if (frames == 0 || channels == 0 || vocab == 0 || mlp_ratio == 0 || cam_conv_channels == 0) fail("zero size");
  if (time_embed_dim == 0 || time_embed_dim % 2 != 0) fail("time_embed_dim must be even");
  std::set<std::size_t> seen;
  for (std::size_t b : cam_inject_blocks) {
    if (b < 1 || b > n_blocks) fail("cam_inject_blocks entry out of range: " + std::to_string(b));
    if (!seen.insert(b).second) fail("duplicate cam_inject_blocks entry");
  }
}

ag::RopeTable make_rope_table(const std::vector<std::array<double, 3>>& positions, std::size_t head_dim,
                              const std::array<std::size_t, 3>& split, double base) {
  const std::size_t total = split[0] + split[1] + split[2];
  const std::size_t half = head_dim / 2;
  ag::RopeTable table{Mat(positions.size(), half), Mat(positions.size(), half)};
  std::size_t col = 0;
  for (int axis = 0; axis < 3; ++axis) {
    const std::size_t pairs = head_dim * split[static_cast<std::size_t>(axis)] / total / 2;
    for (std::size_t i = 0; i < pairs; ++i, ++col) {
      const double freq = std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(2 * pairs));
      for (std::size_t n = 0; n < positions.size(); ++n) {
        const double angle = positions[n][static_cast<std::size_t>(axis)] * freq;
        table.cos(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(col)) = std::cos(angle);
        table.sin(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(col)) = std::sin(angle);
      }
    }
  }
  return table;
}

std::vector<std::array<double, 3>> video_positions(const ModelConfig& cfg) {
  std::vector<std::array<double, 3>> pos;
  for (std::size_t f = 0; f < cfg.frames; ++f)
    for (std::size_t y = 0; y < cfg.grid_h(); ++y)
      for (std::size_t x = 0; x < cfg.grid_w(); ++x)
        pos.push_back({static_cast<double>(f), static_cast<double>(y), static_cast<double>(x)});
  return pos;
}

std::vector<std::array<double, 3>> camera_positions(const ModelConfig& cfg) {
  const double c = static_cast<double>(cfg.temporal_compress);
  std::vector<std::array<double, 3>> pos;
  for (std::size_t j = 0; j < cfg.compressed_frames(); ++j)
    for (std::size_t y = 0; y < cfg.grid_h(); ++y)
      for (std::size_t x = 0; x < cfg.grid_w(); ++x)
        pos.push_back({c * static_cast<double>(j) + (c - 1.0) / 2.0, static_cast<double>(y), static_cast<double>(x)});
  return pos;
}

namespace {

// Causal conv over per-pixel sequences stored as rows (pixel * len + i).
ag::GatherMap causal_conv_map(std::size_t pixels, std::size_t len_in, std::size_t kernel, std::size_t stride,
                              std::size_t pad) {
  const std::size_t len_out = (len_in + pad - kernel) / stride + 1;
  ag::GatherMap map{{}, kernel};
  map.index.reserve(pixels * len_out * kernel);
  for (std::size_t p = 0; p < pixels; ++p)
    for (std::size_t i = 0; i < len_out; ++i)
      for (std::size_t k = 0; k < kernel; ++k) {
        const long src = static_cast<long>(i * stride + k) - static_cast<long>(pad);
        map.index.push_back(src < 0 ? -1 : static_cast<int>(p * len_in + static_cast<std::size_t>(src)));
      }
  return map;
}

}  // namespace

Model::Model(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg), init_rng_(seed) {
  cfg_.validate();
  const std::size_t d = cfg_.d_main, dc = cfg_.d_cam, pd = cfg_.patch_dim(), cc = cfg_.cam_conv_channels;

  in_proj_ = add_linear("in_proj", pd, d);
  time1_ = add_linear("time.1", cfg_.time_embed_dim, d);
  time2_ = add_linear("time.2", d, d);
  text_embed_ = add_param("text_embed", static_cast<Eigen::Index>(cfg_.vocab), static_cast<Eigen::Index>(d), 1.0);
  for (std::size_t b = 1; b <= cfg_.n_blocks; ++b) {
    const std::string p = "block" + std::to_string(b) + ".";
    MainBlock blk;
    blk.text_q = add_linear(p + "text.q", d, d);
    blk.text_k = add_linear(p + "text.k", d, d);
    blk.text_v = add_linear(p + "text.v", d, d);
    blk.text_o = add_linear(p + "text.o", d, d);
    blk.self = add_attention(p + "attn", d, d, d, cfg_.n_heads);
    blk.mlp1 = add_linear(p + "mlp.1", d, cfg_.mlp_ratio * d);
    blk.mlp2 = add_linear(p + "mlp.2", cfg_.mlp_ratio * d, d);
    blk.mod = add_linear(p + "mod", d, 6 * d, true);
    blocks_.push_back(blk);
  }
  final_mod_ = add_linear("final.mod", d, 2 * d, true);
  final_out_ = add_linear("final.out", d, pd, true);

  conv_[0] = add_linear("cam.conv1", 3 * 6, cc);
  conv_[1] = add_linear("cam.conv2", 4 * cc, cc);
  conv_[2] = add_linear("cam.conv3", 4 * cc, cc);
  cam_proj_ = add_linear("cam.proj", cfg_.patch * cfg_.patch * cc, dc);
  std::vector<std::size_t> inject = cfg_.cam_inject_blocks;
  std::sort(inject.begin(), inject.end());
  for (std::size_t b : inject) {
    const std::string p = "cam.block" + std::to_string(b) + ".";
    CameraBlock blk;
    blk.self = add_attention(p + "attn", dc, dc, dc, cfg_.cam_heads);
    if (cfg_.feedback == FeedbackMode::kCameraQueries)
      blk.feedback = add_attention(p + "feedback", dc, d, dc, cfg_.cam_heads);
    else
      blk.feedback = add_attention(p + "feedback", d, dc, dc, cfg_.cam_heads);
    blk.mlp1 = add_linear(p + "mlp.1", dc, cfg_.mlp_ratio * dc);
    blk.mlp2 = add_linear(p + "mlp.2", cfg_.mlp_ratio * dc, dc);
    blk.mod = add_linear(p + "mod", d, 6 * dc, true);
    blk.inject = add_linear(p + "inject", dc, d, true);
    cam_blocks_.emplace(b, blk);
  }

  const auto vpos = video_positions(cfg_), cpos = camera_positions(cfg_);
  rope_video_ = make_rope_table(vpos, d / cfg_.n_heads, cfg_.rope_split, cfg_.rope_base);
  rope_video_cam_ = make_rope_table(vpos, dc / cfg_.cam_heads, cfg_.rope_split, cfg_.rope_base);
  rope_cam_ = make_rope_table(cpos, dc / cfg_.cam_heads, cfg_.rope_split, cfg_.rope_base);

  const std::size_t pixels = cfg_.height * cfg_.width;
  const std::size_t padded = cfg_.compressed_frames() * cfg_.temporal_compress;
  conv_maps_[0] = causal_conv_map(pixels, padded, 3, 1, 2);
  conv_maps_[1] = causal_conv_map(pixels, padded, 4, 2, 2);
  conv_maps_[2] = causal_conv_map(pixels, padded / 2, 4, 2, 2);

  const std::size_t fc = cfg_.compressed_frames(), gh = cfg_.grid_h(), gw = cfg_.grid_w(), p = cfg_.patch;
  cam_patch_map_ = {{}, p * p};
  for (std::size_t j = 0; j < fc; ++j)
    for (std::size_t py = 0; py < gh; ++py)
      for (std::size_t px = 0; px < gw; ++px)
        for (std::size_t dy = 0; dy < p; ++dy)
          for (std::size_t dx = 0; dx < p; ++dx)
            cam_patch_map_.index.push_back(
                static_cast<int>(((py * p + dy) * cfg_.width + px * p + dx) * fc + j));
  cam_repeat_ = {{}, 1};
  for (std::size_t f = 0; f < cfg_.frames; ++f)
    for (std::size_t s = 0; s < gh * gw; ++s)
      cam_repeat_.index.push_back(static_cast<int>((f / cfg_.temporal_compress) * gh * gw + s));
}

ag::Parameter* Model::add_param(const std::string& name, Eigen::Index rows, Eigen::Index cols, double stddev) {
  auto p = std::make_unique<ag::Parameter>();
  p->name = name;
  p->value = Mat::Zero(rows, cols);
  if (stddev > 0) {
    std::normal_distribution<double> n(0.0, stddev);
    for (Eigen::Index c = 0; c < cols; ++c)
      for (Eigen::Index r = 0; r < rows; ++r) p->value(r, c) = n(init_rng_);
  }
  p->zero_grad();
  ag::Parameter* raw = p.get();
  if (!by_name_.emplace(name, raw).second) throw std::logic_error("duplicate parameter " + name);
  params_.push_back(std::move(p));
  return raw;
}

Model::Linear Model::add_linear(const std::string& name, std::size_t in, std::size_t out, bool zero) {
  const double sd = zero ? 0.0 : 1.0 / std::sqrt(static_cast<double>(in));
  return {add_param(name + ".w", static_cast<Eigen::Index>(in), static_cast<Eigen::Index>(out), sd),
          add_param(name + ".b", 1, static_cast<Eigen::Index>(out), 0.0)};
}

Model::Attention Model::add_attention(const std::string& name, std::size_t d_q, std::size_t d_kv, std::size_t d,
                                      std::size_t heads) {
  Attention a;
  a.q = add_linear(name + ".q", d_q, d);
  a.k = add_linear(name + ".k", d_kv, d);
  a.v = add_linear(name + ".v", d_kv, d);
  a.o = add_linear(name + ".o", d, d);
  if (heads > 0) {
    a.q_gain = add_param(name + ".q_gain", 1, static_cast<Eigen::Index>(d / heads), 0.0);
    a.k_gain = add_param(name + ".k_gain", 1, static_cast<Eigen::Index>(d / heads), 0.0);
    a.q_gain->value.setOnes();
    a.k_gain->value.setOnes();
  }
  return a;
}

std::vector<ag::Parameter*> Model::parameters() {
  std::vector<ag::Parameter*> out;
  for (auto& p : params_) out.push_back(p.get());
  return out;
}

std::vector<const ag::Parameter*> Model::parameters() const {
  std::vector<const ag::Parameter*> out;
  for (const auto& p : params_) out.push_back(p.get());
  return out;
}

bool Model::is_camera_parameter(const std::string& name) { return name.rfind("cam.", 0) == 0; }

std::vector<ag::Parameter*> Model::backbone_parameters() {
  std::vector<ag::Parameter*> out;
  for (auto& p : params_)
    if (!is_camera_parameter(p->name)) out.push_back(p.get());
  return out;
}

std::vector<ag::Parameter*> Model::camera_parameters() {
  std::vector<ag::Parameter*> out;
  for (auto& p : params_)
    if (is_camera_parameter(p->name)) out.push_back(p.get());
  return out;
}

ag::Parameter& Model::parameter(const std::string& name) {
  const auto it = by_name_.find(name);
  if (it == by_name_.end()) throw DiffusionError("unknown parameter " + name);
  return *it->second;
}

Var Model::apply(Tape& tape, const Linear& l, Var x) { return ag::linear(x, tape.param(*l.w), tape.param(*l.b)); }

Var Model::attend(Tape& tape, const Attention& a, Var xq, Var xkv, std::size_t heads, const ag::RopeTable* rope_q,
                  const ag::RopeTable* rope_k) {
  Var q = apply(tape, a.q, xq);
  Var k = apply(tape, a.k, xkv);
  Var v = apply(tape, a.v, xkv);
  if (a.q_gain) {
    q = ag::rms_norm_heads(q, tape.param(*a.q_gain), heads);
    k = ag::rms_norm_heads(k, tape.param(*a.k_gain), heads);
  }
  if (rope_q) q = ag::rope(q, *rope_q, heads);
  if (rope_k) k = ag::rope(k, *rope_k, heads);
  return apply(tape, a.o, ag::attention(q, k, v, heads));
}

Var Model::time_embedding(Tape& tape, double t) {
  const std::size_t half = cfg_.time_embed_dim / 2;
  Mat e(1, static_cast<Eigen::Index>(cfg_.time_embed_dim));
  for (std::size_t i = 0; i < half; ++i) {
    const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
    e(0, static_cast<Eigen::Index>(i)) = std::cos(1000.0 * t * freq);
    e(0, static_cast<Eigen::Index>(half + i)) = std::sin(1000.0 * t * freq);
  }
  return apply(tape, time2_, ag::silu(apply(tape, time1_, tape.constant(std::move(e)))));
}

Var Model::encode_camera(Tape& tape, const geometry::PluckerVolume& plucker) {
  const auto& dims = plucker.values.dims();
  if (dims.size() != 4 || dims[0] != cfg_.frames || dims[1] != cfg_.height || dims[2] != cfg_.width || dims[3] != 6)
    throw DiffusionError("Plücker volume does not match the video grid");
  const std::size_t pixels = cfg_.height * cfg_.width;
  const std::size_t padded = cfg_.compressed_frames() * cfg_.temporal_compress;
  Mat seq = Mat::Zero(static_cast<Eigen::Index>(pixels * padded), 6);
  const auto src = plucker.values.data();
  for (std::size_t f = 0; f < cfg_.frames; ++f)
    for (std::size_t p = 0; p < pixels; ++p)
      for (std::size_t c = 0; c < 6; ++c)
        seq(static_cast<Eigen::Index>(p * padded + f), static_cast<Eigen::Index>(c)) = src[(f * pixels + p) * 6 + c];
  Var x = tape.constant(std::move(seq));
  x = ag::silu(apply(tape, conv_[0], ag::gather_rows(x, conv_maps_[0])));
  x = ag::silu(apply(tape, conv_[1], ag::gather_rows(x, conv_maps_[1])));
  x = apply(tape, conv_[2], ag::gather_rows(x, conv_maps_[2]));
  return apply(tape, cam_proj_, ag::gather_rows(x, cam_patch_map_));
}

Mat Model::encode_camera(const geometry::PluckerVolume& plucker) {
  Tape tape(false);
  return encode_camera(tape, plucker).value();
}

Var Model::forward(Tape& tape, const Mat& x_tokens, double t, const Conditioning& cond, const ActivationTap* tap) {
  if (x_tokens.rows() != static_cast<Eigen::Index>(cfg_.tokens()) ||
      x_tokens.cols() != static_cast<Eigen::Index>(cfg_.patch_dim()))
    throw DiffusionError("token grid does not match the model configuration");
  const std::size_t d = cfg_.d_main, dc = cfg_.d_cam;
  Var h = apply(tape, in_proj_, tape.constant(x_tokens));
  const Var st = ag::silu(time_embedding(tape, t));

  ag::GatherMap text_map{{}, 1};
  for (int tok : cond.text) {
    if (tok < 0 || static_cast<std::size_t>(tok) >= cfg_.vocab)
      throw DiffusionError("text token out of range: " + std::to_string(tok));
    text_map.index.push_back(tok);
  }
  if (text_map.index.empty()) text_map.index.push_back(0);
  const Var text = ag::gather_rows(tape.param(*text_embed_), text_map);

  std::optional<Var> cam;
  if (cond.plucker && !cam_blocks_.empty()) cam = encode_camera(tape, *cond.plucker);

  const auto split6 = [&](Var mod, std::size_t width) {
    std::array<Var, 6> out;
    for (std::size_t i = 0; i < 6; ++i)
      out[i] = ag::slice_cols(mod, static_cast<Eigen::Index>(i * width), static_cast<Eigen::Index>(width));
    return out;
  };

  for (std::size_t b = 1; b <= cfg_.n_blocks; ++b) {
    if (cam) {
      const auto it = cam_blocks_.find(b);
      if (it != cam_blocks_.end()) {
        const CameraBlock& cb = it->second;
        Var& c = *cam;
        const auto m = split6(apply(tape, cb.mod, st), dc);
        Var a = ag::modulate(ag::layer_norm(c), m[0], m[1]);
        c = ag::add(c, ag::mul_row(attend(tape, cb.self, a, a, cfg_.cam_heads, &rope_cam_, &rope_cam_), m[2]));
        if (cfg_.feedback == FeedbackMode::kCameraQueries) {
          c = ag::add(c, attend(tape, cb.feedback, ag::layer_norm(c), ag::layer_norm(h), cfg_.cam_heads, &rope_cam_,
                                &rope_video_cam_));
        }
        a = ag::modulate(ag::layer_norm(c), m[3], m[4]);
        c = ag::add(c, ag::mul_row(apply(tape, cb.mlp2, ag::silu(apply(tape, cb.mlp1, a))), m[5]));
        Var injected = cfg_.feedback == FeedbackMode::kCameraQueries
                           ? ag::gather_rows(c, cam_repeat_)
                           : attend(tape, cb.feedback, ag::layer_norm(h), ag::layer_norm(c), cfg_.cam_heads,
                                    &rope_video_cam_, &rope_cam_);
        h = ag::add(h, apply(tape, cb.inject, injected));
      }
    }
    const MainBlock& blk = blocks_[b - 1];
    const Var n1 = ag::layer_norm(h);
    const Var tq = apply(tape, blk.text_q, n1);
    h = ag::add(h, apply(tape, blk.text_o,
                         ag::attention(tq, apply(tape, blk.text_k, text), apply(tape, blk.text_v, text), cfg_.n_heads)));
    const auto m = split6(apply(tape, blk.mod, st), d);
    Var a = ag::modulate(ag::layer_norm(h), m[0], m[1]);
    h = ag::add(h, ag::mul_row(attend(tape, blk.self, a, a, cfg_.n_heads, &rope_video_, &rope_video_), m[2]));
    a = ag::modulate(ag::layer_norm(h), m[3], m[4]);
    h = ag::add(h, ag::mul_row(apply(tape, blk.mlp2, ag::silu(apply(tape, blk.mlp1, a))), m[5]));

    if (tap && *tap) {
      const Mat& hv = h.value();
      const std::size_t gh = cfg_.grid_h(), gw = cfg_.grid_w();
      Tensor feat({d, cfg_.frames, gh, gw});
      auto out = feat.data();
      const std::size_t n = cfg_.tokens();
      for (std::size_t c = 0; c < d; ++c)
        for (std::size_t r = 0; r < n; ++r)
          out[c * n + r] = static_cast<float>(hv(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)));
      (*tap)(b, feat);
    }
  }
  const Var fm = apply(tape, final_mod_, st);
  const Var shift = ag::slice_cols(fm, 0, static_cast<Eigen::Index>(d));
  const Var scl = ag::slice_cols(fm, static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(d));
  return apply(tape, final_out_, ag::modulate(ag::layer_norm(h), shift, scl));
}

Mat Model::velocity_tokens(const Mat& x_tokens, double t, const Conditioning& cond) {
  Tape tape(false);
  return forward(tape, x_tokens, t, cond).value();
}

Tensor Model::velocity(const Tensor& x_t, double t, const Conditioning& cond, const ActivationTap* tap) {
  Tape tape(false);
  return unpatchify(forward(tape, patchify(x_t), t, cond, tap).value());
}

Mat Model::patchify(const Tensor& video) const {
  const auto& dims = video.dims();
  if (dims.size() != 4 || dims[0] != cfg_.frames || dims[1] != cfg_.channels || dims[2] != cfg_.height ||
      dims[3] != cfg_.width)
    throw DiffusionError("video shape does not match the model configuration");
  const std::size_t p = cfg_.patch, gh = cfg_.grid_h(), gw = cfg_.grid_w();
  Mat out(static_cast<Eigen::Index>(cfg_.tokens()), static_cast<Eigen::Index>(cfg_.patch_dim()));
  for (std::size_t f = 0; f < cfg_.frames; ++f)
    for (std::size_t py = 0; py < gh; ++py)
      for (std::size_t px = 0; px < gw; ++px) {
        const auto row = static_cast<Eigen::Index>((f * gh + py) * gw + px);
        for (std::size_t c = 0; c < cfg_.channels; ++c)
          for (std::size_t dy = 0; dy < p; ++dy)
            for (std::size_t dx = 0; dx < p; ++dx)
              out(row, static_cast<Eigen::Index>((c * p + dy) * p + dx)) = video.at(f, c, py * p + dy, px * p + dx);
      }
  return out;
}

Tensor Model::unpatchify(const Mat& tokens) const {
  if (tokens.rows() != static_cast<Eigen::Index>(cfg_.tokens()) ||
      tokens.cols() != static_cast<Eigen::Index>(cfg_.patch_dim()))
    throw DiffusionError("token matrix does not match the model configuration");
  const std::size_t p = cfg_.patch, gh = cfg_.grid_h(), gw = cfg_.grid_w();
  Tensor video({cfg_.frames, cfg_.channels, cfg_.height, cfg_.width});
  for (std::size_t f = 0; f < cfg_.frames; ++f)
    for (std::size_t py = 0; py < gh; ++py)
      for (std::size_t px = 0; px < gw; ++px) {
        const auto row = static_cast<Eigen::Index>((f * gh + py) * gw + px);
        for (std::size_t c = 0; c < cfg_.channels; ++c)
          for (std::size_t dy = 0; dy < p; ++dy)
            for (std::size_t dx = 0; dx < p; ++dx)
              video.at(f, c, py * p + dy, px * p + dx) =
                  static_cast<float>(tokens(row, static_cast<Eigen::Index>((c * p + dy) * p + dx)));
      }
  return video;
}

}  // namespace ac3d::diffusion
