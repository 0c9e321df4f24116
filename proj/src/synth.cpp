#include "ac3d/synth.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

#include "ac3d/parallel.hpp"

namespace ac3d::synth {

namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;

struct Wave {
  double kx, ky, phase, amp;
  std::array<double, 3> color;
};

std::vector<Wave> texture_waves(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<Wave> waves(6);
  for (auto& w : waves) {
    const double wavelength = 8.0 + 24.0 * u(rng);
    const double angle = kTwoPi * u(rng);
    w.kx = kTwoPi * std::cos(angle) / wavelength;
    w.ky = kTwoPi * std::sin(angle) / wavelength;
    w.phase = kTwoPi * u(rng);
    w.amp = 0.5 + 0.5 * u(rng);
    for (auto& c : w.color) c = 2.0 * u(rng) - 1.0;
  }
  return waves;
}

std::array<double, 3> texture_at(const std::vector<Wave>& waves, double x, double y) {
  std::array<double, 3> out{0.0, 0.0, 0.0};
  double norm = 0.0;
  for (const auto& w : waves) {
    const double s = w.amp * std::sin(w.kx * x + w.ky * y + w.phase);
    for (int c = 0; c < 3; ++c) out[static_cast<std::size_t>(c)] += s * w.color[static_cast<std::size_t>(c)];
    norm += w.amp * w.amp;
  }
  // Per-channel standard deviation of about 0.55.
  for (auto& c : out) c *= 0.55 / std::sqrt(norm / 6.0);
  return out;
}

double sprite_alpha(const Sprite& s, double x, double y, double f) {
  const double dx = x - (s.x + s.vx * f), dy = y - (s.y + s.vy * f);
  return std::clamp(s.radius + 0.5 - std::hypot(dx, dy), 0.0, 1.0);
}

std::array<double, 3> sprite_color(const Sprite& s, double x, double y, double f) {
  const double lx = x - (s.x + s.vx * f), ly = y - (s.y + s.vy * f);
  const double pattern = 0.3 * std::cos(kTwoPi * lx / 6.0) * std::cos(kTwoPi * ly / 6.0);
  return {0.7 * s.color[0] + pattern, 0.7 * s.color[1] + pattern, 0.7 * s.color[2] + pattern};
}

// World-to-camera extrinsics of frame f.
geometry::Extrinsics pose_at(const SceneSpec& spec, std::size_t f) {
  const double fd = static_cast<double>(f);
  const Eigen::Matrix3d cam_to_world = geometry::rotation_y(spec.yaw_rate * fd);
  const Eigen::Vector3d centre = spec.velocity * fd;
  geometry::Extrinsics e;
  e.rotation = cam_to_world.transpose();
  e.translation = -e.rotation * centre;
  return e;
}

}  // namespace

std::string mode_name(Mode m) {
  switch (m) {
    case Mode::kCameraMotion: return "camera-motion";
    case Mode::kSceneMotion: return "scene-motion";
    case Mode::kBoth: return "both";
    case Mode::kStatic: return "static";
  }
  return "static";
}

Mode parse_mode(const std::string& name) {
  if (name == "camera-motion" || name == "camera") return Mode::kCameraMotion;
  if (name == "scene-motion" || name == "scene") return Mode::kSceneMotion;
  if (name == "both") return Mode::kBoth;
  if (name == "static") return Mode::kStatic;
  throw UsageError("unknown scene mode '" + name + "'");
}

void SceneSpec::validate() const {
  if (frames < 2 || height < 16 || width < 16) throw SynthError("scene needs at least 2 frames of 16x16");
  if (!(depth > 0.0)) throw SynthError("plane depth must be positive");
  intrinsics.validate();
  const bool camera_moves = yaw_rate != 0.0 || !velocity.isZero();
  const bool sprites_move = std::any_of(sprites.begin(), sprites.end(),
                                        [](const Sprite& s) { return s.vx != 0.0 || s.vy != 0.0; });
  if ((mode == Mode::kSceneMotion || mode == Mode::kStatic) && camera_moves)
    throw SynthError(mode_name(mode) + " scenes need an identity camera");
  if ((mode == Mode::kCameraMotion || mode == Mode::kStatic) && sprites_move)
    throw SynthError(mode_name(mode) + " scenes need static sprites");
  for (const auto& s : sprites)
    if (!(s.radius > 0.0) || 2.0 * s.radius > static_cast<double>(std::min(height, width)))
      throw SynthError("sprite larger than the frame");
  // Every ray must hit the plane in front of the camera.
  const double half_fov = std::atan(0.5 / std::min(intrinsics.fx, intrinsics.fy)) * std::numbers::sqrt2;
  if (std::abs(yaw_rate) * static_cast<double>(frames - 1) + half_fov > 0.45 * std::numbers::pi)
    throw SynthError("camera turns away from the background plane");
  if (std::abs(velocity.z()) * static_cast<double>(frames - 1) > 0.5 * depth)
    throw SynthError("camera moves too close to the background plane");
}

SynthClip render_clip(const SceneSpec& spec) {
  spec.validate();
  const std::size_t F = spec.frames, H = spec.height, W = spec.width;
  const auto& in = spec.intrinsics;
  const double Wd = static_cast<double>(W), Hd = static_cast<double>(H);
  const auto waves = texture_waves(spec.texture_seed);

  SynthClip clip;
  clip.spec = spec;
  clip.video = Tensor({F, 3, H, W});
  for (std::size_t f = 0; f < F; ++f) {
    geometry::CameraFrame frame;
    frame.intrinsics = in;
    frame.extrinsics = pose_at(spec, f);
    frame.timestamp = static_cast<double>(f);
    clip.trajectory.frames.push_back(frame);
  }

  // Plane point (identity-view pixels) seen by pixel (u, v) of frame f.
  auto plane_point = [&](std::size_t f, std::size_t u, std::size_t v) {
    const auto& e = clip.trajectory.frames[f].extrinsics;
    const Eigen::Vector3d dir = e.rotation.transpose() *
                                Eigen::Vector3d(((static_cast<double>(u) + 0.5) / Wd - in.cx) / in.fx,
                                                ((static_cast<double>(v) + 0.5) / Hd - in.cy) / in.fy, 1.0);
    const Eigen::Vector3d centre = e.camera_center();
    const double s = (spec.depth - centre.z()) / dir.z();
    const Eigen::Vector3d p = centre + s * dir;
    return Eigen::Vector2d(p.x() * Wd * in.fx / spec.depth, p.y() * Hd * in.fy / spec.depth);
  };
  auto project = [&](std::size_t f, const Eigen::Vector2d& q) {
    const auto& e = clip.trajectory.frames[f].extrinsics;
    const Eigen::Vector3d world(q.x() * spec.depth / (Wd * in.fx), q.y() * spec.depth / (Hd * in.fy), spec.depth);
    const Eigen::Vector3d c = e.rotation * world + e.translation;
    return Eigen::Vector2d((in.fx * c.x() / c.z() + in.cx) * Wd - 0.5, (in.fy * c.y() / c.z() + in.cy) * Hd - 0.5);
  };

  for (std::size_t f = 0; f < F; ++f) {
    const double fd = static_cast<double>(f);
    flow::FlowField gt{Tensor({H, W, 2})};
    for (std::size_t v = 0; v < H; ++v)
      for (std::size_t u = 0; u < W; ++u) {
        const Eigen::Vector2d q = plane_point(f, u, v);
        auto rgb = texture_at(waves, q.x(), q.y());
        const Sprite* top = nullptr;
        for (const auto& s : spec.sprites) {
          const double a = sprite_alpha(s, q.x(), q.y(), fd);
          if (a <= 0.0) continue;
          const auto sc = sprite_color(s, q.x(), q.y(), fd);
          for (std::size_t c = 0; c < 3; ++c) rgb[c] = (1.0 - a) * rgb[c] + a * sc[c];
          if (a >= 0.5) top = &s;
        }
        for (std::size_t c = 0; c < 3; ++c) clip.video.at(f, c, v, u) = static_cast<float>(std::clamp(rgb[c], -1.0, 1.0));
        if (f + 1 < F) {
          const Eigen::Vector2d moved = top ? Eigen::Vector2d(q.x() + top->vx, q.y() + top->vy) : q;
          const Eigen::Vector2d p = project(f + 1, moved);
          gt.values.at(v, u, 0) = static_cast<float>(p.x() - static_cast<double>(u));
          gt.values.at(v, u, 1) = static_cast<float>(p.y() - static_cast<double>(v));
        }
      }
    if (f + 1 < F) clip.gt_flow.push_back(std::move(gt));
  }
  clip.caption = caption_for(spec);
  clip.caption_tokens = tokenize(clip.caption);
  return clip;
}

SceneSpec random_spec(Mode mode, std::mt19937_64& rng, std::size_t frames, std::size_t height, std::size_t width) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  SceneSpec spec;
  spec.mode = mode;
  spec.frames = frames;
  spec.height = height;
  spec.width = width;
  spec.texture_seed = rng();
  const bool camera = mode == Mode::kCameraMotion || mode == Mode::kBoth;
  const bool scene = mode == Mode::kSceneMotion || mode == Mode::kBoth;
  if (camera) {
    spec.yaw_rate = (u(rng) < 0.5 ? -1.0 : 1.0) * (0.015 + 0.02 * u(rng));
    spec.velocity = Eigen::Vector3d(0.1 * u(rng) - 0.05, 0.0, 0.1 * u(rng) - 0.05);
  }
  const double scale = static_cast<double>(std::min(height, width)) / 32.0;
  std::size_t count = scene ? 1 + static_cast<std::size_t>(u(rng) * 3.0) : static_cast<std::size_t>(u(rng) * 3.0);
  for (std::size_t i = 0; i < count; ++i) {
    Sprite s;
    s.radius = scale * (3.0 + 3.0 * u(rng));
    const double rx = 0.5 * static_cast<double>(width) - s.radius - 2.0;
    const double ry = 0.5 * static_cast<double>(height) - s.radius - 2.0;
    s.x = (2.0 * u(rng) - 1.0) * rx;
    s.y = (2.0 * u(rng) - 1.0) * ry;
    if (scene) {
      const double speed = 0.5 + u(rng), angle = kTwoPi * u(rng);
      s.vx = speed * std::cos(angle);
      s.vy = speed * std::sin(angle);
    }
    for (auto& c : s.color) c = 2.0 * u(rng) - 1.0;
    spec.sprites.push_back(s);
  }
  return spec;
}

const std::vector<std::string>& vocabulary() {
  static const std::vector<std::string> words = {
      "<null>", "camera", "pans", "still", "sprites", "sprite", "move", "rest", "no", "one", "two", "three",
      "four", "five", "many", "red", "green", "blue", "texture", "bright", "dark", "scene", "and", "with",
      "static", "moving", "plane", "discs"};
  return words;
}

std::vector<int> tokenize(const std::string& caption) {
  const auto& vocab = vocabulary();
  std::vector<int> ids;
  std::istringstream ss(caption);
  std::string word;
  while (ss >> word) {
    const auto it = std::find(vocab.begin() + 1, vocab.end(), word);
    if (it == vocab.end()) throw SynthError("word outside the caption vocabulary: " + word);
    ids.push_back(static_cast<int>(it - vocab.begin()));
  }
  return ids;
}

std::string caption_for(const SceneSpec& spec) {
  static const char* counts[] = {"no", "one", "two", "three", "four", "five"};
  const bool camera = spec.yaw_rate != 0.0 || !spec.velocity.isZero();
  const bool moving = std::any_of(spec.sprites.begin(), spec.sprites.end(),
                                  [](const Sprite& s) { return s.vx != 0.0 || s.vy != 0.0; });
  std::string text = camera ? "camera pans" : "camera still";
  const std::size_t n = spec.sprites.size();
  text += " with ";
  text += n < 6 ? counts[n] : "many";
  text += n == 1 ? " sprite" : " sprites";
  if (n > 0) text += moving ? " move" : " rest";

  // Dominant colour of the background texture.
  const auto waves = texture_waves(spec.texture_seed);
  std::array<double, 3> energy{0, 0, 0};
  double mean = 0.0;
  for (const auto& w : waves)
    for (std::size_t c = 0; c < 3; ++c) {
      energy[c] += w.amp * w.color[c] * w.color[c];
      mean += w.amp * w.color[c];
    }
  static const char* colours[] = {"red", "green", "blue"};
  const auto best = static_cast<std::size_t>(std::max_element(energy.begin(), energy.end()) - energy.begin());
  text += std::string(" and ") + (mean >= 0 ? "bright " : "dark ") + colours[best] + " texture";
  return text;
}

Mix parse_mix(const std::string& text) {
  Mix mix;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto eq = item.find('=');
    if (eq == std::string::npos) throw UsageError("mix entries look like mode=proportion, got '" + item + "'");
    double p = 0.0;
    try {
      std::size_t pos = 0;
      p = std::stod(item.substr(eq + 1), &pos);
      if (pos != item.size() - eq - 1) throw std::invalid_argument("trailing");
    } catch (const std::exception&) {
      throw UsageError("bad proportion in '" + item + "'");
    }
    const Mode m = parse_mode(item.substr(0, eq));
    if (mix.count(m)) throw UsageError("mode listed twice in mix: " + item.substr(0, eq));
    mix[m] = p;
  }
  return mix;
}

std::map<Mode, std::size_t> allocate(std::size_t n, const Mix& mix) {
  double total = 0.0;
  for (const auto& [m, p] : mix) {
    if (!(p >= 0.0) || !std::isfinite(p)) throw UsageError("mix proportions must be non-negative");
    total += p;
  }
  if (mix.empty() || std::abs(total - 1.0) > 1e-9) throw UsageError("mix proportions must sum to 1");
  std::map<Mode, std::size_t> counts;
  std::vector<std::pair<double, Mode>> remainders;
  std::size_t assigned = 0;
  for (const auto& [m, p] : mix) {
    const double exact = p * static_cast<double>(n);
    // Snap values within round-off of an integer before flooring.
    const double snapped = std::abs(exact - std::round(exact)) < 1e-9 ? std::round(exact) : exact;
    counts[m] = static_cast<std::size_t>(std::floor(snapped));
    assigned += counts[m];
    remainders.emplace_back(snapped - std::floor(snapped), m);
  }
  std::stable_sort(remainders.begin(), remainders.end(),
                   [](const auto& a, const auto& b) { return a.first > b.first; });
  for (std::size_t i = 0; assigned < n; ++i, ++assigned) ++counts[remainders[i % remainders.size()].second];
  return counts;
}

std::vector<SynthClip> make_dataset(std::size_t n_clips, const Mix& mix, std::uint64_t seed,
                                    const DatasetOptions& opts) {
  const auto counts = allocate(n_clips, mix);
  std::vector<Mode> modes;
  for (const auto& [m, c] : counts) modes.insert(modes.end(), c, m);
  std::mt19937_64 order_rng(seed);
  std::shuffle(modes.begin(), modes.end(), order_rng);

  std::vector<SynthClip> clips(n_clips);
  parallel_for(n_clips, [&](std::size_t i) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(i)};
    std::mt19937_64 rng(seq);
    clips[i] = render_clip(random_spec(modes[i], rng, opts.frames, opts.height, opts.width));
  });
  return clips;
}

namespace {

std::string clip_id(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "clip_%04zu", i);
  return buf;
}

}  // namespace

void write_manifest(const std::vector<SynthClip>& clips, std::ostream& out) {
  out << "clip_id,mode,texture_seed,yaw_rate,tx,ty,tz,sprite_count,max_sprite_speed,frames,height,width,caption,tokens\n";
  out.precision(17);
  for (std::size_t i = 0; i < clips.size(); ++i) {
    const auto& s = clips[i].spec;
    double speed = 0.0;
    for (const auto& sp : s.sprites) speed = std::max(speed, std::hypot(sp.vx, sp.vy));
    std::string tokens;
    for (std::size_t k = 0; k < clips[i].caption_tokens.size(); ++k)
      tokens += (k ? " " : "") + std::to_string(clips[i].caption_tokens[k]);
    out << clip_id(i) << ',' << mode_name(s.mode) << ',' << s.texture_seed << ',' << s.yaw_rate << ','
        << s.velocity.x() << ',' << s.velocity.y() << ',' << s.velocity.z() << ',' << s.sprites.size() << ','
        << speed << ',' << s.frames << ',' << s.height << ',' << s.width << ',' << clips[i].caption << ','
        << tokens << '\n';
  }
}

void write_dataset(const std::vector<SynthClip>& clips, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  for (std::size_t i = 0; i < clips.size(); ++i) {
    const auto& clip = clips[i];
    const std::string id = clip_id(i);
    tensorio::write_tensor(clip.video, dir / (id + ".video.tnsr"));
    const std::size_t H = clip.spec.height, W = clip.spec.width;
    Tensor flows({clip.gt_flow.size(), H, W, 2});
    for (std::size_t f = 0; f < clip.gt_flow.size(); ++f)
      std::copy(clip.gt_flow[f].values.data().begin(), clip.gt_flow[f].values.data().end(),
                flows.data().begin() + static_cast<std::ptrdiff_t>(f * H * W * 2));
    tensorio::write_tensor(flows, dir / (id + ".flow.tnsr"));
    tensorio::write_trajectory(geometry::to_trajectory_file(clip.trajectory, id), dir / (id + ".traj.txt"));
  }
  std::ofstream out(dir / "manifest.csv");
  write_manifest(clips, out);
  if (!out) throw SynthError("cannot write " + (dir / "manifest.csv").string());
}

std::vector<ManifestRow> read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw SynthError("cannot open " + path.string());
  std::string line;
  std::getline(in, line);
  if (line.rfind("clip_id,mode,", 0) != 0) throw SynthError(path.string() + ": not a synth manifest");
  std::vector<ManifestRow> rows;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> cols;
    std::stringstream ss(line);
    std::string c;
    while (std::getline(ss, c, ',')) cols.push_back(c);
    if (cols.size() != 14) throw SynthError(path.string() + ":" + std::to_string(lineno) + ": expected 14 columns");
    ManifestRow row;
    row.clip_id = cols[0];
    try {
      row.mode = parse_mode(cols[1]);
      row.yaw_rate = std::stod(cols[3]);
    } catch (const std::exception& e) {
      throw SynthError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
    std::istringstream ts(cols[13]);
    int tok = 0;
    while (ts >> tok) row.tokens.push_back(tok);
    rows.push_back(std::move(row));
  }
  return rows;
}

std::vector<StoredClip> read_dataset(const std::filesystem::path& dir) {
  std::vector<StoredClip> out;
  for (auto& row : read_manifest(dir / "manifest.csv")) {
    StoredClip clip;
    clip.video = tensorio::read_tensor(dir / (row.clip_id + ".video.tnsr"));
    clip.trajectory = geometry::build_trajectory(tensorio::parse_trajectory(dir / (row.clip_id + ".traj.txt")));
    clip.row = std::move(row);
    out.push_back(std::move(clip));
  }
  return out;
}

}  // namespace ac3d::synth
