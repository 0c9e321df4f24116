#include <doctest.h>

#include <cmath>
#include <fstream>
#include <sstream>

#include "ac3d/flow_spectral.hpp"
#include "ac3d/synth.hpp"
#include "ac3d/tensorio.hpp"
#include "test_util.hpp"

using namespace ac3d;
using namespace ac3d::synth;

namespace {

Tensor frame_of(const Tensor& video, std::size_t f) {
  const std::size_t C = video.dim(1), H = video.dim(2), W = video.dim(3);
  Tensor out({C, H, W});
  std::copy_n(video.data().begin() + static_cast<std::ptrdiff_t>(f * C * H * W), C * H * W, out.data().begin());
  return out;
}

std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

bool moving_sprites(const SceneSpec& s) {
  for (const auto& sp : s.sprites)
    if (sp.vx != 0.0 || sp.vy != 0.0) return true;
  return false;
}

}  // namespace

TEST_CASE("static scene without sprites is frozen") {
  SceneSpec spec;
  spec.texture_seed = 11;
  const auto clip = render_clip(spec);
  REQUIRE(clip.gt_flow.size() == spec.frames - 1);
  for (const auto& f : clip.gt_flow)
    for (float v : f.values.data()) CHECK(v == 0.0f);
  const Tensor first = frame_of(clip.video, 0);
  for (std::size_t f = 1; f < spec.frames; ++f) {
    const Tensor cur = frame_of(clip.video, f);
    CHECK(std::equal(first.data().begin(), first.data().end(), cur.data().begin()));
  }
  for (const auto& fr : clip.trajectory.frames) {
    CHECK(fr.extrinsics.rotation.isIdentity(0.0));
    CHECK(fr.extrinsics.translation.isZero(0.0));
  }
}

TEST_CASE("pure yaw gives the small-angle centre flow") {
  for (double omega : {0.02, -0.03, 0.01}) {
    SceneSpec spec;
    spec.mode = Mode::kCameraMotion;
    spec.yaw_rate = omega;
    spec.texture_seed = 3;
    spec.intrinsics = {1.2, 1.2, 0.5, 0.5};
    const auto clip = render_clip(spec);
    const double expected = -spec.intrinsics.fx * static_cast<double>(spec.width) * omega;
    // Centre of the image sits between pixels 15 and 16.
    const auto& f0 = clip.gt_flow[0];
    const double centre = 0.25 * (f0.dx(15, 15) + f0.dx(15, 16) + f0.dx(16, 15) + f0.dx(16, 16));
    CHECK(centre == doctest::Approx(expected).epsilon(0.02));
    CHECK(std::abs(f0.dy(16, 16)) < 0.05);
  }
}

TEST_CASE("sprite translation gives its velocity inside and zero outside") {
  SceneSpec spec;
  spec.mode = Mode::kSceneMotion;
  spec.texture_seed = 5;
  Sprite s;
  s.vx = 2.0;
  s.radius = 5.0;
  s.color = {0.9, -0.5, 0.2};
  spec.sprites = {s};
  const auto clip = render_clip(spec);
  const auto& f0 = clip.gt_flow[0];
  // Sprite centre (0, 0) maps to pixel 15.5; sample well inside and well outside.
  for (std::size_t y = 13; y <= 18; ++y)
    for (std::size_t x = 13; x <= 18; ++x) {
      CHECK(f0.dx(y, x) == doctest::Approx(2.0).epsilon(1e-9));
      CHECK(f0.dy(y, x) == doctest::Approx(0.0));
    }
  for (std::size_t y : {0u, 2u, 29u, 31u})
    for (std::size_t x = 0; x < spec.width; ++x) {
      CHECK(f0.dx(y, x) == 0.0f);
      CHECK(f0.dy(y, x) == 0.0f);
    }
}

TEST_CASE("spec validation") {
  SceneSpec spec;
  Sprite big;
  big.radius = 20.0;
  spec.sprites = {big};
  CHECK_THROWS_AS(render_clip(spec), SynthError);

  SceneSpec scene;
  scene.mode = Mode::kSceneMotion;
  scene.yaw_rate = 0.01;
  CHECK_THROWS_AS(scene.validate(), SynthError);

  SceneSpec camera;
  camera.mode = Mode::kCameraMotion;
  Sprite moving;
  moving.vx = 1.0;
  camera.sprites = {moving};
  CHECK_THROWS_AS(camera.validate(), SynthError);

  SceneSpec turn;
  turn.mode = Mode::kCameraMotion;
  turn.yaw_rate = 0.2;
  CHECK_THROWS_AS(turn.validate(), SynthError);
}

TEST_CASE("random specs respect the mode invariants") {
  std::mt19937_64 rng(1);
  for (int i = 0; i < 50; ++i) {
    for (Mode m : {Mode::kCameraMotion, Mode::kSceneMotion, Mode::kBoth, Mode::kStatic}) {
      const SceneSpec s = random_spec(m, rng);
      CHECK_NOTHROW(s.validate());
      const bool cam = s.yaw_rate != 0.0 || !s.velocity.isZero();
      CHECK(cam == (m == Mode::kCameraMotion || m == Mode::kBoth));
      CHECK(moving_sprites(s) == (m == Mode::kSceneMotion || m == Mode::kBoth));
    }
  }
}

TEST_CASE("captions tokenize inside the vocabulary") {
  CHECK(vocabulary().size() <= 64);
  CHECK(vocabulary()[0] == "<null>");
  std::mt19937_64 rng(2);
  for (Mode m : {Mode::kCameraMotion, Mode::kSceneMotion, Mode::kBoth, Mode::kStatic}) {
    const auto s = random_spec(m, rng);
    const auto tokens = tokenize(caption_for(s));
    CHECK(!tokens.empty());
    for (int t : tokens) CHECK((t > 0 && t < 64));
  }
  CHECK(caption_for(SceneSpec{}).rfind("camera still with no sprites", 0) == 0);
  CHECK_THROWS_AS(tokenize("camera flies"), SynthError);
}

TEST_CASE("largest-remainder allocation") {
  const auto a = allocate(400, {{Mode::kCameraMotion, 0.75}, {Mode::kStatic, 0.25}});
  CHECK(a.at(Mode::kCameraMotion) == 300);
  CHECK(a.at(Mode::kStatic) == 100);

  // 10 * (1/3, 1/3, 1/3): floors 3, 3, 3, the tie goes to the earlier mode.
  const auto b = allocate(10, {{Mode::kCameraMotion, 1.0 / 3}, {Mode::kSceneMotion, 1.0 / 3}, {Mode::kStatic, 1.0 / 3}});
  CHECK(b.at(Mode::kCameraMotion) == 4);
  CHECK(b.at(Mode::kSceneMotion) == 3);
  CHECK(b.at(Mode::kStatic) == 3);

  // 7 * (0.5, 0.3, 0.2) = 3.5, 2.1, 1.4: floors 3, 2, 1, remainder to the 0.5.
  const auto c = allocate(7, {{Mode::kCameraMotion, 0.5}, {Mode::kSceneMotion, 0.3}, {Mode::kStatic, 0.2}});
  CHECK(c.at(Mode::kCameraMotion) == 4);
  CHECK(c.at(Mode::kSceneMotion) == 2);
  CHECK(c.at(Mode::kStatic) == 1);

  CHECK_THROWS_AS(allocate(5, {{Mode::kStatic, 0.5}}), UsageError);
  CHECK_THROWS_AS(allocate(5, {{Mode::kStatic, 1.5}, {Mode::kBoth, -0.5}}), UsageError);
}

TEST_CASE("mix parsing") {
  const auto m = parse_mix("camera=0.75,static=0.25");
  CHECK(m.at(Mode::kCameraMotion) == 0.75);
  CHECK(m.at(Mode::kStatic) == 0.25);
  CHECK_THROWS_AS(parse_mix("camera"), UsageError);
  CHECK_THROWS_AS(parse_mix("camera=x"), UsageError);
  CHECK_THROWS_AS(parse_mix("drone=1"), UsageError);
  CHECK_THROWS_AS(parse_mix("static=0.5,static=0.5"), UsageError);
}

TEST_CASE("pure camera dataset has static sprites") {
  const auto clips = make_dataset(10, {{Mode::kCameraMotion, 1.0}}, 4);
  REQUIRE(clips.size() == 10);
  for (const auto& c : clips) {
    CHECK(c.spec.mode == Mode::kCameraMotion);
    CHECK(!moving_sprites(c.spec));
  }
}

TEST_CASE("dataset mode counts follow the allocation") {
  const auto clips = make_dataset(40, {{Mode::kCameraMotion, 0.75}, {Mode::kStatic, 0.25}}, 9,
                                  DatasetOptions{5, 16, 16});
  std::size_t cam = 0;
  for (const auto& c : clips) cam += c.spec.mode == Mode::kCameraMotion;
  CHECK(cam == 30);
}

TEST_CASE("dataset files are byte-identical across runs") {
  testing::TempDir a("synth_a"), b("synth_b");
  const Mix mix{{Mode::kCameraMotion, 0.5}, {Mode::kSceneMotion, 0.5}};
  write_dataset(make_dataset(4, mix, 7, DatasetOptions{5, 16, 16}), a.path());
  write_dataset(make_dataset(4, mix, 7, DatasetOptions{5, 16, 16}), b.path());
  std::size_t files = 0;
  for (const auto& entry : std::filesystem::directory_iterator(a.path())) {
    const auto name = entry.path().filename();
    REQUIRE(std::filesystem::exists(b.path() / name));
    CHECK(read_file(entry.path()) == read_file(b.path() / name));
    ++files;
  }
  CHECK(files == 4 * 3 + 1);

  const auto rows = read_manifest(a / "manifest.csv");
  REQUIRE(rows.size() == 4);
  CHECK(rows[0].clip_id == "clip_0000");
  const Tensor flows = tensorio::read_tensor(a / "clip_0000.flow.tnsr");
  CHECK(flows.dims() == std::vector<std::size_t>{4, 16, 16, 2});
  const auto traj = tensorio::parse_trajectory(a / "clip_0000.traj.txt");
  CHECK(traj.frames.size() == 5);

  const auto other = make_dataset(4, mix, 8, DatasetOptions{5, 16, 16});
  write_dataset(other, b.path());
  CHECK(read_file(a / "clip_0000.video.tnsr") != read_file(b / "clip_0000.video.tnsr"));
}

TEST_CASE("estimated flow matches ground truth on interiors") {
  std::mt19937_64 rng(21);
  for (Mode m : {Mode::kCameraMotion, Mode::kSceneMotion, Mode::kBoth}) {
    const auto clip = render_clip(random_spec(m, rng, 4, 32, 32));
    double epe = 0.0;
    std::size_t n = 0;
    for (std::size_t f = 0; f + 1 < clip.spec.frames; ++f) {
      const auto est = flow::estimate_flow(frame_of(clip.video, f), frame_of(clip.video, f + 1));
      const auto& gt = clip.gt_flow[f];
      for (std::size_t y = 3; y + 3 < 32; ++y)
        for (std::size_t x = 3; x + 3 < 32; ++x) {
          epe += std::hypot(est.dx(y, x) - gt.dx(y, x), est.dy(y, x) - gt.dy(y, x));
          ++n;
        }
    }
    INFO(mode_name(m));
    CHECK(epe / static_cast<double>(n) < 1.0);
  }
}

TEST_CASE("camera-motion clips carry more low-frequency flow than scene-motion clips") {
  const DatasetOptions opts{7, 64, 64};
  const auto cam = make_dataset(6, {{Mode::kCameraMotion, 1.0}}, 31, opts);
  const auto scene = make_dataset(6, {{Mode::kSceneMotion, 1.0}}, 32, opts);
  for (std::size_t i = 0; i < 6; ++i) {
    const auto a = flow::video_spectrum(cam[i].video);
    const auto b = flow::video_spectrum(scene[i].video);
    double low_a = 0.0, low_b = 0.0;
    for (std::size_t k = 0; k < 4; ++k) {
      low_a += a.bins[k].amplitude;
      low_b += b.bins[k].amplitude;
    }
    CHECK(low_a > low_b);
  }
}
