#include <algorithm>
#include <map>

#include "ac3d/tensorio.hpp"
#include "acceptance.hpp"
#include "cli_runner.hpp"
#include "test_util.hpp"

namespace ac3d::acceptance {

namespace fs = std::filesystem;
using testing::quoted;

namespace {

// Shared read-only inputs: a small dataset, two single frames and the
// rescale fixture.
void prepare_inputs(const fs::path& in) {
  const auto r = testing::run_cli(
      "--seed 11 synth-gen --n 6 --frames 9 --height 16 --width 16 --mix camera=0.5,scene=0.5 --out " +
          quoted(in / "data"),
      in);
  if (r.exit_code != 0) throw std::runtime_error("synth-gen failed: " + r.err);
  const Tensor video = tensorio::read_tensor(in / "data" / "clip_0000.video.tnsr");
  const std::size_t frame = video.size() / video.dim(0);
  for (std::size_t f = 0; f < 2; ++f) {
    Tensor img({video.dim(1), video.dim(2), video.dim(3)});
    std::copy_n(video.data().begin() + static_cast<std::ptrdiff_t>(f * frame), frame, img.data().begin());
    tensorio::write_tensor(img, in / ("frame" + std::to_string(f) + ".tnsr"));
  }
  fs::create_directories(in / "rescale");
  testing::write_rescale_fixture(in / "rescale");
}

// Every subcommand, in pipeline order. Outputs of a step live in out/<name>.
std::vector<std::pair<std::string, std::string>> commands(const fs::path& in, const fs::path& out) {
  const std::string data = quoted(in / "data"), traj0 = quoted(in / "data" / "clip_0000.traj.txt");
  auto o = [&](const std::string& name) { return quoted(out / name); };
  const std::string small = " --set n_blocks=2 --set d_main=32 --set n_heads=2 --set patch=4 --set d_cam=16"
                            " --set cam_heads=2 --set cam_conv_channels=4 --set cam_inject_blocks=1 --set vocab=32";
  return {
      {"synth-gen", "synth-gen --n 4 --out " + o("synth-gen")},
      {"cameras-parse", "cameras-parse " + traj0 + " --out " + o("cameras-parse") + "/cams.csv"},
      {"cameras-plucker", "cameras-plucker " + traj0 + " --height 16 --width 16 --out " + o("cameras-plucker") +
                              "/p.tnsr --targets " + o("cameras-plucker") + "/t.tnsr"},
      {"cameras-rescale", "cameras-rescale " + quoted(in / "rescale" / "traj.txt") + " --points " +
                              quoted(in / "rescale" / "points.tnsr") + " --depth " +
                              quoted(in / "rescale" / "depth.tnsr") + " --out " + o("cameras-rescale") + "/s.txt"},
      {"cameras-score", "cameras-score " + traj0 + " " + quoted(in / "data" / "clip_0001.traj.txt") + " --normalize"},
      {"flow-estimate", "flow-estimate " + quoted(in / "frame0.tnsr") + " " + quoted(in / "frame1.tnsr") +
                            " --out " + o("flow-estimate") + "/f.tnsr"},
      {"spectrum", "spectrum " + quoted(in / "data" / "clip_0000.video.tnsr") + " " +
                       quoted(in / "data" / "clip_0001.video.tnsr") + " --out " + o("spectrum") + "/s.csv"},
      {"train", "train --data " + data + " --out " + o("train") + small + " --steps 3 --batch 2"},
      {"train-camera", "train --data " + data + " --init " + o("train") + " --out " + o("train-camera") +
                           " --phase camera --steps 3 --batch 2"},
      {"sample", "sample --checkpoint " + o("train-camera") + " --out " + o("sample") + " --trajectory " + traj0 +
                     " --count 2 --steps 5 --w-c 4 --keep-predictions"},
      {"spectrum-timesteps", "spectrum-timesteps " + o("sample") + " --out " + o("spectrum-timesteps") + "/t.csv"},
      {"probe-dump", "probe-dump --checkpoint " + o("train-camera") + " --data " + data + " --levels 4 8 --out " +
                         o("probe-dump")},
      {"probe-pca", "probe-pca --acts " + o("probe-dump") + " --block 1 --level 8 --k 4 --out " + o("probe-pca") +
                        "/pca.csv"},
      {"probe-fit", "probe-fit --acts " + o("probe-dump") + " --block 2 --level 4 --test-count 2 --pca-dim 4 --out " +
                        o("probe-fit") + "/fit.csv"},
      {"probe-sweep", "probe-sweep --acts " + o("probe-dump") + " --test-count 2 --pca-dim 4 --out " +
                          o("probe-sweep") + "/sweep.csv"},
  };
}

}  // namespace

void determinism(Checker& c) {
  testing::TempDir dir("determinism");
  const fs::path in = dir / "inputs";
  fs::create_directories(in);
  prepare_inputs(in);

  std::map<std::string, std::string> stdout_a;
  std::size_t identical = 0, total = 0;
  for (const char* run : {"a", "b"}) {
    const fs::path out = dir / run;
    fs::create_directories(out);
    for (const auto& [name, args] : commands(in, out)) {
      fs::create_directories(out / name);
      const auto r = testing::run_cli("--seed 4242 " + args, dir.path());
      c.expect(r.exit_code == 0, name + " exited " + std::to_string(r.exit_code) + ": " + r.err);
      if (*run == 'a') {
        stdout_a[name] = r.out;
        continue;
      }
      ++total;
      const bool same_out = stdout_a[name] == r.out;
      const bool same_files = fs::is_empty(out / name) ? fs::is_empty(dir / "a" / name)
                                                       : testing::same_tree(dir / "a" / name, out / name);
      c.expect(same_out && same_files, name + " differs between runs");
      identical += same_out && same_files;
    }
  }
  c.note("identical", std::to_string(identical) + "/" + std::to_string(total));
}

}  // namespace ac3d::acceptance
