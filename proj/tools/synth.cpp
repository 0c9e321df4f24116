#include "ac3d/synth.hpp"
#include "cli_common.hpp"

namespace ac3d::cli {

void register_synth(CLI::App& app, Globals& g) {
  struct Opts {
    std::size_t n = 16;
    std::string mix = "camera=0.75,static=0.25";
    synth::DatasetOptions dataset;
    std::filesystem::path out;
  };
  auto o = std::make_shared<Opts>();
  auto* cmd = app.add_subcommand("synth-gen", "Render a synthetic clip dataset with exact camera and flow labels");
  cmd->add_option("--n", o->n, "Number of clips")->capture_default_str()->check(CLI::PositiveNumber);
  cmd->add_option("--mix", o->mix, "Mode proportions over camera, scene, both, static")->capture_default_str();
  cmd->add_option("--frames", o->dataset.frames, "Frames per clip")->capture_default_str();
  cmd->add_option("--height", o->dataset.height, "Frame height")->capture_default_str();
  cmd->add_option("--width", o->dataset.width, "Frame width")->capture_default_str();
  cmd->add_option("--out", o->out, "Output directory")->required();
  cmd->callback([o, &g] {
    const auto mix = synth::parse_mix(o->mix);
    std::vector<synth::SynthClip> clips;
    try {
      clips = synth::make_dataset(o->n, mix, stage_seed(g.seed, "synth"), o->dataset);
    } catch (const synth::SynthError& e) {
      throw UsageError(e.what());
    }
    synth::write_dataset(clips, o->out);
    const auto counts = synth::allocate(o->n, mix);
    Output out({});
    for (const auto& [mode, count] : counts) out.stream() << synth::mode_name(mode) << '=' << count << '\n';
    out.close();
  });
}

}  // namespace ac3d::cli
