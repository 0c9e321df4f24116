#include <algorithm>
#include <map>
#include <regex>
#include <vector>

#include "ac3d/flow_spectral.hpp"
#include "ac3d/tensorio.hpp"
#include "cli_common.hpp"

namespace ac3d::cli {

namespace {

void add_flow_options(CLI::App* cmd, flow::FlowConfig& cfg) {
  cmd->add_option("--levels", cfg.levels, "Pyramid levels")->capture_default_str()->check(CLI::PositiveNumber);
  cmd->add_option("--smoothness", cfg.smoothness, "Smoothness weight")->capture_default_str();
  cmd->add_option("--iterations", cfg.iterations, "Jacobi sweeps per warp")
      ->capture_default_str()
      ->check(CLI::PositiveNumber);
  cmd->add_option("--warps", cfg.warps, "Warps per pyramid level")->capture_default_str()->check(CLI::PositiveNumber);
}

void add_spectrum_options(CLI::App* cmd, flow::SpectrumConfig& cfg) {
  cmd->add_option("--bins", cfg.bins, "Radial frequency bins")->capture_default_str()->check(CLI::PositiveNumber);
  cmd->add_option("--stride", cfg.anchor_stride, "Anchor frame stride")
      ->capture_default_str()
      ->check(CLI::PositiveNumber);
  cmd->add_option("--horizon", cfg.horizon, "Largest anchor-to-target frame gap")
      ->capture_default_str()
      ->check(CLI::PositiveNumber);
}

void write_volume_rows(std::ostream& s, const std::string& label, const flow::SpectralVolume& vol) {
  for (std::size_t b = 0; b < vol.bins.size(); ++b) {
    const auto& bin = vol.bins[b];
    s << label << ',' << b << ',' << fmt(bin.frequency) << ',' << fmt(bin.amplitude) << ',' << fmt(bin.power) << ','
      << bin.count << '\n';
  }
}

void estimate_cmd(CLI::App& app) {
  struct Opts {
    std::filesystem::path src, dst, out;
    flow::FlowConfig cfg;
  };
  auto o = std::make_shared<Opts>();
  auto* cmd = app.add_subcommand("flow-estimate", "Dense optical flow between two images");
  cmd->add_option("src", o->src, "Source image TNSR [H, W] or [C, H, W]")->required();
  cmd->add_option("dst", o->dst, "Destination image TNSR")->required();
  cmd->add_option("--out", o->out, "Flow field TNSR [H, W, 2]")->required();
  add_flow_options(cmd, o->cfg);
  cmd->callback([o] {
    const auto field = flow::estimate_flow(tensorio::read_tensor(o->src), tensorio::read_tensor(o->dst), o->cfg);
    tensorio::write_tensor(field.values, o->out);
    const auto [dx, dy] = flow::mean_flow(field);
    Output out({});
    out.stream() << "mean_dx=" << fmt(dx) << "\nmean_dy=" << fmt(dy) << '\n';
    out.close();
  });
}

void spectrum_cmd(CLI::App& app) {
  struct Opts {
    std::vector<std::filesystem::path> videos;
    std::filesystem::path out;
    flow::FlowConfig flow_cfg;
    flow::SpectrumConfig cfg;
  };
  auto o = std::make_shared<Opts>();
  auto* cmd = app.add_subcommand("spectrum", "Radially binned motion spectrum of each video");
  cmd->add_option("videos", o->videos, "Video TNSR files [F, C, H, W]")->required();
  cmd->add_option("--out", o->out, "CSV destination (stdout when omitted)");
  add_spectrum_options(cmd, o->cfg);
  add_flow_options(cmd, o->flow_cfg);
  cmd->callback([o] {
    Output out(o->out);
    auto& s = out.stream();
    s << "video,bin,bin_center,amplitude,power,count\n";
    for (const auto& path : o->videos) {
      const auto vol = flow::video_spectrum(tensorio::read_tensor(path), o->flow_cfg, o->cfg);
      write_volume_rows(s, path.stem().string(), vol);
    }
    out.close();
  });
}

void timesteps_cmd(CLI::App& app) {
  struct Opts {
    std::filesystem::path dir, out;
    flow::FlowConfig flow_cfg;
    flow::SpectrumConfig cfg;
  };
  auto o = std::make_shared<Opts>();
  auto* cmd = app.add_subcommand(
      "spectrum-timesteps", "Spectra of intermediate predictions relative to the final videos (pred_t*_s*.tnsr files)");
  cmd->add_option("dir", o->dir, "Directory written by `sample --keep-predictions`")->required()->check(
      CLI::ExistingDirectory);
  cmd->add_option("--out", o->out, "CSV destination (stdout when omitted)");
  add_spectrum_options(cmd, o->cfg);
  add_flow_options(cmd, o->flow_cfg);
  cmd->callback([o] {
    static const std::regex pattern(R"(pred_t([0-9.]+)_s([0-9]+)\.tnsr)");
    std::vector<std::filesystem::path> files;
    for (const auto& entry : std::filesystem::directory_iterator(o->dir))
      if (entry.is_regular_file() && std::regex_match(entry.path().filename().string(), pattern))
        files.push_back(entry.path());
    std::sort(files.begin(), files.end());
    if (files.empty()) throw DataError(o->dir.string() + ": no pred_t*_s*.tnsr files");

    std::map<double, std::vector<Tensor>> by_t;
    for (const auto& f : files) {
      std::smatch m;
      const std::string name = f.filename().string();
      std::regex_match(name, m, pattern);
      by_t[std::stod(m[1].str())].push_back(tensorio::read_tensor(f));
    }
    const auto spectra = flow::per_timestep_spectra(by_t, o->flow_cfg, o->cfg);

    Output out(o->out);
    auto& s = out.stream();
    s << "t,bin,bin_center,amplitude,ratio\n";
    for (const auto& [t, vol] : spectra.volumes) {
      const auto& ratio = spectra.ratio_at(t);
      for (std::size_t b = 0; b < vol.bins.size(); ++b)
        s << fmt(t) << ',' << b << ',' << fmt(vol.bins[b].frequency) << ',' << fmt(vol.bins[b].amplitude) << ','
          << fmt(ratio[b]) << '\n';
    }
    out.close();
  });
}

}  // namespace

void register_flow(CLI::App& app, Globals&) {
  estimate_cmd(app);
  spectrum_cmd(app);
  timesteps_cmd(app);
}

}  // namespace ac3d::cli
