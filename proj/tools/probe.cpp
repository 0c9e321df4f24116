#include <optional>
#include <random>
#include <vector>

#include "ac3d/camera_geometry.hpp"
#include "ac3d/diffusion.hpp"
#include "ac3d/probing.hpp"
#include "ac3d/synth.hpp"
#include "cli_common.hpp"

namespace ac3d::cli {

namespace {

struct SplitOpts {
  std::size_t test_count = 8;
  std::size_t pca_dim = 16;
  double alpha = probe::kPaperRidgeAlpha;
};

void add_split_options(CLI::App* cmd, SplitOpts& o) {
  cmd->add_option("--test-count", o.test_count, "Videos held out for testing")->capture_default_str();
  cmd->add_option("--pca-dim", o.pca_dim, "Channels kept by the PCA")->capture_default_str()->check(
      CLI::PositiveNumber);
  cmd->add_option("--alpha", o.alpha, "Ridge penalty")->capture_default_str()->check(CLI::NonNegativeNumber);
}

probe::SweepConfig sweep_config(const probe::TargetMap& targets, const SplitOpts& o, std::uint64_t seed) {
  std::vector<std::string> ids;
  for (const auto& [id, t] : targets) ids.push_back(id);
  if (o.test_count == 0 || o.test_count + 2 > ids.size())
    throw UsageError("--test-count must leave at least two training videos out of " + std::to_string(ids.size()));
  auto [train, test] = probe::split_ids(ids, o.test_count, stage_seed(seed, "probe-split"));
  return {o.pca_dim, o.alpha, std::move(train), std::move(test)};
}

void dump_cmd(CLI::App& app, Globals& g) {
  struct Opts {
    std::filesystem::path checkpoint, data, out;
    std::vector<int> levels{1, 2, 3, 4, 5, 6, 7, 8};
    std::size_t limit = 0;
  };
  auto o = std::make_shared<Opts>();
  auto* cmd = app.add_subcommand("probe-dump", "Record per-block activations of a trained model over a dataset");
  cmd->add_option("--checkpoint", o->checkpoint, "Checkpoint directory")->required()->check(CLI::ExistingDirectory);
  cmd->add_option("--data", o->data, "Dataset directory written by synth-gen")->required()->check(
      CLI::ExistingDirectory);
  cmd->add_option("--out", o->out, "Directory for act_b*_s*_*.tnsr and targets_*.tnsr")->required();
  cmd->add_option("--levels", o->levels, "Noise levels k (sigma = k / 8)")
      ->capture_default_str()
      ->check(CLI::Range(1, probe::kNoiseLevels));
  cmd->add_option("--limit", o->limit, "Use only the first N clips (0 = all)")->capture_default_str();
  cmd->callback([o, &g] {
    auto model = diffusion::load_checkpoint(o->checkpoint);
    const auto& cfg = model.config();
    auto clips = synth::read_dataset(o->data);
    if (o->limit > 0 && clips.size() > o->limit) clips.resize(o->limit);
    std::filesystem::create_directories(o->out);
    const std::uint64_t seed = stage_seed(g.seed, "probe-dump");
    for (std::size_t i = 0; i < clips.size(); ++i) {
      const auto& clip = clips[i];
      const auto rel = geometry::normalize_to_first(clip.trajectory);
      const auto plucker = geometry::plucker_volume(rel, cfg.height, cfg.width);
      const diffusion::Conditioning cond{clip.row.tokens, &plucker};
      std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                        static_cast<std::uint32_t>(i)};
      diffusion::Rng rng(seq);
      for (int level : o->levels) {
        const double sigma = static_cast<double>(level) / probe::kNoiseLevels;
        const auto acts = diffusion::capture_activations(model, clip.video, sigma, cond, rng);
        for (std::size_t b = 0; b < acts.size(); ++b)
          probe::write_activation({static_cast<int>(b + 1), level, clip.row.clip_id, acts[b]}, o->out);
      }
      tensorio::write_tensor(geometry::euler_targets(rel).values, o->out / probe::target_file_name(clip.row.clip_id));
    }
  });
}

void pca_cmd(CLI::App& app) {
  struct Opts {
    std::filesystem::path acts, out;
    int block = 1, level = probe::kNoiseLevels;
    std::size_t k = 16;
  };
  auto o = std::make_shared<Opts>();
  auto* cmd = app.add_subcommand("probe-pca", "Channel PCA spectrum of one (block, level) activation cell");
  cmd->add_option("--acts", o->acts, "Activation directory")->required()->check(CLI::ExistingDirectory);
  cmd->add_option("--block", o->block, "Block index (1-based)")->capture_default_str()->check(CLI::PositiveNumber);
  cmd->add_option("--level", o->level, "Noise level k (sigma = k / 8)")
      ->capture_default_str()
      ->check(CLI::Range(1, probe::kNoiseLevels));
  cmd->add_option("--k", o->k, "Components to keep")->capture_default_str()->check(CLI::PositiveNumber);
  cmd->add_option("--out", o->out, "CSV destination (stdout when omitted)");
  cmd->callback([o] {
    const auto records = probe::load_activations(o->acts, o->block, o->level);
    if (records.empty())
      throw DataError(o->acts.string() + ": no activations for block " + std::to_string(o->block) + ", level " +
                      std::to_string(o->level));
    std::vector<const probe::ActivationRecord*> ptrs;
    for (const auto& r : records) ptrs.push_back(&r);
    const auto basis = probe::fit_pca(ptrs, o->k);
    for (const auto& w : basis.warnings) std::cerr << "warning: " << w << '\n';
    Output out(o->out);
    out.stream() << "component,variance\n";
    for (Eigen::Index i = 0; i < basis.variances.size(); ++i)
      out.stream() << i + 1 << ',' << fmt(basis.variances(i)) << '\n';
    out.close();
  });
}

void fit_cmd(CLI::App& app, Globals& g) {
  struct Opts {
    std::filesystem::path acts, out;
    int block = 1, level = probe::kNoiseLevels;
    SplitOpts split;
  };
  auto o = std::make_shared<Opts>();
  auto* cmd = app.add_subcommand("probe-fit", "Fit and score a pose probe on one (block, level) cell");
  cmd->add_option("--acts", o->acts, "Activation directory with targets_*.tnsr")->required()->check(
      CLI::ExistingDirectory);
  cmd->add_option("--block", o->block, "Block index (1-based)")->capture_default_str()->check(CLI::PositiveNumber);
  cmd->add_option("--level", o->level, "Noise level k (sigma = k / 8)")
      ->capture_default_str()
      ->check(CLI::Range(1, probe::kNoiseLevels));
  cmd->add_option("--out", o->out, "CSV destination (stdout when omitted)");
  add_split_options(cmd, o->split);
  cmd->callback([o, &g] {
    const auto targets = probe::load_targets(o->acts);
    const auto records = probe::load_activations(o->acts, o->block, o->level);
    if (records.empty())
      throw DataError(o->acts.string() + ": no activations for block " + std::to_string(o->block) + ", level " +
                      std::to_string(o->level));
    const auto rows = probe::sweep(records, targets, sweep_config(targets, o->split, g.seed));
    Output out(o->out);
    probe::write_sweep_csv(rows, out.stream());
    out.close();
  });
}

void sweep_cmd(CLI::App& app, Globals& g) {
  struct Opts {
    std::filesystem::path acts, out;
    SplitOpts split;
  };
  auto o = std::make_shared<Opts>();
  auto* cmd = app.add_subcommand("probe-sweep", "Probe errors for every (block, level) cell");
  cmd->add_option("--acts", o->acts, "Activation directory with targets_*.tnsr")->required()->check(
      CLI::ExistingDirectory);
  cmd->add_option("--out", o->out, "CSV destination (stdout when omitted)");
  add_split_options(cmd, o->split);
  cmd->callback([o, &g] {
    const auto targets = probe::load_targets(o->acts);
    const auto records = probe::load_activations(o->acts);
    if (records.empty()) throw DataError(o->acts.string() + ": no activation dumps");
    const auto rows = probe::sweep(records, targets, sweep_config(targets, o->split, g.seed));
    Output out(o->out);
    probe::write_sweep_csv(rows, out.stream());
    out.close();
  });
}

}  // namespace

void register_probe(CLI::App& app, Globals& g) {
  dump_cmd(app, g);
  pca_cmd(app);
  fit_cmd(app, g);
  sweep_cmd(app, g);
}

}  // namespace ac3d::cli
