#include <Eigen/Dense>
#include <cmath>
#include <random>

#include "ac3d/flow_spectral.hpp"
#include "ac3d/parallel.hpp"
#include "ac3d/probing.hpp"
#include "ac3d/synth.hpp"
#include "acceptance.hpp"
#include "probe_fixtures.hpp"

namespace ac3d::acceptance {

namespace {

// P(X >= k) for X ~ Binomial(n, 1/2).
double sign_test_p(int wins, int n) {
  double p = 0.0;
  for (int k = wins; k <= n; ++k) p += std::exp(std::lgamma(n + 1) - std::lgamma(k + 1) - std::lgamma(n - k + 1)) *
                                       std::pow(0.5, n);
  return p;
}

std::vector<flow::SpectralVolume> spectra(const std::vector<synth::SynthClip>& clips) {
  std::vector<flow::SpectralVolume> out(clips.size());
  parallel_for(clips.size(), [&](std::size_t i) { out[i] = flow::video_spectrum(clips[i].video); });
  return out;
}

}  // namespace

void spectral_bias(Checker& c) {
  const synth::DatasetOptions opts{13, 64, 64};
  const auto camera = spectra(synth::make_dataset(20, {{synth::Mode::kCameraMotion, 1.0}}, 4004, opts));
  const auto scene = spectra(synth::make_dataset(20, {{synth::Mode::kSceneMotion, 1.0}}, 4005, opts));

  const int bins = 4;
  std::vector<double> cam_mean(bins, 0.0), scene_mean(bins, 0.0);
  int wins = 0;
  for (std::size_t i = 0; i < camera.size(); ++i) {
    double a = 0.0, b = 0.0;
    for (int k = 0; k < bins; ++k) {
      a += camera[i].bins[k].amplitude;
      b += scene[i].bins[k].amplitude;
      cam_mean[k] += camera[i].bins[k].amplitude / camera.size();
      scene_mean[k] += scene[i].bins[k].amplitude / scene.size();
    }
    wins += a > b;
  }
  bool every_bin = true;
  std::string ratios;
  for (int k = 0; k < bins; ++k) {
    every_bin = every_bin && cam_mean[k] > scene_mean[k];
    char buf[32];
    std::snprintf(buf, sizeof buf, "%s%.2f", k ? "," : "", cam_mean[k] / scene_mean[k]);
    ratios += buf;
  }
  const double p = sign_test_p(wins, static_cast<int>(camera.size()));
  c.note("bin_ratios", ratios);
  c.note("wins", std::to_string(wins) + "/20");
  c.note("p", p);
  c.expect(every_bin, "camera group exceeds scene group in each of the lowest 4 bins");
  c.expect(p < 0.01, "one-sided sign test p < 0.01");
}

void probing_suite(Checker& c) {
  std::mt19937_64 rng(5005);
  std::normal_distribution<double> n(0, 1);

  double ridge_gap = 0.0;
  for (int trial = 0; trial < 5; ++trial) {
    Eigen::MatrixXd x = Eigen::MatrixXd::NullaryExpr(30, 12, [&] { return n(rng); });
    x.col(3) = x.col(3) * 4.0 + Eigen::VectorXd::Constant(30, -2.0);
    const Eigen::MatrixXd y = Eigen::MatrixXd::NullaryExpr(30, 4, [&] { return n(rng); });
    const double alpha = 1.0 + 2.0 * trial;
    const auto model = probe::fit_ridge(x, y, alpha);

    // Iterative route: own standardization, then gradient descent on the objective.
    const Eigen::RowVectorXd mu = x.colwise().mean();
    Eigen::MatrixXd z = x.rowwise() - mu;
    for (Eigen::Index j = 0; j < z.cols(); ++j) z.col(j) /= std::sqrt(z.col(j).squaredNorm() / z.rows());
    const Eigen::MatrixXd yc = y.rowwise() - y.colwise().mean();
    const double lmax = Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(z.transpose() * z).eigenvalues().maxCoeff();
    const double step = 1.0 / (2.0 * (lmax + alpha));
    Eigen::MatrixXd w = Eigen::MatrixXd::Zero(12, 4);
    for (int it = 0; it < 20000; ++it) w -= step * (2.0 * z.transpose() * (z * w - yc) + 2.0 * alpha * w);
    ridge_gap = std::max(ridge_gap, (w - model.weights).cwiseAbs().maxCoeff());
  }
  c.note("ridge_gap", ridge_gap);
  c.expect(ridge_gap < 1e-4, "ridge closed form matches the iterative oracle within 1e-4");

  int planted_hits = 0;
  for (int construction = 0; construction < 10; ++construction) {
    testing::LinearWorld world(60, 5100 + construction);
    std::mt19937_64 crng(5200 + construction);
    const int planted_block = 1 + construction % 4;
    const int planted_level = construction % 2 ? 8 : 4;
    std::vector<probe::ActivationRecord> recs;
    for (int b = 1; b <= 4; ++b)
      for (int l : {4, 8})
        for (const auto& id : world.ids)
          recs.push_back(world.record(id, b, l, b == planted_block && l == planted_level, crng, 0.05));
    const auto [train_ids, test_ids] = probe::split_ids(world.ids, 15, 5300 + construction);
    const auto rows = probe::sweep(recs, world.targets, {8, 10.0, train_ids, test_ids});
    const probe::SweepRow* best = nullptr;
    for (const auto& r : rows)
      if (r.errors && (!best || r.errors->rotation < best->errors->rotation)) best = &r;
    planted_hits += best && best->block == planted_block && best->level == planted_level;
  }
  c.note("planted_hits", std::to_string(planted_hits) + "/10");
  c.expect(planted_hits == 10, "sweep argmin is the planted cell in 10/10 constructions");

  testing::LinearWorld world(200, 5400);
  std::mt19937_64 wrng(5401);
  std::vector<probe::ActivationRecord> recs;
  for (const auto& id : world.ids) recs.push_back(world.record(id, 1, 8, true, wrng, 0.01));
  const auto [train_ids, test_ids] = probe::split_ids(world.ids, 40, 5402);
  const auto rows = probe::sweep(recs, world.targets, {8, 1.0, train_ids, test_ids});
  const double rot = rows.at(0).errors->rotation;
  c.note("linear_world_rot_err", rot);
  c.expect(rot < 0.02, "linear world rotation error < 0.02 rad");
}

}  // namespace ac3d::acceptance
