#include "ac3d/probing.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <iomanip>
#include <ostream>
#include <random>
#include <regex>
#include <set>

#include "ac3d/camera_geometry.hpp"
#include "ac3d/parallel.hpp"

namespace ac3d::probe {

namespace {

void check_record(const ActivationRecord& rec) {
  if (rec.features.rank() != 4) throw ProbeError("activation features must be [D, T, H', W']");
  if (rec.level < 1 || rec.level > kNoiseLevels)
    throw ProbeError("noise level index must be in 1.." + std::to_string(kNoiseLevels));
  if (rec.block < 1) throw ProbeError("block index is 1-based");
}

}  // namespace

PcaBasis fit_pca(const std::vector<const ActivationRecord*>& train, std::size_t k) {
  if (train.empty()) throw ProbeError("fit_pca: no training records");
  const auto& dims = train.front()->features.dims();
  const std::size_t d = dims[0], positions = dims[1] * dims[2] * dims[3];
  if (k == 0 || k > d) throw ProbeError("fit_pca: need 1 <= K <= D");

  Eigen::VectorXd sum = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(d));
  Eigen::MatrixXd outer = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(d));
  double count = 0.0;
  for (const auto* rec : train) {
    check_record(*rec);
    if (rec->features.dims() != dims) throw ProbeError("fit_pca: inconsistent activation dims");
    // channels x positions
    const Eigen::Map<const Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> f(
        rec->features.data().data(), static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(positions));
    const Eigen::MatrixXd fd = f.cast<double>();
    sum += fd.rowwise().sum();
    outer.noalias() += fd * fd.transpose();
    count += static_cast<double>(positions);
  }
  PcaBasis basis;
  basis.mean = sum / count;
  const Eigen::MatrixXd cov = outer / count - basis.mean * basis.mean.transpose();
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
  const auto& values = eig.eigenvalues();
  const double tol = std::max(1e-12, 1e-10 * std::max(values(values.size() - 1), 0.0));
  basis.components = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(k));
  basis.variances = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(k));
  std::size_t kept = 0;
  for (std::size_t i = 0; i < k; ++i) {
    const auto idx = static_cast<Eigen::Index>(d - 1 - i);
    if (values(idx) <= tol) break;
    Eigen::VectorXd axis = eig.eigenvectors().col(idx);
    Eigen::Index arg = 0;
    axis.cwiseAbs().maxCoeff(&arg);
    if (axis(arg) < 0.0) axis = -axis;
    basis.components.col(static_cast<Eigen::Index>(i)) = axis;
    basis.variances(static_cast<Eigen::Index>(i)) = values(idx);
    ++kept;
  }
  if (kept < k)
    basis.warnings.push_back("fit_pca: covariance rank " + std::to_string(kept) + " < K = " + std::to_string(k) +
                             "; padded with zero components");
  return basis;
}

ActivationRecord PcaBasis::apply(const ActivationRecord& rec) const {
  check_record(rec);
  const auto& dims = rec.features.dims();
  if (dims[0] != channels()) throw ProbeError("PcaBasis::apply: channel count mismatch");
  const std::size_t positions = dims[1] * dims[2] * dims[3];
  const Eigen::Map<const Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> f(
      rec.features.data().data(), static_cast<Eigen::Index>(dims[0]), static_cast<Eigen::Index>(positions));
  const Eigen::MatrixXd centered = f.cast<double>().colwise() - mean;
  const Eigen::MatrixXd reduced = components.transpose() * centered;  // K x positions
  ActivationRecord out{rec.block, rec.level, rec.video_id, Tensor({dim(), dims[1], dims[2], dims[3]})};
  Eigen::Map<Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
      out.features.data().data(), static_cast<Eigen::Index>(dim()), static_cast<Eigen::Index>(positions)) =
      reduced.cast<float>();
  return out;
}

std::pair<PcaBasis, std::vector<ActivationRecord>> reduce_pca(const std::vector<ActivationRecord>& train,
                                                              const std::vector<ActivationRecord>& all,
                                                              std::size_t k) {
  std::vector<const ActivationRecord*> ptrs;
  for (const auto& r : train) ptrs.push_back(&r);
  PcaBasis basis = fit_pca(ptrs, k);
  std::vector<ActivationRecord> reduced;
  reduced.reserve(all.size());
  for (const auto& r : all) reduced.push_back(basis.apply(r));
  return {std::move(basis), std::move(reduced)};
}

Eigen::VectorXd probe_vector(const ActivationRecord& reduced) {
  check_record(reduced);
  const auto& dims = reduced.features.dims();
  const std::size_t k = dims[0], t = dims[1], h = dims[2], w = dims[3];
  const std::size_t ch = h / 2, cw = w / 2;
  Eigen::VectorXd v(static_cast<Eigen::Index>(2 * k * t));
  const double inv_area = 1.0 / static_cast<double>(h * w);
  const auto data = reduced.features.data();
  for (std::size_t ti = 0; ti < t; ++ti)
    for (std::size_t ki = 0; ki < k; ++ki) {
      const float* plane = data.data() + (ki * t + ti) * h * w;
      double pooled = 0.0;
      for (std::size_t i = 0; i < h * w; ++i) pooled += plane[i];
      v(static_cast<Eigen::Index>(ti * k + ki)) = plane[ch * w + cw];
      v(static_cast<Eigen::Index>(k * t + ti * k + ki)) = pooled * inv_area;
    }
  return v;
}

ProbeFeatures build_features(const std::vector<ActivationRecord>& reduced) {
  if (reduced.empty()) throw ProbeError("build_features: no records");
  ProbeFeatures out;
  const auto& dims = reduced.front().features.dims();
  out.matrix.resize(static_cast<Eigen::Index>(reduced.size()), static_cast<Eigen::Index>(2 * dims[0] * dims[1]));
  for (std::size_t i = 0; i < reduced.size(); ++i) {
    if (reduced[i].features.dims() != dims) throw ProbeError("build_features: inconsistent dims");
    out.matrix.row(static_cast<Eigen::Index>(i)) = probe_vector(reduced[i]).transpose();
    out.video_ids.push_back(reduced[i].video_id);
  }
  return out;
}

Eigen::MatrixXd RidgeModel::predict(const Eigen::MatrixXd& x) const {
  if (x.cols() != x_mean.size()) throw ProbeError("RidgeModel::predict: feature width mismatch");
  const Eigen::MatrixXd z = ((x.rowwise() - x_mean).array().rowwise() * x_scale.array()).matrix();
  return (z * weights).rowwise() + bias;
}

namespace {

bool all_finite(const Eigen::MatrixXd& m) { return m.allFinite(); }

Eigen::MatrixXd standardize(const Eigen::MatrixXd& x, const RidgeModel& m) {
  return ((x.rowwise() - m.x_mean).array().rowwise() * m.x_scale.array()).matrix();
}

}  // namespace

RidgeModel fit_ridge(const Eigen::MatrixXd& x, const Eigen::MatrixXd& y, double alpha) {
  if (x.rows() < 2) throw ProbeError("fit_ridge: need at least 2 samples");
  if (x.rows() != y.rows()) throw ProbeError("fit_ridge: X and Y differ in sample count");
  if (!(alpha > 0.0) || !std::isfinite(alpha)) throw ProbeError("fit_ridge: alpha must be positive");
  if (!all_finite(x) || !all_finite(y)) throw ProbeError("fit_ridge: non-finite entries");

  RidgeModel m;
  m.alpha = alpha;
  const double n = static_cast<double>(x.rows());
  m.x_mean = x.colwise().mean();
  const Eigen::RowVectorXd var = (x.rowwise() - m.x_mean).array().square().colwise().sum() / n;
  m.x_scale = var.unaryExpr([](double v) { return v > 1e-24 ? 1.0 / std::sqrt(v) : 0.0; });
  m.bias = y.colwise().mean();

  const Eigen::MatrixXd z = standardize(x, m);
  const Eigen::MatrixXd yc = y.rowwise() - m.bias;
  if (z.cols() <= z.rows()) {
    Eigen::MatrixXd gram = z.transpose() * z;
    gram.diagonal().array() += alpha;
    m.weights = gram.llt().solve(z.transpose() * yc);
  } else {
    Eigen::MatrixXd kernel = z * z.transpose();
    kernel.diagonal().array() += alpha;
    m.weights = z.transpose() * kernel.llt().solve(yc);
  }
  return m;
}

double ridge_objective(const RidgeModel& model, const Eigen::MatrixXd& x, const Eigen::MatrixXd& y) {
  const Eigen::MatrixXd resid = standardize(x, model) * model.weights - (y.rowwise() - model.bias);
  return resid.squaredNorm() + model.alpha * model.weights.squaredNorm();
}

ProbeErrors score_poses(const Eigen::MatrixXd& predicted, const Eigen::MatrixXd& targets, std::size_t frames) {
  if (predicted.rows() != targets.rows() || predicted.cols() != targets.cols() ||
      static_cast<std::size_t>(targets.cols()) != 6 * frames || targets.rows() == 0)
    throw ProbeError("score_poses: shape mismatch");
  ProbeErrors sum;
  for (Eigen::Index i = 0; i < targets.rows(); ++i) {
    const Eigen::VectorXd p = predicted.row(i).transpose(), t = targets.row(i).transpose();
    const auto tp = geometry::trajectory_from_targets({p.data(), static_cast<std::size_t>(p.size())}, frames);
    const auto tt = geometry::trajectory_from_targets({t.data(), static_cast<std::size_t>(t.size())}, frames);
    sum.rotation += geometry::rotation_error(tp, tt);
    sum.translation += geometry::translation_error(tp, tt);
  }
  const double n = static_cast<double>(targets.rows());
  return {sum.rotation / n, sum.translation / n};
}

ProbeErrors eval_probe(const RidgeModel& model, const ProbeFeatures& test, const Eigen::MatrixXd& y_test,
                       std::size_t frames, const std::vector<std::string>& train_ids) {
  const std::set<std::string> train(train_ids.begin(), train_ids.end());
  for (const auto& id : test.video_ids)
    if (train.count(id)) throw ProbeError("eval_probe: video '" + id + "' is in both train and test splits");
  return score_poses(model.predict(test.matrix), y_test, frames);
}

namespace {

Eigen::MatrixXd stack_targets(const TargetMap& targets, const std::vector<std::string>& ids, std::size_t& frames) {
  Eigen::MatrixXd y;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const auto it = targets.find(ids[i]);
    if (it == targets.end()) throw ProbeError("no pose targets for video '" + ids[i] + "'");
    const Tensor& t = it->second;
    if (t.rank() != 2 || t.dim(1) != 6) throw ProbeError("pose targets must be [F, 6]");
    if (i == 0) {
      frames = t.dim(0);
      y.resize(static_cast<Eigen::Index>(ids.size()), static_cast<Eigen::Index>(6 * frames));
    } else if (t.dim(0) != frames) {
      throw ProbeError("pose targets differ in frame count");
    }
    for (std::size_t j = 0; j < 6 * frames; ++j) y(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = t[j];
  }
  return y;
}

}  // namespace

std::vector<SweepRow> sweep(const std::vector<ActivationRecord>& records, const TargetMap& targets,
                            const SweepConfig& cfg) {
  if (cfg.train_ids.size() < 2 || cfg.test_ids.empty()) throw ProbeError("sweep: empty split");
  {
    const std::set<std::string> train(cfg.train_ids.begin(), cfg.train_ids.end());
    for (const auto& id : cfg.test_ids)
      if (train.count(id)) throw ProbeError("sweep: video '" + id + "' is in both splits");
  }

  using Cell = std::pair<int, int>;
  std::map<Cell, std::map<std::string, const ActivationRecord*>> cells;
  std::set<int> blocks, levels;
  for (const auto& rec : records) {
    check_record(rec);
    blocks.insert(rec.block);
    levels.insert(rec.level);
    auto [it, inserted] = cells[{rec.block, rec.level}].emplace(rec.video_id, &rec);
    if (!inserted)
      throw ProbeError("sweep: duplicate record for block " + std::to_string(rec.block) + ", level " +
                       std::to_string(rec.level) + ", video '" + rec.video_id + "'");
  }

  std::size_t frames = 0;
  const Eigen::MatrixXd y_train = stack_targets(targets, cfg.train_ids, frames);
  std::size_t test_frames = 0;
  const Eigen::MatrixXd y_test = stack_targets(targets, cfg.test_ids, test_frames);
  if (test_frames != frames) throw ProbeError("sweep: pose targets differ in frame count");

  std::vector<SweepRow> rows;
  for (int b : blocks)
    for (int l : levels) rows.push_back({b, l, std::nullopt});

  parallel_for(rows.size(), [&](std::size_t i) {
    auto& row = rows[i];
    const auto cell = cells.find({row.block, row.level});
    if (cell == cells.end()) return;
    std::vector<const ActivationRecord*> train, test;
    for (const auto& id : cfg.train_ids) {
      const auto it = cell->second.find(id);
      if (it == cell->second.end()) return;
      train.push_back(it->second);
    }
    for (const auto& id : cfg.test_ids) {
      const auto it = cell->second.find(id);
      if (it == cell->second.end()) return;
      test.push_back(it->second);
    }
    const PcaBasis basis = fit_pca(train, cfg.pca_dim);
    std::vector<ActivationRecord> reduced_train, reduced_test;
    for (const auto* r : train) reduced_train.push_back(basis.apply(*r));
    for (const auto* r : test) reduced_test.push_back(basis.apply(*r));
    const ProbeFeatures x_train = build_features(reduced_train);
    const ProbeFeatures x_test = build_features(reduced_test);
    const RidgeModel model = fit_ridge(x_train.matrix, y_train, cfg.alpha);
    row.errors = eval_probe(model, x_test, y_test, frames, cfg.train_ids);
  });
  return rows;
}

void write_sweep_csv(const std::vector<SweepRow>& rows, std::ostream& out) {
  out << "block,sigma,rot_err,trans_err\n";
  out << std::setprecision(9);
  for (const auto& r : rows) {
    out << r.block << ',' << static_cast<double>(r.level) / kNoiseLevels << ',';
    if (r.errors)
      out << r.errors->rotation << ',' << r.errors->translation << '\n';
    else
      out << "NA,NA\n";
  }
}

std::pair<std::vector<std::string>, std::vector<std::string>> split_ids(std::vector<std::string> ids,
                                                                        std::size_t test_count,
                                                                        std::uint64_t seed) {
  std::sort(ids.begin(), ids.end());
  ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
  if (test_count == 0 || test_count + 2 > ids.size()) throw ProbeError("split_ids: not enough videos");
  std::mt19937_64 rng(seed);
  // Fisher-Yates with an explicit index draw keeps the split stable across standard libraries.
  for (std::size_t i = ids.size(); i > 1; --i) std::swap(ids[i - 1], ids[rng() % i]);
  std::vector<std::string> test(ids.end() - static_cast<std::ptrdiff_t>(test_count), ids.end());
  ids.resize(ids.size() - test_count);
  std::sort(ids.begin(), ids.end());
  std::sort(test.begin(), test.end());
  return {ids, test};
}

std::string activation_file_name(int block, int level, const std::string& video_id) {
  return "act_b" + std::to_string(block) + "_s" + std::to_string(level) + "_" + video_id + ".tnsr";
}

std::optional<std::tuple<int, int, std::string>> parse_activation_file_name(const std::string& name) {
  static const std::regex pattern(R"(act_b(\d+)_s(\d+)_(.+)\.tnsr)");
  std::smatch m;
  if (!std::regex_match(name, m, pattern)) return std::nullopt;
  return std::make_tuple(std::stoi(m[1]), std::stoi(m[2]), m[3].str());
}

void write_activation(const ActivationRecord& rec, const std::filesystem::path& dir) {
  check_record(rec);
  std::filesystem::create_directories(dir);
  tensorio::write_tensor(rec.features, dir / activation_file_name(rec.block, rec.level, rec.video_id));
}

namespace {

std::vector<std::filesystem::path> sorted_files(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw ProbeError("not a directory: " + dir.string());
  std::vector<std::filesystem::path> files;
  for (const auto& entry : std::filesystem::directory_iterator(dir))
    if (entry.is_regular_file()) files.push_back(entry.path());
  std::sort(files.begin(), files.end());
  return files;
}

}  // namespace

std::vector<ActivationRecord> load_activations(const std::filesystem::path& dir, std::optional<int> block,
                                               std::optional<int> level) {
  std::vector<ActivationRecord> out;
  for (const auto& file : sorted_files(dir)) {
    const auto parsed = parse_activation_file_name(file.filename().string());
    if (!parsed) continue;
    const auto& [b, l, id] = *parsed;
    if ((block && b != *block) || (level && l != *level)) continue;
    ActivationRecord rec{b, l, id, tensorio::read_tensor(file)};
    check_record(rec);
    out.push_back(std::move(rec));
  }
  return out;
}

std::string target_file_name(const std::string& video_id) { return "targets_" + video_id + ".tnsr"; }

TargetMap load_targets(const std::filesystem::path& dir) {
  static const std::regex pattern(R"(targets_(.+)\.tnsr)");
  TargetMap out;
  for (const auto& file : sorted_files(dir)) {
    std::smatch m;
    const std::string name = file.filename().string();
    if (!std::regex_match(name, m, pattern)) continue;
    out.emplace(m[1].str(), tensorio::read_tensor(file));
  }
  return out;
}

}  // namespace ac3d::probe
