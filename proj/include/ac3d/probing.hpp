#pragma once

#include <Eigen/Core>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <cstdint>
#include <optional>
#include <string>
#include <tuple>
#include <vector>

#include "ac3d/error.hpp"
#include "ac3d/tensorio.hpp"

namespace ac3d::probe {

inline constexpr int kNoiseLevels = 8;
inline constexpr double kPaperRidgeAlpha = 25000.0;

/// Activations of one block at one noise level for one video.
struct ActivationRecord {
  int block = 1;  // 1-based
  int level = 8;  // sigma = level / 8
  std::string video_id;
  Tensor features;  // [D, T, H', W']

  double sigma() const { return static_cast<double>(level) / kNoiseLevels; }
};

class ProbeError : public DataError {
 public:
  using DataError::DataError;
};

/// Channel PCA fitted on training activations.
struct PcaBasis {
  Eigen::VectorXd mean;        // [D]
  Eigen::MatrixXd components;  // [D, K], orthonormal columns (zero columns past the rank)
  Eigen::VectorXd variances;   // [K], eigenvalues of the kept components
  std::vector<std::string> warnings;

  std::size_t channels() const { return static_cast<std::size_t>(components.rows()); }
  std::size_t dim() const { return static_cast<std::size_t>(components.cols()); }
  ActivationRecord apply(const ActivationRecord& rec) const;
};

PcaBasis fit_pca(const std::vector<const ActivationRecord*>& train, std::size_t k);

/// Fits on `train` and returns the basis plus every record of `all` reduced.
std::pair<PcaBasis, std::vector<ActivationRecord>> reduce_pca(const std::vector<ActivationRecord>& train,
                                                              const std::vector<ActivationRecord>& all,
                                                              std::size_t k);

/// Rows are videos; columns are [central K x T | pooled K x T], each unrolled
/// time-major (index t * K + k).
struct ProbeFeatures {
  Eigen::MatrixXd matrix;
  std::vector<std::string> video_ids;
};

Eigen::VectorXd probe_vector(const ActivationRecord& reduced);
ProbeFeatures build_features(const std::vector<ActivationRecord>& reduced);

struct RidgeModel {
  Eigen::MatrixXd weights;     // [P, Q] in standardized feature space
  Eigen::RowVectorXd bias;     // [Q]
  Eigen::RowVectorXd x_mean;   // [P]
  Eigen::RowVectorXd x_scale;  // [P], 0 for constant columns
  double alpha = kPaperRidgeAlpha;

  Eigen::MatrixXd predict(const Eigen::MatrixXd& x) const;
};

/// Standardizes X per column, centers Y, and solves (Z^T Z + alpha I) W = Z^T Y
/// by Cholesky (through the N x N dual system when P > N).
RidgeModel fit_ridge(const Eigen::MatrixXd& x, const Eigen::MatrixXd& y, double alpha);

/// Ridge objective ||Z W - Yc||^2 + alpha ||W||^2 in standardized coordinates.
double ridge_objective(const RidgeModel& model, const Eigen::MatrixXd& x, const Eigen::MatrixXd& y);

struct ProbeErrors {
  double rotation = 0.0;     // radians
  double translation = 0.0;  // max-norm normalized
};

/// Scores pose predictions [N, 6F] against targets [N, 6F] per video.
ProbeErrors score_poses(const Eigen::MatrixXd& predicted, const Eigen::MatrixXd& targets, std::size_t frames);

ProbeErrors eval_probe(const RidgeModel& model, const ProbeFeatures& test, const Eigen::MatrixXd& y_test,
                       std::size_t frames, const std::vector<std::string>& train_ids);

struct SweepConfig {
  std::size_t pca_dim = 16;
  double alpha = kPaperRidgeAlpha;
  std::vector<std::string> train_ids;
  std::vector<std::string> test_ids;
};

struct SweepRow {
  int block = 0;
  int level = 0;
  std::optional<ProbeErrors> errors;  // empty when the cell is missing
};

/// Pose targets per video: [F, 6] rows from euler_targets.
using TargetMap = std::map<std::string, Tensor>;

/// One PCA + ridge fit per (block, level) cell, in parallel. Rows are sorted
/// by (block, level); cells lacking a video are reported as gaps.
std::vector<SweepRow> sweep(const std::vector<ActivationRecord>& records, const TargetMap& targets,
                            const SweepConfig& cfg);

void write_sweep_csv(const std::vector<SweepRow>& rows, std::ostream& out);

/// Deterministic train/test split over sorted ids: the last `test_count` ids
/// of a seeded shuffle form the test set.
std::pair<std::vector<std::string>, std::vector<std::string>> split_ids(std::vector<std::string> ids,
                                                                        std::size_t test_count,
                                                                        std::uint64_t seed);

/// File name of an activation dump: act_b{block}_s{level}_{video_id}.tnsr
std::string activation_file_name(int block, int level, const std::string& video_id);
/// Inverse of activation_file_name; empty when the name does not match.
std::optional<std::tuple<int, int, std::string>> parse_activation_file_name(const std::string& name);

/// Writes `rec` into `dir` under its activation_file_name.
void write_activation(const ActivationRecord& rec, const std::filesystem::path& dir);

/// Reads every activation dump in `dir` (sorted by file name), optionally
/// restricted to one block and/or level. Other files are ignored.
std::vector<ActivationRecord> load_activations(const std::filesystem::path& dir, std::optional<int> block = {},
                                               std::optional<int> level = {});

/// Pose targets live next to the dumps as targets_{video_id}.tnsr, dims [F, 6].
std::string target_file_name(const std::string& video_id);
TargetMap load_targets(const std::filesystem::path& dir);

}  // namespace ac3d::probe
