#include <doctest.h>

#include <Eigen/Dense>
#include <algorithm>
#include <fstream>
#include <random>
#include <sstream>

#include "ac3d/probing.hpp"
#include "probe_fixtures.hpp"
#include "test_util.hpp"

using namespace ac3d;
using namespace ac3d::probe;

namespace {

ActivationRecord random_record(std::mt19937_64& rng, std::size_t d, std::size_t t, std::size_t h, std::size_t w,
                               const std::string& id = "v") {
  std::normal_distribution<float> n(0, 1);
  ActivationRecord rec{1, 8, id, Tensor({d, t, h, w})};
  for (auto& v : rec.features.data()) v = n(rng);
  return rec;
}

// All C-vectors of a record as rows.
Eigen::MatrixXd samples(const ActivationRecord& rec) {
  const auto& dims = rec.features.dims();
  const std::size_t d = dims[0], p = dims[1] * dims[2] * dims[3];
  Eigen::MatrixXd out(p, d);
  for (std::size_t c = 0; c < d; ++c)
    for (std::size_t i = 0; i < p; ++i) out(i, c) = rec.features.data()[c * p + i];
  return out;
}

}  // namespace

TEST_CASE("PCA with K = D is an isometry") {
  std::mt19937_64 rng(1);
  std::vector<ActivationRecord> recs{random_record(rng, 6, 2, 3, 3, "a"), random_record(rng, 6, 2, 3, 3, "b")};
  const auto [basis, reduced] = reduce_pca(recs, recs, 6);
  CHECK(basis.warnings.empty());
  const Eigen::MatrixXd x = samples(recs[0]), y = samples(reduced[0]);
  for (Eigen::Index i = 0; i < x.rows(); ++i)
    for (Eigen::Index j = 0; j < x.rows(); ++j)
      CHECK(std::abs((x.row(i) - x.row(j)).norm() - (y.row(i) - y.row(j)).norm()) < 1e-5);
}

TEST_CASE("PCA recovers an exact 2-plane") {
  std::mt19937_64 rng(2);
  std::normal_distribution<double> n(0, 1);
  const Eigen::Vector3d a(1, 2, 0.5), b(-1, 0.3, 2), offset(0.2, -0.1, 3);
  ActivationRecord rec{1, 8, "v", Tensor({3, 4, 5, 5})};
  const std::size_t p = 100;
  for (std::size_t i = 0; i < p; ++i) {
    const Eigen::Vector3d x = offset + n(rng) * a + n(rng) * b;
    for (std::size_t c = 0; c < 3; ++c) rec.features.data()[c * p + i] = static_cast<float>(x(c));
  }
  const auto [basis, reduced] = reduce_pca({rec}, {rec}, 2);
  const Eigen::MatrixXd x = samples(rec), z = samples(reduced[0]);
  const Eigen::MatrixXd back = (z * basis.components.transpose()).rowwise() + basis.mean.transpose();
  CHECK((back - x).cwiseAbs().maxCoeff() < 1e-5);  // float storage bounds the error
}

TEST_CASE("PCA captured variance matches the top eigenvalues (SVD oracle)") {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> n(0, 1);
  const std::size_t d = 64;
  Eigen::MatrixXd scale = Eigen::MatrixXd::NullaryExpr(d, d, [&] { return n(rng); });
  std::vector<ActivationRecord> recs;
  for (int r = 0; r < 5; ++r) {
    ActivationRecord rec{1, 8, "v" + std::to_string(r), Tensor({d, 4, 6, 6})};
    const std::size_t p = 144;
    Eigen::MatrixXd raw = Eigen::MatrixXd::NullaryExpr(p, d, [&] { return n(rng); }) * scale;
    for (std::size_t c = 0; c < d; ++c)
      for (std::size_t i = 0; i < p; ++i) rec.features.data()[c * p + i] = static_cast<float>(raw(i, c));
    recs.push_back(std::move(rec));
  }
  const auto [basis, reduced] = reduce_pca(recs, recs, 8);

  Eigen::MatrixXd all(5 * 144, d);
  for (int r = 0; r < 5; ++r) all.middleRows(r * 144, 144) = samples(recs[r]);
  all.rowwise() -= all.colwise().mean();
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(all);
  const double oracle = svd.singularValues().head(8).array().square().sum() / static_cast<double>(all.rows());

  double captured = 0.0;
  for (const auto& rr : reduced) {
    const Eigen::MatrixXd z = samples(rr);
    captured += z.array().square().sum();
  }
  captured /= static_cast<double>(all.rows());
  CHECK(std::abs(captured - oracle) / oracle < 1e-5);
  CHECK(std::abs(basis.variances.sum() - oracle) / oracle < 1e-9);
  // orthonormal basis
  CHECK((basis.components.transpose() * basis.components - Eigen::MatrixXd::Identity(8, 8)).cwiseAbs().maxCoeff() <
        1e-9);
}

TEST_CASE("PCA pads rank-deficient input") {
  ActivationRecord rec{1, 8, "v", Tensor({4, 1, 2, 2}, 1.0f)};
  rec.features.at(0, 0, 0, 0) = 2.0f;
  const auto [basis, reduced] = reduce_pca({rec}, {rec}, 3);
  CHECK(basis.warnings.size() == 1);
  CHECK(basis.components.col(1).norm() == 0.0);
  CHECK(basis.components.col(0).norm() == doctest::Approx(1.0));
}

TEST_CASE("build_features layout") {
  SUBCASE("single pixel grid duplicates the block") {
    std::mt19937_64 rng(4);
    const auto rec = random_record(rng, 3, 2, 1, 1);
    const Eigen::VectorXd v = probe_vector(rec);
    CHECK(v.size() == 12);
    CHECK((v.head(6) - v.tail(6)).norm() < 1e-12);
  }
  SUBCASE("spatially constant features") {
    ActivationRecord rec{1, 8, "v", Tensor({2, 3, 4, 5})};
    for (std::size_t c = 0; c < 2; ++c)
      for (std::size_t t = 0; t < 3; ++t)
        for (std::size_t i = 0; i < 20; ++i) rec.features.data()[(c * 3 + t) * 20 + i] = float(c * 10 + t);
    const Eigen::VectorXd v = probe_vector(rec);
    CHECK((v.head(6) - v.tail(6)).norm() < 1e-12);
  }
  SUBCASE("hand-unrolled reference, K = 2, T = 3") {
    ActivationRecord rec{1, 8, "v", Tensor({2, 3, 3, 2})};
    // value = 100 k + 10 t + spatial index
    for (std::size_t k = 0; k < 2; ++k)
      for (std::size_t t = 0; t < 3; ++t)
        for (std::size_t y = 0; y < 3; ++y)
          for (std::size_t x = 0; x < 2; ++x) rec.features.at(k, t, y, x) = float(100 * k + 10 * t + 2 * y + x);
    // central index (1, 1) -> spatial 3; pooled mean of 0..5 -> 2.5
    const double expected[12] = {3, 103, 13, 113, 23, 123, 2.5, 102.5, 12.5, 112.5, 22.5, 122.5};
    const auto f = build_features({rec});
    REQUIRE(f.matrix.cols() == 12);
    for (int i = 0; i < 12; ++i) CHECK(f.matrix(0, i) == doctest::Approx(expected[i]));
  }
  CHECK(2 * 512 * 13 == 13312);
}

TEST_CASE("ridge limits") {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> n(0, 1);
  const Eigen::MatrixXd x = Eigen::MatrixXd::NullaryExpr(30, 8, [&] { return n(rng); });
  SUBCASE("null target") {
    const auto m = fit_ridge(x, Eigen::MatrixXd::Zero(30, 4), 1.0);
    CHECK(m.weights.norm() == 0.0);
    CHECK(m.bias.norm() == 0.0);
  }
  SUBCASE("infinite shrinkage") {
    Eigen::MatrixXd y = Eigen::MatrixXd::NullaryExpr(30, 4, [&] { return n(rng); });
    y.col(0).array() += 5.0;
    const auto m = fit_ridge(x, y, 1e12);
    CHECK(m.weights.norm() < 1e-6);
    const Eigen::MatrixXd pred = m.predict(x);
    CHECK((pred.rowwise() - y.colwise().mean()).cwiseAbs().maxCoeff() < 1e-6);
    CHECK(m.bias(0) == doctest::Approx(y.col(0).mean()));
  }
  SUBCASE("non-finite input") {
    Eigen::MatrixXd bad = x;
    bad(3, 3) = NAN;
    CHECK_THROWS_AS(fit_ridge(bad, Eigen::MatrixXd::Zero(30, 1), 1.0), ProbeError);
  }
}

TEST_CASE("ridge closed form matches gradient descent") {
  std::mt19937_64 rng(6);
  std::normal_distribution<double> n(0, 1);
  for (int trial = 0; trial < 5; ++trial) {
    Eigen::MatrixXd x = Eigen::MatrixXd::NullaryExpr(20, 10, [&] { return n(rng); });
    x.col(2) = x.col(2) * 3.0 + Eigen::VectorXd::Constant(20, 4.0);
    const Eigen::MatrixXd y = Eigen::MatrixXd::NullaryExpr(20, 3, [&] { return n(rng); });
    const double alpha = 0.5 + trial;
    const auto m = fit_ridge(x, y, alpha);

    // Independent standardization and plain gradient descent on the objective.
    const Eigen::RowVectorXd mu = x.colwise().mean();
    Eigen::MatrixXd z = x.rowwise() - mu;
    for (Eigen::Index j = 0; j < z.cols(); ++j) z.col(j) /= std::sqrt(z.col(j).squaredNorm() / 20.0);
    const Eigen::MatrixXd yc = y.rowwise() - y.colwise().mean();
    const double lmax = Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(z.transpose() * z).eigenvalues().maxCoeff();
    const double step = 1.0 / (2.0 * (lmax + alpha));
    Eigen::MatrixXd w = Eigen::MatrixXd::Zero(10, 3);
    for (int it = 0; it < 10000; ++it) w -= step * (2.0 * z.transpose() * (z * w - yc) + 2.0 * alpha * w);
    CHECK((w - m.weights).cwiseAbs().maxCoeff() < 1e-4);
  }
}

TEST_CASE("ridge dual route agrees with the primal route") {
  std::mt19937_64 rng(7);
  std::normal_distribution<double> n(0, 1);
  const Eigen::MatrixXd x = Eigen::MatrixXd::NullaryExpr(12, 40, [&] { return n(rng); });
  const Eigen::MatrixXd y = Eigen::MatrixXd::NullaryExpr(12, 2, [&] { return n(rng); });
  const auto m = fit_ridge(x, y, 3.0);  // P > N: dual
  Eigen::MatrixXd z = (x.rowwise() - m.x_mean).array().rowwise() * m.x_scale.array();
  Eigen::MatrixXd gram = z.transpose() * z;
  gram.diagonal().array() += 3.0;
  const Eigen::MatrixXd primal = gram.ldlt().solve(z.transpose() * (y.rowwise() - m.bias));
  CHECK((primal - m.weights).cwiseAbs().maxCoeff() < 1e-9);
}

TEST_CASE("larger alpha never lowers the training residual") {
  std::mt19937_64 rng(8);
  std::normal_distribution<double> n(0, 1);
  const Eigen::MatrixXd x = Eigen::MatrixXd::NullaryExpr(40, 12, [&] { return n(rng); });
  const Eigen::MatrixXd y = x * Eigen::MatrixXd::NullaryExpr(12, 2, [&] { return n(rng); }) +
                            0.3 * Eigen::MatrixXd::NullaryExpr(40, 2, [&] { return n(rng); });
  double prev = -1.0;
  for (double alpha : {0.01, 1.0, 10.0, 100.0, 25000.0}) {
    const double resid = (fit_ridge(x, y, alpha).predict(x) - y).squaredNorm();
    CHECK(resid >= prev);
    prev = resid;
  }
}

TEST_CASE("eval_probe") {
  testing::LinearWorld world(200, 9);
  std::mt19937_64 rng(10);
  std::vector<ActivationRecord> recs;
  for (const auto& id : world.ids) recs.push_back(world.record(id, 1, 8, true, rng, 0.01));
  std::vector<ActivationRecord> train(recs.begin(), recs.begin() + 160), test(recs.begin() + 160, recs.end());
  std::vector<std::string> train_ids(world.ids.begin(), world.ids.begin() + 160);
  auto stack = [&](const std::vector<ActivationRecord>& rs) {
    Eigen::MatrixXd y(rs.size(), 6 * world.frames);
    for (std::size_t i = 0; i < rs.size(); ++i)
      for (std::size_t j = 0; j < 6 * world.frames; ++j) y(i, j) = world.targets.at(rs[i].video_id)[j];
    return y;
  };
  const auto [basis, reduced_train] = reduce_pca(train, train, 8);
  std::vector<ActivationRecord> reduced_test;
  for (const auto& r : test) reduced_test.push_back(basis.apply(r));
  const auto xtr = build_features(reduced_train), xte = build_features(reduced_test);
  const Eigen::MatrixXd ytr = stack(train), yte = stack(test);

  SUBCASE("perfect predictor") {
    RidgeModel perfect;
    perfect.weights = Eigen::MatrixXd::Identity(yte.cols(), yte.cols());
    perfect.bias = Eigen::RowVectorXd::Zero(yte.cols());
    perfect.x_mean = Eigen::RowVectorXd::Zero(yte.cols());
    perfect.x_scale = Eigen::RowVectorXd::Ones(yte.cols());
    ProbeFeatures f{yte, xte.video_ids};
    const auto e = eval_probe(perfect, f, yte, world.frames, train_ids);
    CHECK(e.rotation < 1e-7);
    CHECK(e.translation < 1e-12);
  }
  SUBCASE("linear world is recovered") {
    const auto m = fit_ridge(xtr.matrix, ytr, 1.0);
    const auto e = eval_probe(m, xte, yte, world.frames, train_ids);
    CHECK(e.rotation < 0.02);
  }
  SUBCASE("zero weights equal the mean-pose predictor") {
    auto m = fit_ridge(xtr.matrix, ytr, 1.0);
    m.weights.setZero();
    const auto e = eval_probe(m, xte, yte, world.frames, train_ids);
    const Eigen::MatrixXd mean_pred = ytr.colwise().mean().replicate(yte.rows(), 1);
    const auto oracle = score_poses(mean_pred, yte, world.frames);
    CHECK(e.rotation == doctest::Approx(oracle.rotation).epsilon(1e-12));
    CHECK(e.translation == doctest::Approx(oracle.translation).epsilon(1e-12));
    CHECK(e.rotation > 0.01);
  }
  SUBCASE("split overlap is an error") {
    const auto m = fit_ridge(xtr.matrix, ytr, 1.0);
    std::vector<std::string> leaky = train_ids;
    leaky.push_back(xte.video_ids[3]);
    CHECK_THROWS_AS(eval_probe(m, xte, yte, world.frames, leaky), ProbeError);
  }
}

TEST_CASE("probe error is invariant to an orthonormal channel rotation") {
  testing::LinearWorld world(60, 11, 4, 12);
  std::mt19937_64 rng(12);
  const auto [train_ids, test_ids] = split_ids(world.ids, 15, 1);
  std::vector<ActivationRecord> recs;
  for (const auto& id : world.ids) recs.push_back(world.record(id, 1, 4, true, rng, 0.05));
  std::normal_distribution<double> n(0, 1);
  const Eigen::MatrixXd q =
      Eigen::HouseholderQR<Eigen::MatrixXd>(Eigen::MatrixXd::NullaryExpr(12, 12, [&] { return n(rng); })).householderQ();
  auto rotated = recs;
  for (auto& r : rotated) {
    const std::size_t p = r.features.size() / 12;
    Eigen::Map<Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> f(r.features.data().data(), 12, p);
    f = (q * f.cast<double>()).cast<float>();
  }
  SweepConfig cfg{6, 5.0, train_ids, test_ids};
  const auto a = sweep(recs, world.targets, cfg), b = sweep(rotated, world.targets, cfg);
  REQUIRE(a.size() == 1);
  CHECK(std::abs(a[0].errors->rotation - b[0].errors->rotation) < 1e-4);
  CHECK(std::abs(a[0].errors->translation - b[0].errors->translation) < 1e-4);
}

TEST_CASE("sweep grid, planted signal, gaps and duplicates") {
  testing::LinearWorld world(80, 13);
  std::mt19937_64 rng(14);
  const auto [train_ids, test_ids] = split_ids(world.ids, 20, 2);
  std::vector<ActivationRecord> recs;
  for (int b = 1; b <= 4; ++b)
    for (int l : {4, 8})
      for (const auto& id : world.ids) recs.push_back(world.record(id, b, l, b == 2 && l == 4, rng, 0.05));
  SweepConfig cfg{8, 10.0, train_ids, test_ids};

  const auto rows = sweep(recs, world.targets, cfg);
  REQUIRE(rows.size() == 8);
  const SweepRow* best = &rows[0];
  for (const auto& r : rows) {
    REQUIRE(r.errors);
    if (r.errors->rotation < best->errors->rotation) best = &r;
  }
  CHECK(best->block == 2);
  CHECK(best->level == 4);
  for (const auto& r : rows)
    if (&r != best) CHECK(r.errors->rotation > best->errors->rotation);

  std::ostringstream csv;
  write_sweep_csv(rows, csv);
  CHECK(csv.str().rfind("block,sigma,rot_err,trans_err\n1,0.5,", 0) == 0);

  SUBCASE("missing cell becomes a gap") {
    auto partial = recs;
    partial.erase(std::remove_if(partial.begin(), partial.end(),
                                 [&](const ActivationRecord& r) {
                                   return r.block == 3 && r.level == 8 && r.video_id == test_ids[0];
                                 }),
                  partial.end());
    const auto out = sweep(partial, world.targets, cfg);
    REQUIRE(out.size() == 8);
    for (const auto& r : out) CHECK(r.errors.has_value() == !(r.block == 3 && r.level == 8));
    std::ostringstream s;
    write_sweep_csv(out, s);
    CHECK(s.str().find("3,1,NA,NA") != std::string::npos);
  }
  SUBCASE("duplicates are rejected") {
    auto dup = recs;
    dup.push_back(recs.front());
    CHECK_THROWS_AS(sweep(dup, world.targets, cfg), ProbeError);
  }
}

TEST_CASE("activation file names") {
  CHECK(activation_file_name(3, 7, "clip_0001") == "act_b3_s7_clip_0001.tnsr");
  const auto parsed = parse_activation_file_name("act_b12_s8_v_a_b.tnsr");
  REQUIRE(parsed);
  CHECK(std::get<0>(*parsed) == 12);
  CHECK(std::get<1>(*parsed) == 8);
  CHECK(std::get<2>(*parsed) == "v_a_b");
  CHECK_FALSE(parse_activation_file_name("targets.tnsr"));
}

TEST_CASE("activation dumps and targets round-trip through a directory") {
  ac3d::testing::TempDir dir("probe_io");
  std::mt19937_64 rng(3);
  std::vector<ActivationRecord> written;
  for (int block : {1, 2})
    for (int level : {4, 8})
      for (const char* id : {"clip_0001", "clip_0000"}) {
        auto rec = random_record(rng, 4, 2, 2, 2, id);
        rec.block = block;
        rec.level = level;
        write_activation(rec, dir.path());
        written.push_back(rec);
      }
  tensorio::write_tensor(Tensor({3, 6}, 0.5f), dir / target_file_name("clip_0000"));
  std::ofstream(dir / "notes.txt") << "ignored";

  const auto all = load_activations(dir.path());
  REQUIRE(all.size() == 8);
  CHECK(all.front().video_id == "clip_0000");
  const auto cell = load_activations(dir.path(), 2, 4);
  REQUIRE(cell.size() == 2);
  for (const auto& rec : cell) {
    CHECK(rec.block == 2);
    CHECK(rec.level == 4);
    const auto match = std::find_if(written.begin(), written.end(), [&](const ActivationRecord& w) {
      return w.block == 2 && w.level == 4 && w.video_id == rec.video_id;
    });
    REQUIRE(match != written.end());
    CHECK(match->features == rec.features);
  }

  const auto targets = load_targets(dir.path());
  REQUIRE(targets.size() == 1);
  CHECK(targets.at("clip_0000") == Tensor({3, 6}, 0.5f));
}
