#include <gtest/gtest.h>

#include <random>
#include <set>

#include "datasim/error.hpp"
#include "datasim/mauve_score.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace datasim;

namespace {

Eigen::MatrixXd blobs(std::size_t n, std::size_t dim, std::size_t centers, double spread, std::uint64_t seed,
                      double offset = 0.0) {
  std::mt19937_64 gen(seed);
  std::normal_distribution<double> g(0.0, 1.0);
  Eigen::MatrixXd m(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(dim));
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c)
      m(r, c) = offset + 10.0 * static_cast<double>((r % centers) == static_cast<std::size_t>(c) % centers) +
                spread * g(gen);
  return m;
}

QuantizedPair pair_of(const Eigen::VectorXd& p, const Eigen::VectorXd& q) {
  QuantizedPair pair;
  pair.k = pair.effective_clusters = static_cast<std::size_t>(p.size());
  pair.p_hist = p;
  pair.q_hist = q;
  return pair;
}

std::vector<double> to_std(const Eigen::VectorXd& v) { return {v.data(), v.data() + v.size()}; }

}  // namespace

TEST(Frontier, IdenticalHistogramsScoreOne) {
  const Eigen::Vector4d p(0.1, 0.2, 0.3, 0.4);
  EXPECT_NEAR(mauve(pair_of(p, p)).score, 1.0, 1e-12);
}

TEST(Frontier, DisjointTwoPointMatchesClosedForm) {
  const Eigen::Vector2d p(1.0, 0.0), q(0.0, 1.0);
  const double score = mauve(pair_of(p, q), 5.0, 25).score;
  EXPECT_NEAR(score, oracle::disjoint_two_point_mauve(5.0, 25), 1e-12);
  EXPECT_LE(score, 0.05);
}

TEST(Frontier, SymmetricInArguments) {
  std::mt19937_64 gen(3);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int t = 0; t < 20; ++t) {
    Eigen::VectorXd p(8), q(8);
    for (int i = 0; i < 8; ++i) {
      p[i] = u(gen) < 0.25 ? 0.0 : u(gen);
      q[i] = u(gen);
    }
    p /= p.sum();
    q /= q.sum();
    EXPECT_NEAR(mauve(pair_of(p, q)).score, mauve(pair_of(q, p)).score, 1e-9);
  }
}

TEST(Frontier, MatchesShoelaceOracleOnFineGrid) {
  std::mt19937_64 gen(4);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int t = 0; t < 5; ++t) {
    Eigen::VectorXd p(6), q(6);
    for (int i = 0; i < 6; ++i) {
      p[i] = u(gen);
      q[i] = i == t ? 0.0 : u(gen);
    }
    p /= p.sum();
    q /= q.sum();
    for (std::size_t points : {25u, 250u})
      EXPECT_NEAR(mauve(pair_of(p, q), 5.0, points).score, oracle::mauve(to_std(p), to_std(q), 5.0, points), 1e-9);
  }
}

TEST(Frontier, DegradesMonotonicallyAlongInterpolation) {
  const Eigen::Vector4d q(0.4, 0.4, 0.2, 0.0);
  const Eigen::Vector4d far(0.0, 0.0, 0.1, 0.9);
  double previous = 2.0;
  for (int i = 0; i <= 10; ++i) {
    const double t = i / 10.0;
    const Eigen::VectorXd p = (1 - t) * q + t * far;
    const double s = mauve(pair_of(p, q)).score;
    EXPECT_LE(s, previous + 1e-12) << "t=" << t;
    previous = s;
  }
}

TEST(Frontier, ValidatesHistograms) {
  EXPECT_THROW(mauve(pair_of(Eigen::Vector2d(0.7, 0.7), Eigen::Vector2d(0.5, 0.5))), ValidationError);
  EXPECT_THROW(mauve(pair_of(Eigen::Vector2d(-0.5, 1.5), Eigen::Vector2d(0.5, 0.5))), ValidationError);
  EXPECT_THROW(mauve(pair_of(Eigen::Vector2d(0.5, 0.5), Eigen::Vector2d(0.5, 0.5)), 0.0), ValidationError);
  EXPECT_THROW(mauve(pair_of(Eigen::Vector2d(0.5, 0.5), Eigen::Vector2d(0.5, 0.5)), 5.0, 2), ValidationError);
}

TEST(Frontier, SortedWithEndpoints) {
  const auto f = divergence_frontier(Eigen::Vector3d(0.2, 0.3, 0.5), Eigen::Vector3d(0.5, 0.3, 0.2), 5.0, 10);
  ASSERT_EQ(f.size(), 12u);
  EXPECT_EQ(f.front().x, 0.0);
  EXPECT_EQ(f.front().y, 1.0);
  EXPECT_EQ(f.back().x, 1.0);
  EXPECT_EQ(f.back().y, 0.0);
  for (std::size_t i = 1; i < f.size(); ++i) EXPECT_LE(f[i - 1].x, f[i].x);
}

TEST(KMeans, DeterministicAndWorkerIndependent) {
  const auto pts = blobs(5000, 6, 4, 1.0, 1);
  KMeansOptions opts;
  opts.k = 4;
  opts.seed = 99;
  const auto a = kmeans(pts, opts);
  opts.workers = 4;
  const auto b = kmeans(pts, opts);
  EXPECT_EQ(a.assignments, b.assignments);
  EXPECT_EQ(a.inertia, b.inertia);
  EXPECT_TRUE((a.centers.array() == b.centers.array()).all());
  EXPECT_EQ(std::set<std::size_t>(a.assignments.begin(), a.assignments.end()).size(), 4u);
}

TEST(KMeans, IdenticalPointsShareCluster) {
  Eigen::MatrixXd pts = blobs(300, 3, 3, 2.0, 2);
  for (Eigen::Index r = 100; r < 200; ++r) pts.row(r) = pts.row(5);
  KMeansOptions opts;
  opts.k = 7;
  const auto res = kmeans(pts, opts);
  for (std::size_t r = 100; r < 200; ++r) EXPECT_EQ(res.assignments[r], res.assignments[5]);
}

TEST(KMeans, FewerDistinctPointsShrinksK) {
  Eigen::MatrixXd pts(6, 2);
  pts << 0, 0, 0, 0, 1, 1, 1, 1, 0, 0, 1, 1;
  KMeansOptions opts;
  opts.k = 4;
  const auto res = kmeans(pts, opts);
  EXPECT_EQ(res.centers.rows(), 2);
  EXPECT_EQ(res.inertia, 0.0);
}

TEST(Quantize, HistogramsAndErrors) {
  const auto task = blobs(100, 4, 2, 0.5, 3);
  const auto ref = blobs(300, 4, 2, 0.5, 4);
  const auto pair = quantize(task, ref, 6, 1);
  EXPECT_EQ(pair.k, 6u);
  EXPECT_NEAR(pair.p_hist.sum(), 1.0, 1e-12);
  EXPECT_NEAR(pair.q_hist.sum(), 1.0, 1e-12);
  EXPECT_EQ(pair.assignments.size(), 400u);
  EXPECT_EQ(quantize(task, ref, 6, 1).assignments, pair.assignments);

  EXPECT_THROW(quantize(task, ref, 1, 1), ValidationError);
  EXPECT_THROW(quantize(task, ref, 401, 1), ValidationError);
  EXPECT_THROW(quantize(Eigen::MatrixXd(0, 4), ref, 4, 1), ValidationError);
  EXPECT_THROW(quantize(task, Eigen::MatrixXd(Eigen::MatrixXd::Ones(10, 3)), 4, 1), ValidationError);
}

TEST(Quantize, AcceptsFloatMatrices) {
  const Eigen::MatrixXf task = blobs(40, 3, 2, 0.5, 5).cast<float>();
  const Eigen::MatrixXf ref = blobs(60, 3, 2, 0.5, 6).cast<float>();
  EXPECT_EQ(quantize(task, ref, 4, 2).p_hist.size(), 4);
}

TEST(DefaultClusterCount, Bounds) {
  EXPECT_EQ(default_cluster_count(5), 2u);
  EXPECT_EQ(default_cluster_count(100), 10u);
  EXPECT_EQ(default_cluster_count(10000), 500u);
  EXPECT_EQ(default_cluster_count(1000000), 500u);
}

TEST(Mauve, SameDistributionScoresHigh) {
  const auto a = blobs(600, 8, 4, 0.3, 7);
  EXPECT_GE(mauve(quantize(a, a, 20, 3)).score, 0.999);
  const auto b = blobs(600, 8, 4, 0.3, 8);
  const auto shifted = blobs(600, 8, 4, 0.3, 9, 6.0);
  EXPECT_GT(mauve(quantize(a, b, 20, 3)).score, mauve(quantize(a, shifted, 20, 3)).score);
}

TEST(AverageMauve, RepeatsAndSmallReference) {
  const auto task = blobs(100, 4, 2, 0.5, 10);
  const auto ref = blobs(1000, 4, 2, 0.5, 11);
  AverageMauveOptions opts;
  opts.sample_size = 200;
  opts.repeats = 3;
  opts.seed = 5;
  const auto r = average_mauve(task, ref, opts);
  ASSERT_EQ(r.scores.size(), 3u);
  EXPECT_EQ(r.sample_size_used, 200u);
  EXPECT_NEAR(r.mean, (r.scores[0] + r.scores[1] + r.scores[2]) / 3, 1e-15);
  EXPECT_GE(r.stddev, 0.0);
  opts.workers = 3;
  EXPECT_EQ(average_mauve(task, ref, opts).scores, r.scores);

  testutil::LogCapture log;
  opts.sample_size = 5000;
  const auto whole = average_mauve(task, ref, opts);
  EXPECT_EQ(whole.scores.size(), 1u);
  EXPECT_EQ(whole.stddev, 0.0);
  EXPECT_FALSE(log.warnings.empty());
}
