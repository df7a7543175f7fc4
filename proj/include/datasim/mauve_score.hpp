#pragma once

#include <Eigen/Core>

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "datasim/error.hpp"

namespace datasim {

struct KMeansOptions {
  std::size_t k = 2;
  std::uint64_t seed = 0;
  std::size_t max_iterations = 300;
  double tolerance = 1e-6;  // relative inertia change
  unsigned workers = 1;
};

struct KMeansResult {
  Eigen::MatrixXd centers;  // effective_k x dim
  std::vector<std::size_t> assignments;
  double inertia = 0.0;
  std::size_t iterations = 0;
};

// Seeded k-means++ initialisation followed by Lloyd iterations. Points are
// processed in fixed-size chunks reduced in chunk order, so the result does
// not depend on the worker count. When fewer than k distinct points exist
// the returned center count is smaller than k.
KMeansResult kmeans(const Eigen::MatrixXd& points, const KMeansOptions& options);

// Joint quantization of a task set and a reference set.
struct QuantizedPair {
  std::size_t k = 0;
  std::size_t effective_clusters = 0;
  std::uint64_t seed = 0;
  Eigen::VectorXd p_hist;  // task occupancy
  Eigen::VectorXd q_hist;  // reference occupancy
  std::vector<std::size_t> assignments;  // task rows first, then reference rows
};

// min(500, total / 10), but never below 2.
std::size_t default_cluster_count(std::size_t total_points);

QuantizedPair quantize(const Eigen::MatrixXd& task_vecs, const Eigen::MatrixXd& ref_vecs,
                       std::size_t k, std::uint64_t seed, unsigned workers = 1);

template <typename DerivedT, typename DerivedR>
QuantizedPair quantize(const Eigen::MatrixBase<DerivedT>& task_vecs,
                       const Eigen::MatrixBase<DerivedR>& ref_vecs, std::size_t k,
                       std::uint64_t seed, unsigned workers = 1) {
  return quantize(Eigen::MatrixXd(task_vecs.template cast<double>()),
                  Eigen::MatrixXd(ref_vecs.template cast<double>()), k, seed, workers);
}

struct FrontierPoint {
  double x = 0.0;  // exp(-c KL(q || mix))
  double y = 0.0;  // exp(-c KL(p || mix))
};

// Divergence frontier over mixture weights linspace(1e-6, 1 - 1e-6, num_points),
// plus the extreme points (0, 1) and (1, 0), sorted by x ascending (ties by
// y descending).
std::vector<FrontierPoint> divergence_frontier(const Eigen::VectorXd& p, const Eigen::VectorXd& q,
                                               double c, std::size_t num_points);

// Area under the frontier by the trapezoidal rule.
double frontier_area(const std::vector<FrontierPoint>& frontier);

struct MauveResult {
  double score = 0.0;
  std::size_t num_frontier_points = 0;
  double c = 5.0;
  std::uint64_t seed = 0;
};

MauveResult mauve(const QuantizedPair& pair, double c = 5.0, std::size_t num_points = 25);

struct AverageMauveOptions {
  std::size_t sample_size = 10000;
  std::size_t repeats = 1;
  std::uint64_t seed = 0;
  std::size_t k = 0;  // 0 selects default_cluster_count
  double c = 5.0;
  std::size_t num_points = 25;
  unsigned workers = 1;
};

struct AverageMauve {
  double mean = 0.0;
  double stddev = 0.0;  // population std over repeats
  std::vector<double> scores;
  std::size_t sample_size_used = 0;
};

// Mean MAUVE of the task set against `repeats` independent reference samples.
// When the reference has no more rows than sample_size it is used whole,
// once, with a warning.
AverageMauve average_mauve(const Eigen::MatrixXd& task_vecs, const Eigen::MatrixXd& ref_vecs,
                           const AverageMauveOptions& options);

}  // namespace datasim
