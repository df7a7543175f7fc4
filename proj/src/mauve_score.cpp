#include "datasim/mauve_score.hpp"

#include <algorithm>
#include <limits>
#include <numeric>

#include "datasim/corpus_store.hpp"
#include "datasim/log.hpp"
#include "datasim/rng.hpp"
#include "parallel.hpp"

namespace datasim {
namespace {

constexpr std::size_t kChunk = 2048;
constexpr std::uint64_t kMauveStream = 0x6d61757665ULL;  // "mauve"

struct ChunkStats {
  Eigen::MatrixXd sums;
  Eigen::VectorXd counts;
  double inertia = 0.0;
};

// Assigns rows [begin, end) to their nearest center (lowest index on ties).
ChunkStats assign_chunk(const Eigen::MatrixXd& points, const Eigen::MatrixXd& centers,
                        const Eigen::VectorXd& center_norms, std::size_t begin, std::size_t end,
                        std::vector<std::size_t>& assignments, std::vector<double>& distances) {
  ChunkStats stats{Eigen::MatrixXd::Zero(centers.rows(), centers.cols()),
                   Eigen::VectorXd::Zero(centers.rows()), 0.0};
  Eigen::VectorXd cross(centers.rows());
  for (std::size_t row = begin; row < end; ++row) {
    // Per-point products keep the arithmetic identical for identical points.
    const auto x = points.row(static_cast<Eigen::Index>(row));
    cross.noalias() = centers * x.transpose();
    const double norm = x.squaredNorm();
    Eigen::Index best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (Eigen::Index c = 0; c < centers.rows(); ++c) {
      const double d = norm - 2.0 * cross[c] + center_norms[c];
      if (d < best_d) {
        best_d = d;
        best = c;
      }
    }
    best_d = std::max(best_d, 0.0);
    assignments[row] = static_cast<std::size_t>(best);
    distances[row] = best_d;
    stats.sums.row(best) += x;
    stats.counts[best] += 1.0;
    stats.inertia += best_d;
  }
  return stats;
}

Eigen::MatrixXd kmeans_plus_plus(const Eigen::MatrixXd& points, std::size_t k, Rng& rng) {
  const auto n = static_cast<std::size_t>(points.rows());
  std::vector<Eigen::Index> chosen{static_cast<Eigen::Index>(rng.below(n))};
  Eigen::VectorXd d2 = (points.rowwise() - points.row(chosen[0])).rowwise().squaredNorm();
  while (chosen.size() < k) {
    const double total = d2.sum();
    if (!(total > 0.0)) break;  // every remaining point coincides with a center
    const double target = rng.uniform() * total;
    double acc = 0.0;
    Eigen::Index pick = -1;
    for (Eigen::Index i = 0; i < d2.size(); ++i) {
      if (d2[i] <= 0.0) continue;
      acc += d2[i];
      pick = i;
      if (acc > target) break;
    }
    chosen.push_back(pick);
    d2 = d2.cwiseMin((points.rowwise() - points.row(pick)).rowwise().squaredNorm());
  }
  Eigen::MatrixXd centers(static_cast<Eigen::Index>(chosen.size()), points.cols());
  for (std::size_t c = 0; c < chosen.size(); ++c)
    centers.row(static_cast<Eigen::Index>(c)) = points.row(chosen[c]);
  return centers;
}

}  // namespace

KMeansResult kmeans(const Eigen::MatrixXd& points, const KMeansOptions& options) {
  const auto n = static_cast<std::size_t>(points.rows());
  if (options.k < 1) throw ValidationError("kmeans: k must be at least 1");
  if (options.k > n)
    throw ValidationError("kmeans: k=" + std::to_string(options.k) + " exceeds point count " +
                          std::to_string(n));
  if (!points.allFinite()) throw ValidationError("kmeans: non-finite input");

  Rng rng(options.seed);
  KMeansResult result;
  result.centers = kmeans_plus_plus(points, options.k, rng);
  result.assignments.assign(n, 0);
  std::vector<double> distances(n, 0.0);
  const std::size_t chunks = (n + kChunk - 1) / kChunk;
  double previous = std::numeric_limits<double>::infinity();

  for (std::size_t iter = 1; iter <= options.max_iterations; ++iter) {
    const Eigen::VectorXd center_norms = result.centers.rowwise().squaredNorm();
    std::vector<ChunkStats> stats(chunks);
    detail::parallel_for(options.workers, chunks, [&](std::size_t c) {
      stats[c] = assign_chunk(points, result.centers, center_norms, c * kChunk,
                              std::min(n, (c + 1) * kChunk), result.assignments, distances);
    });
    Eigen::MatrixXd sums = Eigen::MatrixXd::Zero(result.centers.rows(), result.centers.cols());
    Eigen::VectorXd counts = Eigen::VectorXd::Zero(result.centers.rows());
    double inertia = 0.0;
    for (const auto& s : stats) {
      sums += s.sums;
      counts += s.counts;
      inertia += s.inertia;
    }
    result.inertia = inertia;
    result.iterations = iter;

    // Empty clusters take the points farthest from their current centers.
    std::vector<std::size_t> order;
    for (Eigen::Index c = 0; c < counts.size(); ++c) {
      if (counts[c] > 0.0) {
        result.centers.row(c) = sums.row(c) / counts[c];
        continue;
      }
      if (order.empty()) {
        order.resize(n);
        std::iota(order.begin(), order.end(), 0);
        std::stable_sort(order.begin(), order.end(),
                         [&](std::size_t a, std::size_t b) { return distances[a] > distances[b]; });
      }
      const std::size_t donor = order.front();
      order.erase(order.begin());
      result.centers.row(c) = points.row(static_cast<Eigen::Index>(donor));
      distances[donor] = 0.0;
    }
    const bool converged = std::abs(previous - inertia) <= options.tolerance * previous;
    previous = inertia;
    if (converged) break;
  }
  // Final assignment against the final centers.
  const Eigen::VectorXd center_norms = result.centers.rowwise().squaredNorm();
  double inertia = 0.0;
  for (std::size_t c = 0; c < chunks; ++c)
    inertia += assign_chunk(points, result.centers, center_norms, c * kChunk,
                            std::min(n, (c + 1) * kChunk), result.assignments, distances)
                   .inertia;
  result.inertia = inertia;
  return result;
}

std::size_t default_cluster_count(std::size_t total_points) {
  return std::max<std::size_t>(2, std::min<std::size_t>(500, total_points / 10));
}

QuantizedPair quantize(const Eigen::MatrixXd& task_vecs, const Eigen::MatrixXd& ref_vecs,
                       std::size_t k, std::uint64_t seed, unsigned workers) {
  if (task_vecs.rows() == 0 || ref_vecs.rows() == 0)
    throw ValidationError("quantize: both vector sets must be non-empty");
  if (task_vecs.cols() != ref_vecs.cols())
    throw ValidationError("quantize: dimension mismatch");
  if (k < 2) throw ValidationError("quantize: k must be at least 2");
  const auto total = static_cast<std::size_t>(task_vecs.rows() + ref_vecs.rows());
  if (k > total)
    throw ValidationError("quantize: k=" + std::to_string(k) + " exceeds point count " +
                          std::to_string(total));

  Eigen::MatrixXd all(task_vecs.rows() + ref_vecs.rows(), task_vecs.cols());
  all << task_vecs, ref_vecs;
  const auto km = kmeans(all, {.k = k, .seed = seed, .workers = workers});

  QuantizedPair pair;
  pair.k = k;
  pair.seed = seed;
  pair.effective_clusters = static_cast<std::size_t>(km.centers.rows());
  if (pair.effective_clusters < k)
    log::warn("quantize: only " + std::to_string(pair.effective_clusters) +
              " distinct points available for k=" + std::to_string(k));
  pair.assignments = km.assignments;
  pair.p_hist = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(k));
  pair.q_hist = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(k));
  const auto n_task = static_cast<std::size_t>(task_vecs.rows());
  for (std::size_t i = 0; i < total; ++i) {
    auto& hist = i < n_task ? pair.p_hist : pair.q_hist;
    hist[static_cast<Eigen::Index>(pair.assignments[i])] += 1.0;
  }
  pair.p_hist /= static_cast<double>(task_vecs.rows());
  pair.q_hist /= static_cast<double>(ref_vecs.rows());
  return pair;
}

namespace {

double kl_against_mixture(const Eigen::VectorXd& p, const Eigen::VectorXd& mix) {
  double total = 0.0;
  for (Eigen::Index i = 0; i < p.size(); ++i)
    if (p[i] > 0.0) total += p[i] * std::log(p[i] / mix[i]);
  return std::max(total, 0.0);
}

void check_histogram(const Eigen::VectorXd& h, const char* name) {
  if (h.size() < 2) throw ValidationError(std::string("mauve: ") + name + " needs at least 2 bins");
  if ((h.array() < 0.0).any() || !h.allFinite())
    throw ValidationError(std::string("mauve: ") + name + " has negative or non-finite entries");
  if (std::abs(h.sum() - 1.0) > 1e-9)
    throw ValidationError(std::string("mauve: ") + name + " does not sum to 1");
}

}  // namespace

std::vector<FrontierPoint> divergence_frontier(const Eigen::VectorXd& p, const Eigen::VectorXd& q,
                                               double c, std::size_t num_points) {
  if (p.size() != q.size()) throw ValidationError("mauve: histogram lengths differ");
  if (!(c > 0.0)) throw ValidationError("mauve: c must be positive");
  if (num_points < 3) throw ValidationError("mauve: num_points must be at least 3");
  check_histogram(p, "p_hist");
  check_histogram(q, "q_hist");

  constexpr double lo = 1e-6;
  constexpr double hi = 1.0 - 1e-6;
  std::vector<FrontierPoint> frontier{{0.0, 1.0}, {1.0, 0.0}};
  for (std::size_t i = 0; i < num_points; ++i) {
    const double w = lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(num_points - 1);
    const Eigen::VectorXd mix = w * p + (1.0 - w) * q;
    frontier.push_back({std::exp(-c * kl_against_mixture(q, mix)),
                        std::exp(-c * kl_against_mixture(p, mix))});
  }
  std::sort(frontier.begin(), frontier.end(), [](const FrontierPoint& a, const FrontierPoint& b) {
    return a.x != b.x ? a.x < b.x : a.y > b.y;
  });
  return frontier;
}

double frontier_area(const std::vector<FrontierPoint>& frontier) {
  double area = 0.0;
  for (std::size_t i = 1; i < frontier.size(); ++i)
    area += 0.5 * (frontier[i].x - frontier[i - 1].x) * (frontier[i].y + frontier[i - 1].y);
  return area;
}

MauveResult mauve(const QuantizedPair& pair, double c, std::size_t num_points) {
  if (pair.k < 2) throw ValidationError("mauve: quantized pair needs k >= 2");
  MauveResult result;
  result.score = frontier_area(divergence_frontier(pair.p_hist, pair.q_hist, c, num_points));
  result.num_frontier_points = num_points;
  result.c = c;
  result.seed = pair.seed;
  return result;
}

AverageMauve average_mauve(const Eigen::MatrixXd& task_vecs, const Eigen::MatrixXd& ref_vecs,
                           const AverageMauveOptions& options) {
  if (options.repeats < 1) throw ValidationError("average_mauve: repeats must be at least 1");
  const auto ref_rows = static_cast<std::size_t>(ref_vecs.rows());
  std::size_t repeats = options.repeats;
  if (ref_rows <= options.sample_size) {
    log::warn("average_mauve: reference has " + std::to_string(ref_rows) +
              " rows, not more than sample size " + std::to_string(options.sample_size) +
              "; using the full reference once");
    repeats = 1;
  }
  AverageMauve out;
  for (std::size_t r = 0; r < repeats; ++r) {
    const std::uint64_t seed = counter_hash(options.seed, kMauveStream, r);
    Eigen::MatrixXd sample;
    if (ref_rows <= options.sample_size) {
      sample = ref_vecs;
    } else {
      const auto rows = sample_indices(ref_rows, options.sample_size, seed);
      sample.resize(static_cast<Eigen::Index>(rows.size()), ref_vecs.cols());
      for (std::size_t i = 0; i < rows.size(); ++i)
        sample.row(static_cast<Eigen::Index>(i)) = ref_vecs.row(static_cast<Eigen::Index>(rows[i]));
    }
    out.sample_size_used = static_cast<std::size_t>(sample.rows());
    const std::size_t total = static_cast<std::size_t>(task_vecs.rows() + sample.rows());
    const std::size_t k = options.k ? options.k : default_cluster_count(total);
    const auto pair = quantize(task_vecs, sample, k, seed, options.workers);
    out.scores.push_back(mauve(pair, options.c, options.num_points).score);
  }
  out.mean = std::accumulate(out.scores.begin(), out.scores.end(), 0.0) /
             static_cast<double>(out.scores.size());
  double var = 0.0;
  for (double s : out.scores) var += (s - out.mean) * (s - out.mean);
  out.stddev = std::sqrt(var / static_cast<double>(out.scores.size()));
  return out;
}

}  // namespace datasim
