#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace datasim {

struct PairedSeries {
  std::vector<std::string> labels;
  Eigen::VectorXd x;
  Eigen::VectorXd y;

  std::size_t size() const { return static_cast<std::size_t>(x.size()); }
};

enum class CorrelationMethod { spearman, pearson };
enum class PValueSource { analytic, permutation_exact, permutation_monte_carlo };

std::string_view to_string(CorrelationMethod method);
std::string_view to_string(PValueSource source);
CorrelationMethod parse_correlation_method(std::string_view text);

struct CorrelationEstimate {
  double rho = std::numeric_limits<double>::quiet_NaN();
  double p_raw = 1.0;
  PValueSource p_source = PValueSource::analytic;
  bool degenerate = false;  // a constant series: rho undefined, p = 1
  std::size_t n = 0;
};

// Ranks 1..n with ties sharing their average rank.
Eigen::VectorXd average_ranks(const Eigen::VectorXd& v);

// Product-moment correlation of two equal-length vectors; NaN when either is
// constant. Computed from centered sums.
template <typename DerivedX, typename DerivedY>
double pearson_rho(const Eigen::MatrixBase<DerivedX>& x, const Eigen::MatrixBase<DerivedY>& y) {
  const Eigen::VectorXd xc = x.template cast<double>().array() - x.template cast<double>().mean();
  const Eigen::VectorXd yc = y.template cast<double>().array() - y.template cast<double>().mean();
  const double sxx = xc.squaredNorm();
  const double syy = yc.squaredNorm();
  if (!(sxx > 0.0) || !(syy > 0.0)) return std::numeric_limits<double>::quiet_NaN();
  return std::clamp(xc.dot(yc) / std::sqrt(sxx * syy), -1.0, 1.0);
}

// Two-sided p from the t approximation t = rho sqrt((n-2)/(1-rho^2)), n-2 dof.
// Clamped into (0, 1].
double analytic_pvalue(double rho, std::size_t n);

// Analytic p-values; n >= 3 and equal lengths required.
CorrelationEstimate spearman(const PairedSeries& series);
CorrelationEstimate pearson(const PairedSeries& series);
CorrelationEstimate correlate(const PairedSeries& series, CorrelationMethod method);

inline constexpr std::size_t kExhaustivePermutationMaxN = 7;

struct PermutationResult {
  double p = 1.0;
  bool exact = false;
  std::size_t permutations = 0;
};

// Two-sided permutation test on |rho|. For n <= 7 every permutation of y is
// enumerated and p = #{|rho_perm| >= |rho_obs|} / n!. Otherwise
// p = (1 + #{|rho_perm| >= |rho_obs|}) / (iterations + 1), where permutation i
// is drawn from a stream keyed by (seed, i), so the count does not depend on
// the worker count.
PermutationResult permutation_pvalue(const PairedSeries& series, CorrelationMethod method,
                                     std::size_t iterations, std::uint64_t seed,
                                     unsigned workers = 1);

struct FamilyDecision {
  bool bonferroni_reject = false;
  bool by_reject = false;
};

struct FamilyCorrection {
  std::size_t m = 0;
  double alpha = 0.05;
  double bonferroni_threshold = 0.0;  // alpha / m, strict
  double harmonic = 1.0;              // H_m
  std::vector<FamilyDecision> decisions;
};

double harmonic_number(std::size_t m);

// Bonferroni: reject iff p < alpha/m. Benjamini-Yekutieli: with p sorted
// ascending, reject the j smallest for the largest j with
// p_(j) <= j alpha / (m H_m).
FamilyCorrection correct_family(std::span<const double> p_values, double alpha);

struct FiveNumberSummary {
  std::size_t count = 0;
  double min = std::numeric_limits<double>::quiet_NaN();
  double q1 = std::numeric_limits<double>::quiet_NaN();
  double median = std::numeric_limits<double>::quiet_NaN();
  double q3 = std::numeric_limits<double>::quiet_NaN();
  double max = std::numeric_limits<double>::quiet_NaN();
};

// Quartiles by linear interpolation between order statistics (position
// (n-1)p, 0-based). Empty input yields count 0 and NaN fields.
FiveNumberSummary five_number_summary(std::span<const double> values);

// ---- correlation tables -------------------------------------------------

// Aggregate similarity per task label. NaN marks a missing cell. A non-empty
// model (and shots >= 0) restricts the series to matching performance columns,
// for model-derived metrics such as perplexity.
struct MetricSeries {
  std::string metric;
  char sign = '+';  // '+' if larger means more similar
  std::string model;
  int shots = -1;
  std::map<std::string, double> values;
};

struct PerformanceSeries {
  std::string model;
  int shots = 0;
  std::map<std::string, double> values;
};

struct TableCell {
  std::string metric;
  char sign = '+';
  std::string model;
  int shots = 0;
  CorrelationMethod method = CorrelationMethod::spearman;
  CorrelationEstimate estimate;
  FamilyDecision decision;
  std::size_t m = 0;
  double alpha = 0.05;
  std::vector<std::string> excluded;  // labels dropped for missing values
};

struct CrossCell {
  std::string metric_a;
  std::string metric_b;
  CorrelationEstimate estimate;
  FamilyDecision decision;
  std::size_t m = 0;
  double alpha = 0.05;
};

struct CorrelationTable {
  std::vector<TableCell> cells;
  std::vector<CrossCell> metric_cross;  // upper triangle, its own family
};

struct TableOptions {
  CorrelationMethod method = CorrelationMethod::spearman;
  double alpha = 0.05;
  bool permutation = false;
  std::size_t iterations = 10000;
  std::uint64_t seed = 0;
  unsigned workers = 1;
  // Family size for the main table; 0 means the number of cells.
  std::size_t family_size = 0;
};

// Every metric x performance column pair is one cell; all cells form one
// correction family. Label sets must agree across every series.
CorrelationTable build_table(std::span<const MetricSeries> metrics,
                             std::span<const PerformanceSeries> performance,
                             const TableOptions& options);

// CSV columns: metric,model,shots,method,rho,p_raw,p_source,bonferroni_reject,
// by_reject,m,alpha,n
std::string table_csv(const CorrelationTable& table);
std::string cross_table_csv(const CorrelationTable& table);
// Metrics as rows (with their +/- sign), model/shots columns, "rho (p)" cells.
std::string table_text(const CorrelationTable& table);

}  // namespace datasim
