#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "datasim/error.hpp"
#include "datasim/stats_harness.hpp"
#include "oracles.hpp"

using namespace datasim;

namespace {

PairedSeries series(const std::vector<double>& x, const std::vector<double>& y) {
  PairedSeries s;
  s.x = Eigen::Map<const Eigen::VectorXd>(x.data(), static_cast<Eigen::Index>(x.size()));
  s.y = Eigen::Map<const Eigen::VectorXd>(y.data(), static_cast<Eigen::Index>(y.size()));
  return s;
}

std::vector<double> random_values(std::mt19937_64& gen, std::size_t n, bool ties) {
  std::vector<double> v(n);
  for (auto& x : v) x = ties ? static_cast<double>(gen() % 3) : std::ldexp(static_cast<double>(gen() >> 11), -53);
  return v;
}

std::vector<bool> by_of(const std::vector<double>& p, double alpha) {
  const auto f = correct_family(p, alpha);
  std::vector<bool> out;
  for (const auto& d : f.decisions) out.push_back(d.by_reject);
  return out;
}

std::map<std::string, double> labelled(const std::vector<double>& v) {
  std::map<std::string, double> out;
  for (std::size_t i = 0; i < v.size(); ++i) out["task" + std::to_string(i)] = v[i];
  return out;
}

}  // namespace

TEST(Bonferroni, ThirtyCellTableThreshold) {
  const std::vector<double> p(30, 0.5);
  const auto f = correct_family(p, 0.05);
  EXPECT_DOUBLE_EQ(f.bonferroni_threshold, 0.05 / 30);
  EXPECT_EQ(std::round(f.bonferroni_threshold * 1e4) / 1e4, 0.0017);
}

TEST(Bonferroni, StrictInequality) {
  const auto f = correct_family(std::vector<double>{0.05 / 2, 0.0249}, 0.05);
  EXPECT_FALSE(f.decisions[0].bonferroni_reject);
  EXPECT_TRUE(f.decisions[1].bonferroni_reject);
  EXPECT_THROW(correct_family(std::vector<double>{}, 0.05), ValidationError);
  EXPECT_THROW(correct_family(std::vector<double>{0.0}, 0.05), ValidationError);
  EXPECT_THROW(correct_family(std::vector<double>{0.5}, 1.0), ValidationError);
}

TEST(BenjaminiYekutieli, CraftedFamilies) {
  // Hand-computed step-up sets; thresholds j * alpha / (m * H_m).
  EXPECT_EQ(by_of({0.001, 0.008, 0.039, 0.041, 0.6}, 0.05),
            (std::vector<bool>{true, true, false, false, false}));
  // Step-up: the 4th smallest passes, so the two that fail on their own are rejected too.
  EXPECT_EQ(by_of({0.010, 0.011, 0.012, 0.017, 0.9}, 0.05), (std::vector<bool>{true, true, true, true, false}));
  EXPECT_EQ(by_of({0.2, 0.3, 0.05}, 0.05), (std::vector<bool>{false, false, false}));
  EXPECT_EQ(by_of({0.001, 0.002, 0.003, 0.0239}, 0.05), (std::vector<bool>{true, true, true, true}));
  EXPECT_EQ(by_of({0.004, 0.5, 0.004}, 0.05), (std::vector<bool>{true, false, true}));
}

TEST(BenjaminiYekutieli, MatchesOracleOnRandomFamilies) {
  std::mt19937_64 gen(17);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int t = 0; t < 500; ++t) {
    std::vector<double> p(1 + gen() % 30);
    for (auto& v : p) v = std::max(1e-300, std::pow(u(gen), 1 + gen() % 6));
    EXPECT_EQ(by_of(p, 0.05), oracle::by_reject(p, 0.05));
  }
}

// BY does not dominate Bonferroni in general. It does reject every p below
// its own first threshold alpha / (m H_m).
TEST(BenjaminiYekutieli, RejectsEverythingBelowFirstThreshold) {
  std::mt19937_64 gen(18);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int t = 0; t < 500; ++t) {
    std::vector<double> p(1 + gen() % 20);
    for (auto& v : p) v = std::max(1e-300, std::pow(u(gen), 3));
    const auto f = correct_family(p, 0.05);
    const double first = 0.05 / (static_cast<double>(p.size()) * f.harmonic);
    for (std::size_t i = 0; i < p.size(); ++i)
      if (p[i] <= first) EXPECT_TRUE(f.decisions[i].by_reject);
  }
}

TEST(BenjaminiYekutieli, CanRejectLessThanBonferroni) {
  const auto f = correct_family(std::vector<double>{0.02, 0.9}, 0.05);
  EXPECT_TRUE(f.decisions[0].bonferroni_reject);
  EXPECT_FALSE(f.decisions[0].by_reject);
}

TEST(HarmonicNumber, SmallValues) {
  EXPECT_DOUBLE_EQ(harmonic_number(1), 1.0);
  EXPECT_DOUBLE_EQ(harmonic_number(4), 25.0 / 12);
}

TEST(Ranks, AverageOverTies) {
  const auto r = average_ranks(Eigen::Vector4d(10, 20, 10, 5));
  EXPECT_EQ(r, Eigen::Vector4d(2.5, 4, 2.5, 1));
}

TEST(Correlation, MatchesHighPrecisionOracle) {
  std::mt19937_64 gen(19);
  for (int t = 0; t < 200; ++t) {
    const std::size_t n = 3 + gen() % 40;
    const bool ties = t % 3 == 0;
    auto x = random_values(gen, n, ties);
    auto y = random_values(gen, n, false);
    for (std::size_t i = 0; i < n; ++i) y[i] += 0.3 * x[i];
    const auto s = series(x, y);
    const auto sp = spearman(s);
    const auto pe = pearson(s);
    if (!sp.degenerate)
      EXPECT_NEAR(sp.rho, static_cast<double>(oracle::spearman(x, y)), 1e-12);
    if (!pe.degenerate)
      EXPECT_NEAR(pe.rho, static_cast<double>(oracle::pearson(x, y)), 1e-12);
  }
}

TEST(Correlation, ConstantSeriesIsDegenerate) {
  const auto e = spearman(series({1, 1, 1, 1}, {1, 2, 3, 4}));
  EXPECT_TRUE(e.degenerate);
  EXPECT_TRUE(std::isnan(e.rho));
  EXPECT_EQ(e.p_raw, 1.0);
  EXPECT_THROW(spearman(series({1, 2}, {1, 2})), ValidationError);
  EXPECT_THROW(spearman(series({1, 2, 3}, {1, 2})), ValidationError);
  EXPECT_THROW(pearson(series({1, 2, NAN}, {1, 2, 3})), ValidationError);
}

TEST(Correlation, AnalyticPValueProperties) {
  EXPECT_NEAR(analytic_pvalue(0.0, 10), 1.0, 1e-12);
  EXPECT_GT(analytic_pvalue(1.0, 10), 0.0);
  EXPECT_LT(analytic_pvalue(0.9, 10), analytic_pvalue(0.5, 10));
  EXPECT_LT(analytic_pvalue(0.5, 40), analytic_pvalue(0.5, 10));
  // t = 2.306004 is the 0.975 quantile of Student's t with 8 dof.
  const double t = 2.306004135204166;
  const double rho = t / std::sqrt(8 + t * t);
  EXPECT_NEAR(analytic_pvalue(rho, 10), 0.05, 1e-9);
}

TEST(Permutation, ExhaustiveMatchesEnumerationOracle) {
  std::mt19937_64 gen(20);
  for (std::size_t n = 3; n <= kExhaustivePermutationMaxN; ++n) {
    for (int t = 0; t < 6; ++t) {
      const bool ties = t % 2 == 1;
      const auto x = random_values(gen, n, ties);
      auto y = random_values(gen, n, ties && t % 4 == 1);
      for (std::size_t i = 0; i < n; ++i) y[i] += 0.5 * x[i];
      const auto s = series(x, y);
      for (auto method : {CorrelationMethod::spearman, CorrelationMethod::pearson}) {
        const bool constant = std::all_of(x.begin(), x.end(), [&](double v) { return v == x[0]; });
        if (constant) continue;
        const auto got = permutation_pvalue(s, method, 0, 1);
        EXPECT_TRUE(got.exact);
        EXPECT_EQ(got.p, oracle::permutation_p(x, y, method == CorrelationMethod::spearman))
            << "n=" << n << " trial " << t;
      }
    }
  }
}

TEST(Permutation, PerfectRankOrderAtNFive) {
  const auto r = permutation_pvalue(series({1, 2, 3, 4, 5}, {2, 4, 6, 8, 10}), CorrelationMethod::spearman, 0, 0);
  EXPECT_EQ(r.permutations, 120u);
  EXPECT_DOUBLE_EQ(r.p, 2.0 / 120);
}

TEST(Permutation, MonteCarloIsWorkerIndependent) {
  std::mt19937_64 gen(21);
  auto x = random_values(gen, 12, false);
  auto y = random_values(gen, 12, false);
  for (std::size_t i = 0; i < 12; ++i) y[i] += x[i];
  const auto s = series(x, y);
  const auto a = permutation_pvalue(s, CorrelationMethod::spearman, 5000, 9, 1);
  const auto b = permutation_pvalue(s, CorrelationMethod::spearman, 5000, 9, 8);
  EXPECT_FALSE(a.exact);
  EXPECT_EQ(a.p, b.p);
  const double hits_plus_one = a.p * 5001;
  EXPECT_NEAR(hits_plus_one, std::round(hits_plus_one), 1e-6);
  EXPECT_GT(a.p, 0.0);
  EXPECT_THROW(permutation_pvalue(s, CorrelationMethod::spearman, 10, 9), ValidationError);
}

TEST(Permutation, MonteCarloAgreesWithAnalyticRoughly) {
  std::mt19937_64 gen(22);
  auto x = random_values(gen, 30, false);
  auto y = random_values(gen, 30, false);
  for (std::size_t i = 0; i < 30; ++i) y[i] += 0.4 * x[i];
  const auto s = series(x, y);
  const double mc = permutation_pvalue(s, CorrelationMethod::pearson, 20000, 3, 2).p;
  EXPECT_NEAR(mc, pearson(s).p_raw, 0.02);
}

TEST(FiveNumberSummary, Type7Quantiles) {
  const std::vector<double> v{7, 1, 3, 9, 5};
  const auto s = five_number_summary(v);
  EXPECT_EQ(s.count, 5u);
  EXPECT_EQ(s.min, 1);
  EXPECT_EQ(s.q1, 3);
  EXPECT_EQ(s.median, 5);
  EXPECT_EQ(s.q3, 7);
  EXPECT_EQ(s.max, 9);
  const auto even = five_number_summary(std::vector<double>{1, 2, 3, 4});
  EXPECT_DOUBLE_EQ(even.q1, 1.75);
  EXPECT_DOUBLE_EQ(even.median, 2.5);
  EXPECT_EQ(five_number_summary(std::vector<double>{}).count, 0u);
}

TEST(Table, CellsFamilyAndCsv) {
  const std::vector<double> perf{10, 20, 30, 40, 50};
  std::vector<MetricSeries> metrics{{"kl", '-', "", -1, labelled({5, 4, 3, 2, 1})},
                                    {"cos", '+', "", -1, labelled({1, 3, 2, 5, 4})}};
  std::vector<PerformanceSeries> perf_series{{"m1", 0, labelled(perf)}, {"m1", 5, labelled(perf)}};
  const auto table = build_table(metrics, perf_series, {});
  ASSERT_EQ(table.cells.size(), 4u);
  EXPECT_EQ(table.cells[0].m, 4u);
  EXPECT_DOUBLE_EQ(table.cells[0].estimate.rho, -1.0);
  ASSERT_EQ(table.metric_cross.size(), 1u);
  EXPECT_EQ(table.metric_cross[0].m, 1u);
  const auto csv = table_csv(table);
  EXPECT_EQ(csv.substr(0, csv.find('\n')),
            "metric,model,shots,method,rho,p_raw,p_source,bonferroni_reject,by_reject,m,alpha,n");
  EXPECT_NE(table_text(table).find("kl (-)"), std::string::npos);
}

TEST(Table, DeclaredFamilySizePads) {
  std::vector<MetricSeries> metrics{{"kl", '-', "", -1, labelled({5, 4, 3, 2, 1, 0})}};
  std::vector<PerformanceSeries> perf{{"m", 0, labelled({1, 2, 3, 4, 5, 6})}};
  TableOptions opts;
  opts.family_size = 30;
  const auto t = build_table(metrics, perf, opts);
  EXPECT_EQ(t.cells[0].m, 30u);
  opts.family_size = 0;
  EXPECT_EQ(build_table(metrics, perf, opts).cells[0].m, 1u);
}

TEST(Table, LabelMisalignmentAndMissingValues) {
  std::vector<MetricSeries> metrics{{"kl", '-', "", -1, labelled({1, 2, 3, 4})}};
  std::vector<PerformanceSeries> perf{{"m", 0, labelled({1, 2, 3})}};
  EXPECT_THROW(build_table(metrics, perf, {}), ValidationError);

  perf[0].values = labelled({1, 2, NAN, 4});
  const auto t = build_table(metrics, perf, {});
  EXPECT_EQ(t.cells[0].excluded, std::vector<std::string>{"task2"});
  EXPECT_EQ(t.cells[0].estimate.n, 3u);

  perf[0].values = labelled({1, NAN, NAN, 4});
  EXPECT_TRUE(build_table(metrics, perf, {}).cells[0].estimate.degenerate);
}

TEST(Table, ModelSpecificMetricsPairOnlyWithTheirModel) {
  std::vector<MetricSeries> metrics{{"input_ppl", '-', "a", 0, labelled({1, 2, 3})}};
  std::vector<PerformanceSeries> perf{{"a", 0, labelled({3, 2, 1})}, {"b", 0, labelled({1, 2, 3})},
                                      {"a", 5, labelled({1, 2, 3})}};
  const auto t = build_table(metrics, perf, {});
  ASSERT_EQ(t.cells.size(), 1u);
  EXPECT_EQ(t.cells[0].model, "a");
  EXPECT_EQ(t.cells[0].shots, 0);
}
