#include "datasim/stats_harness.hpp"

#include <boost/math/distributions/students_t.hpp>

#include <algorithm>
#include <numeric>
#include <set>
#include <sstream>

#include "datasim/error.hpp"
#include "datasim/log.hpp"
#include "datasim/rng.hpp"
#include "parallel.hpp"
#include "text_format.hpp"

namespace datasim {
namespace {

constexpr std::uint64_t kPermutationStream = 0x7065726dULL;  // "perm"
constexpr double kRhoTieTolerance = 1e-12;
constexpr std::size_t kPermutationChunk = 1024;

void check_series(const PairedSeries& s) {
  if (s.x.size() != s.y.size()) throw ValidationError("paired series: lengths differ");
  if (!s.labels.empty() && s.labels.size() != s.size())
    throw ValidationError("paired series: label count differs from length");
  if (s.size() < 3) throw ValidationError("paired series: n must be at least 3");
  if (!s.x.allFinite() || !s.y.allFinite()) throw ValidationError("paired series: NaN or inf");
}

CorrelationEstimate finish(double rho, std::size_t n) {
  CorrelationEstimate e;
  e.n = n;
  if (std::isnan(rho)) {
    e.degenerate = true;
    e.p_raw = 1.0;
    return e;
  }
  e.rho = rho;
  e.p_raw = analytic_pvalue(rho, n);
  return e;
}

// |rho| of every permutation of y against x, via a callback counting hits.
struct PermutationKernel {
  Eigen::VectorXd xc;  // centered, scaled x (or ranks)
  Eigen::VectorXd yc;  // centered, scaled y (or ranks)
  double threshold;

  double rho(std::span<const std::size_t> perm) const {
    double s = 0.0;
    for (std::size_t i = 0; i < perm.size(); ++i) s += xc[static_cast<Eigen::Index>(i)] *
                                                      yc[static_cast<Eigen::Index>(perm[i])];
    return s;
  }
  bool hit(std::span<const std::size_t> perm) const { return std::abs(rho(perm)) >= threshold; }
};

}  // namespace

std::string_view to_string(CorrelationMethod method) {
  return method == CorrelationMethod::spearman ? "spearman" : "pearson";
}

std::string_view to_string(PValueSource source) {
  switch (source) {
    case PValueSource::analytic:
      return "analytic";
    case PValueSource::permutation_exact:
      return "permutation_exact";
    case PValueSource::permutation_monte_carlo:
      return "permutation_monte_carlo";
  }
  return "unknown";
}

CorrelationMethod parse_correlation_method(std::string_view text) {
  if (text == "spearman") return CorrelationMethod::spearman;
  if (text == "pearson") return CorrelationMethod::pearson;
  throw ValidationError("unknown correlation method \"" + std::string(text) + "\"");
}

Eigen::VectorXd average_ranks(const Eigen::VectorXd& v) {
  const auto n = static_cast<std::size_t>(v.size());
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return v[static_cast<Eigen::Index>(a)] < v[static_cast<Eigen::Index>(b)];
  });
  Eigen::VectorXd ranks(v.size());
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j + 1 < n && v[static_cast<Eigen::Index>(order[j + 1])] ==
                            v[static_cast<Eigen::Index>(order[i])])
      ++j;
    const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t t = i; t <= j; ++t) ranks[static_cast<Eigen::Index>(order[t])] = avg;
    i = j + 1;
  }
  return ranks;
}

double analytic_pvalue(double rho, std::size_t n) {
  if (n < 3) return 1.0;
  const double df = static_cast<double>(n - 2);
  const double r2 = rho * rho;
  double p;
  if (r2 >= 1.0) {
    p = 0.0;
  } else {
    const double t = std::abs(rho) * std::sqrt(df / (1.0 - r2));
    const boost::math::students_t dist(df);
    p = 2.0 * boost::math::cdf(boost::math::complement(dist, t));
  }
  return std::clamp(p, std::numeric_limits<double>::min(), 1.0);
}

CorrelationEstimate spearman(const PairedSeries& series) {
  check_series(series);
  return finish(pearson_rho(average_ranks(series.x), average_ranks(series.y)), series.size());
}

CorrelationEstimate pearson(const PairedSeries& series) {
  check_series(series);
  return finish(pearson_rho(series.x, series.y), series.size());
}

CorrelationEstimate correlate(const PairedSeries& series, CorrelationMethod method) {
  return method == CorrelationMethod::spearman ? spearman(series) : pearson(series);
}

PermutationResult permutation_pvalue(const PairedSeries& series, CorrelationMethod method,
                                     std::size_t iterations, std::uint64_t seed, unsigned workers) {
  check_series(series);
  const std::size_t n = series.size();
  Eigen::VectorXd x = series.x;
  Eigen::VectorXd y = series.y;
  if (method == CorrelationMethod::spearman) {
    x = average_ranks(x);
    y = average_ranks(y);
  }
  PermutationKernel kernel;
  kernel.xc = x.array() - x.mean();
  kernel.yc = y.array() - y.mean();
  const double sxx = kernel.xc.norm();
  const double syy = kernel.yc.norm();
  if (!(sxx > 0.0) || !(syy > 0.0)) return {1.0, n <= kExhaustivePermutationMaxN, 0};
  kernel.xc /= sxx;
  kernel.yc /= syy;
  std::vector<std::size_t> identity(n);
  std::iota(identity.begin(), identity.end(), 0);
  kernel.threshold = std::abs(kernel.rho(identity)) - kRhoTieTolerance;

  PermutationResult result;
  if (n <= kExhaustivePermutationMaxN) {
    std::vector<std::size_t> perm = identity;
    std::size_t hits = 0;
    std::size_t total = 0;
    do {
      hits += kernel.hit(perm);
      ++total;
    } while (std::next_permutation(perm.begin(), perm.end()));
    result.p = static_cast<double>(hits) / static_cast<double>(total);
    result.exact = true;
    result.permutations = total;
    return result;
  }

  if (iterations < 100) throw ValidationError("permutation_pvalue: iterations must be at least 100");
  const std::size_t chunks = (iterations + kPermutationChunk - 1) / kPermutationChunk;
  std::vector<std::size_t> hits(chunks, 0);
  detail::parallel_for(workers, chunks, [&](std::size_t c) {
    std::vector<std::size_t> perm(n);
    const std::size_t end = std::min(iterations, (c + 1) * kPermutationChunk);
    for (std::size_t i = c * kPermutationChunk; i < end; ++i) {
      std::iota(perm.begin(), perm.end(), 0);
      Rng rng(counter_hash(seed, kPermutationStream, i));
      for (std::size_t j = n - 1; j > 0; --j) std::swap(perm[j], perm[rng.below(j + 1)]);
      hits[c] += kernel.hit(perm);
    }
  });
  const std::size_t total_hits = std::accumulate(hits.begin(), hits.end(), std::size_t{0});
  result.p = static_cast<double>(1 + total_hits) / static_cast<double>(iterations + 1);
  result.exact = false;
  result.permutations = iterations;
  return result;
}

double harmonic_number(std::size_t m) {
  double h = 0.0;
  for (std::size_t i = m; i >= 1; --i) h += 1.0 / static_cast<double>(i);
  return h;
}

FamilyCorrection correct_family(std::span<const double> p_values, double alpha) {
  if (p_values.empty()) throw ValidationError("correct_family: empty family");
  if (!(alpha > 0.0 && alpha < 1.0)) throw ValidationError("correct_family: alpha must be in (0, 1)");
  for (double p : p_values)
    if (!(p > 0.0 && p <= 1.0)) throw ValidationError("correct_family: p-values must be in (0, 1]");

  FamilyCorrection out;
  out.m = p_values.size();
  out.alpha = alpha;
  out.bonferroni_threshold = alpha / static_cast<double>(out.m);
  out.harmonic = harmonic_number(out.m);
  out.decisions.resize(out.m);
  for (std::size_t i = 0; i < out.m; ++i)
    out.decisions[i].bonferroni_reject = p_values[i] < out.bonferroni_threshold;

  std::vector<std::size_t> order(out.m);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return p_values[a] < p_values[b]; });
  std::size_t largest = 0;
  const double step = alpha / (static_cast<double>(out.m) * out.harmonic);
  for (std::size_t j = 1; j <= out.m; ++j)
    if (p_values[order[j - 1]] <= static_cast<double>(j) * step) largest = j;
  for (std::size_t j = 0; j < largest; ++j) out.decisions[order[j]].by_reject = true;
  return out;
}

FiveNumberSummary five_number_summary(std::span<const double> values) {
  FiveNumberSummary s;
  s.count = values.size();
  if (values.empty()) return s;
  std::vector<double> v(values.begin(), values.end());
  std::sort(v.begin(), v.end());
  auto quantile = [&](double p) {
    const double pos = p * static_cast<double>(v.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = std::min(lo + 1, v.size() - 1);
    return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
  };
  s.min = v.front();
  s.q1 = quantile(0.25);
  s.median = quantile(0.5);
  s.q3 = quantile(0.75);
  s.max = v.back();
  return s;
}

namespace {

std::set<std::string> label_set(const std::map<std::string, double>& values) {
  std::set<std::string> out;
  for (const auto& [k, v] : values) out.insert(k);
  return out;
}

std::string describe(const std::set<std::string>& labels) {
  std::string out;
  for (const auto& l : labels) out += (out.empty() ? "" : ",") + l;
  return "{" + out + "}";
}

// Pairs values by label, dropping labels where either side is missing.
PairedSeries pair_up(const std::map<std::string, double>& xs, const std::map<std::string, double>& ys,
                     std::vector<std::string>& excluded) {
  PairedSeries s;
  std::vector<double> x, y;
  for (const auto& [label, xv] : xs) {
    const double yv = ys.at(label);
    if (std::isnan(xv) || std::isnan(yv)) {
      excluded.push_back(label);
      continue;
    }
    s.labels.push_back(label);
    x.push_back(xv);
    y.push_back(yv);
  }
  s.x = Eigen::Map<Eigen::VectorXd>(x.data(), static_cast<Eigen::Index>(x.size()));
  s.y = Eigen::Map<Eigen::VectorXd>(y.data(), static_cast<Eigen::Index>(y.size()));
  return s;
}

CorrelationEstimate estimate_cell(const PairedSeries& s, const TableOptions& options,
                                  std::uint64_t cell_seed) {
  if (s.size() < 3) {
    CorrelationEstimate e;
    e.degenerate = true;
    e.n = s.size();
    return e;
  }
  auto e = correlate(s, options.method);
  if (options.permutation && !e.degenerate) {
    const auto perm = permutation_pvalue(s, options.method, options.iterations, cell_seed,
                                         options.workers);
    e.p_raw = perm.p;
    e.p_source =
        perm.exact ? PValueSource::permutation_exact : PValueSource::permutation_monte_carlo;
  }
  return e;
}

std::string metric_label(const MetricSeries& m) {
  if (m.model.empty()) return m.metric;
  return m.metric + "[" + m.model + (m.shots >= 0 ? "/" + std::to_string(m.shots) : "") + "]";
}

}  // namespace

CorrelationTable build_table(std::span<const MetricSeries> metrics,
                             std::span<const PerformanceSeries> performance,
                             const TableOptions& options) {
  if (metrics.empty() || performance.empty())
    throw ValidationError("build_table: need at least one metric and one performance series");
  const auto labels = label_set(performance.front().values);
  for (const auto& m : metrics)
    if (label_set(m.values) != labels)
      throw ValidationError("build_table: label misalignment for metric \"" + m.metric + "\": " +
                            describe(label_set(m.values)) + " vs " + describe(labels));
  for (const auto& p : performance)
    if (label_set(p.values) != labels)
      throw ValidationError("build_table: label misalignment for model \"" + p.model + "\": " +
                            describe(label_set(p.values)) + " vs " + describe(labels));

  CorrelationTable table;
  for (const auto& m : metrics) {
    for (const auto& p : performance) {
      if (!m.model.empty() && (m.model != p.model || (m.shots >= 0 && m.shots != p.shots)))
        continue;
      TableCell cell;
      cell.metric = m.metric;
      cell.sign = m.sign;
      cell.model = p.model;
      cell.shots = p.shots;
      cell.method = options.method;
      const auto series = pair_up(m.values, p.values, cell.excluded);
      if (!cell.excluded.empty())
        log::info("build_table: " + m.metric + " vs " + p.model + "/" + std::to_string(p.shots) +
                  " excludes " + std::to_string(cell.excluded.size()) + " missing task(s)");
      const std::uint64_t cell_seed =
          counter_hash(options.seed, kPermutationStream, table.cells.size());
      cell.estimate = estimate_cell(series, options, cell_seed);
      table.cells.push_back(std::move(cell));
    }
  }
  if (table.cells.empty()) throw ValidationError("build_table: no metric/model pairs");

  std::vector<double> ps;
  for (const auto& c : table.cells) ps.push_back(c.estimate.p_raw);
  const std::size_t m = options.family_size ? options.family_size : ps.size();
  if (m < ps.size())
    throw ValidationError("build_table: family_size smaller than the number of cells");
  // Padding with p = 1 realises a declared family larger than the computed cells.
  ps.resize(m, 1.0);
  const auto family = correct_family(ps, options.alpha);
  for (std::size_t i = 0; i < table.cells.size(); ++i) {
    table.cells[i].decision = family.decisions[i];
    table.cells[i].m = m;
    table.cells[i].alpha = options.alpha;
  }

  // Metric-vs-metric correlations, one family for the triangle.
  if (metrics.size() >= 2) {
    std::vector<double> cross_ps;
    for (std::size_t a = 0; a < metrics.size(); ++a) {
      for (std::size_t b = a + 1; b < metrics.size(); ++b) {
        CrossCell cell;
        cell.metric_a = metric_label(metrics[a]);
        cell.metric_b = metric_label(metrics[b]);
        std::vector<std::string> excluded;
        const auto series = pair_up(metrics[a].values, metrics[b].values, excluded);
        const std::uint64_t cell_seed =
            counter_hash(options.seed ^ 0xC055ULL, kPermutationStream, table.metric_cross.size());
        cell.estimate = estimate_cell(series, options, cell_seed);
        cross_ps.push_back(cell.estimate.p_raw);
        table.metric_cross.push_back(std::move(cell));
      }
    }
    const auto cross = correct_family(cross_ps, options.alpha);
    for (std::size_t i = 0; i < table.metric_cross.size(); ++i) {
      table.metric_cross[i].decision = cross.decisions[i];
      table.metric_cross[i].m = cross.m;
      table.metric_cross[i].alpha = options.alpha;
    }
    log::info("build_table: metric cross-correlation family size " + std::to_string(cross.m));
  }
  return table;
}

std::string table_csv(const CorrelationTable& table) {
  using detail::csv_field;
  using detail::fmt;
  std::string out = "metric,model,shots,method,rho,p_raw,p_source,bonferroni_reject,by_reject,m,alpha,n\n";
  for (const auto& c : table.cells) {
    out += csv_field(c.metric) + "," + csv_field(c.model) + "," + std::to_string(c.shots) + "," +
           std::string(to_string(c.method)) + "," + fmt(c.estimate.rho) + "," +
           fmt(c.estimate.p_raw) + "," + std::string(to_string(c.estimate.p_source)) + "," +
           (c.decision.bonferroni_reject ? "1" : "0") + "," + (c.decision.by_reject ? "1" : "0") +
           "," + std::to_string(c.m) + "," + fmt(c.alpha) + "," + std::to_string(c.estimate.n) +
           "\n";
  }
  return out;
}

std::string cross_table_csv(const CorrelationTable& table) {
  using detail::csv_field;
  using detail::fmt;
  std::string out = "metric_a,metric_b,rho,p_raw,p_source,bonferroni_reject,by_reject,m,alpha,n\n";
  for (const auto& c : table.metric_cross) {
    out += csv_field(c.metric_a) + "," + csv_field(c.metric_b) + "," + fmt(c.estimate.rho) + "," +
           fmt(c.estimate.p_raw) + "," + std::string(to_string(c.estimate.p_source)) + "," +
           (c.decision.bonferroni_reject ? "1" : "0") + "," + (c.decision.by_reject ? "1" : "0") +
           "," + std::to_string(c.m) + "," + fmt(c.alpha) + "," + std::to_string(c.estimate.n) +
           "\n";
  }
  return out;
}

std::string table_text(const CorrelationTable& table) {
  std::vector<std::string> columns;
  std::vector<std::string> rows;
  std::map<std::pair<std::string, std::string>, const TableCell*> lookup;
  for (const auto& c : table.cells) {
    const auto col = c.model + " " + std::to_string(c.shots) + "-shot";
    const auto row = c.metric + " (" + std::string(1, c.sign == '-' ? '-' : '+') + ")";
    if (std::find(columns.begin(), columns.end(), col) == columns.end()) columns.push_back(col);
    if (std::find(rows.begin(), rows.end(), row) == rows.end()) rows.push_back(row);
    lookup[{row, col}] = &c;
  }
  std::size_t row_width = 6;
  for (const auto& r : rows) row_width = std::max(row_width, r.size());
  constexpr std::size_t kCell = 22;
  auto pad = [](std::string s, std::size_t w) {
    if (s.size() < w) s.append(w - s.size(), ' ');
    return s;
  };
  std::ostringstream out;
  out << pad("", row_width);
  for (const auto& col : columns) out << " | " << pad(col, kCell);
  out << "\n" << std::string(row_width + columns.size() * (kCell + 3), '-') << "\n";
  for (const auto& row : rows) {
    out << pad(row, row_width);
    for (const auto& col : columns) {
      std::string cell;
      if (auto it = lookup.find({row, col}); it != lookup.end()) {
        const auto& c = *it->second;
        cell = detail::fmt_fixed(c.estimate.rho, 2) + " (" + detail::fmt_fixed(c.estimate.p_raw, 3) +
               ")" + (c.decision.bonferroni_reject ? " *" : "") + (c.decision.by_reject ? " +" : "");
      }
      out << " | " << pad(cell, kCell);
    }
    out << "\n";
  }
  if (!table.cells.empty()) {
    const auto& c = table.cells.front();
    out << "\n* significant at p < " << detail::fmt_fixed(c.alpha / static_cast<double>(c.m), 4)
        << " after Bonferroni correction (alpha=" << detail::fmt_short(c.alpha) << ", m=" << c.m
        << "); + rejected by Benjamini-Yekutieli\n";
  }
  return out.str();
}

}  // namespace datasim
