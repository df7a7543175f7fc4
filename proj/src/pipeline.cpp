#include "datasim/pipeline.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <numeric>
#include <optional>
#include <set>

#include "datasim/corpus_store.hpp"
#include "datasim/digest.hpp"
#include "datasim/embedding_index.hpp"
#include "datasim/log.hpp"
#include "datasim/mauve_score.hpp"
#include "datasim/ngram_divergence.hpp"
#include "datasim/rng.hpp"
#include "json.hpp"
#include "parallel.hpp"
#include "text_format.hpp"

namespace datasim {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

constexpr std::array<std::pair<Metric, std::string_view>, 7> kMetricNames{{
    {Metric::unigram_kl, "unigram_kl"},
    {Metric::bigram_kl, "bigram_kl"},
    {Metric::max_cosine, "max_cosine"},
    {Metric::mean_top1000_cosine, "mean_top1000_cosine"},
    {Metric::mauve, "mauve"},
    {Metric::input_ppl, "input_ppl"},
    {Metric::target_ppl, "target_ppl"},
}};

constexpr std::array<std::pair<Stage, std::string_view>, 4> kStageNames{{
    {Stage::measure, "measure"},
    {Stage::evaluate, "evaluate"},
    {Stage::correlate, "correlate"},
    {Stage::figures, "figures"},
}};

// Named sub-streams of the run seed.
std::uint64_t stream(std::string_view name) { return fnv1a64(name); }

// ---- config parsing ------------------------------------------------------

void check_keys(const json& obj, std::string_view where, std::initializer_list<std::string_view> allowed) {
  if (!obj.is_object()) throw ValidationError(std::string(where) + ": expected an object");
  for (const auto& [key, _] : obj.items()) {
    if (std::find(allowed.begin(), allowed.end(), key) == allowed.end())
      throw ValidationError(std::string(where) + ": unknown key \"" + key + "\"");
  }
}

template <typename T>
T get_or(const json& obj, const char* key, T fallback, std::string_view where) {
  if (!obj.contains(key)) return fallback;
  try {
    return obj.at(key).get<T>();
  } catch (const json::exception&) {
    throw ValidationError(std::string(where) + "." + key + ": wrong type");
  }
}

std::string require_string(const json& obj, const char* key, std::string_view where) {
  if (!obj.contains(key) || !obj.at(key).is_string() || obj.at(key).get<std::string>().empty())
    throw ValidationError(std::string(where) + ": missing \"" + key + "\"");
  return obj.at(key).get<std::string>();
}

fs::path resolve(const fs::path& base, const std::string& p) {
  if (p.empty()) return {};
  const fs::path path(p);
  return path.is_absolute() ? path : (base / path).lexically_normal();
}

std::size_t get_size(const json& obj, const char* key, std::size_t fallback, std::string_view where) {
  if (!obj.contains(key)) return fallback;
  const auto& v = obj.at(key);
  if (!v.is_number_integer() || v.get<long long>() < 0)
    throw ValidationError(std::string(where) + "." + key + ": expected a non-negative integer");
  return v.get<std::size_t>();
}

// ---- file naming ---------------------------------------------------------

std::string safe_name(std::string_view s) {
  std::string out;
  for (char c : s) {
    const bool ok = (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || (c >= '0' && c <= '9') ||
                    c == '.' || c == '-' || c == '_' || c == '@';
    out += ok ? c : '_';
  }
  return out;
}

std::string shots_tag(int shots) { return std::to_string(shots) + "shot"; }

std::string stamp(const std::string& hash) { return "# config_hash: " + hash + "\n"; }

std::string join_values(const std::vector<double>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? ";" : "") + detail::fmt(v[i]);
  return out;
}

std::string join_seeds(const std::vector<std::uint64_t>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? ";" : "") + std::to_string(v[i]);
  return out;
}

double mean_of(const std::vector<double>& v) {
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

// Population standard deviation; zero for a single value.
double std_of(const std::vector<double>& v) {
  const double m = mean_of(v);
  double ss = 0.0;
  for (double x : v) ss += (x - m) * (x - m);
  return std::sqrt(ss / static_cast<double>(v.size()));
}

json read_json(const fs::path& path) {
  if (!fs::exists(path)) throw ValidationError("missing upstream artifact: " + path.string());
  try {
    return json::parse(read_file(path));
  } catch (const json::exception& e) {
    throw ValidationError(path.string() + ": " + e.what());
  }
}

// ---- run context ---------------------------------------------------------

struct TaskEntry {
  std::string name;
  DatasetHandle handle;
  fs::path embeddings;
};

struct RunContext {
  const RunConfig& config;
  fs::path dir;
  std::string hash;
  std::vector<TaskEntry> tasks;
  std::vector<DatasetHandle> references;
};

std::vector<std::string> titration_task_names(const TitrationConfig& t) {
  std::vector<std::string> names;
  for (double f : t.spec.fractions) names.push_back(t.series + "_" + fraction_tag(f));
  return names;
}

void prepare_datasets(RunContext& ctx) {
  const auto& cfg = ctx.config;
  for (const auto& t : cfg.tasks) {
    auto handle = ingest(t.file, DatasetKind::task_dataset);
    handle.name = t.name;
    ctx.tasks.push_back({t.name, std::move(handle), t.embeddings});
  }
  for (const auto& t : cfg.titrations) {
    TitrationOptions opts;
    opts.series_name = t.series;
    opts.language = t.language;
    opts.translated_targets = t.translated_targets;
    opts.translated_instruction = t.translated_instruction;
    auto series = build_titration_series(t.source, t.translated, t.spec, opts, ctx.dir / "titration");
    const auto names = titration_task_names(t);
    for (std::size_t i = 0; i < series.datasets.size(); ++i) {
      series.datasets[i].name = names[i];
      ctx.tasks.push_back({names[i], series.datasets[i], {}});
    }
  }
  for (const auto& r : cfg.references) {
    auto handle = ingest(r.documents, DatasetKind::reference_corpus);
    handle.name = r.name;
    ctx.references.push_back(std::move(handle));
  }
}

// ---- measure -------------------------------------------------------------

struct ExampleValue {
  std::string id;
  double value = 0.0;
  std::string detail;
};

struct Report {
  std::string task;
  std::string corpus;
  Metric metric = Metric::unigram_kl;
  std::string model;  // perplexity metrics only
  int shots = -1;
  std::vector<double> values;  // one per reference sample
  std::vector<std::uint64_t> seeds;
  std::string params;
  std::vector<ExampleValue> examples;  // empty for aggregate-only metrics
};

std::unique_ptr<Tokenizer> measure_tokenizer(const RunContext& ctx) {
  const auto& cfg = ctx.config;
  if (cfg.tokenizer != TokenizerKind::vocab || !cfg.vocab.empty())
    return make_tokenizer(cfg.tokenizer, cfg.vocab);
  // No vocabulary given: every whitespace token seen in the references or tasks.
  std::set<std::string> tokens;
  auto collect = [&](std::size_t, const Document& d) {
    for (auto tok : split_whitespace(d.text)) tokens.emplace(tok);
  };
  for (const auto& r : ctx.references) for_each_document(r, collect);
  for (const auto& t : ctx.tasks) for_each_document(t.handle, collect);
  auto tok = std::make_unique<VocabTokenizer>(std::vector<std::string>(tokens.begin(), tokens.end()));
  tok->save(ctx.dir / "vocab.txt");
  return tok;
}

std::vector<Document> load_all(const DatasetHandle& h) {
  std::vector<Document> docs;
  docs.reserve(h.example_count);
  for_each_document(h, [&](std::size_t, const Document& d) { docs.push_back(d); });
  return docs;
}

struct ReferenceSamples {
  std::vector<TokenDistribution> dists;
  std::vector<std::uint64_t> seeds;
};

ReferenceSamples sample_reference(const RunContext& ctx, const DatasetHandle& ref, NgramScheme scheme,
                                  const Tokenizer& tok) {
  const auto& cfg = ctx.config;
  ReferenceSamples out;
  if (ref.example_count <= cfg.ngram_sample_size) {
    if (cfg.ngram_repeats > 1)
      log::warn("reference " + ref.name + " has " + std::to_string(ref.example_count) +
                " documents, not more than the sample size; using it whole once");
    out.dists.push_back(build_distribution(load_all(ref), scheme, tok, cfg.workers));
    out.seeds.push_back(0);
    return out;
  }
  for (std::size_t r = 0; r < cfg.ngram_repeats; ++r) {
    const std::uint64_t seed = counter_hash(cfg.seed, stream("ngram-sample"), r);
    const auto docs = sample(ref, cfg.ngram_sample_size, seed);
    out.dists.push_back(build_distribution(docs, scheme, tok, cfg.workers));
    out.seeds.push_back(seed);
  }
  return out;
}

std::vector<Report> measure_ngram(const RunContext& ctx, Metric metric, const Tokenizer& tok) {
  const auto& cfg = ctx.config;
  const auto scheme = metric == Metric::unigram_kl ? NgramScheme::unigram_explicit
                                                   : NgramScheme::bigram_hashed;
  std::vector<TokenDistribution> task_dists(ctx.tasks.size());
  detail::parallel_for(cfg.workers, ctx.tasks.size(), [&](std::size_t i) {
    task_dists[i] = build_distribution(load_all(ctx.tasks[i].handle), scheme, tok, 1);
  });
  std::vector<Report> reports;
  for (const auto& ref : ctx.references) {
    const auto samples = sample_reference(ctx, ref, scheme, tok);
    for (std::size_t i = 0; i < ctx.tasks.size(); ++i) {
      Report rep;
      rep.task = ctx.tasks[i].name;
      rep.corpus = ref.name;
      rep.metric = metric;
      for (const auto& d : samples.dists)
        rep.values.push_back(kl_divergence(task_dists[i], d, cfg.kl_epsilon));
      rep.seeds = samples.seeds;
      rep.params = "direction=KL(task||reference);scheme=" + std::string(to_string(scheme)) +
                   ";epsilon=" + detail::fmt(cfg.kl_epsilon) +
                   ";sample_size=" + std::to_string(std::min(cfg.ngram_sample_size, ref.example_count)) +
                   ";tokenizer=" + tok.id();
      reports.push_back(std::move(rep));
    }
  }
  return reports;
}

struct TaskEmbeddings {
  EmbeddingSet set;
  std::vector<std::size_t> query_rows;  // rows used as scan queries
};

TaskEmbeddings load_task_embeddings(const RunContext& ctx, const TaskEntry& task) {
  TaskEmbeddings out;
  out.set = read_embedding_file(task.embeddings);
  std::set<std::string> ids;
  for_each_document(task.handle, [&](std::size_t, const Document& d) { ids.insert(d.id); });
  for (const auto& id : out.set.ids)
    if (!ids.count(id))
      throw ValidationError(task.embeddings.string() + ": embedding id \"" + id +
                            "\" is not an example of task " + task.name);
  const std::size_t rows = out.set.ids.size();
  const std::size_t n = ctx.config.query_sample;
  if (n == 0 || n >= rows) {
    out.query_rows.resize(rows);
    std::iota(out.query_rows.begin(), out.query_rows.end(), std::size_t{0});
  } else {
    out.query_rows = sample_indices(rows, n, counter_hash(ctx.config.seed, stream("query-sample"),
                                                          fnv1a64(task.name)));
  }
  return out;
}

std::vector<Report> measure_embeddings(const RunContext& ctx, bool want_max, bool want_mean,
                                       bool want_mauve) {
  const auto& cfg = ctx.config;
  std::vector<TaskEmbeddings> task_emb;
  for (const auto& t : ctx.tasks) task_emb.push_back(load_task_embeddings(ctx, t));

  std::vector<Report> reports;
  for (std::size_t r = 0; r < ctx.references.size(); ++r) {
    const auto& ref = ctx.references[r];
    const auto& emb_file = cfg.references[r].embeddings;
    if (want_max || want_mean) {
      const auto manifest = build_shards(emb_file, cfg.shard_size, ctx.dir / "index" / safe_name(ref.name));
      ScanOptions opts;
      opts.k = cfg.scan_k;
      opts.workers = cfg.workers;
      for (std::size_t i = 0; i < ctx.tasks.size(); ++i) {
        const auto& te = task_emb[i];
        Eigen::MatrixXd queries(static_cast<Eigen::Index>(te.query_rows.size()), te.set.vectors.cols());
        std::vector<std::string> ids;
        for (std::size_t q = 0; q < te.query_rows.size(); ++q) {
          queries.row(static_cast<Eigen::Index>(q)) =
              te.set.vectors.row(static_cast<Eigen::Index>(te.query_rows[q])).cast<double>();
          ids.push_back(te.set.ids[te.query_rows[q]]);
        }
        const auto results = scan(queries, ids, manifest, opts);
        const auto agg = aggregate(results);
        const std::string params = "k=" + std::to_string(cfg.scan_k) + ";queries=" +
                                   std::to_string(results.size()) + ";index=" +
                                   std::to_string(manifest.total_count);
        if (want_max) {
          Report rep{ctx.tasks[i].name, ref.name, Metric::max_cosine, {}, -1, {agg.mean_max_sim}, {0}, params, {}};
          for (const auto& nr : results) rep.examples.push_back({nr.query_id, nr.max_sim, nr.argmax_id});
          reports.push_back(std::move(rep));
        }
        if (want_mean) {
          Report rep{ctx.tasks[i].name, ref.name, Metric::mean_top1000_cosine, {}, -1, {agg.mean_mean_top_k}, {0}, params, {}};
          for (const auto& nr : results)
            rep.examples.push_back({nr.query_id, nr.mean_top_k, "k_used=" + std::to_string(nr.k_used)});
          reports.push_back(std::move(rep));
        }
      }
    }
    if (want_mauve) {
      const auto ref_set = read_embedding_file(emb_file);
      const Eigen::MatrixXd ref_vecs = ref_set.vectors.cast<double>();
      // Cells are independent; run them concurrently and write in config order.
      std::vector<Report> cells(ctx.tasks.size());
      detail::parallel_for(cfg.workers, ctx.tasks.size(), [&](std::size_t i) {
        AverageMauveOptions opts;
        opts.sample_size = cfg.mauve_sample_size;
        opts.repeats = cfg.mauve_repeats;
        opts.seed = counter_hash(cfg.seed, stream("mauve"), fnv1a64(ctx.tasks[i].name + "\x1f" + ref.name));
        opts.k = cfg.mauve_clusters;
        opts.c = cfg.mauve_c;
        opts.num_points = cfg.mauve_points;
        opts.workers = 1;
        const auto res = average_mauve(task_emb[i].set.vectors.cast<double>(), ref_vecs, opts);
        Report rep{ctx.tasks[i].name, ref.name, Metric::mauve, {}, -1, res.scores, {}, {}, {}};
        for (std::size_t k = 0; k < res.scores.size(); ++k) rep.seeds.push_back(counter_hash(opts.seed, stream("mauve"), k));
        rep.params = "c=" + detail::fmt(cfg.mauve_c) + ";num_points=" + std::to_string(cfg.mauve_points) +
                     ";clusters=" + std::to_string(cfg.mauve_clusters) +
                     ";sample_size=" + std::to_string(res.sample_size_used) + ";base_seed=" +
                     std::to_string(opts.seed);
        cells[i] = std::move(rep);
      });
      for (auto& c : cells) reports.push_back(std::move(c));
    }
  }
  return reports;
}

std::vector<Report> measure_perplexity(const RunContext& ctx, bool want_input, bool want_target) {
  std::vector<Report> reports;
  for (const auto& t : ctx.tasks) {
    for (const auto& s : ctx.config.scores) {
      if (s.task != t.name) continue;
      const auto scores = read_scores_file(s.file);
      const auto f = perplexity_features(scores.records);
      const std::string corpus = "model:" + scores.model_id + "@" + shots_tag(scores.shots);
      const std::string params = "unit=nats_per_token;tokenizer=" + scores.tokenizer_id;
      auto make = [&](Metric m, const Eigen::VectorXd& v, double mean) {
        Report rep{t.name, corpus, m, scores.model_id, scores.shots, {mean}, {0}, params, {}};
        for (std::size_t i = 0; i < f.example_ids.size(); ++i)
          rep.examples.push_back({f.example_ids[i], v[static_cast<Eigen::Index>(i)], {}});
        return rep;
      };
      if (want_input) reports.push_back(make(Metric::input_ppl, f.input_logloss, f.mean_input));
      if (want_target) reports.push_back(make(Metric::target_ppl, f.target_logloss, f.mean_target));
    }
  }
  return reports;
}

std::string report_stem(const Report& r) {
  return safe_name(r.task) + "__" + safe_name(r.corpus) + "__" + std::string(to_string(r.metric));
}

void stage_measure(const RunContext& ctx) {
  const auto& cfg = ctx.config;
  auto wants = [&](Metric m) {
    return std::find(cfg.metrics.begin(), cfg.metrics.end(), m) != cfg.metrics.end();
  };
  std::vector<Report> reports;
  auto append = [&](std::vector<Report> more) {
    for (auto& r : more) reports.push_back(std::move(r));
  };
  if (wants(Metric::unigram_kl) || wants(Metric::bigram_kl)) {
    const auto tok = measure_tokenizer(ctx);
    if (wants(Metric::unigram_kl)) append(measure_ngram(ctx, Metric::unigram_kl, *tok));
    if (wants(Metric::bigram_kl)) append(measure_ngram(ctx, Metric::bigram_kl, *tok));
  }
  if (wants(Metric::max_cosine) || wants(Metric::mean_top1000_cosine) || wants(Metric::mauve))
    append(measure_embeddings(ctx, wants(Metric::max_cosine), wants(Metric::mean_top1000_cosine),
                              wants(Metric::mauve)));
  if (wants(Metric::input_ppl) || wants(Metric::target_ppl))
    append(measure_perplexity(ctx, wants(Metric::input_ppl), wants(Metric::target_ppl)));

  // Report writing is serial and follows metric, corpus, task order.
  std::stable_sort(reports.begin(), reports.end(), [&](const Report& a, const Report& b) {
    auto pos = [&](Metric m) { return std::find(cfg.metrics.begin(), cfg.metrics.end(), m) - cfg.metrics.begin(); };
    return pos(a.metric) < pos(b.metric);
  });

  fs::create_directories(ctx.dir / "reports" / "aggregate");
  fs::create_directories(ctx.dir / "reports" / "example");
  json index = json::array();
  std::set<std::string> seen;
  for (const auto& r : reports) {
    const std::string stem = report_stem(r);
    if (!seen.insert(stem).second) throw ValidationError("duplicate report " + stem);
    const double mean = mean_of(r.values);
    const double sd = std_of(r.values);
    std::string agg = stamp(ctx.hash);
    agg += "task,corpus,metric,scale,mean,std,repeats,values,seeds,params\n";
    agg += detail::csv_field(r.task) + "," + detail::csv_field(r.corpus) + "," +
           std::string(to_string(r.metric)) + ",aggregate," + detail::fmt(mean) + "," +
           detail::fmt(sd) + "," + std::to_string(r.values.size()) + "," + join_values(r.values) +
           "," + join_seeds(r.seeds) + "," + detail::csv_field(r.params) + "\n";
    const std::string agg_rel = "reports/aggregate/" + stem + ".csv";
    write_file_atomic(ctx.dir / agg_rel, agg);

    json entry = {{"task", r.task},         {"corpus", r.corpus},
                  {"metric", to_string(r.metric)}, {"sign", std::string(1, similarity_sign(r.metric))},
                  {"mean", mean},           {"std", sd},
                  {"aggregate", agg_rel},   {"example", nullptr}};
    if (!r.model.empty()) {
      entry["model"] = r.model;
      entry["shots"] = r.shots;
    }
    if (!r.examples.empty()) {
      std::string ex = stamp(ctx.hash);
      ex += "task,corpus,metric,scale,example_id,value,detail\n";
      for (const auto& e : r.examples)
        ex += detail::csv_field(r.task) + "," + detail::csv_field(r.corpus) + "," +
              std::string(to_string(r.metric)) + ",example," + detail::csv_field(e.id) + "," +
              detail::fmt(e.value) + "," + detail::csv_field(e.detail) + "\n";
      const std::string ex_rel = "reports/example/" + stem + ".csv";
      write_file_atomic(ctx.dir / ex_rel, ex);
      entry["example"] = ex_rel;
    }
    index.push_back(std::move(entry));
  }
  json state = {{"config_hash", ctx.hash}, {"seed", cfg.seed}, {"reports", index}};
  write_file_atomic(ctx.dir / "measure.json", state.dump(2) + "\n");
}

// ---- evaluate ------------------------------------------------------------

void stage_evaluate(const RunContext& ctx) {
  const auto& cfg = ctx.config;
  fs::create_directories(ctx.dir / "results");
  json index = json::array();
  std::set<std::string> seen;
  for (const auto& t : ctx.tasks) {
    std::optional<std::vector<TaskExample>> examples;
    for (const auto& s : cfg.scores) {
      if (s.task != t.name) continue;
      if (!examples) examples = read_task_examples(t.handle.path);
      const auto scores = read_scores_file(s.file);
      const auto result = evaluate(t.name, *examples, scores, cfg.scoring);
      const std::string stem = safe_name(t.name) + "__" + safe_name(result.model_id) + "__" +
                               shots_tag(result.shots);
      if (!seen.insert(stem).second)
        throw ValidationError("two score files for task " + t.name + ", model " + result.model_id +
                              ", " + shots_tag(result.shots));
      json j = json::parse(task_result_json(result));
      j["config_hash"] = ctx.hash;
      j["scoring"] = cfg.scoring == TargetScoring::total ? "total" : "length_normalized";
      j["prompt_template"] = scores.prompt_template;
      const std::string json_rel = "results/" + stem + ".json";
      const std::string csv_rel = "results/" + stem + ".csv";
      write_file_atomic(ctx.dir / json_rel, j.dump(2) + "\n");
      write_file_atomic(ctx.dir / csv_rel, stamp(ctx.hash) + task_result_csv(result));
      index.push_back({{"task", t.name},
                       {"model", result.model_id},
                       {"shots", result.shots},
                       {"accuracy", result.accuracy},
                       {"baseline", result.baseline},
                       {"normalized_score", result.normalized_score},
                       {"json", json_rel},
                       {"csv", csv_rel}});
    }
  }
  json state = {{"config_hash", ctx.hash}, {"results", index}};
  write_file_atomic(ctx.dir / "evaluate.json", state.dump(2) + "\n");
}

// ---- correlate -----------------------------------------------------------

std::string series_label(const json& report) {
  const std::string metric = report.at("metric").get<std::string>();
  if (report.contains("model")) return metric;
  return metric + ":" + report.at("corpus").get<std::string>();
}

void stage_correlate(const RunContext& ctx) {
  const auto& cfg = ctx.config;
  const json measured = read_json(ctx.dir / "measure.json");
  const json evaluated = read_json(ctx.dir / "evaluate.json");
  for (const json* j : {&measured, &evaluated})
    if (j->at("config_hash") != ctx.hash)
      throw ValidationError("upstream artifacts were produced by a different config; rerun measure and evaluate");

  const double nan = std::numeric_limits<double>::quiet_NaN();
  std::map<std::string, double> blank;
  for (const auto& t : ctx.tasks) blank[t.name] = nan;

  std::vector<MetricSeries> metrics;
  std::map<std::tuple<std::string, std::string, int>, std::size_t> metric_pos;
  for (const auto& r : measured.at("reports")) {
    const std::string model = r.value("model", std::string());
    const int shots = r.value("shots", -1);
    const auto key = std::make_tuple(series_label(r), model, shots);
    auto [it, inserted] = metric_pos.emplace(key, metrics.size());
    if (inserted) {
      MetricSeries s;
      s.metric = std::get<0>(key);
      s.sign = r.at("sign").get<std::string>()[0];
      s.model = model;
      s.shots = shots;
      s.values = blank;
      metrics.push_back(std::move(s));
    }
    metrics[it->second].values[r.at("task").get<std::string>()] = r.at("mean").get<double>();
  }

  std::vector<PerformanceSeries> performance;
  std::map<std::pair<std::string, int>, std::size_t> perf_pos;
  for (const auto& r : evaluated.at("results")) {
    const auto key = std::make_pair(r.at("model").get<std::string>(), r.at("shots").get<int>());
    auto [it, inserted] = perf_pos.emplace(key, performance.size());
    if (inserted) performance.push_back({key.first, key.second, blank});
    performance[it->second].values[r.at("task").get<std::string>()] = r.at("normalized_score").get<double>();
  }

  if (metrics.empty() || performance.empty() || ctx.tasks.size() < 3) {
    log::warn("correlate: need at least one metric, one evaluated model and three tasks; no table written");
    return;
  }
  TableOptions opts;
  opts.method = cfg.method;
  opts.alpha = cfg.alpha;
  opts.permutation = cfg.permutation;
  opts.iterations = cfg.permutation_iterations;
  opts.seed = counter_hash(cfg.seed, stream("permutation"), 0);
  opts.workers = cfg.workers;
  opts.family_size = cfg.family_size;
  const auto table = build_table(metrics, performance, opts);

  fs::create_directories(ctx.dir / "tables");
  write_file_atomic(ctx.dir / "tables" / "correlation.csv", stamp(ctx.hash) + table_csv(table));
  write_file_atomic(ctx.dir / "tables" / "metric_cross.csv", stamp(ctx.hash) + cross_table_csv(table));
  write_file_atomic(ctx.dir / "tables" / "correlation.txt", stamp(ctx.hash) + table_text(table));
}

// ---- manifest ------------------------------------------------------------

void write_manifest(const RunContext& ctx) {
  const auto& cfg = ctx.config;
  const auto& p = cfg.prompt;
  const std::string prompt_text = "example_format=" + p.example_format + "\nanswer_format=" +
                                  p.answer_format + "\nseparator=" + p.separator;
  json tasks = json::array();
  for (const auto& t : ctx.tasks)
    tasks.push_back({{"name", t.name},
                     {"examples", t.handle.example_count},
                     {"baseline", t.handle.num_choices_baseline},
                     {"sha256", t.handle.content_sha256}});
  json refs = json::array();
  for (const auto& r : ctx.references)
    refs.push_back({{"name", r.name}, {"documents", r.example_count}, {"sha256", r.content_sha256}});
  json manifest = {
      {"config_hash", ctx.hash},
      {"name", cfg.name},
      {"seed", cfg.seed},
      {"seeds",
       {{"ngram_sample", counter_hash(cfg.seed, stream("ngram-sample"), 0)},
        {"permutation", counter_hash(cfg.seed, stream("permutation"), 0)}}},
      {"config", json::parse(cfg.canonical_json)},
      {"prompt_template",
       {{"example_format", p.example_format},
        {"answer_format", p.answer_format},
        {"separator", p.separator},
        {"sha256", sha256_hex(prompt_text)}}},
      {"tasks", tasks},
      {"references", refs},
  };
  write_file_atomic(ctx.dir / "manifest.json", manifest.dump(2) + "\n");
}

// ---- figures -------------------------------------------------------------

std::map<std::string, double> read_example_values(const fs::path& path) {
  if (!fs::exists(path)) throw ValidationError("missing upstream artifact: " + path.string());
  const auto rows = detail::parse_csv(read_file(path));
  std::map<std::string, double> out;
  for (std::size_t i = 1; i < rows.size(); ++i) {
    if (rows[i].size() < 6) throw ValidationError(path.string() + ": malformed row");
    out[rows[i][4]] = std::stod(rows[i][5]);
  }
  return out;
}

TaskResult read_result(const fs::path& run_dir, const json& entry) {
  const fs::path path = run_dir / entry.at("csv").get<std::string>();
  if (!fs::exists(path)) throw ValidationError("missing upstream artifact: " + path.string());
  TaskResult r;
  r.task = entry.at("task").get<std::string>();
  r.model_id = entry.at("model").get<std::string>();
  r.shots = entry.at("shots").get<int>();
  const auto rows = detail::parse_csv(read_file(path));
  for (std::size_t i = 1; i < rows.size(); ++i) {
    if (rows[i].size() != 3) throw ValidationError(path.string() + ": malformed row");
    r.per_example.push_back({rows[i][0], std::stoul(rows[i][1]), rows[i][2] == "1"});
  }
  return r;
}

std::string summary_row(const std::string& group, const FiveNumberSummary& s) {
  std::string row = group + "," + std::to_string(s.count);
  if (s.count == 0) return row + ",,,,,\n";
  for (double v : {s.min, s.q1, s.median, s.q3, s.max}) row += "," + detail::fmt(v);
  return row + "\n";
}

}  // namespace

// ---- public API ----------------------------------------------------------

std::string_view to_string(Metric metric) {
  for (const auto& [m, name] : kMetricNames)
    if (m == metric) return name;
  return "unknown";
}

Metric parse_metric(std::string_view text) {
  for (const auto& [m, name] : kMetricNames)
    if (name == text) return m;
  throw ValidationError("unknown metric \"" + std::string(text) + "\"");
}

char similarity_sign(Metric metric) {
  switch (metric) {
    case Metric::max_cosine:
    case Metric::mean_top1000_cosine:
    case Metric::mauve:
      return '+';
    default:
      return '-';
  }
}

bool is_embedding_metric(Metric metric) {
  return metric == Metric::max_cosine || metric == Metric::mean_top1000_cosine || metric == Metric::mauve;
}

bool is_perplexity_metric(Metric metric) {
  return metric == Metric::input_ppl || metric == Metric::target_ppl;
}

std::string_view to_string(Stage stage) {
  for (const auto& [s, name] : kStageNames)
    if (s == stage) return name;
  return "unknown";
}

RunConfig load_config(const fs::path& path) {
  if (!fs::exists(path)) throw ValidationError("config not found: " + path.string());
  return parse_config(read_file(path), fs::absolute(path).parent_path());
}

RunConfig parse_config(std::string_view json_text, const fs::path& base_dir) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::exception& e) {
    throw ValidationError(std::string("config: ") + e.what());
  }
  check_keys(j, "config",
             {"name", "seed", "alpha", "workers", "metrics", "references", "tasks", "titration",
              "scores", "tokenizer", "ngram", "embedding", "mauve", "scoring", "prompt", "correlation"});
  RunConfig c;
  c.name = get_or<std::string>(j, "name", c.name, "config");
  c.seed = get_or<std::uint64_t>(j, "seed", c.seed, "config");
  c.alpha = get_or<double>(j, "alpha", c.alpha, "config");
  c.workers = get_or<unsigned>(j, "workers", c.workers, "config");
  if (c.workers == 0) c.workers = std::max(1u, std::thread::hardware_concurrency());

  for (const auto& m : j.value("metrics", json::array())) {
    if (!m.is_string()) throw ValidationError("config.metrics: expected strings");
    const Metric metric = parse_metric(m.get<std::string>());
    if (std::find(c.metrics.begin(), c.metrics.end(), metric) != c.metrics.end())
      throw ValidationError("config.metrics: duplicate " + m.get<std::string>());
    c.metrics.push_back(metric);
  }
  for (const auto& r : j.value("references", json::array())) {
    check_keys(r, "references[]", {"name", "documents", "embeddings"});
    c.references.push_back({require_string(r, "name", "references[]"),
                            resolve(base_dir, require_string(r, "documents", "references[]")),
                            resolve(base_dir, r.value("embeddings", std::string()))});
  }
  for (const auto& t : j.value("tasks", json::array())) {
    check_keys(t, "tasks[]", {"name", "file", "embeddings"});
    c.tasks.push_back({require_string(t, "name", "tasks[]"),
                       resolve(base_dir, require_string(t, "file", "tasks[]")),
                       resolve(base_dir, t.value("embeddings", std::string()))});
  }
  for (const auto& t : j.value("titration", json::array())) {
    const char* where = "titration[]";
    check_keys(t, where,
               {"series", "language", "source", "translated", "fractions", "boundary_unit",
                "translated_targets", "translated_instruction"});
    TitrationConfig tc;
    tc.language = require_string(t, "language", where);
    tc.series = get_or<std::string>(t, "series", tc.language, where);
    tc.source = resolve(base_dir, require_string(t, "source", where));
    tc.translated = resolve(base_dir, require_string(t, "translated", where));
    tc.spec.fractions = get_or<std::vector<double>>(t, "fractions", tc.spec.fractions, where);
    tc.spec.boundary_unit =
        parse_boundary_unit(get_or<std::string>(t, "boundary_unit", "whitespace_token", where));
    tc.translated_targets = get_or<bool>(t, "translated_targets", false, where);
    tc.translated_instruction = get_or<bool>(t, "translated_instruction", false, where);
    c.titrations.push_back(std::move(tc));
  }
  for (const auto& s : j.value("scores", json::array())) {
    check_keys(s, "scores[]", {"task", "file"});
    c.scores.push_back({require_string(s, "task", "scores[]"),
                        resolve(base_dir, require_string(s, "file", "scores[]"))});
  }
  if (j.contains("tokenizer")) {
    const auto& t = j.at("tokenizer");
    check_keys(t, "tokenizer", {"kind", "vocab"});
    c.tokenizer = parse_tokenizer_kind(get_or<std::string>(t, "kind", "vocab", "tokenizer"));
    c.vocab = resolve(base_dir, t.value("vocab", std::string()));
  }
  if (j.contains("ngram")) {
    const auto& n = j.at("ngram");
    check_keys(n, "ngram", {"sample_size", "repeats", "epsilon"});
    c.ngram_sample_size = get_size(n, "sample_size", c.ngram_sample_size, "ngram");
    c.ngram_repeats = get_size(n, "repeats", c.ngram_repeats, "ngram");
    c.kl_epsilon = get_or<double>(n, "epsilon", c.kl_epsilon, "ngram");
  }
  if (j.contains("embedding")) {
    const auto& e = j.at("embedding");
    check_keys(e, "embedding", {"k", "shard_size", "query_sample"});
    c.scan_k = get_size(e, "k", c.scan_k, "embedding");
    c.shard_size = get_size(e, "shard_size", c.shard_size, "embedding");
    c.query_sample = get_size(e, "query_sample", c.query_sample, "embedding");
  }
  if (j.contains("mauve")) {
    const auto& m = j.at("mauve");
    check_keys(m, "mauve", {"sample_size", "repeats", "clusters", "c", "num_points"});
    c.mauve_sample_size = get_size(m, "sample_size", c.mauve_sample_size, "mauve");
    c.mauve_repeats = get_size(m, "repeats", c.mauve_repeats, "mauve");
    c.mauve_clusters = get_size(m, "clusters", c.mauve_clusters, "mauve");
    c.mauve_c = get_or<double>(m, "c", c.mauve_c, "mauve");
    c.mauve_points = get_size(m, "num_points", c.mauve_points, "mauve");
  }
  if (j.contains("scoring")) {
    const auto& s = j.at("scoring");
    check_keys(s, "scoring", {"length_normalized"});
    c.scoring = get_or<bool>(s, "length_normalized", false, "scoring") ? TargetScoring::length_normalized
                                                                       : TargetScoring::total;
  }
  if (j.contains("prompt")) {
    const auto& p = j.at("prompt");
    check_keys(p, "prompt", {"example_format", "answer_format", "separator"});
    c.prompt.example_format = get_or<std::string>(p, "example_format", c.prompt.example_format, "prompt");
    c.prompt.answer_format = get_or<std::string>(p, "answer_format", c.prompt.answer_format, "prompt");
    c.prompt.separator = get_or<std::string>(p, "separator", c.prompt.separator, "prompt");
  }
  if (j.contains("correlation")) {
    const auto& k = j.at("correlation");
    check_keys(k, "correlation", {"method", "permutation", "iterations", "family_size"});
    c.method = parse_correlation_method(get_or<std::string>(k, "method", "spearman", "correlation"));
    c.permutation = get_or<bool>(k, "permutation", false, "correlation");
    c.permutation_iterations = get_size(k, "iterations", c.permutation_iterations, "correlation");
    c.family_size = get_size(k, "family_size", c.family_size, "correlation");
  }
  // Worker count does not change any output, so it stays out of the hash.
  j.erase("workers");
  c.canonical_json = j.dump();
  return c;
}

void validate(const RunConfig& c) {
  auto fail = [](const std::string& msg) { throw ValidationError("config: " + msg); };
  auto need_file = [&](const fs::path& p, const std::string& what) {
    if (p.empty()) fail(what + ": no path given");
    if (!fs::is_regular_file(p)) fail(what + ": file not found: " + p.string());
  };
  if (c.metrics.empty()) fail("at least one metric is required");
  if (c.tasks.empty() && c.titrations.empty()) fail("at least one task is required");
  if (!(c.alpha > 0.0 && c.alpha < 1.0)) fail("alpha must be in (0, 1)");
  if (c.ngram_sample_size == 0 || c.ngram_repeats == 0) fail("ngram sample_size and repeats must be positive");
  if (!(c.kl_epsilon > 0.0)) fail("ngram epsilon must be positive");
  if (c.scan_k == 0 || c.shard_size == 0) fail("embedding k and shard_size must be positive");
  if (c.mauve_sample_size == 0 || c.mauve_repeats == 0) fail("mauve sample_size and repeats must be positive");
  if (!(c.mauve_c > 0.0) || c.mauve_points < 3) fail("mauve c must be positive and num_points >= 3");
  if (c.mauve_clusters == 1) fail("mauve clusters must be 0 (default) or at least 2");
  if (c.permutation && c.permutation_iterations < 100) fail("correlation iterations must be at least 100");

  std::set<std::string> task_names;
  auto add_task = [&](const std::string& name) {
    if (!task_names.insert(name).second) fail("duplicate task name " + name);
  };
  for (const auto& t : c.tasks) {
    add_task(t.name);
    need_file(t.file, "task " + t.name);
    if (!t.embeddings.empty()) need_file(t.embeddings, "task " + t.name + " embeddings");
  }
  for (const auto& t : c.titrations) {
    t.spec.validate();
    need_file(t.source, "titration " + t.series + " source");
    need_file(t.translated, "titration " + t.series + " translated");
    for (const auto& n : titration_task_names(t)) add_task(n);
  }
  std::set<std::string> ref_names;
  for (const auto& r : c.references) {
    if (!ref_names.insert(r.name).second) fail("duplicate reference name " + r.name);
    need_file(r.documents, "reference " + r.name);
    if (!r.embeddings.empty()) need_file(r.embeddings, "reference " + r.name + " embeddings");
  }
  for (const auto& s : c.scores) {
    if (!task_names.count(s.task)) fail("scores refer to unknown task " + s.task);
    need_file(s.file, "scores for " + s.task);
  }
  if (!c.vocab.empty()) need_file(c.vocab, "tokenizer vocab");

  for (Metric m : c.metrics) {
    const std::string name(to_string(m));
    if (is_perplexity_metric(m)) {
      for (const auto& t : task_names) {
        const bool has = std::any_of(c.scores.begin(), c.scores.end(),
                                     [&](const ScoresSpec& s) { return s.task == t; });
        if (!has) fail("metric " + name + " needs a scores file for task " + t);
      }
      continue;
    }
    if (c.references.empty()) fail("metric " + name + " needs at least one reference corpus");
    if (m == Metric::unigram_kl && c.tokenizer == TokenizerKind::whitespace_hash)
      fail("unigram_kl needs a bounded vocabulary; use the vocab or bytes tokenizer");
    if (is_embedding_metric(m)) {
      if (!c.titrations.empty()) fail("metric " + name + " needs embeddings, which titration datasets do not have");
      for (const auto& t : c.tasks)
        if (t.embeddings.empty()) fail("metric " + name + " needs embeddings for task " + t.name);
      for (const auto& r : c.references)
        if (r.embeddings.empty()) fail("metric " + name + " needs embeddings for reference " + r.name);
    }
  }
}

std::string config_hash(const RunConfig& c) {
  std::string text = c.canonical_json + "\n";
  auto add = [&](const std::string& label, const fs::path& p) {
    if (!p.empty()) text += label + "\t" + sha256_file_hex(p) + "\n";
  };
  for (const auto& r : c.references) {
    add("reference:" + r.name, r.documents);
    add("reference-embeddings:" + r.name, r.embeddings);
  }
  for (const auto& t : c.tasks) {
    add("task:" + t.name, t.file);
    add("task-embeddings:" + t.name, t.embeddings);
  }
  for (const auto& t : c.titrations) {
    add("titration-source:" + t.series, t.source);
    add("titration-translated:" + t.series, t.translated);
  }
  for (const auto& s : c.scores) add("scores:" + s.task, s.file);
  add("vocab", c.vocab);
  return sha256_hex(text);
}

void run(const RunConfig& config, const fs::path& run_dir, const std::vector<Stage>& stages) {
  validate(config);
  fs::create_directories(run_dir);
  fs::remove(run_dir / "FAILED");
  RunContext ctx{config, run_dir, config_hash(config), {}, {}};

  std::string_view current = "prepare";
  auto fail_marker = [&](const std::string& msg) {
    write_file_atomic(run_dir / "FAILED", "stage: " + std::string(current) + "\nerror: " + msg + "\n");
  };
  try {
    prepare_datasets(ctx);
    write_manifest(ctx);
    for (Stage s : stages) {
      current = to_string(s);
      log::info("stage " + std::string(current));
      switch (s) {
        case Stage::measure: stage_measure(ctx); break;
        case Stage::evaluate: stage_evaluate(ctx); break;
        case Stage::correlate: stage_correlate(ctx); break;
        case Stage::figures: emit_figures(run_dir); break;
      }
    }
  } catch (const ValidationError& e) {
    fail_marker(e.what());
    throw ValidationError("stage " + std::string(current) + ": " + e.what());
  } catch (const std::exception& e) {
    fail_marker(e.what());
    throw ComputeError("stage " + std::string(current) + ": " + e.what());
  }
}

std::vector<fs::path> emit_figures(const fs::path& run_dir) {
  const json measured = read_json(run_dir / "measure.json");
  const json evaluated = read_json(run_dir / "evaluate.json");
  const std::string hash = measured.at("config_hash").get<std::string>();
  if (evaluated.at("config_hash") != hash)
    throw ValidationError("measure.json and evaluate.json come from different configs");
  const fs::path out_dir = run_dir / "figures";
  fs::create_directories(out_dir);
  std::vector<fs::path> written;
  auto emit = [&](const std::string& name, const std::string& body) {
    write_file_atomic(out_dir / name, stamp(hash) + body);
    written.push_back(out_dir / name);
  };

  // A perplexity series only pairs with the model and shot count it came from.
  auto matches = [](const json& report, const json& result) {
    if (!report.contains("model")) return true;
    return report.at("model") == result.at("model") && report.at("shots") == result.at("shots");
  };

  // Scatter series: one point per task for every (metric, corpus) x (model, shots).
  std::map<std::string, std::vector<const json*>> groups;
  std::vector<std::string> group_order;
  for (const auto& r : measured.at("reports")) {
    const std::string key = r.at("metric").get<std::string>() + "__" + safe_name(r.at("corpus").get<std::string>());
    if (!groups.count(key)) group_order.push_back(key);
    groups[key].push_back(&r);
  }
  std::set<std::pair<std::string, int>> perf_keys;
  for (const auto& e : evaluated.at("results"))
    perf_keys.emplace(e.at("model").get<std::string>(), e.at("shots").get<int>());
  for (const auto& key : group_order) {
    for (const auto& [model, shots] : perf_keys) {
      std::string body = "task,x,x_std,accuracy,normalized_score\n";
      std::size_t points = 0;
      for (const json* r : groups[key]) {
        for (const auto& e : evaluated.at("results")) {
          if (e.at("task") != r->at("task") || e.at("model") != model || e.at("shots") != shots) continue;
          if (!matches(*r, e)) continue;
          body += detail::csv_field(r->at("task").get<std::string>()) + "," +
                  detail::fmt(r->at("mean").get<double>()) + "," + detail::fmt(r->at("std").get<double>()) +
                  "," + detail::fmt(e.at("accuracy").get<double>()) + "," +
                  detail::fmt(e.at("normalized_score").get<double>()) + "\n";
          ++points;
        }
      }
      if (points > 0) emit("scatter__" + key + "__" + safe_name(model) + "__" + shots_tag(shots) + ".csv", body);
    }
  }

  // Example-level metrics: correct vs incorrect summaries and quartile accuracy.
  for (const auto& r : measured.at("reports")) {
    if (r.at("example").is_null()) continue;
    const auto similarity = read_example_values(run_dir / r.at("example").get<std::string>());
    for (const auto& e : evaluated.at("results")) {
      if (e.at("task") != r.at("task") || !matches(r, e)) continue;
      TaskResult full = read_result(run_dir, e);
      // Scans may cover only a sample of examples; split over those.
      TaskResult covered = full;
      covered.per_example.clear();
      for (const auto& ex : full.per_example)
        if (similarity.count(ex.example_id)) covered.per_example.push_back(ex);
      if (covered.per_example.empty()) continue;
      const auto split = split_correct(covered, similarity);
      const std::string stem = safe_name(r.at("task").get<std::string>()) + "__" +
                               r.at("metric").get<std::string>() + "__" +
                               safe_name(r.at("corpus").get<std::string>()) + "__" +
                               safe_name(e.at("model").get<std::string>()) + "__" +
                               shots_tag(e.at("shots").get<int>());
      std::string summary = "group,count,min,q1,median,q3,max\n";
      summary += summary_row("correct", five_number_summary(split.correct));
      summary += summary_row("incorrect", five_number_summary(split.incorrect));
      emit("correctness__" + stem + ".csv", summary);

      std::string bars = "quartile,count,correct,accuracy,min_similarity,max_similarity\n";
      for (std::size_t q = 0; q < split.quartiles.size(); ++q) {
        const auto& b = split.quartiles[q];
        bars += "Q" + std::to_string(q + 1) + "," + std::to_string(b.count) + "," + std::to_string(b.correct);
        if (b.count == 0)
          bars += ",,,\n";
        else
          bars += "," + detail::fmt(b.accuracy) + "," + detail::fmt(b.min_similarity) + "," +
                  detail::fmt(b.max_similarity) + "\n";
      }
      emit("quartiles__" + stem + ".csv", bars);
    }
  }

  json index = json::array();
  for (const auto& p : written) index.push_back(p.filename().string());
  write_file_atomic(out_dir / "index.json",
                    json({{"config_hash", hash}, {"files", index}}).dump(2) + "\n");
  return written;
}

}  // namespace datasim
