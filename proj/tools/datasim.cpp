// Command-line front end. Exit codes: 0 success, 1 invalid input, 2 compute failure.

#include <cstdio>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "datasim/corpus_store.hpp"
#include "datasim/embedding_index.hpp"
#include "datasim/error.hpp"
#include "datasim/log.hpp"
#include "datasim/pipeline.hpp"
#include "datasim/titration.hpp"

namespace fs = std::filesystem;
using namespace datasim;

namespace {

struct RunArgs {
  std::string config;
  std::string out;
  unsigned workers = 0;  // 0 keeps the config value
};

void add_run_args(CLI::App* cmd, RunArgs& args) {
  cmd->add_option("-c,--config", args.config, "run config (JSON)")->required();
  cmd->add_option("-o,--out", args.out, "run directory")->required();
  cmd->add_option("-w,--workers", args.workers, "worker threads (does not change results)");
}

void run_stages(const RunArgs& args, const std::vector<Stage>& stages) {
  auto config = load_config(args.config);
  if (args.workers > 0) config.workers = args.workers;
  run(config, args.out, stages);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Similarity between task datasets and reference corpora, and its correlation with model performance"};
  app.require_subcommand(1);
  app.fallthrough();
  bool verbose = false;
  app.add_flag("-v,--verbose", verbose, "log progress to stderr");

  std::string ingest_file, ingest_kind = "task", ingest_store, ingest_name;
  auto* ingest_cmd = app.add_subcommand("ingest", "validate a dataset file and optionally copy it into a store");
  ingest_cmd->add_option("file", ingest_file, "line-delimited JSON records")->required();
  ingest_cmd->add_option("-k,--kind", ingest_kind, "reference or task")->check(CLI::IsMember({"reference", "task"}));
  ingest_cmd->add_option("-s,--store", ingest_store, "store directory");
  ingest_cmd->add_option("-n,--name", ingest_name, "dataset name (default: file stem)");

  std::string index_input, index_out;
  std::size_t shard_size = 100000;
  auto* index_cmd = app.add_subcommand("embed-index", "shard an embedding file for exact scans");
  index_cmd->add_option("-e,--embeddings", index_input, "embedding file")->required();
  index_cmd->add_option("-o,--out", index_out, "index directory")->required();
  index_cmd->add_option("--shard-size", shard_size, "rows per shard")->check(CLI::PositiveNumber);

  RunArgs measure_args, evaluate_args, correlate_args, all_args;
  auto* measure_cmd = app.add_subcommand("measure", "compute similarity reports");
  add_run_args(measure_cmd, measure_args);
  auto* evaluate_cmd = app.add_subcommand("evaluate", "score task results from model score files");
  add_run_args(evaluate_cmd, evaluate_args);
  auto* correlate_cmd = app.add_subcommand("correlate", "correlate similarity with performance");
  add_run_args(correlate_cmd, correlate_args);
  auto* all_cmd = app.add_subcommand("run-all", "measure, evaluate, correlate and emit figure data");
  add_run_args(all_cmd, all_args);

  std::string figures_dir;
  auto* figures_cmd = app.add_subcommand("figures", "emit plot-ready data from a completed run");
  figures_cmd->add_option("-r,--run", figures_dir, "run directory")->required();

  std::string t_source, t_translated, t_language, t_series, t_out, t_unit = "whitespace_token";
  std::vector<double> t_fractions{0.0, 0.25, 0.5, 0.75, 1.0};
  bool t_targets = false, t_instruction = false;
  auto* titrate_cmd = app.add_subcommand("titrate", "build a partial-translation series");
  titrate_cmd->add_option("--source", t_source, "source-language task file")->required();
  titrate_cmd->add_option("--translated", t_translated, "translated task file")->required();
  titrate_cmd->add_option("-l,--language", t_language, "language tag")->required();
  titrate_cmd->add_option("-o,--out", t_out, "output directory")->required();
  titrate_cmd->add_option("--series", t_series, "series name (default: language)");
  titrate_cmd->add_option("--fractions", t_fractions, "translated fractions")->delimiter(',');
  titrate_cmd->add_option("--unit", t_unit, "boundary unit")->check(CLI::IsMember({"character", "whitespace_token"}));
  titrate_cmd->add_flag("--translated-targets", t_targets, "take answer options from the translation");
  titrate_cmd->add_flag("--translated-instruction", t_instruction, "take the instruction from the translation");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  if (verbose) {
    log::set_sink([](log::Level level, std::string_view msg) {
      std::cerr << (level == log::Level::warning ? "warning: " : "") << msg << "\n";
    });
  }

  try {
    if (*ingest_cmd) {
      const auto kind = ingest_kind == "reference" ? DatasetKind::reference_corpus : DatasetKind::task_dataset;
      DatasetHandle h;
      if (ingest_store.empty()) {
        h = ingest(ingest_file, kind);
      } else {
        CorpusStore store(ingest_store);
        h = store.ingest(ingest_file, kind,
                         ingest_name.empty() ? std::nullopt : std::optional<std::string>(ingest_name));
      }
      std::cout << h.name << "\t" << to_string(h.kind) << "\t" << h.example_count << " records\t"
                << h.content_sha256 << "\n";
    } else if (*index_cmd) {
      const auto m = build_shards(index_input, shard_size, index_out);
      std::cout << m.total_count << " vectors of dim " << m.dim << " in " << m.shards.size()
                << " shards\n";
    } else if (*measure_cmd) {
      run_stages(measure_args, {Stage::measure});
    } else if (*evaluate_cmd) {
      run_stages(evaluate_args, {Stage::evaluate});
    } else if (*correlate_cmd) {
      run_stages(correlate_args, {Stage::correlate});
    } else if (*all_cmd) {
      run_stages(all_args, {Stage::measure, Stage::evaluate, Stage::correlate, Stage::figures});
    } else if (*figures_cmd) {
      for (const auto& p : emit_figures(figures_dir)) std::cout << p.string() << "\n";
    } else if (*titrate_cmd) {
      TitrationSpec spec;
      spec.fractions = t_fractions;
      spec.boundary_unit = parse_boundary_unit(t_unit);
      TitrationOptions opts;
      opts.language = t_language;
      opts.series_name = t_series.empty() ? t_language : t_series;
      opts.translated_targets = t_targets;
      opts.translated_instruction = t_instruction;
      const auto series = build_titration_series(t_source, t_translated, spec, opts, t_out);
      for (const auto& d : series.datasets) std::cout << d.path.string() << "\n";
      std::cout << series.manifest_path.string() << "\n";
    }
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
