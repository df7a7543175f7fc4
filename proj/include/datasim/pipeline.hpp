#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "datasim/error.hpp"
#include "datasim/eval_scoring.hpp"
#include "datasim/stats_harness.hpp"
#include "datasim/titration.hpp"
#include "datasim/tokenizer.hpp"

namespace datasim {

enum class Metric {
  unigram_kl,
  bigram_kl,
  max_cosine,
  mean_top1000_cosine,
  mauve,
  input_ppl,
  target_ppl,
};

std::string_view to_string(Metric metric);
Metric parse_metric(std::string_view text);
// '+' when larger values mean "more similar", '-' otherwise.
char similarity_sign(Metric metric);
bool is_embedding_metric(Metric metric);
bool is_perplexity_metric(Metric metric);

struct ReferenceSpec {
  std::string name;
  std::filesystem::path documents;
  std::filesystem::path embeddings;  // optional
};

struct TaskSpec {
  std::string name;
  std::filesystem::path file;
  std::filesystem::path embeddings;  // optional
};

struct TitrationConfig {
  std::string series;
  std::string language;
  std::filesystem::path source;
  std::filesystem::path translated;
  TitrationSpec spec;
  bool translated_targets = false;
  bool translated_instruction = false;
};

struct ScoresSpec {
  std::string task;
  std::filesystem::path file;
};

// Declarative run description. Relative paths resolve against the directory
// of the config file.
struct RunConfig {
  std::string name = "run";
  std::uint64_t seed = 0;
  double alpha = 0.05;
  unsigned workers = 1;

  std::vector<Metric> metrics;
  std::vector<ReferenceSpec> references;
  std::vector<TaskSpec> tasks;
  std::vector<TitrationConfig> titrations;
  std::vector<ScoresSpec> scores;

  TokenizerKind tokenizer = TokenizerKind::vocab;
  std::filesystem::path vocab;  // empty: built from reference + task text

  std::size_t ngram_sample_size = 100000;
  std::size_t ngram_repeats = 5;
  double kl_epsilon = 1e-9;

  std::size_t scan_k = 1000;
  std::size_t shard_size = 100000;
  std::size_t query_sample = 0;  // 0: every task example

  std::size_t mauve_sample_size = 10000;
  std::size_t mauve_repeats = 5;
  std::size_t mauve_clusters = 0;  // 0: default_cluster_count
  double mauve_c = 5.0;
  std::size_t mauve_points = 25;

  TargetScoring scoring = TargetScoring::total;
  PromptTemplate prompt;

  CorrelationMethod method = CorrelationMethod::spearman;
  bool permutation = false;
  std::size_t permutation_iterations = 10000;
  std::size_t family_size = 0;

  std::string canonical_json;  // normalized config text, input to the hash
};

RunConfig load_config(const std::filesystem::path& path);
RunConfig parse_config(std::string_view json_text, const std::filesystem::path& base_dir);

// Checks metric/task presence, file existence and metric prerequisites
// without computing anything. Throws ValidationError.
void validate(const RunConfig& config);

// sha256 over the canonical config and the content hashes of every input file.
std::string config_hash(const RunConfig& config);

enum class Stage { measure, evaluate, correlate, figures };

std::string_view to_string(Stage stage);

// Runs the requested stages into run_dir. Each artifact carries the config
// hash. On failure a FAILED marker naming the stage is written, partial
// outputs are kept, and the error is rethrown with the stage prefixed.
void run(const RunConfig& config, const std::filesystem::path& run_dir,
         const std::vector<Stage>& stages = {Stage::measure, Stage::evaluate, Stage::correlate,
                                             Stage::figures});

// Plot-ready series from a completed run: scatter points with error bars,
// correct/incorrect five-number summaries and similarity-quartile accuracy.
std::vector<std::filesystem::path> emit_figures(const std::filesystem::path& run_dir);

}  // namespace datasim
