#pragma once

#include <Eigen/Core>

#include <array>
#include <cstddef>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "datasim/corpus_store.hpp"

namespace datasim {

// Per-example model outputs as written by the model probe.
struct ExampleScores {
  std::string example_id;
  std::vector<double> target_logprobs;  // summed token log-probabilities, one per target
  double input_logloss_per_token = 0.0;           // nats/token
  double correct_target_logloss_per_token = 0.0;  // nats/token
  std::vector<std::size_t> target_token_counts;   // optional; needed for length normalization
};

// Line-delimited scores file: a header line
//   {"schema_version":1,"kind":"scores","model_id":..,"tokenizer_id":..,"shots":N,
//    "prompt_template":..}
// followed by one record per example
//   {"example_id":..,"target_logprobs":[..],"input_logloss_per_token":..,
//    "correct_target_logloss_per_token":..,"target_token_counts":[..]}
struct ScoresFile {
  std::string model_id;
  std::string tokenizer_id;
  int shots = 0;
  std::string prompt_template;
  std::vector<ExampleScores> records;
};

ScoresFile read_scores_file(const std::filesystem::path& path);
void write_scores_file(const std::filesystem::path& path, const ScoresFile& scores);

enum class TargetScoring { total, length_normalized };

// argmax over targets; ties go to the lowest index and are logged.
std::size_t predict(const ExampleScores& scores, TargetScoring scoring = TargetScoring::total);

// 100 * (accuracy - baseline) / (1 - baseline).
double normalized_score(double accuracy, double baseline);

struct ExampleOutcome {
  std::string example_id;
  std::size_t predicted_index = 0;
  bool correct = false;
};

struct TaskResult {
  std::string task;
  std::string model_id;
  int shots = 0;
  std::vector<ExampleOutcome> per_example;
  double accuracy = 0.0;
  double baseline = 0.0;
  double normalized_score = 0.0;
};

// Joins examples with their scores by id. Every example needs a score
// record with a matching target count.
TaskResult evaluate(const std::string& task, std::span<const TaskExample> examples,
                    const ScoresFile& scores, TargetScoring scoring = TargetScoring::total);

std::string task_result_json(const TaskResult& result);
std::string task_result_csv(const TaskResult& result);

// Log-perplexity features in nats/token. Both scales are kept.
struct PerplexityFeatures {
  std::vector<std::string> example_ids;
  Eigen::VectorXd input_logloss;
  Eigen::VectorXd target_logloss;
  double mean_input = 0.0;
  double mean_target = 0.0;
};

PerplexityFeatures perplexity_features(std::span<const ExampleScores> scores);

struct QuartileBin {
  std::size_t count = 0;
  std::size_t correct = 0;
  double accuracy = 0.0;  // NaN when count == 0
  double min_similarity = 0.0;
  double max_similarity = 0.0;
};

struct CorrectnessSplit {
  std::vector<double> correct;
  std::vector<double> incorrect;
  // Examples sorted by similarity (ties by id) and cut into four bins whose
  // sizes differ by at most one.
  std::array<QuartileBin, 4> quartiles;
};

CorrectnessSplit split_correct(const TaskResult& result,
                               const std::map<std::string, double>& similarity);

// Fixed few-shot prompt assembly: the first `shots` demos rendered with their
// correct target, then the query example, joined by `separator`.
struct PromptTemplate {
  std::string example_format = "{instruction}{input}";
  std::string answer_format = " {target}";
  std::string separator = "\n";
};

std::string build_prompt(const PromptTemplate& tmpl, std::span<const TaskExample> demos,
                         const TaskExample& example, std::size_t shots);

}  // namespace datasim
