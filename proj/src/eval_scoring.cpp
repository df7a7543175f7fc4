#include "datasim/eval_scoring.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <unordered_map>

#include "datasim/digest.hpp"
#include "datasim/error.hpp"
#include "datasim/log.hpp"
#include "json.hpp"
#include "text_format.hpp"

namespace datasim {

using nlohmann::json;

namespace {


void check_loss(double v, const std::string& what, const std::string& id) {
  if (!std::isfinite(v) || v < 0.0)
    throw ValidationError(what + " for example \"" + id + "\" must be finite and non-negative");
}

std::string replace_all(std::string s, std::string_view from, std::string_view to) {
  for (std::size_t pos = s.find(from); pos != std::string::npos; pos = s.find(from, pos + to.size()))
    s.replace(pos, from.size(), to);
  return s;
}

}  // namespace

ScoresFile read_scores_file(const std::filesystem::path& path) {
  ScoresFile file;
  bool header_seen = false;
  std::unordered_map<std::string, std::size_t> seen;
  for_each_record_line(path, [&](std::size_t line, std::string_view text) {
    const auto where = path.string() + ":" + std::to_string(line) + ": ";
    json j;
    try {
      j = json::parse(text);
    } catch (const json::parse_error& e) {
      throw ValidationError(where + "malformed JSON: " + e.what());
    }
    try {
      if (!j.contains("example_id")) {
        if (line != 1) throw ValidationError("record without \"example_id\"");
        header_seen = true;
        file.model_id = j.value("model_id", "");
        file.tokenizer_id = j.value("tokenizer_id", "");
        file.shots = j.value("shots", 0);
        file.prompt_template = j.value("prompt_template", "");
        return;
      }
      ExampleScores s;
      s.example_id = j.at("example_id").get<std::string>();
      s.target_logprobs = j.at("target_logprobs").get<std::vector<double>>();
      s.input_logloss_per_token = j.at("input_logloss_per_token").get<double>();
      s.correct_target_logloss_per_token = j.at("correct_target_logloss_per_token").get<double>();
      if (j.contains("target_token_counts"))
        s.target_token_counts = j["target_token_counts"].get<std::vector<std::size_t>>();
      if (s.target_logprobs.empty()) throw ValidationError("empty target_logprobs");
      if (!s.target_token_counts.empty() &&
          s.target_token_counts.size() != s.target_logprobs.size())
        throw ValidationError("target_token_counts length differs from target_logprobs");
      check_loss(s.input_logloss_per_token, "input_logloss_per_token", s.example_id);
      check_loss(s.correct_target_logloss_per_token, "correct_target_logloss_per_token",
                 s.example_id);
      if (!seen.emplace(s.example_id, line).second)
        throw ValidationError("duplicate example_id \"" + s.example_id + "\"");
      file.records.push_back(std::move(s));
    } catch (const json::exception& e) {
      throw ValidationError(where + e.what());
    } catch (const ValidationError& e) {
      throw ValidationError(where + e.what());
    }
  });
  if (!header_seen) log::warn(path.string() + ": scores file has no header line");
  return file;
}

void write_scores_file(const std::filesystem::path& path, const ScoresFile& scores) {
  std::string out = json{{"schema_version", 1},
                         {"kind", "scores"},
                         {"model_id", scores.model_id},
                         {"tokenizer_id", scores.tokenizer_id},
                         {"shots", scores.shots},
                         {"prompt_template", scores.prompt_template}}
                        .dump() +
                    "\n";
  for (const auto& s : scores.records) {
    json j = {{"example_id", s.example_id},
              {"target_logprobs", s.target_logprobs},
              {"input_logloss_per_token", s.input_logloss_per_token},
              {"correct_target_logloss_per_token", s.correct_target_logloss_per_token}};
    if (!s.target_token_counts.empty()) j["target_token_counts"] = s.target_token_counts;
    out += j.dump() + "\n";
  }
  write_file_atomic(path, out);
}

std::size_t predict(const ExampleScores& scores, TargetScoring scoring) {
  const auto& lp = scores.target_logprobs;
  if (lp.empty()) throw ValidationError("predict: no targets for \"" + scores.example_id + "\"");
  if (scoring == TargetScoring::length_normalized &&
      scores.target_token_counts.size() != lp.size())
    throw ValidationError("predict: length normalization needs target_token_counts for \"" +
                          scores.example_id + "\"");
  std::size_t best = 0;
  double best_value = -std::numeric_limits<double>::infinity();
  bool tie = false;
  for (std::size_t i = 0; i < lp.size(); ++i) {
    if (std::isnan(lp[i]))
      throw ValidationError("predict: NaN log-probability for \"" + scores.example_id + "\"");
    double v = lp[i];
    if (scoring == TargetScoring::length_normalized)
      v /= static_cast<double>(std::max<std::size_t>(1, scores.target_token_counts[i]));
    if (i == 0 || v > best_value) {
      best = i;
      best_value = v;
      tie = false;
    } else if (v == best_value) {
      tie = true;
    }
  }
  if (tie)
    log::warn("predict: tied maximum log-probability for \"" + scores.example_id +
              "\"; choosing index " + std::to_string(best));
  return best;
}

double normalized_score(double accuracy, double baseline) {
  if (!(accuracy >= 0.0 && accuracy <= 1.0))
    throw ValidationError("normalized_score: accuracy must be in [0, 1]");
  if (!(baseline > 0.0 && baseline < 1.0))
    throw ValidationError("normalized_score: baseline must be in (0, 1)");
  return 100.0 * (accuracy - baseline) / (1.0 - baseline);
}

TaskResult evaluate(const std::string& task, std::span<const TaskExample> examples,
                    const ScoresFile& scores, TargetScoring scoring) {
  if (examples.empty()) throw ValidationError("evaluate: task \"" + task + "\" has no examples");
  std::unordered_map<std::string, const ExampleScores*> by_id;
  for (const auto& s : scores.records) by_id.emplace(s.example_id, &s);

  TaskResult result;
  result.task = task;
  result.model_id = scores.model_id;
  result.shots = scores.shots;
  std::size_t correct = 0;
  for (const auto& ex : examples) {
    auto it = by_id.find(ex.id);
    if (it == by_id.end())
      throw ValidationError("evaluate: no scores for example \"" + ex.id + "\" of task \"" + task +
                            "\"");
    if (it->second->target_logprobs.size() != ex.targets.size())
      throw ValidationError("evaluate: example \"" + ex.id + "\" has " +
                            std::to_string(ex.targets.size()) + " targets but " +
                            std::to_string(it->second->target_logprobs.size()) + " scores");
    const auto predicted = predict(*it->second, scoring);
    const bool ok = predicted == ex.correct_index;
    correct += ok;
    result.per_example.push_back({ex.id, predicted, ok});
  }
  result.accuracy = static_cast<double>(correct) / static_cast<double>(examples.size());
  result.baseline = random_baseline(examples);
  result.normalized_score = normalized_score(result.accuracy, result.baseline);
  return result;
}

std::string task_result_json(const TaskResult& r) {
  json j = {{"task", r.task},
            {"model_id", r.model_id},
            {"shots", r.shots},
            {"examples", r.per_example.size()},
            {"accuracy", r.accuracy},
            {"baseline", r.baseline},
            {"normalized_score", r.normalized_score}};
  return j.dump(2) + "\n";
}

std::string task_result_csv(const TaskResult& r) {
  std::string out = "example_id,predicted_index,correct\n";
  for (const auto& e : r.per_example)
    out += detail::csv_field(e.example_id) + "," + std::to_string(e.predicted_index) + "," + (e.correct ? "1" : "0") +
           "\n";
  return out;
}

PerplexityFeatures perplexity_features(std::span<const ExampleScores> scores) {
  if (scores.empty()) throw ValidationError("perplexity_features: no examples");
  PerplexityFeatures f;
  const auto n = static_cast<Eigen::Index>(scores.size());
  f.input_logloss.resize(n);
  f.target_logloss.resize(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& s = scores[static_cast<std::size_t>(i)];
    check_loss(s.input_logloss_per_token, "input_logloss_per_token", s.example_id);
    check_loss(s.correct_target_logloss_per_token, "correct_target_logloss_per_token",
               s.example_id);
    f.example_ids.push_back(s.example_id);
    f.input_logloss[i] = s.input_logloss_per_token;
    f.target_logloss[i] = s.correct_target_logloss_per_token;
  }
  f.mean_input = f.input_logloss.mean();
  f.mean_target = f.target_logloss.mean();
  return f;
}

CorrectnessSplit split_correct(const TaskResult& result,
                               const std::map<std::string, double>& similarity) {
  struct Row {
    std::string id;
    double sim;
    bool correct;
  };
  std::vector<Row> rows;
  CorrectnessSplit split;
  for (const auto& e : result.per_example) {
    auto it = similarity.find(e.example_id);
    if (it == similarity.end())
      throw ValidationError("split_correct: no similarity for example \"" + e.example_id + "\"");
    (e.correct ? split.correct : split.incorrect).push_back(it->second);
    rows.push_back({e.example_id, it->second, e.correct});
  }
  std::sort(rows.begin(), rows.end(), [](const Row& a, const Row& b) {
    return a.sim != b.sim ? a.sim < b.sim : a.id < b.id;
  });
  const std::size_t n = rows.size();
  std::size_t start = 0;
  for (std::size_t b = 0; b < 4; ++b) {
    auto& bin = split.quartiles[b];
    bin.count = n / 4 + (b < n % 4 ? 1 : 0);
    for (std::size_t i = start; i < start + bin.count; ++i) bin.correct += rows[i].correct;
    if (bin.count > 0) {
      bin.accuracy = static_cast<double>(bin.correct) / static_cast<double>(bin.count);
      bin.min_similarity = rows[start].sim;
      bin.max_similarity = rows[start + bin.count - 1].sim;
    } else {
      bin.accuracy = std::numeric_limits<double>::quiet_NaN();
    }
    start += bin.count;
  }
  return split;
}

std::string build_prompt(const PromptTemplate& tmpl, std::span<const TaskExample> demos,
                         const TaskExample& example, std::size_t shots) {
  if (shots > demos.size())
    throw ValidationError("build_prompt: " + std::to_string(shots) + " shots requested but only " +
                          std::to_string(demos.size()) + " demos available");
  auto render = [&](const TaskExample& ex) {
    std::string s = replace_all(tmpl.example_format, "{instruction}", ex.instruction.value_or(""));
    return replace_all(std::move(s), "{input}", ex.input);
  };
  std::string prompt;
  for (std::size_t i = 0; i < shots; ++i) {
    prompt += render(demos[i]);
    prompt += replace_all(tmpl.answer_format, "{target}", demos[i].targets[demos[i].correct_index]);
    prompt += tmpl.separator;
  }
  prompt += render(example);
  return prompt;
}

}  // namespace datasim
